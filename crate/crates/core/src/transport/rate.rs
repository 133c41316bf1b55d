//! Sender-side rate control.
//!
//! Data packets are paced by an inter-packet interval. Every rate interval
//! (10 ms) without loss the rate grows additively, bounded by the capacity the
//! receiver reports; a loss report multiplies the interval by 1.125 and
//! freezes growth for one interval.
//!
//! A connection starts in a slow-start phase that doubles the rate once per
//! RTT from 1 Mbit/s. Slow start ends at the configured cap or at the first
//! congestive loss report. Loss reports only count as congestive when the
//! recent loss fraction exceeds `loss_tolerance` and the lost packet was sent
//! after the previous decrease.

use std::collections::BTreeSet;

use super::packet::MAX_DATAGRAM;

pub const SYN_INTERVAL_US: u64 = 10_000;
pub const DECREASE_FACTOR: f64 = 1.125;
pub const ADDITIVE_INCREASE_PPS: f64 = 10.0;
pub const INITIAL_RATE_MBPS: f64 = 1.0;
/// Number of packets over which the loss fraction is averaged.
const LOSS_WINDOW: f64 = 1000.0;

/// Inter-packet interval in microseconds for a rate in Mbit/s of full datagrams.
pub fn interval_for_mbps(mbps: f64) -> f64 {
    (MAX_DATAGRAM * 8) as f64 / mbps
}

/// Inclusive range of packet numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PnRange {
    pub lo: u64,
    pub hi: u64,
}

impl PnRange {
    pub fn new(lo: u64, hi: u64) -> Self {
        debug_assert!(lo <= hi);
        PnRange { lo, hi }
    }

    pub fn single(pn: u64) -> Self {
        PnRange { lo: pn, hi: pn }
    }

    pub fn len(&self) -> u64 {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SlowStart,
    Avoidance,
}

#[derive(Debug, Clone)]
pub struct CongestionState {
    pkt_interval_us: f64,
    min_interval_us: f64,
    loss_list: BTreeSet<u64>,
    recv_rate_pps: f64,
    est_capacity_pps: f64,
    frozen: bool,
    loss_in_interval: bool,
    phase: Phase,
    loss_tolerance: f64,
    loss_fraction: f64,
    last_dec_pn: Option<u64>,
}

impl CongestionState {
    /// Starts at 1 Mbit/s (or the cap, if lower) in slow start.
    pub fn new(cap_mbps: f64, loss_tolerance: f64) -> Self {
        let min_interval_us = interval_for_mbps(cap_mbps);
        CongestionState {
            pkt_interval_us: interval_for_mbps(INITIAL_RATE_MBPS).max(min_interval_us),
            min_interval_us,
            loss_list: BTreeSet::new(),
            recv_rate_pps: 0.0,
            est_capacity_pps: 0.0,
            frozen: false,
            loss_in_interval: false,
            phase: Phase::SlowStart,
            loss_tolerance,
            loss_fraction: 0.0,
            last_dec_pn: None,
        }
    }

    /// Congestion-avoidance state with an explicit interval, no cap.
    pub fn with_interval(pkt_interval_us: f64) -> Self {
        let mut cc = CongestionState::new(f64::INFINITY, 0.0);
        cc.min_interval_us = 0.0;
        cc.pkt_interval_us = pkt_interval_us;
        cc.phase = Phase::Avoidance;
        cc
    }

    pub fn pkt_interval_us(&self) -> f64 {
        self.pkt_interval_us
    }

    pub fn min_interval_us(&self) -> f64 {
        self.min_interval_us
    }

    pub fn rate_pps(&self) -> f64 {
        1e6 / self.pkt_interval_us
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn recv_rate_pps(&self) -> f64 {
        self.recv_rate_pps
    }

    pub fn est_capacity_pps(&self) -> f64 {
        self.est_capacity_pps
    }

    pub fn loss_fraction(&self) -> f64 {
        self.loss_fraction
    }

    pub fn loss_list(&self) -> &BTreeSet<u64> {
        &self.loss_list
    }

    pub fn set_receiver_estimates(&mut self, recv_rate_pps: f64, capacity_pps: f64) {
        if recv_rate_pps > 0.0 {
            self.recv_rate_pps = recv_rate_pps;
        }
        if capacity_pps > 0.0 {
            self.est_capacity_pps = capacity_pps;
        }
    }

    /// Merges ranges into the loss list, returning how many entries were new.
    pub fn merge_losses(&mut self, ranges: &[PnRange]) -> u64 {
        let mut added = 0;
        for r in ranges {
            for pn in r.lo..=r.hi {
                if self.loss_list.insert(pn) {
                    added += 1;
                }
            }
        }
        if added > 0 {
            self.loss_in_interval = true;
        }
        added
    }

    /// Multiplicative decrease: merges `ranges`, multiplies the interval by
    /// 1.125 and freezes additive increase for one rate interval.
    pub fn on_nak(&mut self, ranges: &[PnRange]) {
        self.merge_losses(ranges);
        self.decrease();
    }

    fn decrease(&mut self) {
        self.pkt_interval_us *= DECREASE_FACTOR;
        self.frozen = true;
        self.loss_in_interval = true;
    }

    /// Handles a loss report from the peer. `highest_sent` is the largest
    /// packet number emitted so far. Returns true if the rate was decreased.
    pub fn on_loss_report(&mut self, ranges: &[PnRange], highest_sent: u64) -> bool {
        let added = self.merge_losses(ranges);
        self.loss_fraction += added as f64 / LOSS_WINDOW;
        if self.loss_fraction <= self.loss_tolerance {
            return false;
        }
        let newest = ranges.iter().map(|r| r.hi).max().unwrap_or(0);
        if self.last_dec_pn.is_some_and(|d| newest <= d) {
            return false;
        }
        if self.phase == Phase::SlowStart {
            self.exit_slow_start();
        }
        self.last_dec_pn = Some(highest_sent);
        self.decrease();
        true
    }

    /// Accounts one emitted data packet in the loss-fraction average.
    pub fn on_packet_sent(&mut self) {
        self.loss_fraction *= 1.0 - 1.0 / LOSS_WINDOW;
    }

    /// Additive increase, run once per rate interval.
    pub fn on_rate_interval(&mut self) {
        let had_loss = std::mem::take(&mut self.loss_in_interval);
        if self.frozen {
            self.frozen = false;
            return;
        }
        if had_loss {
            return;
        }
        let current = self.rate_pps();
        let inc = (ADDITIVE_INCREASE_PPS.min(self.est_capacity_pps - current)).max(1.0);
        self.pkt_interval_us = (1e6 / (current + inc)).max(self.min_interval_us);
    }

    /// Slow-start growth for one rate interval: the rate doubles per `rtt_us`.
    pub fn slow_start_interval(&mut self, rtt_us: f64) {
        self.loss_in_interval = false;
        self.frozen = false;
        let factor = 2f64.powf(SYN_INTERVAL_US as f64 / rtt_us.max(SYN_INTERVAL_US as f64));
        self.pkt_interval_us = (self.pkt_interval_us / factor).max(self.min_interval_us);
        if self.pkt_interval_us <= self.min_interval_us {
            self.phase = Phase::Avoidance;
        }
    }

    /// Leaves slow start, adopting the receiver's measured rate when known.
    pub fn exit_slow_start(&mut self) {
        if self.phase != Phase::SlowStart {
            return;
        }
        self.phase = Phase::Avoidance;
        if self.recv_rate_pps > 0.0 {
            self.pkt_interval_us = (1e6 / self.recv_rate_pps).max(self.min_interval_us);
        }
    }

    /// Removes and returns the smallest pending retransmission at or above `floor`.
    pub fn pop_loss(&mut self, floor: u64) -> Option<u64> {
        while let Some(pn) = self.loss_list.pop_first() {
            if pn >= floor {
                return Some(pn);
            }
        }
        None
    }

    /// Drops loss entries below `ack`.
    pub fn acknowledge_below(&mut self, ack: u64) {
        self.loss_list = self.loss_list.split_off(&ack);
    }

    /// Retransmission timeout: every unacknowledged packet becomes lost.
    pub fn on_timeout(&mut self, unacked: PnRange) {
        self.merge_losses(&[unacked]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nak_multiplies_interval() {
        let mut cc = CongestionState::with_interval(1000.0);
        cc.on_nak(&[PnRange::single(3)]);
        assert_relative_eq!(cc.pkt_interval_us(), 1125.0);
        cc.on_nak(&[PnRange::single(5)]);
        assert_relative_eq!(cc.pkt_interval_us(), 1265.625);
        assert_eq!(cc.pkt_interval_us() as u64, 1265);
    }

    #[test]
    fn nak_merges_loss_list() {
        let mut cc = CongestionState::with_interval(1000.0);
        cc.merge_losses(&[PnRange::single(4)]);
        cc.on_nak(&[PnRange::new(6, 7)]);
        assert_eq!(cc.loss_list().iter().copied().collect::<Vec<_>>(), vec![4, 6, 7]);
        cc.on_nak(&[PnRange::new(4, 6)]);
        assert_eq!(cc.loss_list().iter().copied().collect::<Vec<_>>(), vec![4, 5, 6, 7]);
    }

    #[test]
    fn additive_increase_bounds() {
        let mut cc = CongestionState::with_interval(1e6 / 100.0);
        cc.set_receiver_estimates(100.0, 10_000.0);
        cc.on_rate_interval();
        assert_relative_eq!(cc.rate_pps(), 110.0, max_relative = 1e-9);

        let mut cc = CongestionState::with_interval(1e6 / 9995.0);
        cc.set_receiver_estimates(9995.0, 10_000.0);
        cc.on_rate_interval();
        assert_relative_eq!(cc.rate_pps(), 10_000.0, max_relative = 1e-9);

        // At or above capacity the increase floor of one packet applies.
        cc.on_rate_interval();
        assert_relative_eq!(cc.rate_pps(), 10_001.0, max_relative = 1e-9);
    }

    #[test]
    fn frozen_interval_is_unchanged() {
        let mut cc = CongestionState::with_interval(1000.0);
        cc.set_receiver_estimates(1000.0, 10_000.0);
        cc.on_nak(&[PnRange::single(1)]);
        let before = cc.pkt_interval_us();
        cc.on_rate_interval();
        assert_eq!(cc.pkt_interval_us(), before);
        assert!(!cc.is_frozen());
        cc.on_rate_interval();
        assert!(cc.pkt_interval_us() < before);
    }

    #[test]
    fn cap_floor_holds() {
        let mut cc = CongestionState::new(100.0, 0.01);
        assert_relative_eq!(cc.pkt_interval_us(), 11776.0);
        for _ in 0..10_000 {
            cc.slow_start_interval(100_000.0);
        }
        assert_eq!(cc.phase(), Phase::Avoidance);
        cc.set_receiver_estimates(1e9, 1e9);
        for _ in 0..1000 {
            cc.on_rate_interval();
        }
        assert_relative_eq!(cc.pkt_interval_us(), 117.76, max_relative = 1e-9);
    }

    #[test]
    fn slow_start_doubles_per_rtt() {
        let mut cc = CongestionState::new(1000.0, 0.01);
        let start = cc.rate_pps();
        for _ in 0..10 {
            cc.slow_start_interval(100_000.0);
        }
        assert_relative_eq!(cc.rate_pps(), 2.0 * start, max_relative = 1e-9);
    }

    #[test]
    fn isolated_losses_below_tolerance_do_not_decrease() {
        let mut cc = CongestionState::new(100.0, 0.01);
        for i in 0..2000u64 {
            cc.on_packet_sent();
            if i % 1000 == 999 {
                assert!(!cc.on_loss_report(&[PnRange::single(i)], i));
            }
        }
        assert_eq!(cc.phase(), Phase::SlowStart);
    }

    #[test]
    fn burst_loss_decreases_once_per_epoch() {
        let mut cc = CongestionState::with_interval(1000.0);
        cc.loss_tolerance = 0.01;
        for _ in 0..100 {
            cc.on_packet_sent();
        }
        assert!(cc.on_loss_report(&[PnRange::new(50, 70)], 100));
        assert_relative_eq!(cc.pkt_interval_us(), 1125.0);
        // Same epoch: packets sent before the decrease.
        assert!(!cc.on_loss_report(&[PnRange::new(80, 99)], 120));
        assert!(cc.on_loss_report(&[PnRange::new(101, 110)], 130));
    }

    #[test]
    fn pop_loss_returns_minimum_at_or_above_floor() {
        let mut cc = CongestionState::with_interval(1000.0);
        cc.merge_losses(&[PnRange::new(3, 5), PnRange::single(9)]);
        cc.acknowledge_below(4);
        assert_eq!(cc.pop_loss(0), Some(4));
        assert_eq!(cc.pop_loss(6), Some(9));
        assert_eq!(cc.pop_loss(0), None);
    }
}
