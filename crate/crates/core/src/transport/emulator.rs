//! Deterministic one-directional link emulation.
//!
//! Each submitted datagram consumes randomness from a ChaCha8 stream seeded
//! with `LinkSpec::seed`, in this order:
//!
//! 1. one `f64` in `[0, 1)`; the datagram is lost when it is below `loss_fraction`;
//! 2. if kept and `jitter_ms > 0`, one `f64` in `[-jitter_ms, jitter_ms]`.
//!
//! A kept datagram is serialized behind earlier ones at `bandwidth_cap_mbps`
//! (0 means unlimited), tail-dropped when `queue_packets` datagrams are
//! already waiting, and delivered after the propagation delay. Delivery is
//! FIFO: jitter never reorders.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub one_way_delay_ms: f64,
    pub jitter_ms: f64,
    pub loss_fraction: f64,
    pub bandwidth_cap_mbps: f64,
    pub queue_packets: usize,
    pub seed: u64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            one_way_delay_ms: 0.0,
            jitter_ms: 0.0,
            loss_fraction: 0.0,
            bandwidth_cap_mbps: 0.0,
            queue_packets: 2048,
            seed: 0,
        }
    }
}

impl LinkSpec {
    /// A symmetric wide-area path: half of `rtt_ms` each way.
    pub fn wan(rtt_ms: f64, cap_mbps: f64, loss: f64, seed: u64) -> Self {
        LinkSpec {
            one_way_delay_ms: rtt_ms / 2.0,
            loss_fraction: loss,
            bandwidth_cap_mbps: cap_mbps,
            seed,
            ..LinkSpec::default()
        }
    }

    /// The same link with a different seed, for the opposite direction.
    pub fn reversed(&self) -> Self {
        LinkSpec { seed: self.seed ^ 0x9e37_79b9_7f4a_7c15, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fate {
    Lost,
    QueueFull,
    Deliver { at: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub submitted: u64,
    pub lost: u64,
    pub queue_drops: u64,
    pub delivered: u64,
}

#[derive(Debug)]
pub struct LinkEmulator {
    spec: LinkSpec,
    rng: ChaCha8Rng,
    link_free_at: f64,
    last_delivery: u64,
    departures: VecDeque<f64>,
    in_flight: VecDeque<(u64, Vec<u8>)>,
    stats: LinkStats,
}

impl LinkEmulator {
    pub fn new(spec: LinkSpec) -> Self {
        LinkEmulator {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            link_free_at: 0.0,
            last_delivery: 0,
            departures: VecDeque::new(),
            in_flight: VecDeque::new(),
            stats: LinkStats::default(),
        }
    }

    pub fn spec(&self) -> &LinkSpec {
        &self.spec
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    /// Decides the fate of `datagram` submitted at `now` (microseconds) and
    /// schedules it if it survives.
    pub fn emulate(&mut self, datagram: Vec<u8>, now: u64) -> Fate {
        self.stats.submitted += 1;
        if self.rng.gen::<f64>() < self.spec.loss_fraction {
            self.stats.lost += 1;
            return Fate::Lost;
        }
        let jitter_us = if self.spec.jitter_ms > 0.0 {
            self.rng.gen_range(-self.spec.jitter_ms..=self.spec.jitter_ms) * 1000.0
        } else {
            0.0
        };
        let now_f = now as f64;
        while self.departures.front().is_some_and(|&t| t <= now_f) {
            self.departures.pop_front();
        }
        if self.spec.bandwidth_cap_mbps > 0.0 && self.departures.len() >= self.spec.queue_packets {
            self.stats.queue_drops += 1;
            return Fate::QueueFull;
        }
        let tx_us = if self.spec.bandwidth_cap_mbps > 0.0 {
            datagram.len() as f64 * 8.0 / self.spec.bandwidth_cap_mbps
        } else {
            0.0
        };
        let departed = self.link_free_at.max(now_f) + tx_us;
        self.link_free_at = departed;
        if tx_us > 0.0 {
            self.departures.push_back(departed);
        }
        let arrival = (departed + self.spec.one_way_delay_ms * 1000.0 + jitter_us).round().max(now_f) as u64;
        let at = arrival.max(self.last_delivery);
        self.last_delivery = at;
        self.in_flight.push_back((at, datagram));
        Fate::Deliver { at }
    }

    pub fn next_delivery(&self) -> Option<u64> {
        self.in_flight.front().map(|&(at, _)| at)
    }

    /// Removes the next datagram due at or before `now`.
    pub fn pop_due(&mut self, now: u64) -> Option<Vec<u8>> {
        if self.next_delivery()? <= now {
            self.stats.delivered += 1;
            self.in_flight.pop_front().map(|(_, d)| d)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_delay() {
        let mut link = LinkEmulator::new(LinkSpec { one_way_delay_ms: 52.0, ..LinkSpec::default() });
        assert_eq!(link.emulate(vec![0; 100], 1_000), Fate::Deliver { at: 53_000 });
        assert_eq!(link.pop_due(52_999), None);
        assert_eq!(link.pop_due(53_000), Some(vec![0; 100]));
    }

    #[test]
    fn total_loss() {
        let mut link = LinkEmulator::new(LinkSpec { loss_fraction: 1.0, ..LinkSpec::default() });
        for t in 0..100 {
            assert_eq!(link.emulate(vec![1], t), Fate::Lost);
        }
        assert_eq!(link.next_delivery(), None);
    }

    #[test]
    fn serialization_under_cap() {
        // 1250 bytes at 10 Mbit/s is 1 ms on the wire.
        let mut link = LinkEmulator::new(LinkSpec { bandwidth_cap_mbps: 10.0, one_way_delay_ms: 5.0, ..LinkSpec::default() });
        assert_eq!(link.emulate(vec![0; 1250], 0), Fate::Deliver { at: 6_000 });
        assert_eq!(link.emulate(vec![0; 1250], 0), Fate::Deliver { at: 7_000 });
        assert_eq!(link.emulate(vec![0; 1250], 10_000), Fate::Deliver { at: 16_000 });
    }

    #[test]
    fn tail_drop_when_queue_full() {
        let spec = LinkSpec { bandwidth_cap_mbps: 1.0, queue_packets: 4, ..LinkSpec::default() };
        let mut link = LinkEmulator::new(spec);
        let fates: Vec<_> = (0..6).map(|_| link.emulate(vec![0; 1000], 0)).collect();
        assert_eq!(fates.iter().filter(|f| **f == Fate::QueueFull).count(), 2);
    }

    #[test]
    fn jitter_keeps_fifo_order() {
        let spec = LinkSpec { one_way_delay_ms: 10.0, jitter_ms: 5.0, seed: 3, ..LinkSpec::default() };
        let mut link = LinkEmulator::new(spec);
        let mut last = 0;
        for t in 0..1000u64 {
            if let Fate::Deliver { at } = link.emulate(vec![0; 10], t * 100) {
                assert!(at >= last);
                assert!(at >= t * 100 + 5_000 && at <= t * 100 + 15_000 || at == last);
                last = at;
            }
        }
    }
}
