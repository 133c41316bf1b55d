//! Connection state machine.
//!
//! `Connection` performs no I/O and reads no clock. A driver feeds it
//! datagrams and timer expirations with the current time in microseconds,
//! and drains outgoing datagrams with `poll_transmit`. The UDP driver and
//! the link emulator run the same code.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use log::{debug, trace};

use super::packet::{
    AckInfo, Body, CipherKind, Control, HandshakeInfo, HandshakeStatus, Packet, MAX_PAYLOAD, PROTOCOL_VERSION,
};
use super::rate::{CongestionState, Phase, PnRange, SYN_INTERVAL_US};
use super::seq::{SeqNo, SeqSpace};
use super::TransportError;
use crate::cipher::{derive_subkeys, Direction, StreamCipher};

const ACK_EVERY_PKTS: u32 = 64;
const MIN_EXP_US: u64 = 300_000;
const KEEPALIVE_US: u64 = 1_000_000;
const INITIAL_RTT_US: f64 = 100_000.0;
const INITIAL_RTT_VAR_US: f64 = 50_000.0;
const MIN_RENAK_US: f64 = 20_000.0;
/// Ranges per NAK packet: the payload holds at most 182 two-word ranges.
const MAX_NAK_RANGES: usize = MAX_PAYLOAD / 8;
/// Idle pacing credit: at most this much lateness is made up with a burst.
const MAX_BURST_US: f64 = 1_000.0;
/// Unanswered retransmission timeouts after which a half-closed peer is presumed done.
const FIN_LINGER_EXPS: u32 = 4;
const RATE_SAMPLES: usize = 16;

#[derive(Debug, Clone)]
pub struct TransportConfig {
    pub version: u16,
    pub cipher: CipherKind,
    /// Pre-shared key; required to request or accept Blowfish.
    pub key: Option<Vec<u8>>,
    pub bandwidth_cap_mbps: f64,
    /// Recent loss fraction above which a loss report triggers a rate decrease.
    pub loss_tolerance: f64,
    /// Reference sender: one packet in flight at a time.
    pub stop_and_wait: bool,
    pub send_buffer_bytes: usize,
    pub recv_buffer_pkts: u32,
    pub connect_attempts: u32,
    pub connect_retry_us: u64,
    pub idle_timeout_us: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            version: PROTOCOL_VERSION,
            cipher: CipherKind::None,
            key: None,
            bandwidth_cap_mbps: 1000.0,
            loss_tolerance: 0.01,
            stop_and_wait: false,
            send_buffer_bytes: 16 << 20,
            recv_buffer_pkts: 8192,
            connect_attempts: 3,
            connect_retry_us: 1_000_000,
            idle_timeout_us: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// Parameters fixed by the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionParams {
    pub version: u16,
    pub cipher: CipherKind,
    pub conn_id: u32,
    pub nonce: [u8; 16],
    pub peer_bandwidth_cap_mbps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum State {
    Connecting { attempts: u32, next_retry: u64 },
    Established,
    Closed,
    Failed(TransportError),
}

/// Outcome of a non-blocking read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readable {
    Data(usize),
    Empty,
    End,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnStats {
    pub data_pkts_sent: u64,
    pub retransmits: u64,
    pub data_pkts_recv: u64,
    pub duplicate_pkts: u64,
    pub naks_sent: u64,
    pub naks_recv: u64,
    pub acks_sent: u64,
    pub rate_decreases: u64,
    pub timeouts: u64,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
}

#[derive(Debug, Clone)]
enum Segment {
    Data(Vec<u8>),
    Fin,
}

#[derive(Debug)]
struct SendSide {
    space: SeqSpace,
    queue: VecDeque<u8>,
    /// Segments `una..next`.
    unacked: VecDeque<Segment>,
    unacked_bytes: usize,
    una: u64,
    next: u64,
    cc: CongestionState,
    next_send_time: f64,
    probe_follow: bool,
    flow_window: u32,
    fin_requested: bool,
    fin_pn: Option<u64>,
    last_ack_id: Option<u32>,
    sent_in_interval: u32,
    exp_count: u32,
}

#[derive(Debug)]
struct RecvSide {
    space: SeqSpace,
    next: u64,
    highest: Option<u64>,
    reorder: BTreeMap<u64, Segment>,
    deliver: VecDeque<u8>,
    missing: BTreeMap<u64, u64>,
    fin_pn: Option<u64>,
    eof: bool,
    pkts_since_ack: u32,
    last_ack_pn: u64,
    last_adv_window: u32,
    ack_id: u32,
    ack_times: VecDeque<(u32, u64)>,
    last_arrival: Option<u64>,
    arrival_gaps: VecDeque<u64>,
    probe_leader: Option<(u64, u64)>,
    probe_gaps: VecDeque<u64>,
}

#[derive(Debug)]
pub struct Connection {
    cfg: TransportConfig,
    role: Role,
    state: State,
    params: SessionParams,
    start: u64,
    local_isn: SeqNo,
    send: SendSide,
    recv: Option<RecvSide>,
    seal: Option<StreamCipher>,
    unseal: Option<StreamCipher>,
    control: VecDeque<Packet>,
    handshake_sent_at: u64,
    next_tick: u64,
    last_send_time: u64,
    last_recv_time: u64,
    last_rsp_time: u64,
    rtt_us: f64,
    rtt_var_us: f64,
    stats: ConnStats,
}

/// Missing packet numbers revealed by the arrival of `arrived` when the
/// highest packet seen so far was `last_received`.
pub fn nak_for_gap(last_received: u64, arrived: u64) -> Vec<PnRange> {
    missing_before(last_received + 1, arrived)
}

fn missing_before(expected: u64, arrived: u64) -> Vec<PnRange> {
    if arrived > expected {
        vec![PnRange::new(expected, arrived - 1)]
    } else {
        Vec::new()
    }
}

fn median(samples: &VecDeque<u64>) -> Option<u64> {
    if samples.is_empty() {
        return None;
    }
    let mut v: Vec<u64> = samples.iter().copied().collect();
    v.sort_unstable();
    Some(v[v.len() / 2])
}

fn push_sample(ring: &mut VecDeque<u64>, sample: u64) {
    if ring.len() == RATE_SAMPLES {
        ring.pop_front();
    }
    ring.push_back(sample);
}

impl Connection {
    /// Starts a client handshake. The first datagram is available from
    /// `poll_transmit` immediately.
    pub fn connect(cfg: TransportConfig, conn_id: u32, nonce: [u8; 16], initial_seq: u32, now: u64) -> Self {
        let params = SessionParams {
            version: cfg.version,
            cipher: cfg.cipher,
            conn_id,
            nonce,
            peer_bandwidth_cap_mbps: 0,
        };
        let next_retry = now + cfg.connect_retry_us;
        let mut conn = Connection::new(cfg, Role::Client, params, SeqNo::new(initial_seq), now);
        conn.state = State::Connecting { attempts: 1, next_retry };
        conn.queue_handshake(HandshakeStatus::Request);
        conn
    }

    /// Answers a handshake request. On rejection the error carries the
    /// datagram to send back.
    pub fn accept(
        cfg: TransportConfig,
        request: &Packet,
        initial_seq: u32,
        now: u64,
    ) -> Result<Self, (TransportError, Option<Vec<u8>>)> {
        let Body::Control(Control::Handshake { status: HandshakeStatus::Request, info }) = &request.body else {
            return Err((TransportError::Protocol("expected handshake request".into()), None));
        };
        let reject = |status, err| {
            let reply = Packet::control(
                0,
                request.conn_id,
                Control::Handshake {
                    status,
                    info: HandshakeInfo {
                        version: cfg.version,
                        cipher: cfg.cipher as u8,
                        initial_seq: 0,
                        bandwidth_cap_mbps: cfg.bandwidth_cap_mbps as u32,
                        nonce: info.nonce,
                    },
                },
            );
            Err((err, Some(reply.encode())))
        };
        if info.version != cfg.version {
            return reject(
                HandshakeStatus::RejectVersion,
                TransportError::HandshakeRejected { local: cfg.version, remote: info.version },
            );
        }
        let cipher = match CipherKind::from_raw(info.cipher) {
            Some(CipherKind::None) => CipherKind::None,
            Some(CipherKind::Blowfish) if cfg.key.is_some() => CipherKind::Blowfish,
            _ => return reject(HandshakeStatus::RejectCipher, TransportError::CipherUnavailable),
        };
        let params = SessionParams {
            version: info.version,
            cipher,
            conn_id: request.conn_id,
            nonce: info.nonce,
            peer_bandwidth_cap_mbps: info.bandwidth_cap_mbps,
        };
        let mut conn = Connection::new(cfg, Role::Server, params, SeqNo::new(initial_seq), now);
        conn.establish(SeqNo::new(info.initial_seq))
            .map_err(|e| (e, None))?;
        conn.queue_handshake(HandshakeStatus::Accept);
        Ok(conn)
    }

    fn new(cfg: TransportConfig, role: Role, params: SessionParams, local_isn: SeqNo, now: u64) -> Self {
        let cc = CongestionState::new(cfg.bandwidth_cap_mbps, cfg.loss_tolerance);
        let flow_window = cfg.recv_buffer_pkts;
        Connection {
            role,
            state: State::Established,
            params,
            start: now,
            local_isn,
            send: SendSide {
                space: SeqSpace::new(local_isn),
                queue: VecDeque::new(),
                unacked: VecDeque::new(),
                unacked_bytes: 0,
                una: 0,
                next: 0,
                cc,
                next_send_time: now as f64,
                probe_follow: false,
                flow_window,
                fin_requested: false,
                fin_pn: None,
                last_ack_id: None,
                sent_in_interval: 0,
                exp_count: 0,
            },
            recv: None,
            seal: None,
            unseal: None,
            control: VecDeque::new(),
            handshake_sent_at: now,
            next_tick: now + SYN_INTERVAL_US,
            last_send_time: now,
            last_recv_time: now,
            last_rsp_time: now,
            rtt_us: INITIAL_RTT_US,
            rtt_var_us: INITIAL_RTT_VAR_US,
            stats: ConnStats::default(),
            cfg,
        }
    }

    fn establish(&mut self, peer_isn: SeqNo) -> Result<(), TransportError> {
        self.recv = Some(RecvSide {
            space: SeqSpace::new(peer_isn),
            next: 0,
            highest: None,
            reorder: BTreeMap::new(),
            deliver: VecDeque::new(),
            missing: BTreeMap::new(),
            fin_pn: None,
            eof: false,
            pkts_since_ack: 0,
            last_ack_pn: 0,
            last_adv_window: self.cfg.recv_buffer_pkts,
            ack_id: 0,
            ack_times: VecDeque::new(),
            last_arrival: None,
            arrival_gaps: VecDeque::new(),
            probe_leader: None,
            probe_gaps: VecDeque::new(),
        });
        if self.params.cipher == CipherKind::Blowfish {
            let key = self.cfg.key.as_deref().ok_or(TransportError::CipherUnavailable)?;
            let block = Arc::new(derive_subkeys(key).map_err(|_| TransportError::CipherUnavailable)?);
            let (out, inb) = match self.role {
                Role::Client => (Direction::ClientToServer, Direction::ServerToClient),
                Role::Server => (Direction::ServerToClient, Direction::ClientToServer),
            };
            self.seal = Some(StreamCipher::new(block.clone(), &self.params.nonce, out));
            self.unseal = Some(StreamCipher::new(block, &self.params.nonce, inb));
        }
        self.state = State::Established;
        Ok(())
    }

    fn queue_handshake(&mut self, status: HandshakeStatus) {
        let info = HandshakeInfo {
            version: self.params.version,
            cipher: self.params.cipher as u8,
            initial_seq: self.local_isn.get(),
            bandwidth_cap_mbps: self.cfg.bandwidth_cap_mbps as u32,
            nonce: self.params.nonce,
        };
        self.queue_control(Control::Handshake { status, info });
    }

    fn queue_control(&mut self, control: Control) {
        self.control.push_back(Packet::control(0, self.params.conn_id, control));
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn conn_id(&self) -> u32 {
        self.params.conn_id
    }

    pub fn params(&self) -> &SessionParams {
        &self.params
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn stats(&self) -> &ConnStats {
        &self.stats
    }

    pub fn congestion(&self) -> &CongestionState {
        &self.send.cc
    }

    pub fn rtt_us(&self) -> f64 {
        self.rtt_us
    }

    pub fn rtt_var_us(&self) -> f64 {
        self.rtt_var_us
    }

    pub fn is_established(&self) -> bool {
        self.state == State::Established
    }

    pub fn is_closed(&self) -> bool {
        self.state == State::Closed
    }

    pub fn error(&self) -> Option<&TransportError> {
        match &self.state {
            State::Failed(e) => Some(e),
            _ => None,
        }
    }

    /// Bytes queued or in flight but not yet acknowledged.
    pub fn pending_bytes(&self) -> usize {
        self.send.queue.len() + self.send.unacked_bytes
    }

    fn send_space(&self) -> usize {
        self.cfg.send_buffer_bytes.saturating_sub(self.pending_bytes())
    }

    pub fn writable(&self) -> bool {
        match self.state {
            State::Established => self.send_space() > 0,
            State::Connecting { .. } => false,
            _ => true,
        }
    }

    pub fn readable(&self) -> bool {
        match &self.recv {
            Some(r) if !r.deliver.is_empty() || r.eof => true,
            _ => matches!(self.state, State::Failed(_) | State::Closed),
        }
    }

    /// Enqueues as much of `data` as the send buffer holds.
    pub fn send(&mut self, data: &[u8]) -> Result<usize, TransportError> {
        match &self.state {
            State::Established if !self.send.fin_requested => {}
            State::Failed(e) => return Err(e.clone()),
            State::Connecting { .. } => return Ok(0),
            _ => return Err(TransportError::SendOnClosed),
        }
        let n = data.len().min(self.send_space());
        self.send.queue.extend(&data[..n]);
        Ok(n)
    }

    /// Marks the end of the outgoing stream.
    pub fn finish(&mut self) {
        self.send.fin_requested = true;
    }

    /// Moves in-order bytes into `buf`.
    pub fn recv(&mut self, buf: &mut [u8]) -> Result<Readable, TransportError> {
        let failed = match &self.state {
            State::Failed(e) => Some(e.clone()),
            _ => None,
        };
        let Some(r) = self.recv.as_mut() else {
            return match failed {
                Some(e) => Err(e),
                None => Ok(Readable::Empty),
            };
        };
        if !r.deliver.is_empty() {
            let n = buf.len().min(r.deliver.len());
            for (dst, src) in buf.iter_mut().zip(r.deliver.drain(..n)) {
                *dst = src;
            }
            self.stats.bytes_delivered += n as u64;
            return Ok(Readable::Data(n));
        }
        if r.eof {
            return Ok(Readable::End);
        }
        match failed {
            Some(e) => Err(e),
            None if self.state == State::Closed => Ok(Readable::End),
            None => Ok(Readable::Empty),
        }
    }

    fn timestamp(&self, now: u64) -> u32 {
        now.saturating_sub(self.start) as u32
    }

    fn fail(&mut self, err: TransportError) {
        if matches!(self.state, State::Failed(_) | State::Closed) {
            return;
        }
        debug!("connection {:08x} failed: {err}", self.params.conn_id);
        if let TransportError::Protocol(_) = err {
            self.queue_control(Control::Reset);
        }
        self.state = State::Failed(err);
    }

    /// Processes one incoming datagram.
    pub fn handle_datagram(&mut self, now: u64, datagram: &[u8]) {
        let packet = match Packet::decode(datagram) {
            Ok(p) => p,
            Err(e) => {
                trace!("dropping malformed datagram: {e}");
                return;
            }
        };
        if packet.conn_id != self.params.conn_id {
            return;
        }
        self.last_recv_time = now;
        match packet.body {
            Body::Data { seq, payload } => self.on_data(now, seq, Segment::Data(payload)),
            Body::Control(control) => self.on_control(now, control),
        }
    }

    fn on_control(&mut self, now: u64, control: Control) {
        match control {
            Control::Handshake { status, info } => self.on_handshake(now, status, info),
            Control::KeepAlive => {}
            Control::Ack { ack_seq, info } => self.on_ack(now, ack_seq, info),
            Control::Ack2 { ack_id } => self.on_ack2(now, ack_id),
            Control::Nak { ranges } => self.on_nak(now, ranges),
            Control::Fin { seq } => self.on_data(now, seq, Segment::Fin),
            Control::Reset => {
                if !matches!(self.state, State::Closed) {
                    self.state = State::Failed(TransportError::Reset);
                }
            }
        }
    }

    fn on_handshake(&mut self, now: u64, status: HandshakeStatus, info: HandshakeInfo) {
        match (self.role, &self.state, status) {
            (Role::Server, State::Established, HandshakeStatus::Request) => {
                // Our accept was lost; the client retried.
                self.queue_handshake(HandshakeStatus::Accept);
            }
            (Role::Client, State::Connecting { .. }, HandshakeStatus::Accept) => {
                if info.version != self.params.version {
                    self.fail(TransportError::HandshakeRejected { local: self.params.version, remote: info.version });
                } else if info.cipher != self.params.cipher as u8 {
                    self.fail(TransportError::CipherUnavailable);
                } else {
                    self.params.peer_bandwidth_cap_mbps = info.bandwidth_cap_mbps;
                    let sample = now.saturating_sub(self.handshake_sent_at) as f64;
                    self.rtt_us = sample.max(1.0);
                    self.rtt_var_us = sample / 2.0;
                    if let Err(e) = self.establish(SeqNo::new(info.initial_seq)) {
                        self.fail(e);
                    } else {
                        self.next_tick = now + SYN_INTERVAL_US;
                        self.send.next_send_time = now as f64;
                        debug!("connection {:08x} established, rtt {} us", self.params.conn_id, sample);
                    }
                }
            }
            (Role::Client, State::Connecting { .. }, HandshakeStatus::RejectVersion) => {
                self.fail(TransportError::HandshakeRejected { local: self.params.version, remote: info.version });
            }
            (Role::Client, State::Connecting { .. }, HandshakeStatus::RejectCipher) => {
                self.fail(TransportError::CipherUnavailable);
            }
            _ => {}
        }
    }

    fn on_data(&mut self, now: u64, seq: SeqNo, segment: Segment) {
        if self.state != State::Established && self.state != State::Closed {
            return;
        }
        let window = self.cfg.recv_buffer_pkts as u64;
        let unseal = self.unseal.clone();
        let Some(r) = self.recv.as_mut() else { return };
        let Some(pn) = r.space.decode(seq, r.next) else { return };
        if pn < r.next || r.reorder.contains_key(&pn) {
            self.stats.duplicate_pkts += 1;
            // The peer may have missed our ACK; make sure one goes out.
            r.last_adv_window = u32::MAX;
            return;
        }
        if pn >= r.next + window {
            return;
        }
        let segment = match (segment, unseal) {
            (Segment::Data(mut payload), Some(c)) => {
                c.apply(seq, &mut payload);
                Segment::Data(payload)
            }
            (s, _) => s,
        };
        let is_data = matches!(segment, Segment::Data(_));
        if is_data {
            self.stats.data_pkts_recv += 1;
            if let Some(prev) = r.last_arrival {
                push_sample(&mut r.arrival_gaps, now - prev);
            }
            r.last_arrival = Some(now);
            if pn % 16 == 0 {
                r.probe_leader = Some((pn, now));
            } else if pn % 16 == 1 {
                if let Some((lead, t)) = r.probe_leader.take() {
                    if lead + 1 == pn {
                        push_sample(&mut r.probe_gaps, now - t);
                    }
                }
            }
        }
        let expected = r.highest.map_or(r.next, |h| h + 1);
        let nak = missing_before(expected, pn);
        for range in &nak {
            for m in range.lo..=range.hi {
                r.missing.insert(m, now);
            }
        }
        r.missing.remove(&pn);
        r.highest = Some(r.highest.map_or(pn, |h| h.max(pn)));
        if let Segment::Fin = segment {
            r.fin_pn = Some(pn);
        }
        r.reorder.insert(pn, segment);
        while let Some(seg) = r.reorder.remove(&r.next) {
            match seg {
                Segment::Data(bytes) => r.deliver.extend(bytes),
                Segment::Fin => r.eof = true,
            }
            r.next += 1;
        }
        r.pkts_since_ack += 1;
        let ack_now = r.pkts_since_ack >= ACK_EVERY_PKTS;
        if !nak.is_empty() {
            self.send_nak(&nak);
        }
        if ack_now {
            self.send_ack(now);
        }
        self.maybe_close();
    }

    fn send_nak(&mut self, ranges: &[PnRange]) {
        let space = match &self.recv {
            Some(r) => r.space,
            None => return,
        };
        for chunk in ranges.chunks(MAX_NAK_RANGES) {
            let wire = chunk.iter().map(|r| (space.encode(r.lo), space.encode(r.hi))).collect();
            self.stats.naks_sent += 1;
            self.queue_control(Control::Nak { ranges: wire });
        }
    }

    fn avail_window(&self, r: &RecvSide) -> u32 {
        let held = r.reorder.len() as u64 + (r.deliver.len() / MAX_PAYLOAD) as u64;
        (self.cfg.recv_buffer_pkts as u64).saturating_sub(held) as u32
    }

    fn send_ack(&mut self, now: u64) {
        let Some(r) = self.recv.as_ref() else { return };
        let avail = self.avail_window(r);
        let recv_rate = median(&r.arrival_gaps).map_or(0, |g| (1e6 / g.max(1) as f64) as u32);
        let capacity = median(&r.probe_gaps).map_or(0, |g| (1e6 / g.max(1) as f64) as u32);
        let ack_seq = r.space.encode(r.next);
        let r = self.recv.as_mut().unwrap();
        r.ack_id = r.ack_id.wrapping_add(1);
        let ack_id = r.ack_id;
        if r.ack_times.len() == 64 {
            r.ack_times.pop_front();
        }
        r.ack_times.push_back((ack_id, now));
        r.pkts_since_ack = 0;
        r.last_ack_pn = r.next;
        r.last_adv_window = avail;
        let info = AckInfo {
            ack_id,
            rtt_us: self.rtt_us as u32,
            rtt_var_us: self.rtt_var_us as u32,
            avail_window: avail,
            recv_rate_pps: recv_rate,
            capacity_pps: capacity,
        };
        self.stats.acks_sent += 1;
        self.queue_control(Control::Ack { ack_seq, info });
    }

    fn update_rtt(&mut self, sample: f64) {
        self.rtt_var_us = (3.0 * self.rtt_var_us + (self.rtt_us - sample).abs()) / 4.0;
        self.rtt_us = (7.0 * self.rtt_us + sample) / 8.0;
    }

    fn on_ack(&mut self, now: u64, ack_seq: SeqNo, info: AckInfo) {
        if self.state != State::Established && self.state != State::Closed {
            return;
        }
        self.queue_control(Control::Ack2 { ack_id: info.ack_id });
        if self.send.last_ack_id.is_some_and(|last| (info.ack_id.wrapping_sub(last) as i32) <= 0) {
            return;
        }
        let s = &mut self.send;
        let Some(ack_pn) = s.space.decode(ack_seq, s.una) else { return };
        if ack_pn > s.next {
            let next = s.next;
            self.fail(TransportError::Protocol(format!("ack {ack_pn} beyond sent window {next}")));
            return;
        }
        s.last_ack_id = Some(info.ack_id);
        if ack_pn > s.una {
            for _ in s.una..ack_pn {
                if let Some(Segment::Data(p)) = s.unacked.pop_front() {
                    s.unacked_bytes -= p.len();
                }
            }
            s.una = ack_pn;
            s.cc.acknowledge_below(ack_pn);
        }
        s.flow_window = info.avail_window;
        s.cc.set_receiver_estimates(info.recv_rate_pps as f64, info.capacity_pps as f64);
        s.exp_count = 0;
        if info.rtt_us > 0 {
            self.update_rtt(info.rtt_us as f64);
        }
        self.last_rsp_time = now;
        self.maybe_close();
    }

    fn on_ack2(&mut self, now: u64, ack_id: u32) {
        let Some(r) = self.recv.as_mut() else { return };
        if let Some(pos) = r.ack_times.iter().position(|&(id, _)| id == ack_id) {
            let (_, sent) = r.ack_times[pos];
            r.ack_times.drain(..=pos);
            self.update_rtt(now.saturating_sub(sent) as f64);
        }
    }

    fn on_nak(&mut self, now: u64, ranges: Vec<(SeqNo, SeqNo)>) {
        if self.state != State::Established {
            return;
        }
        self.last_rsp_time = now;
        self.stats.naks_recv += 1;
        let s = &mut self.send;
        let mut pn_ranges = Vec::with_capacity(ranges.len());
        for (lo, hi) in ranges {
            let (Some(lo), Some(hi)) = (s.space.decode(lo, s.una), s.space.decode(hi, s.una)) else { continue };
            let lo = lo.max(s.una);
            let hi = hi.min(s.next.saturating_sub(1));
            if lo <= hi && hi < s.next {
                pn_ranges.push(PnRange::new(lo, hi));
            }
        }
        if pn_ranges.is_empty() {
            return;
        }
        let highest_sent = s.next.saturating_sub(1);
        if s.cc.on_loss_report(&pn_ranges, highest_sent) {
            self.stats.rate_decreases += 1;
        }
    }

    fn maybe_close(&mut self) {
        if self.state != State::Established {
            return;
        }
        let local_done = self.send.fin_pn.is_some_and(|f| self.send.una > f);
        let remote_done = self.recv.as_ref().is_some_and(|r| r.eof);
        if local_done && remote_done {
            debug!("connection {:08x} closed", self.params.conn_id);
            self.state = State::Closed;
        }
    }

    /// Earliest time at which `handle_timeout` or `poll_transmit` has work.
    pub fn poll_timeout(&self) -> Option<u64> {
        match self.state {
            State::Connecting { next_retry, .. } => Some(next_retry),
            State::Established => {
                let mut t = self.next_tick;
                if self.has_data_to_send() {
                    let send_at = if self.send.probe_follow { 0 } else { self.send.next_send_time.ceil() as u64 };
                    t = t.min(send_at);
                }
                Some(t)
            }
            State::Closed => Some(self.next_tick),
            State::Failed(_) => None,
        }
    }

    pub fn has_pending_transmit(&self) -> bool {
        !self.control.is_empty()
    }

    fn window_open(&self) -> bool {
        let s = &self.send;
        let in_flight = s.next - s.una;
        let limit = if self.cfg.stop_and_wait { 1 } else { s.flow_window.max(1) as u64 };
        in_flight < limit
    }

    fn has_data_to_send(&self) -> bool {
        let s = &self.send;
        if !s.cc.loss_list().is_empty() {
            return true;
        }
        let fresh = !s.queue.is_empty() || (s.fin_requested && s.fin_pn.is_none());
        fresh && self.window_open()
    }

    /// Runs expired timers.
    pub fn handle_timeout(&mut self, now: u64) {
        if let State::Connecting { attempts, next_retry } = self.state {
            if now >= next_retry {
                if attempts >= self.cfg.connect_attempts {
                    self.fail(TransportError::ConnectTimeout);
                } else {
                    self.state = State::Connecting { attempts: attempts + 1, next_retry: next_retry + self.cfg.connect_retry_us };
                    self.handshake_sent_at = now;
                    self.queue_handshake(HandshakeStatus::Request);
                }
            }
            return;
        }
        while now >= self.next_tick && matches!(self.state, State::Established | State::Closed) {
            let tick_at = self.next_tick;
            self.next_tick += SYN_INTERVAL_US;
            self.tick(tick_at.max(now.saturating_sub(SYN_INTERVAL_US)));
        }
    }

    fn exp_period(&self) -> u64 {
        ((4.0 * self.rtt_us + self.rtt_var_us) as u64).max(MIN_EXP_US)
    }

    fn tick(&mut self, now: u64) {
        let rtt = self.rtt_us;
        let s = &mut self.send;
        if s.sent_in_interval > 0 {
            match s.cc.phase() {
                Phase::SlowStart => s.cc.slow_start_interval(rtt),
                Phase::Avoidance => s.cc.on_rate_interval(),
            }
        }
        s.sent_in_interval = 0;

        if let Some(r) = self.recv.as_ref() {
            if r.next != r.last_ack_pn || self.avail_window(r) != r.last_adv_window {
                self.send_ack(now);
            }
        }

        let renak_after = (2.0 * self.rtt_us + 4.0 * self.rtt_var_us).max(MIN_RENAK_US) as u64;
        if let Some(r) = self.recv.as_mut() {
            let mut stale = Vec::new();
            for (&pn, reported) in r.missing.iter_mut() {
                if now.saturating_sub(*reported) >= renak_after {
                    *reported = now;
                    match stale.last_mut() {
                        Some(PnRange { hi, .. }) if *hi + 1 == pn => *hi = pn,
                        _ => stale.push(PnRange::single(pn)),
                    }
                }
            }
            if !stale.is_empty() {
                self.send_nak(&stale);
            }
        }

        let exp = self.exp_period();
        let s = &mut self.send;
        if s.next > s.una && now.saturating_sub(self.last_rsp_time) >= exp * (s.exp_count as u64 + 1) {
            s.exp_count += 1;
            self.stats.timeouts += 1;
            s.cc.on_timeout(PnRange::new(s.una, s.next - 1));
            let only_fin = s.fin_pn == Some(s.una);
            let peer_done = self.recv.as_ref().is_some_and(|r| r.eof);
            if only_fin && peer_done && s.exp_count >= FIN_LINGER_EXPS {
                // Our final ACK request went unanswered after the peer finished.
                self.state = State::Closed;
                return;
            }
        }
        if now.saturating_sub(self.last_recv_time) >= self.cfg.idle_timeout_us {
            if self.state == State::Closed {
                return;
            }
            self.fail(TransportError::PeerTimeout);
            return;
        }
        if now.saturating_sub(self.last_send_time) >= KEEPALIVE_US && self.state == State::Established {
            self.queue_control(Control::KeepAlive);
        }
    }

    /// Returns the next datagram to put on the wire, if any is due at `now`.
    pub fn poll_transmit(&mut self, now: u64) -> Option<Vec<u8>> {
        if let Some(mut p) = self.control.pop_front() {
            p.timestamp = self.timestamp(now);
            self.last_send_time = now;
            return Some(p.encode());
        }
        if self.state != State::Established {
            return None;
        }
        let s = &self.send;
        if (now as f64) < s.next_send_time && !s.probe_follow {
            return None;
        }
        let packet = self.next_data_packet(now)?;
        let s = &mut self.send;
        let base = if s.next_send_time + MAX_BURST_US < now as f64 { now as f64 } else { s.next_send_time };
        s.next_send_time = base + s.cc.pkt_interval_us();
        s.sent_in_interval += 1;
        s.cc.on_packet_sent();
        self.last_send_time = now;
        Some(packet.encode())
    }

    fn next_data_packet(&mut self, now: u64) -> Option<Packet> {
        let ts = self.timestamp(now);
        let conn_id = self.params.conn_id;
        let s = &mut self.send;
        s.probe_follow = false;
        let (pn, retransmit) = match s.cc.pop_loss(s.una) {
            Some(pn) if pn < s.next => (pn, true),
            _ => {
                if !self.window_open() {
                    return None;
                }
                let s = &mut self.send;
                if !s.queue.is_empty() {
                    let n = s.queue.len().min(MAX_PAYLOAD);
                    let payload: Vec<u8> = s.queue.drain(..n).collect();
                    s.unacked_bytes += n;
                    s.unacked.push_back(Segment::Data(payload));
                } else if s.fin_requested && s.fin_pn.is_none() {
                    s.fin_pn = Some(s.next);
                    s.unacked.push_back(Segment::Fin);
                } else {
                    return None;
                }
                s.next += 1;
                let pn = s.next - 1;
                s.probe_follow = pn.is_multiple_of(16) && !self.cfg.stop_and_wait;
                (pn, false)
            }
        };
        let s = &mut self.send;
        let seq = s.space.encode(pn);
        let segment = &s.unacked[(pn - s.una) as usize];
        if retransmit {
            self.stats.retransmits += 1;
        }
        Some(match segment {
            Segment::Fin => Packet::control(ts, conn_id, Control::Fin { seq }),
            Segment::Data(payload) => {
                self.stats.data_pkts_sent += 1;
                self.stats.bytes_sent += payload.len() as u64;
                let payload = match &self.seal {
                    Some(c) => c.seal(seq, payload),
                    None => payload.clone(),
                };
                Packet::data(seq, ts, conn_id, payload)
            }
        })
    }
}
