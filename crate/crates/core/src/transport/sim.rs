//! In-process network: two connections joined by a pair of emulated links,
//! driven in virtual time.
//!
//! With `charge_cpu` set, real time the driver spends processing packets
//! (framing, ciphers) also holds the clock back: the next event cannot
//! happen before the work at the current instant would have finished on a
//! single CPU. Such runs are not reproducible.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conn::{ConnStats, Connection, TransportConfig};
use super::emulator::{Fate, LinkEmulator, LinkSpec, LinkStats};
use super::packet::{Body, Control, HandshakeStatus, Packet};
use super::stream::{Clock, Hub, Shared, Slot, Stream, Wait};
use super::TransportError;

const CLIENT: usize = 0;
const SERVER: usize = 1;

/// One datagram handed to a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub time_us: u64,
    /// 0 for client to server, 1 for the reverse direction.
    pub direction: u8,
    pub word0: u32,
    pub word1: u32,
    pub len: u16,
    pub fate: Fate,
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub end_time_us: u64,
    pub client: ConnStats,
    pub server: ConnStats,
    pub forward: LinkStats,
    pub reverse: LinkStats,
    pub trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub client: TransportConfig,
    pub server: TransportConfig,
    pub forward: LinkSpec,
    pub reverse: LinkSpec,
    /// Seed for connection ids, nonces and initial sequence numbers.
    pub seed: u64,
    pub record_trace: bool,
    pub charge_cpu: bool,
}

impl SimConfig {
    pub fn new(transport: TransportConfig, link: LinkSpec) -> Self {
        SimConfig {
            client: transport.clone(),
            server: transport,
            reverse: link.reversed(),
            seed: link.seed,
            forward: link,
            record_trace: false,
            charge_cpu: false,
        }
    }
}

/// A running emulated network.
pub struct SimNetwork {
    driver: Option<JoinHandle<SimReport>>,
}

struct Driver {
    shared: Arc<Shared>,
    links: [LinkEmulator; 2],
    server_cfg: TransportConfig,
    server_isn: u32,
    record: bool,
    charge_cpu: bool,
    trace: Vec<TraceEvent>,
}

impl SimNetwork {
    /// Connects a client to a server across the emulated links. Returns the
    /// client and server streams once the handshake completes.
    pub fn connect(cfg: SimConfig) -> Result<(SimNetwork, Stream, Stream), TransportError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let conn_id = rng.gen();
        let nonce = rng.gen();
        let client_isn = rng.gen::<u32>() >> 1;
        let server_isn = rng.gen::<u32>() >> 1;
        let client = Connection::connect(cfg.client.clone(), conn_id, nonce, client_isn, 0);
        let hub = Hub::new(Clock::Virtual(0), vec![client]);
        let shared = Shared::new(hub);
        let client_stream = Stream::attach(shared.clone(), CLIENT);
        let driver = Driver {
            shared: shared.clone(),
            links: [LinkEmulator::new(cfg.forward), LinkEmulator::new(cfg.reverse)],
            server_cfg: cfg.server,
            server_isn,
            record: cfg.record_trace,
            charge_cpu: cfg.charge_cpu,
            trace: Vec::new(),
        };
        let handle = std::thread::Builder::new()
            .name("udrift-sim".into())
            .spawn(move || driver.run())
            .expect("spawn sim driver");
        let net = SimNetwork { driver: Some(handle) };
        let mut hub = shared.lock();
        hub = shared.park(hub, CLIENT, Wait::Established);
        if let Some(e) = hub.slots[CLIENT].conn.error() {
            let e = e.clone();
            drop(hub);
            drop(client_stream);
            net.finish();
            return Err(e);
        }
        if hub.slots.len() <= SERVER {
            drop(hub);
            drop(client_stream);
            net.finish();
            return Err(TransportError::ConnectTimeout);
        }
        drop(hub);
        let server_stream = Stream::attach(shared, SERVER);
        Ok((net, client_stream, server_stream))
    }

    /// Waits for the driver to stop and returns its report. All streams must
    /// have been dropped.
    pub fn finish(mut self) -> SimReport {
        self.driver.take().map(|h| h.join().expect("sim driver panicked")).unwrap_or_default()
    }
}

impl Drop for SimNetwork {
    fn drop(&mut self) {
        if let Some(h) = self.driver.take() {
            let _ = h.join();
        }
    }
}

impl Driver {
    fn run(mut self) -> SimReport {
        let shared = self.shared.clone();
        let mut hub = shared.lock();
        let mut busy_until = 0u64;
        loop {
            while hub.active_apps > 0 {
                hub = shared.cv.wait(hub).unwrap_or_else(|p| p.into_inner());
            }
            let now = hub.now();
            let started = self.charge_cpu.then(Instant::now);
            self.deliver_due(&mut hub, now);
            for slot in hub.slots.iter_mut() {
                slot.conn.handle_timeout(now);
            }
            self.transmit(&mut hub, now);
            if let Some(t) = started {
                busy_until = busy_until.max(now + t.elapsed().as_micros() as u64);
            }
            if hub.wake_ready() {
                shared.cv.notify_all();
                continue;
            }
            let all_detached = hub.slots.iter().all(|s| !s.attached);
            let all_done = hub.slots.iter().all(|s| s.conn.is_closed() || s.conn.error().is_some());
            if all_detached && all_done {
                break;
            }
            let next = hub
                .slots
                .iter()
                .filter_map(|s| s.conn.poll_timeout())
                .chain(self.links.iter().filter_map(|l| l.next_delivery()))
                .min();
            match next {
                Some(t) => hub.clock = Clock::Virtual(t.max(now + 1).max(busy_until)),
                None => {
                    debug!("sim: no pending events at {now} us");
                    break;
                }
            }
        }
        hub.release_all();
        shared.cv.notify_all();
        let now = hub.now();
        let stats = |i: usize| hub.slots.get(i).map(|s| s.conn.stats().clone()).unwrap_or_default();
        SimReport {
            end_time_us: now,
            client: stats(CLIENT),
            server: stats(SERVER),
            forward: self.links[0].stats().clone(),
            reverse: self.links[1].stats().clone(),
            trace: std::mem::take(&mut self.trace),
        }
    }

    fn deliver_due(&mut self, hub: &mut Hub, now: u64) {
        // Direction 0 carries client datagrams to the server.
        for dir in 0..2 {
            while let Some(d) = self.links[dir].pop_due(now) {
                let dest = if dir == 0 { SERVER } else { CLIENT };
                if dest == SERVER && hub.slots.len() <= SERVER {
                    self.accept(hub, &d, now);
                } else if let Some(slot) = hub.slots.get_mut(dest) {
                    slot.conn.handle_datagram(now, &d);
                }
            }
        }
    }

    fn accept(&mut self, hub: &mut Hub, datagram: &[u8], now: u64) {
        let Ok(packet) = Packet::decode(datagram) else { return };
        if !matches!(packet.body, Body::Control(Control::Handshake { status: HandshakeStatus::Request, .. })) {
            return;
        }
        match Connection::accept(self.server_cfg.clone(), &packet, self.server_isn, now) {
            Ok(conn) => hub.slots.push(Slot { conn, waiting: None, attached: false }),
            Err((e, reply)) => {
                debug!("sim: server rejected handshake: {e}");
                if let Some(reply) = reply {
                    self.submit(1, reply, now);
                }
            }
        }
    }

    fn transmit(&mut self, hub: &mut Hub, now: u64) {
        for (i, slot) in hub.slots.iter_mut().enumerate() {
            while let Some(d) = slot.conn.poll_transmit(now) {
                self.submit(i, d, now);
            }
        }
    }

    fn submit(&mut self, dir: usize, datagram: Vec<u8>, now: u64) {
        let header = self.record.then(|| {
            let w = |o: usize| u32::from_be_bytes(datagram[o..o + 4].try_into().unwrap());
            (w(0), w(4), datagram.len() as u16)
        });
        let fate = self.links[dir].emulate(datagram, now);
        if let Some((word0, word1, len)) = header {
            self.trace.push(TraceEvent { time_us: now, direction: dir as u8, word0, word1, len, fate });
        }
    }
}
