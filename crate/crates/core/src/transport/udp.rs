//! UDP socket driver.

use std::collections::HashMap;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::Rng;

use super::conn::{Connection, TransportConfig};
use super::packet::{Body, Control, HandshakeStatus, Packet, HEADER_LEN, MAX_DATAGRAM};
use super::stream::{Clock, Hub, Shared, Stream, Wait};
use super::TransportError;

const READ_TIMEOUT: Duration = Duration::from_millis(100);
const MAX_IDLE_WAIT_US: u64 = 100_000;
const MIN_LINGER_US: u64 = 200_000;
const MAX_LINGER_US: u64 = 2_000_000;

fn io_err(e: std::io::Error) -> TransportError {
    TransportError::Io(e.to_string())
}

fn unspecified_for(remote: &SocketAddr) -> SocketAddr {
    match remote {
        SocketAddr::V4(_) => "0.0.0.0:0".parse().unwrap(),
        SocketAddr::V6(_) => "[::]:0".parse().unwrap(),
    }
}

/// Opens a connection to a listening peer and completes the handshake.
pub fn connect(remote: impl ToSocketAddrs, cfg: TransportConfig) -> Result<Stream, TransportError> {
    let remote = remote
        .to_socket_addrs()
        .map_err(io_err)?
        .next()
        .ok_or_else(|| TransportError::Io("address resolved to nothing".into()))?;
    let socket = Arc::new(UdpSocket::bind(unspecified_for(&remote)).map_err(io_err)?);
    socket.set_read_timeout(Some(READ_TIMEOUT)).map_err(io_err)?;
    let mut rng = rand::thread_rng();
    let conn = Connection::connect(cfg, rng.gen(), rng.gen(), rng.gen::<u32>() >> 1, 0);
    let shared = Shared::new(Hub::new(Clock::Real(Instant::now()), vec![conn]));

    let reader_shared = shared.clone();
    let reader_socket = socket.clone();
    thread::Builder::new()
        .name("udrift-recv".into())
        .spawn(move || {
            let mut buf = vec![0u8; MAX_DATAGRAM + 64];
            loop {
                if reader_shared.lock().stopped {
                    break;
                }
                match reader_socket.recv_from(&mut buf) {
                    Ok((n, from)) if from == remote => {
                        reader_shared.lock().inbox.push_back(buf[..n].to_vec());
                        reader_shared.cv.notify_all();
                    }
                    Ok(_) => {}
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                    Err(e) => {
                        // ICMP port unreachable surfaces here on Linux; the
                        // handshake retry timer decides when to give up.
                        debug!("udp recv: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        })
        .map_err(io_err)?;
    spawn_driver(shared.clone(), socket, remote)?;

    let stream = Stream::attach(shared.clone(), 0);
    let hub = shared.lock();
    let hub = shared.park(hub, 0, Wait::Established);
    if let Some(e) = hub.slots[0].conn.error() {
        return Err(e.clone());
    }
    drop(hub);
    Ok(stream)
}

fn spawn_driver(shared: Arc<Shared>, socket: Arc<UdpSocket>, peer: SocketAddr) -> Result<(), TransportError> {
    thread::Builder::new()
        .name("udrift-conn".into())
        .spawn(move || drive(shared, socket, peer))
        .map(|_| ())
        .map_err(io_err)
}

fn drive(shared: Arc<Shared>, socket: Arc<UdpSocket>, peer: SocketAddr) {
    let mut hub = shared.lock();
    let mut closed_at = None;
    loop {
        let now = hub.now();
        let inbox = std::mem::take(&mut hub.inbox);
        let slot = &mut hub.slots[0];
        for d in inbox {
            slot.conn.handle_datagram(now, &d);
        }
        slot.conn.handle_timeout(now);
        while let Some(d) = slot.conn.poll_transmit(now) {
            if let Err(e) = socket.send_to(&d, peer) {
                debug!("udp send: {e}");
            }
        }
        let failed = slot.conn.error().is_some();
        let attached = slot.attached;
        if slot.conn.is_closed() && closed_at.is_none() {
            closed_at = Some(now);
        }
        let linger = ((3.0 * slot.conn.rtt_us()) as u64).clamp(MIN_LINGER_US, MAX_LINGER_US);
        let deadline = slot.conn.poll_timeout();
        if hub.wake_ready() {
            shared.cv.notify_all();
        }
        if !attached && (failed || closed_at.is_some_and(|t| now.saturating_sub(t) >= linger)) {
            break;
        }
        let wait_us = deadline.map_or(MAX_IDLE_WAIT_US, |d| d.saturating_sub(now).min(MAX_IDLE_WAIT_US));
        if wait_us > 0 {
            hub = shared.cv.wait_timeout(hub, Duration::from_micros(wait_us)).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
    hub.release_all();
    shared.cv.notify_all();
}

/// Accepts incoming connections on one UDP socket.
pub struct Listener {
    socket: Arc<UdpSocket>,
    incoming: Mutex<mpsc::Receiver<Stream>>,
    stop: Arc<AtomicBool>,
}

impl Listener {
    pub fn bind(addr: impl ToSocketAddrs, cfg: TransportConfig) -> Result<Listener, TransportError> {
        let socket = Arc::new(UdpSocket::bind(addr).map_err(io_err)?);
        socket.set_read_timeout(Some(READ_TIMEOUT)).map_err(io_err)?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let reader_socket = socket.clone();
        let reader_stop = stop.clone();
        thread::Builder::new()
            .name("udrift-listen".into())
            .spawn(move || demux(reader_socket, cfg, tx, reader_stop))
            .map_err(io_err)?;
        Ok(Listener { socket, incoming: Mutex::new(rx), stop })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        self.socket.local_addr().map_err(io_err)
    }

    /// Blocks until a client completes a handshake.
    pub fn accept(&self) -> Result<Stream, TransportError> {
        self.incoming
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .recv()
            .map_err(|_| TransportError::Io("listener stopped".into()))
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn demux(socket: Arc<UdpSocket>, cfg: TransportConfig, tx: mpsc::Sender<Stream>, stop: Arc<AtomicBool>) {
    let mut conns: HashMap<(SocketAddr, u32), Arc<Shared>> = HashMap::new();
    let mut buf = vec![0u8; MAX_DATAGRAM + 64];
    let mut rng = rand::thread_rng();
    while !stop.load(Ordering::Relaxed) {
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(r) => r,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                conns.retain(|_, s| !s.lock().stopped);
                continue;
            }
            Err(e) => {
                debug!("listener recv: {e}");
                continue;
            }
        };
        let d = &buf[..n];
        if n < HEADER_LEN {
            continue;
        }
        let conn_id = u32::from_be_bytes(d[12..16].try_into().unwrap());
        if let Some(shared) = conns.get(&(from, conn_id)) {
            let mut hub = shared.lock();
            if !hub.stopped {
                hub.inbox.push_back(d.to_vec());
                drop(hub);
                shared.cv.notify_all();
                continue;
            }
        }
        let Ok(packet) = Packet::decode(d) else { continue };
        if !matches!(packet.body, Body::Control(Control::Handshake { status: HandshakeStatus::Request, .. })) {
            continue;
        }
        match Connection::accept(cfg.clone(), &packet, rng.gen::<u32>() >> 1, 0) {
            Ok(conn) => {
                debug!("accepted connection {conn_id:08x} from {from}");
                let shared = Shared::new(Hub::new(Clock::Real(Instant::now()), vec![conn]));
                if spawn_driver(shared.clone(), socket.clone(), from).is_err() {
                    continue;
                }
                conns.insert((from, conn_id), shared.clone());
                if tx.send(Stream::attach(shared, 0)).is_err() {
                    break;
                }
            }
            Err((e, reply)) => {
                warn!("rejected handshake from {from}: {e}");
                if let Some(reply) = reply {
                    let _ = socket.send_to(&reply, from);
                }
            }
        }
    }
}
