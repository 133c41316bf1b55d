//! Blocking byte-stream handles shared by the UDP and emulated drivers.
//!
//! All connections driven together live in one `Hub` behind a mutex. An
//! application thread that cannot make progress parks on the condition
//! variable with its wait reason recorded; the driver wakes it once the
//! connection becomes readable or writable. Under virtual time the driver
//! advances the clock only while every application thread is parked, which
//! makes emulated runs reproducible.

use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Instant;

use super::conn::{ConnStats, Connection, Readable, SessionParams};
use super::TransportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Wait {
    Readable,
    Writable,
    Either,
    Established,
    Closed,
}

#[derive(Debug)]
pub(crate) struct Slot {
    pub conn: Connection,
    pub waiting: Option<Wait>,
    pub attached: bool,
}

#[derive(Debug)]
pub(crate) enum Clock {
    Real(Instant),
    Virtual(u64),
}

#[derive(Debug)]
pub(crate) struct Hub {
    pub clock: Clock,
    pub slots: Vec<Slot>,
    /// Attached application handles that are not parked.
    pub active_apps: usize,
    pub stopped: bool,
    /// Datagrams received by a socket reader, awaiting the driver.
    pub inbox: std::collections::VecDeque<Vec<u8>>,
}

impl Hub {
    pub fn new(clock: Clock, conns: Vec<Connection>) -> Hub {
        Hub {
            clock,
            slots: conns.into_iter().map(|conn| Slot { conn, waiting: None, attached: false }).collect(),
            active_apps: 0,
            stopped: false,
            inbox: std::collections::VecDeque::new(),
        }
    }

    pub fn now(&self) -> u64 {
        match self.clock {
            Clock::Real(epoch) => epoch.elapsed().as_micros() as u64,
            Clock::Virtual(t) => t,
        }
    }

    fn is_ready(conn: &Connection, wait: Wait) -> bool {
        if conn.error().is_some() {
            return true;
        }
        match wait {
            Wait::Readable => conn.readable(),
            Wait::Writable => conn.writable(),
            Wait::Either => conn.readable() || conn.writable(),
            Wait::Established => conn.is_established() || conn.is_closed(),
            Wait::Closed => conn.is_closed(),
        }
    }

    /// Wakes parked handles whose condition holds. Returns true if any woke.
    pub fn wake_ready(&mut self) -> bool {
        let mut woke = false;
        for slot in &mut self.slots {
            if let Some(w) = slot.waiting {
                if Self::is_ready(&slot.conn, w) {
                    slot.waiting = None;
                    self.active_apps += 1;
                    woke = true;
                }
            }
        }
        woke
    }

    /// Releases every parked handle; used when the driver exits.
    pub fn release_all(&mut self) {
        self.stopped = true;
        for slot in &mut self.slots {
            if slot.waiting.take().is_some() {
                self.active_apps += 1;
            }
        }
    }
}

#[derive(Debug)]
pub(crate) struct Shared {
    pub hub: Mutex<Hub>,
    pub cv: Condvar,
}

impl Shared {
    pub fn new(hub: Hub) -> Arc<Self> {
        Arc::new(Shared { hub: Mutex::new(hub), cv: Condvar::new() })
    }

    pub fn lock(&self) -> MutexGuard<'_, Hub> {
        self.hub.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Parks the calling handle until `wait` holds or the driver stops.
    pub fn park<'a>(&'a self, mut hub: MutexGuard<'a, Hub>, slot: usize, wait: Wait) -> MutexGuard<'a, Hub> {
        if hub.stopped || Hub::is_ready(&hub.slots[slot].conn, wait) {
            return hub;
        }
        hub.slots[slot].waiting = Some(wait);
        hub.active_apps -= 1;
        self.cv.notify_all();
        while hub.slots[slot].waiting.is_some() {
            hub = self.cv.wait(hub).unwrap_or_else(|p| p.into_inner());
        }
        hub
    }
}

/// One side of an established connection.
#[derive(Debug)]
pub struct Stream {
    shared: Arc<Shared>,
    slot: usize,
}

impl Stream {
    /// Attaches a handle; the caller counts as an active application thread.
    pub(crate) fn attach(shared: Arc<Shared>, slot: usize) -> Stream {
        {
            let mut hub = shared.lock();
            hub.slots[slot].attached = true;
            hub.active_apps += 1;
        }
        Stream { shared, slot }
    }

    pub fn params(&self) -> SessionParams {
        self.shared.lock().slots[self.slot].conn.params().clone()
    }

    pub fn stats(&self) -> ConnStats {
        self.shared.lock().slots[self.slot].conn.stats().clone()
    }

    pub fn rtt_us(&self) -> f64 {
        self.shared.lock().slots[self.slot].conn.rtt_us()
    }

    /// Current connection time in microseconds (virtual under emulation).
    pub fn now_us(&self) -> u64 {
        self.shared.lock().now()
    }

    pub fn send(&self, data: &[u8]) -> Result<usize, TransportError> {
        let mut hub = self.shared.lock();
        loop {
            if hub.stopped {
                return Err(hub.slots[self.slot].conn.error().cloned().unwrap_or(TransportError::PeerTimeout));
            }
            let n = hub.slots[self.slot].conn.send(data)?;
            if n > 0 || data.is_empty() {
                self.shared.cv.notify_all();
                return Ok(n);
            }
            hub = self.shared.park(hub, self.slot, Wait::Writable);
        }
    }

    /// Writes all of `data`, blocking while the send buffer is full.
    pub fn send_all(&self, mut data: &[u8]) -> Result<(), TransportError> {
        while !data.is_empty() {
            let n = self.send(data)?;
            data = &data[n..];
        }
        Ok(())
    }

    /// Reads available in-order bytes, blocking until at least one byte or
    /// end of stream. Returns 0 at end of stream.
    pub fn recv(&self, buf: &mut [u8]) -> Result<usize, TransportError> {
        let mut hub = self.shared.lock();
        loop {
            match hub.slots[self.slot].conn.recv(buf)? {
                Readable::Data(n) => return Ok(n),
                Readable::End => return Ok(0),
                Readable::Empty if buf.is_empty() => return Ok(0),
                Readable::Empty => {}
            }
            if hub.stopped {
                return Err(TransportError::PeerTimeout);
            }
            hub = self.shared.park(hub, self.slot, Wait::Readable);
        }
    }

    /// Enqueues what fits without blocking; 0 means the send buffer is full.
    pub fn try_send(&self, data: &[u8]) -> Result<usize, TransportError> {
        let mut hub = self.shared.lock();
        if hub.stopped {
            return Err(hub.slots[self.slot].conn.error().cloned().unwrap_or(TransportError::PeerTimeout));
        }
        let n = hub.slots[self.slot].conn.send(data)?;
        if n > 0 {
            self.shared.cv.notify_all();
        }
        Ok(n)
    }

    /// Non-blocking read: `None` if nothing is buffered, `Some(0)` at end of
    /// stream.
    pub fn try_recv(&self, buf: &mut [u8]) -> Result<Option<usize>, TransportError> {
        let mut hub = self.shared.lock();
        match hub.slots[self.slot].conn.recv(buf)? {
            Readable::Data(n) => Ok(Some(n)),
            Readable::End => Ok(Some(0)),
            Readable::Empty if hub.stopped => Err(TransportError::PeerTimeout),
            Readable::Empty => Ok(None),
        }
    }

    /// Blocks until the stream is readable (or, with `writable`, has send
    /// space).
    pub fn wait(&self, readable: bool, writable: bool) -> Result<(), TransportError> {
        let wait = match (readable, writable) {
            (true, true) => Wait::Either,
            (false, true) => Wait::Writable,
            _ => Wait::Readable,
        };
        let hub = self.shared.park(self.shared.lock(), self.slot, wait);
        match hub.slots[self.slot].conn.error() {
            Some(e) => Err(e.clone()),
            None if hub.stopped => Err(TransportError::PeerTimeout),
            None => Ok(()),
        }
    }

    /// Ends the outgoing half of the stream.
    pub fn finish(&self) {
        self.shared.lock().slots[self.slot].conn.finish();
        self.shared.cv.notify_all();
    }

    /// Finishes and waits until both directions have ended.
    pub fn close(&self) -> Result<(), TransportError> {
        self.finish();
        let mut hub = self.shared.lock();
        loop {
            let conn = &hub.slots[self.slot].conn;
            if conn.is_closed() {
                return Ok(());
            }
            if let Some(e) = conn.error() {
                return Err(e.clone());
            }
            if hub.stopped {
                return Err(TransportError::PeerTimeout);
            }
            hub = self.shared.park(hub, self.slot, Wait::Closed);
        }
    }
}

impl Drop for Stream {
    fn drop(&mut self) {
        let mut hub = self.shared.lock();
        let slot = &mut hub.slots[self.slot];
        slot.conn.finish();
        slot.attached = false;
        hub.active_apps -= 1;
        self.shared.cv.notify_all();
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        Stream::recv(self, buf).map_err(Into::into)
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        Stream::send(self, buf).map_err(Into::into)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for &Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        Stream::recv(self, buf).map_err(Into::into)
    }
}

impl Write for &Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        Stream::send(self, buf).map_err(Into::into)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}
