//! Framed message I/O over a transport stream.
//!
//! One thread both sends and receives. Outgoing frames are buffered and
//! pushed without blocking; whenever the caller has to wait it keeps
//! draining the incoming direction, so two peers that write large bursts
//! at each other cannot deadlock on full send buffers.

use super::codec::{decode_message, Message};
use super::SessionError;
use crate::transport::Stream;

const HIGH_WATER: usize = 4 << 20;
const READ_CHUNK: usize = 256 << 10;

pub struct Wire<'a> {
    stream: &'a Stream,
    inbuf: Vec<u8>,
    in_pos: usize,
    out: Vec<u8>,
    out_pos: usize,
    eof: bool,
    bytes_sent: u64,
    bytes_received: u64,
}

impl<'a> Wire<'a> {
    pub fn new(stream: &'a Stream) -> Self {
        Wire { stream, inbuf: Vec::new(), in_pos: 0, out: Vec::new(), out_pos: 0, eof: false, bytes_sent: 0, bytes_received: 0 }
    }

    pub fn stream(&self) -> &Stream {
        self.stream
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    fn pending(&self) -> usize {
        self.out.len() - self.out_pos
    }

    /// Queues a message, blocking only while more than the high-water mark
    /// is unsent.
    pub fn send(&mut self, msg: &Message) -> Result<(), SessionError> {
        let before = self.out.len();
        msg.encode_into(&mut self.out);
        self.bytes_sent += (self.out.len() - before) as u64;
        self.push()?;
        while self.pending() > HIGH_WATER {
            self.pump()?;
        }
        Ok(())
    }

    /// Blocks until every queued byte is handed to the transport.
    pub fn flush(&mut self) -> Result<(), SessionError> {
        while self.pending() > 0 {
            self.pump()?;
        }
        Ok(())
    }

    /// Blocks for the next message. End of stream mid-session is an error.
    pub fn recv(&mut self) -> Result<Message, SessionError> {
        loop {
            if let Some(m) = self.decode()? {
                return Ok(m);
            }
            if self.eof {
                return Err(SessionError::Disconnected);
            }
            self.pump()?;
        }
    }

    /// Returns a message if one is already complete, without blocking.
    pub fn try_recv(&mut self) -> Result<Option<Message>, SessionError> {
        self.push()?;
        self.pull()?;
        self.decode()
    }

    /// Waits for the peer to end its half of the stream, discarding input.
    pub fn drain_to_end(&mut self) -> Result<(), SessionError> {
        self.flush()?;
        while !self.eof {
            self.in_pos = self.inbuf.len();
            self.pump()?;
        }
        Ok(())
    }

    fn decode(&mut self) -> Result<Option<Message>, SessionError> {
        match decode_message(&self.inbuf[self.in_pos..])? {
            Some((m, n)) => {
                self.in_pos += n;
                if self.in_pos == self.inbuf.len() {
                    self.inbuf.clear();
                    self.in_pos = 0;
                }
                Ok(Some(m))
            }
            None => Ok(None),
        }
    }

    fn push(&mut self) -> Result<bool, SessionError> {
        let mut progress = false;
        while self.pending() > 0 {
            let n = self.stream.try_send(&self.out[self.out_pos..])?;
            if n == 0 {
                break;
            }
            self.out_pos += n;
            progress = true;
        }
        if self.out_pos == self.out.len() {
            self.out.clear();
            self.out_pos = 0;
        } else if self.out_pos > HIGH_WATER {
            self.out.drain(..self.out_pos);
            self.out_pos = 0;
        }
        Ok(progress)
    }

    fn pull(&mut self) -> Result<bool, SessionError> {
        if self.eof {
            return Ok(false);
        }
        if self.in_pos > 0 && self.in_pos * 2 >= self.inbuf.len() {
            self.inbuf.drain(..self.in_pos);
            self.in_pos = 0;
        }
        let mut progress = false;
        loop {
            let len = self.inbuf.len();
            self.inbuf.resize(len + READ_CHUNK, 0);
            let got = self.stream.try_recv(&mut self.inbuf[len..]);
            let n = match got {
                Ok(Some(0)) => {
                    self.inbuf.truncate(len);
                    self.eof = true;
                    return Ok(true);
                }
                Ok(Some(n)) => n,
                Ok(None) => {
                    self.inbuf.truncate(len);
                    return Ok(progress);
                }
                Err(e) => {
                    self.inbuf.truncate(len);
                    return Err(e.into());
                }
            };
            self.inbuf.truncate(len + n);
            self.bytes_received += n as u64;
            progress = true;
        }
    }

    /// Moves bytes in both directions, parking if neither can progress.
    fn pump(&mut self) -> Result<(), SessionError> {
        let sent = self.push()?;
        let got = self.pull()?;
        if !sent && !got {
            self.stream.wait(!self.eof, self.pending() > 0)?;
        }
        Ok(())
    }
}
