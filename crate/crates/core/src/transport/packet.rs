//! Wire encoding of transport packets.
//!
//! Every packet starts with a 16-byte header of four big-endian words:
//!
//! ```text
//! word0  data:    0 | seq (31 bits)
//!        control: 1 | type (15 bits) | reserved (16 bits)
//! word1  additional info (ACK'd seq, NAK range count, FIN seq, handshake status) or 0
//! word2  send timestamp, microseconds since connection start
//! word3  connection id
//! ```

use thiserror::Error;

use super::seq::SeqNo;

pub const HEADER_LEN: usize = 16;
/// UDP payload size; keeps a 1500-byte IP MTU path free of fragmentation.
pub const MAX_DATAGRAM: usize = 1472;
pub const MAX_PAYLOAD: usize = MAX_DATAGRAM - HEADER_LEN;

pub const PROTOCOL_VERSION: u16 = 1;
const HANDSHAKE_BODY_LEN: usize = 2 + 1 + 4 + 4 + 16;
const ACK_BODY_LEN: usize = 24;
const CONTROL_BIT: u32 = 0x8000_0000;
const RANGE_BIT: u32 = 0x8000_0000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("datagram of {0} bytes is shorter than the header")]
    Truncated(usize),
    #[error("unknown control type {0}")]
    UnknownControl(u16),
    #[error("malformed {0} body")]
    Malformed(&'static str),
    #[error("payload of {0} bytes exceeds the packet capacity")]
    Oversized(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ControlType {
    Handshake = 0,
    KeepAlive = 1,
    Ack = 2,
    Nak = 3,
    Shutdown = 5,
    Ack2 = 6,
}

impl ControlType {
    fn from_raw(raw: u16) -> Result<Self, PacketError> {
        Ok(match raw {
            0 => ControlType::Handshake,
            1 => ControlType::KeepAlive,
            2 => ControlType::Ack,
            3 => ControlType::Nak,
            5 => ControlType::Shutdown,
            6 => ControlType::Ack2,
            other => return Err(PacketError::UnknownControl(other)),
        })
    }
}

/// The raw four-word header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub word0: u32,
    pub word1: u32,
    pub timestamp: u32,
    pub conn_id: u32,
}

impl PacketHeader {
    pub fn is_control(&self) -> bool {
        self.word0 & CONTROL_BIT != 0
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.word0.to_be_bytes());
        out.extend_from_slice(&self.word1.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.conn_id.to_be_bytes());
    }

    pub fn read(buf: &[u8]) -> Result<Self, PacketError> {
        if buf.len() < HEADER_LEN {
            return Err(PacketError::Truncated(buf.len()));
        }
        Ok(PacketHeader {
            word0: be32(&buf[0..]),
            word1: be32(&buf[4..]),
            timestamp: be32(&buf[8..]),
            conn_id: be32(&buf[12..]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CipherKind {
    None = 0,
    Blowfish = 1,
}

impl CipherKind {
    pub fn from_raw(raw: u8) -> Option<Self> {
        match raw {
            0 => Some(CipherKind::None),
            1 => Some(CipherKind::Blowfish),
            _ => None,
        }
    }
}

/// Handshake status carried in word1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum HandshakeStatus {
    Request = 0,
    Accept = 1,
    RejectVersion = 2,
    RejectCipher = 3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeInfo {
    pub version: u16,
    pub cipher: u8,
    pub initial_seq: u32,
    pub bandwidth_cap_mbps: u32,
    pub nonce: [u8; 16],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AckInfo {
    pub ack_id: u32,
    pub rtt_us: u32,
    pub rtt_var_us: u32,
    pub avail_window: u32,
    pub recv_rate_pps: u32,
    pub capacity_pps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Control {
    Handshake { status: HandshakeStatus, info: HandshakeInfo },
    KeepAlive,
    /// `ack_seq` is the first sequence number not yet received contiguously.
    Ack { ack_seq: SeqNo, info: AckInfo },
    /// Inclusive ranges of missing sequence numbers.
    Nak { ranges: Vec<(SeqNo, SeqNo)> },
    /// End of the sender's stream; occupies sequence number `seq`.
    Fin { seq: SeqNo },
    Reset,
    Ack2 { ack_id: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Data { seq: SeqNo, payload: Vec<u8> },
    Control(Control),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub timestamp: u32,
    pub conn_id: u32,
    pub body: Body,
}

impl Packet {
    pub fn data(seq: SeqNo, timestamp: u32, conn_id: u32, payload: Vec<u8>) -> Self {
        Packet { timestamp, conn_id, body: Body::Data { seq, payload } }
    }

    pub fn control(timestamp: u32, conn_id: u32, control: Control) -> Self {
        Packet { timestamp, conn_id, body: Body::Control(control) }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAX_DATAGRAM);
        let (word0, word1) = match &self.body {
            Body::Data { seq, .. } => (seq.get(), 0),
            Body::Control(c) => {
                let (ty, info) = match c {
                    Control::Handshake { status, .. } => (ControlType::Handshake, *status as u32),
                    Control::KeepAlive => (ControlType::KeepAlive, 0),
                    Control::Ack { ack_seq, .. } => (ControlType::Ack, ack_seq.get()),
                    Control::Nak { ranges } => (ControlType::Nak, ranges.len() as u32),
                    Control::Fin { seq } => (ControlType::Shutdown, seq.get()),
                    Control::Reset => (ControlType::Shutdown, 0),
                    Control::Ack2 { .. } => (ControlType::Ack2, 0),
                };
                (CONTROL_BIT | (ty as u32) << 16, info)
            }
        };
        PacketHeader { word0, word1, timestamp: self.timestamp, conn_id: self.conn_id }.write(&mut out);
        match &self.body {
            Body::Data { payload, .. } => out.extend_from_slice(payload),
            Body::Control(Control::Handshake { info, .. }) => {
                out.extend_from_slice(&info.version.to_be_bytes());
                out.push(info.cipher);
                out.extend_from_slice(&info.initial_seq.to_be_bytes());
                out.extend_from_slice(&info.bandwidth_cap_mbps.to_be_bytes());
                out.extend_from_slice(&info.nonce);
            }
            Body::Control(Control::Ack { info, .. }) => {
                for w in [info.ack_id, info.rtt_us, info.rtt_var_us, info.avail_window, info.recv_rate_pps, info.capacity_pps] {
                    out.extend_from_slice(&w.to_be_bytes());
                }
            }
            Body::Control(Control::Nak { ranges }) => {
                for &(lo, hi) in ranges {
                    if lo == hi {
                        out.extend_from_slice(&lo.get().to_be_bytes());
                    } else {
                        out.extend_from_slice(&(lo.get() | RANGE_BIT).to_be_bytes());
                        out.extend_from_slice(&hi.get().to_be_bytes());
                    }
                }
            }
            Body::Control(Control::Fin { .. }) => out.push(0),
            Body::Control(Control::Reset) => out.push(1),
            Body::Control(Control::Ack2 { ack_id }) => out.extend_from_slice(&ack_id.to_be_bytes()),
            Body::Control(Control::KeepAlive) => {}
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Packet, PacketError> {
        let header = PacketHeader::read(buf)?;
        let body = &buf[HEADER_LEN..];
        if !header.is_control() {
            if body.len() > MAX_PAYLOAD {
                return Err(PacketError::Oversized(body.len()));
            }
            return Ok(Packet::data(SeqNo::new(header.word0), header.timestamp, header.conn_id, body.to_vec()));
        }
        let ty = ControlType::from_raw(((header.word0 >> 16) & 0x7fff) as u16)?;
        let control = match ty {
            ControlType::Handshake => {
                if body.len() != HANDSHAKE_BODY_LEN {
                    return Err(PacketError::Malformed("handshake"));
                }
                let status = match header.word1 {
                    0 => HandshakeStatus::Request,
                    1 => HandshakeStatus::Accept,
                    2 => HandshakeStatus::RejectVersion,
                    3 => HandshakeStatus::RejectCipher,
                    _ => return Err(PacketError::Malformed("handshake")),
                };
                let mut nonce = [0u8; 16];
                nonce.copy_from_slice(&body[11..27]);
                Control::Handshake {
                    status,
                    info: HandshakeInfo {
                        version: u16::from_be_bytes([body[0], body[1]]),
                        cipher: body[2],
                        initial_seq: be32(&body[3..]),
                        bandwidth_cap_mbps: be32(&body[7..]),
                        nonce,
                    },
                }
            }
            ControlType::KeepAlive => Control::KeepAlive,
            ControlType::Ack => {
                if body.len() != ACK_BODY_LEN {
                    return Err(PacketError::Malformed("ack"));
                }
                Control::Ack {
                    ack_seq: SeqNo::new(header.word1),
                    info: AckInfo {
                        ack_id: be32(&body[0..]),
                        rtt_us: be32(&body[4..]),
                        rtt_var_us: be32(&body[8..]),
                        avail_window: be32(&body[12..]),
                        recv_rate_pps: be32(&body[16..]),
                        capacity_pps: be32(&body[20..]),
                    },
                }
            }
            ControlType::Nak => {
                let count = header.word1 as usize;
                let mut ranges = Vec::with_capacity(count.min(body.len() / 4));
                let mut words = body.chunks_exact(4).map(be32);
                if !body.len().is_multiple_of(4) {
                    return Err(PacketError::Malformed("nak"));
                }
                while let Some(w) = words.next() {
                    if w & RANGE_BIT != 0 {
                        let hi = words.next().ok_or(PacketError::Malformed("nak"))?;
                        if hi & RANGE_BIT != 0 {
                            return Err(PacketError::Malformed("nak"));
                        }
                        ranges.push((SeqNo::new(w), SeqNo::new(hi)));
                    } else {
                        ranges.push((SeqNo::new(w), SeqNo::new(w)));
                    }
                }
                if ranges.len() != count || ranges.is_empty() {
                    return Err(PacketError::Malformed("nak"));
                }
                Control::Nak { ranges }
            }
            ControlType::Shutdown => match body {
                [0] => Control::Fin { seq: SeqNo::new(header.word1) },
                [1] => Control::Reset,
                _ => return Err(PacketError::Malformed("shutdown")),
            },
            ControlType::Ack2 => {
                if body.len() != 4 {
                    return Err(PacketError::Malformed("ack2"));
                }
                Control::Ack2 { ack_id: be32(body) }
            }
        };
        Ok(Packet::control(header.timestamp, header.conn_id, control))
    }
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn data_header_layout() {
        let p = Packet::data(SeqNo::new(0x1234_5678), 0xdead_beef, 7, vec![1, 2, 3]);
        let wire = p.encode();
        assert_eq!(wire.len(), HEADER_LEN + 3);
        assert_eq!(&wire[..16], &[0x12, 0x34, 0x56, 0x78, 0, 0, 0, 0, 0xde, 0xad, 0xbe, 0xef, 0, 0, 0, 7]);
        assert_eq!(Packet::decode(&wire).unwrap(), p);
    }

    #[test]
    fn control_type_bits() {
        let p = Packet::control(1, 2, Control::Ack2 { ack_id: 9 });
        let wire = p.encode();
        assert_eq!(&wire[..4], &[0x80, 0x06, 0, 0]);
        let nak = Packet::control(1, 2, Control::Nak { ranges: vec![(SeqNo::new(4), SeqNo::new(4)), (SeqNo::new(6), SeqNo::new(9))] });
        let wire = nak.encode();
        assert_eq!(&wire[..8], &[0x80, 0x03, 0, 0, 0, 0, 0, 2]);
        assert_eq!(&wire[16..], &[0, 0, 0, 4, 0x80, 0, 0, 6, 0, 0, 0, 9]);
        assert_eq!(Packet::decode(&wire).unwrap(), nak);
    }

    #[test]
    fn handshake_body() {
        let info = HandshakeInfo { version: 1, cipher: 1, initial_seq: 42, bandwidth_cap_mbps: 100, nonce: [7; 16] };
        let p = Packet::control(0, 99, Control::Handshake { status: HandshakeStatus::Request, info });
        let wire = p.encode();
        assert_eq!(wire.len(), HEADER_LEN + 27);
        assert_eq!(&wire[16..23], &[0, 1, 1, 0, 0, 0, 42]);
        assert_eq!(Packet::decode(&wire).unwrap(), p);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(Packet::decode(&[0; 15]), Err(PacketError::Truncated(15)));
        let mut unknown = vec![0x80, 0x04, 0, 0];
        unknown.extend_from_slice(&[0; 12]);
        assert_eq!(Packet::decode(&unknown), Err(PacketError::UnknownControl(4)));
        let mut big = vec![0u8; HEADER_LEN + MAX_PAYLOAD + 1];
        big[0] = 0;
        assert_eq!(Packet::decode(&big), Err(PacketError::Oversized(MAX_PAYLOAD + 1)));
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = Packet::decode(&bytes);
        }
    }
}
