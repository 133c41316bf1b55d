//! Connection-oriented, reliable, ordered byte streams over UDP datagrams
//! with rate-based congestion control.

pub mod conn;
pub mod emulator;
pub mod packet;
pub mod rate;
pub mod seq;
pub mod sim;
pub mod stream;
pub mod udp;

use thiserror::Error;

pub use conn::{nak_for_gap, ConnStats, Connection, Readable, Role, SessionParams, State, TransportConfig};
pub use emulator::{Fate, LinkEmulator, LinkSpec, LinkStats};
pub use packet::{CipherKind, MAX_DATAGRAM, MAX_PAYLOAD, PROTOCOL_VERSION};
pub use rate::{CongestionState, PnRange};
pub use sim::{SimConfig, SimNetwork, SimReport, TraceEvent};
pub use stream::Stream;
pub use udp::{connect, Listener};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("handshake rejected: local version {local}, peer version {remote}")]
    HandshakeRejected { local: u16, remote: u16 },
    #[error("requested cipher unavailable at peer")]
    CipherUnavailable,
    #[error("no handshake response")]
    ConnectTimeout,
    #[error("send on closed connection")]
    SendOnClosed,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer stopped responding")]
    PeerTimeout,
    #[error("connection reset by peer")]
    Reset,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<TransportError> for std::io::Error {
    fn from(e: TransportError) -> Self {
        use std::io::ErrorKind;
        let kind = match &e {
            TransportError::ConnectTimeout | TransportError::PeerTimeout => ErrorKind::TimedOut,
            TransportError::Reset => ErrorKind::ConnectionReset,
            TransportError::SendOnClosed => ErrorKind::BrokenPipe,
            TransportError::CipherUnavailable | TransportError::HandshakeRejected { .. } => ErrorKind::ConnectionRefused,
            _ => ErrorKind::Other,
        };
        std::io::Error::new(kind, e)
    }
}

impl TransportError {
    /// Recovers a transport error wrapped in an `io::Error`.
    pub fn from_io(e: &std::io::Error) -> Option<&TransportError> {
        e.get_ref()?.downcast_ref()
    }
}
