//! Sync sessions over a transport stream: HELLO negotiation, file-list
//! exchange, per-file signature/delta exchange, and completion accounting.

mod codec;
mod endpoint;
mod receiver;
mod sender;
mod wire;

pub use codec::{
    decode_message, encode_token, token_len, Direction, ErrorCode, FileStatus, Hello, Message, MessageType, Options,
    ProtocolError, HEADER_LEN, MAX_FRAME_PAYLOAD,
};
pub use endpoint::{pull, push, serve, sync_local, LocalSync, ServeConfig, SyncOptions};
pub use receiver::run_receiver;
pub use sender::run_sender;
pub use wire::Wire;

use crate::sync::SyncError;
use crate::transport::{CipherKind, TransportError, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("no common protocol version (local {local:?}, remote {remote:?})")]
    Version { local: (u16, u16), remote: (u16, u16) },
    #[error("cipher {requested:?} not supported by both peers")]
    Cipher { requested: CipherKind },
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("connection closed mid-session")]
    Disconnected,
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Sync(#[from] SyncError),
    #[error("peer reported error ({code:?}): {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("partial transfer: {completed} of {total} files done before failure: {cause}")]
    Partial { completed: usize, total: usize, completed_paths: Vec<String>, cause: Box<SessionError> },
}

impl SessionError {
    pub(crate) fn io(context: impl std::fmt::Display, err: std::io::Error) -> Self {
        SessionError::Io(format!("{context}: {err}"))
    }

    /// The code reported to the peer in an ERROR message.
    pub fn code(&self) -> ErrorCode {
        match self {
            SessionError::Protocol(ProtocolError::InvalidPath(_)) => ErrorCode::Path,
            SessionError::Sync(SyncError::InvalidPath(_)) => ErrorCode::Path,
            SessionError::Protocol(_) | SessionError::Sync(_) => ErrorCode::Protocol,
            SessionError::Version { .. } => ErrorCode::Version,
            SessionError::Cipher { .. } => ErrorCode::Cipher,
            SessionError::Io(_) => ErrorCode::Io,
            SessionError::Remote { code, .. } => *code,
            SessionError::Partial { cause, .. } => cause.code(),
            SessionError::Transport(_) | SessionError::Disconnected => ErrorCode::Other,
        }
    }

    /// True for cipher or version disagreement, locally or as reported by
    /// the peer.
    pub fn is_negotiation(&self) -> bool {
        match self {
            SessionError::Version { .. } | SessionError::Cipher { .. } => true,
            SessionError::Remote { code, .. } => matches!(code, ErrorCode::Version | ErrorCode::Cipher),
            SessionError::Transport(TransportError::HandshakeRejected { .. })
            | SessionError::Transport(TransportError::CipherUnavailable) => true,
            SessionError::Partial { cause, .. } => cause.is_negotiation(),
            _ => false,
        }
    }
}

/// Parameters both peers derive identically from the HELLO exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionParams {
    pub version: u16,
    pub cipher: CipherKind,
    pub block_size: u32,
    pub direction: Direction,
    pub options: Options,
}

pub fn cipher_bit(kind: CipherKind) -> u8 {
    1 << kind as u8
}

impl Hello {
    /// A HELLO for this build's protocol version.
    pub fn new(cipher: CipherKind, block_size: u32, direction: Direction, options: Options, initiator: bool) -> Hello {
        Hello {
            version_min: PROTOCOL_VERSION,
            version_max: PROTOCOL_VERSION,
            ciphers: cipher_bit(CipherKind::None) | cipher_bit(CipherKind::Blowfish),
            cipher,
            block_size,
            direction,
            options,
            initiator,
            path: String::new(),
        }
    }

    /// Whether the side that sent this HELLO sends file data.
    pub fn is_sender(&self, direction: Direction) -> bool {
        self.initiator == (direction == Direction::Push)
    }
}

/// Derives session parameters. The initiator's request fixes direction,
/// options, and cipher; the block size is the sending side's; the version
/// is the highest one both support.
pub fn negotiate(local: &Hello, remote: &Hello) -> Result<SessionParams, SessionError> {
    let lo = local.version_min.max(remote.version_min);
    let hi = local.version_max.min(remote.version_max);
    if lo > hi {
        return Err(SessionError::Version {
            local: (local.version_min, local.version_max),
            remote: (remote.version_min, remote.version_max),
        });
    }
    if local.initiator == remote.initiator {
        return Err(ProtocolError::Malformed("HELLO").into());
    }
    let init = if local.initiator { local } else { remote };
    let cipher = init.cipher;
    let bit = cipher_bit(cipher);
    if local.ciphers & remote.ciphers & bit == 0 || local.cipher != remote.cipher {
        return Err(SessionError::Cipher { requested: cipher });
    }
    let direction = init.direction;
    let sender = if local.is_sender(direction) { local } else { remote };
    if (sender.block_size as usize) < crate::sync::MIN_BLOCK_SIZE {
        return Err(SyncError::Config(format!("block size {} below minimum", sender.block_size)).into());
    }
    Ok(SessionParams { version: hi, cipher, block_size: sender.block_size, direction, options: init.options })
}

/// Outcome of one file within a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileOutcome {
    Updated,
    UpToDate,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileReport {
    pub path: String,
    pub size: u64,
    pub literal_bytes: u64,
    pub matched_bytes: u64,
    pub outcome: FileOutcome,
}

/// Totals for one side of a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionStats {
    /// Regular files in the source manifest.
    pub files_total: usize,
    pub files_transferred: usize,
    pub literal_bytes: u64,
    pub matched_bytes: u64,
    pub delta_messages: u64,
    pub wire_bytes_sent: u64,
    pub wire_bytes_received: u64,
    /// Connection time spent in the session (virtual under emulation).
    pub elapsed_us: u64,
    pub files: Vec<FileReport>,
    /// Source entries skipped while scanning.
    pub warnings: Vec<String>,
}

impl SessionStats {
    pub fn failed(&self) -> impl Iterator<Item = &FileReport> {
        self.files.iter().filter(|f| f.outcome == FileOutcome::Failed)
    }

    pub(crate) fn warnings_from(&mut self, w: &[String]) {
        self.warnings.extend_from_slice(w);
    }

    /// Bytes of file content reconstructed at the destination.
    pub fn file_bytes(&self) -> u64 {
        self.literal_bytes + self.matched_bytes
    }
}

/// Exchanges HELLOs and negotiates. On failure an ERROR is sent before
/// returning.
pub fn handshake(wire: &mut Wire<'_>, local: &Hello) -> Result<(Hello, SessionParams), SessionError> {
    wire.send(&Message::Hello(local.clone()))?;
    let remote = match wire.recv()? {
        Message::Hello(h) => h,
        Message::Error { code, message } => return Err(SessionError::Remote { code, message }),
        _ => return Err(fail(wire, ProtocolError::Unexpected("non-HELLO").into())),
    };
    match negotiate(local, &remote) {
        Ok(p) => Ok((remote, p)),
        Err(e) => Err(fail(wire, e)),
    }
}

/// Best-effort ERROR report to the peer; returns `err` for propagation.
pub(crate) fn fail(wire: &mut Wire<'_>, err: SessionError) -> SessionError {
    if !matches!(err, SessionError::Transport(_) | SessionError::Disconnected | SessionError::Remote { .. }) {
        let _ = wire.send(&Message::Error { code: err.code(), message: err.to_string() });
        let _ = wire.flush();
    }
    err
}
