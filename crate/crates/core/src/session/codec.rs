//! Message framing: `type: u8 | length: u32 BE | payload`, with typed
//! payload encodings. All integers are big-endian; strings are UTF-8 with a
//! 16-bit length prefix.

use crate::sync::{validate_path, DeltaToken, EntryKind, FileEntry, MAX_LITERAL};
use crate::transport::CipherKind;

pub const HEADER_LEN: usize = 5;
/// Frames larger than this are rejected as a protocol error.
pub const MAX_FRAME_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame length {0} exceeds limit")]
    Oversized(u32),
    #[error("truncated {0} payload")]
    Truncated(&'static str),
    #[error("malformed {0} payload")]
    Malformed(&'static str),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    FileList = 2,
    SigRequest = 3,
    Signatures = 4,
    Delta = 5,
    FileDone = 6,
    SessionDone = 7,
    Error = 8,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageType::*;
        Some(match v {
            1 => Hello,
            2 => FileList,
            3 => SigRequest,
            4 => Signatures,
            5 => Delta,
            6 => FileDone,
            7 => SessionDone,
            8 => Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Push = 0,
    Pull = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Options {
    pub recursive: bool,
    pub checksum: bool,
    pub whole_file: bool,
}

impl Options {
    pub fn bits(self) -> u8 {
        self.recursive as u8 | (self.checksum as u8) << 1 | (self.whole_file as u8) << 2
    }

    pub fn from_bits(b: u8) -> Self {
        Options { recursive: b & 1 != 0, checksum: b & 2 != 0, whole_file: b & 4 != 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub version_min: u16,
    pub version_max: u16,
    /// Bit `1 << kind` for every cipher this side can run.
    pub ciphers: u8,
    pub cipher: CipherKind,
    pub block_size: u32,
    pub direction: Direction,
    pub options: Options,
    pub initiator: bool,
    /// Remote path the initiator asks for; empty from the responder.
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileStatus {
    Ok = 0,
    DigestMismatch = 1,
    Skipped = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Protocol = 1,
    Io = 2,
    Version = 3,
    Cipher = 4,
    Path = 5,
    Other = 255,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => ErrorCode::Protocol,
            2 => ErrorCode::Io,
            3 => ErrorCode::Version,
            4 => ErrorCode::Cipher,
            5 => ErrorCode::Path,
            _ => ErrorCode::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello(Hello),
    FileList(Vec<FileEntry>),
    SigRequest { file_id: u32, block_size: u32, whole_file: bool },
    /// One chunk of a file's signatures, starting at block `first`.
    Signatures { file_id: u32, block_size: u32, file_len: u64, first: u32, blocks: Vec<(u32, [u8; 16])> },
    Delta { file_id: u32, tokens: Vec<DeltaToken> },
    FileDone { file_id: u32, status: FileStatus, size: u64, digest: [u8; 16] },
    SessionDone,
    Error { code: ErrorCode, message: String },
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::FileList(_) => MessageType::FileList,
            Message::SigRequest { .. } => MessageType::SigRequest,
            Message::Signatures { .. } => MessageType::Signatures,
            Message::Delta { .. } => MessageType::Delta,
            Message::FileDone { .. } => MessageType::FileDone,
            Message::SessionDone => MessageType::SessionDone,
            Message::Error { .. } => MessageType::Error,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Appends the framed message to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.push(self.kind() as u8);
        out.extend_from_slice(&[0; 4]);
        match self {
            Message::Hello(h) => {
                out.extend_from_slice(&h.version_min.to_be_bytes());
                out.extend_from_slice(&h.version_max.to_be_bytes());
                out.push(h.ciphers);
                out.push(h.cipher as u8);
                out.extend_from_slice(&h.block_size.to_be_bytes());
                out.push(h.direction as u8);
                out.push(h.options.bits());
                out.push(h.initiator as u8);
                put_str(out, &h.path);
            }
            Message::FileList(entries) => {
                out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
                for e in entries {
                    put_str(out, &e.path);
                    out.push(match e.kind {
                        EntryKind::File => 0,
                        EntryKind::Dir => 1,
                        EntryKind::Symlink(_) => 2,
                    });
                    out.extend_from_slice(&e.size.to_be_bytes());
                    out.extend_from_slice(&e.mtime_secs.to_be_bytes());
                    out.extend_from_slice(&e.mtime_nanos.to_be_bytes());
                    out.extend_from_slice(&e.mode.to_be_bytes());
                    if let EntryKind::Symlink(t) = &e.kind {
                        put_str(out, t);
                    }
                }
            }
            Message::SigRequest { file_id, block_size, whole_file } => {
                out.extend_from_slice(&file_id.to_be_bytes());
                out.extend_from_slice(&block_size.to_be_bytes());
                out.push(*whole_file as u8);
            }
            Message::Signatures { file_id, block_size, file_len, first, blocks } => {
                out.extend_from_slice(&file_id.to_be_bytes());
                out.extend_from_slice(&block_size.to_be_bytes());
                out.extend_from_slice(&file_len.to_be_bytes());
                out.extend_from_slice(&first.to_be_bytes());
                out.extend_from_slice(&(blocks.len() as u32).to_be_bytes());
                for (weak, strong) in blocks {
                    out.extend_from_slice(&weak.to_be_bytes());
                    out.extend_from_slice(strong);
                }
            }
            Message::Delta { file_id, tokens } => {
                out.extend_from_slice(&file_id.to_be_bytes());
                for t in tokens {
                    encode_token(out, t);
                }
            }
            Message::FileDone { file_id, status, size, digest } => {
                out.extend_from_slice(&file_id.to_be_bytes());
                out.push(*status as u8);
                out.extend_from_slice(&size.to_be_bytes());
                out.extend_from_slice(digest);
            }
            Message::SessionDone => {}
            Message::Error { code, message } => {
                out.push(*code as u8);
                put_str(out, message);
            }
        }
        let len = (out.len() - start - HEADER_LEN) as u32;
        out[start + 1..start + HEADER_LEN].copy_from_slice(&len.to_be_bytes());
    }
}

/// Appends one delta token in its wire form: `0 | index u32` or
/// `1 | len u16 | bytes`.
pub fn encode_token(out: &mut Vec<u8>, t: &DeltaToken) {
    match t {
        DeltaToken::Copy(i) => {
            out.push(0);
            out.extend_from_slice(&i.to_be_bytes());
        }
        DeltaToken::Literal(bytes) => {
            debug_assert!(bytes.len() <= MAX_LITERAL);
            out.push(1);
            out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
            out.extend_from_slice(bytes);
        }
    }
}

/// Encoded size of a token.
pub fn token_len(t: &DeltaToken) -> usize {
    match t {
        DeltaToken::Copy(_) => 5,
        DeltaToken::Literal(b) => 3 + b.len(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Decodes one message from the front of `buf`. Returns `Ok(None)` when
/// more bytes are needed, otherwise the message and the bytes consumed.
pub fn decode_message(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    if buf.is_empty() {
        return Ok(None);
    }
    let kind = MessageType::from_u8(buf[0]).ok_or(ProtocolError::UnknownType(buf[0]))?;
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[1..5].try_into().unwrap());
    if len as usize > MAX_FRAME_PAYLOAD {
        return Err(ProtocolError::Oversized(len));
    }
    let total = HEADER_LEN + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let msg = decode_payload(kind, &buf[HEADER_LEN..total])?;
    Ok(Some((msg, total)))
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() < n {
            return Err(ProtocolError::Truncated(self.what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<[u8; 16], ProtocolError> {
        Ok(self.take(16)?.try_into().unwrap())
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ProtocolError::Malformed(self.what))
    }

    fn done(&self) -> Result<(), ProtocolError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::Malformed(self.what))
        }
    }
}

fn decode_payload(kind: MessageType, payload: &[u8]) -> Result<Message, ProtocolError> {
    let what = match kind {
        MessageType::Hello => "HELLO",
        MessageType::FileList => "FILELIST",
        MessageType::SigRequest => "SIG_REQUEST",
        MessageType::Signatures => "SIGNATURES",
        MessageType::Delta => "DELTA",
        MessageType::FileDone => "FILE_DONE",
        MessageType::SessionDone => "SESSION_DONE",
        MessageType::Error => "ERROR",
    };
    let mut r = Reader { buf: payload, what };
    let msg = match kind {
        MessageType::Hello => {
            let version_min = r.u16()?;
            let version_max = r.u16()?;
            let ciphers = r.u8()?;
            let cipher = CipherKind::from_raw(r.u8()?).ok_or(ProtocolError::Malformed(what))?;
            let block_size = r.u32()?;
            let direction = match r.u8()? {
                0 => Direction::Push,
                1 => Direction::Pull,
                _ => return Err(ProtocolError::Malformed(what)),
            };
            let options = Options::from_bits(r.u8()?);
            let initiator = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(ProtocolError::Malformed(what)),
            };
            let path = r.string()?;
            Message::Hello(Hello { version_min, version_max, ciphers, cipher, block_size, direction, options, initiator, path })
        }
        MessageType::FileList => {
            let count = r.u32()? as usize;
            // Smallest encoded entry is 27 bytes; reject counts the payload cannot hold.
            if count > payload.len() / 27 {
                return Err(ProtocolError::Truncated(what));
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let path = r.string()?;
                validate_path(&path).map_err(|_| ProtocolError::InvalidPath(path.clone()))?;
                let kind_byte = r.u8()?;
                let size = r.u64()?;
                let mtime_secs = r.u64()? as i64;
                let mtime_nanos = r.u32()?;
                let mode = r.u32()?;
                let kind = match kind_byte {
                    0 => EntryKind::File,
                    1 => EntryKind::Dir,
                    2 => EntryKind::Symlink(r.string()?),
                    _ => return Err(ProtocolError::Malformed(what)),
                };
                if mtime_nanos >= 1_000_000_000 {
                    return Err(ProtocolError::Malformed(what));
                }
                entries.push(FileEntry { path, size, mtime_secs, mtime_nanos, mode, kind });
            }
            Message::FileList(entries)
        }
        MessageType::SigRequest => {
            let file_id = r.u32()?;
            let block_size = r.u32()?;
            let whole_file = r.u8()? != 0;
            Message::SigRequest { file_id, block_size, whole_file }
        }
        MessageType::Signatures => {
            let file_id = r.u32()?;
            let block_size = r.u32()?;
            let file_len = r.u64()?;
            let first = r.u32()?;
            let count = r.u32()? as usize;
            if r.buf.len() != count.saturating_mul(20) {
                return Err(ProtocolError::Malformed(what));
            }
            let mut blocks = Vec::with_capacity(count);
            for _ in 0..count {
                blocks.push((r.u32()?, r.digest()?));
            }
            Message::Signatures { file_id, block_size, file_len, first, blocks }
        }
        MessageType::Delta => {
            let file_id = r.u32()?;
            let mut tokens = Vec::new();
            while !r.buf.is_empty() {
                tokens.push(match r.u8()? {
                    0 => DeltaToken::Copy(r.u32()?),
                    1 => {
                        let n = r.u16()? as usize;
                        DeltaToken::Literal(r.take(n)?.to_vec())
                    }
                    _ => return Err(ProtocolError::Malformed(what)),
                });
            }
            Message::Delta { file_id, tokens }
        }
        MessageType::FileDone => {
            let file_id = r.u32()?;
            let status = match r.u8()? {
                0 => FileStatus::Ok,
                1 => FileStatus::DigestMismatch,
                2 => FileStatus::Skipped,
                _ => return Err(ProtocolError::Malformed(what)),
            };
            let size = r.u64()?;
            let digest = r.digest()?;
            Message::FileDone { file_id, status, size, digest }
        }
        MessageType::SessionDone => Message::SessionDone,
        MessageType::Error => {
            let code = ErrorCode::from_u8(r.u8()?);
            let message = r.string()?;
            Message::Error { code, message }
        }
    };
    r.done()?;
    Ok(msg)
}
