//! Rsync-style content synchronization primitives.

pub mod checksum;
pub mod delta;
pub mod manifest;

pub use checksum::{roll, shrink, strong_checksum, weak_checksum, FileDigest};
pub use delta::{
    apply_delta, compute_delta, compute_signatures, compute_signatures_with, BlockSignature, Delta, DeltaToken,
    SignatureSet, DEFAULT_BLOCK_SIZE, MAX_LITERAL, MIN_BLOCK_SIZE,
};
pub use manifest::{scan_source, scan_tree, validate_path, EntryKind, FileEntry, Manifest};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyncError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corrupt delta: copy of block {index} but old file has {blocks} blocks")]
    CorruptDelta { index: u32, blocks: u32 },
    #[error("corrupt signatures: {0}")]
    CorruptSignatures(String),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("{0}")]
    Io(String),
}

impl SyncError {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        SyncError::Io(format!("{}: {err}", path.display()))
    }
}
