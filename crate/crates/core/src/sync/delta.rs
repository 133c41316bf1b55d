//! Block signatures, delta computation and delta application.

use std::collections::HashMap;

use super::checksum::{roll, shrink, strong_checksum, weak_checksum};
use super::SyncError;
use crate::par::{self, Exec};

pub const MIN_BLOCK_SIZE: usize = 64;
pub const DEFAULT_BLOCK_SIZE: usize = 2048;
pub const MAX_LITERAL: usize = 65535;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSignature {
    pub index: u32,
    pub weak: u32,
    pub strong: [u8; 16],
}

/// Signatures of every block of a file plus a weak-checksum index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureSet {
    block_size: usize,
    file_len: u64,
    blocks: Vec<BlockSignature>,
    by_weak: HashMap<u32, Vec<u32>>,
}

impl SignatureSet {
    pub fn from_parts(block_size: usize, file_len: u64, blocks: Vec<BlockSignature>) -> Result<Self, SyncError> {
        check_block_size(block_size)?;
        let expected = file_len.div_ceil(block_size as u64);
        if blocks.len() as u64 != expected || blocks.iter().enumerate().any(|(i, b)| b.index as usize != i) {
            return Err(SyncError::CorruptSignatures(format!(
                "{} signatures for {file_len} bytes at block size {block_size}",
                blocks.len()
            )));
        }
        let mut by_weak: HashMap<u32, Vec<u32>> = HashMap::new();
        for b in &blocks {
            by_weak.entry(b.weak).or_default().push(b.index);
        }
        Ok(SignatureSet { block_size, file_len, blocks, by_weak })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn blocks(&self) -> &[BlockSignature] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn block_len(&self, index: u32) -> usize {
        let start = index as u64 * self.block_size as u64;
        (self.file_len - start).min(self.block_size as u64) as usize
    }

    fn find(&self, weak: u32, window: &[u8]) -> Option<u32> {
        let candidates = self.by_weak.get(&weak)?;
        let mut strong = None;
        for &idx in candidates {
            if self.block_len(idx) != window.len() {
                continue;
            }
            let s = *strong.get_or_insert_with(|| strong_checksum(window));
            if self.blocks[idx as usize].strong == s {
                return Some(idx);
            }
        }
        None
    }
}

fn check_block_size(block_size: usize) -> Result<(), SyncError> {
    if block_size < MIN_BLOCK_SIZE || block_size > u32::MAX as usize {
        return Err(SyncError::Config(format!("block size {block_size} below minimum {MIN_BLOCK_SIZE}")));
    }
    Ok(())
}

pub fn compute_signatures(data: &[u8], block_size: usize) -> Result<SignatureSet, SyncError> {
    compute_signatures_with(data, block_size, Exec::default())
}

pub fn compute_signatures_with(data: &[u8], block_size: usize, exec: Exec) -> Result<SignatureSet, SyncError> {
    check_block_size(block_size)?;
    let blocks = par::map_chunks(data, block_size, exec, |i, block| BlockSignature {
        index: i as u32,
        weak: weak_checksum(block),
        strong: strong_checksum(block),
    });
    SignatureSet::from_parts(block_size, data.len() as u64, blocks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeltaToken {
    Copy(u32),
    Literal(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Delta {
    pub block_size: usize,
    pub tokens: Vec<DeltaToken>,
}

impl Delta {
    pub fn literal_bytes(&self) -> u64 {
        self.tokens
            .iter()
            .map(|t| match t {
                DeltaToken::Literal(l) => l.len() as u64,
                DeltaToken::Copy(_) => 0,
            })
            .sum()
    }

    pub fn copy_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, DeltaToken::Copy(_))).count()
    }
}

struct LiteralSink<'a> {
    tokens: &'a mut Vec<DeltaToken>,
}

impl LiteralSink<'_> {
    fn push(&mut self, bytes: &[u8]) {
        for piece in bytes.chunks(MAX_LITERAL) {
            match self.tokens.last_mut() {
                Some(DeltaToken::Literal(run)) if run.len() + piece.len() <= MAX_LITERAL => run.extend_from_slice(piece),
                _ => self.tokens.push(DeltaToken::Literal(piece.to_vec())),
            }
        }
    }
}

/// Greedy left-to-right scan: at each offset the window's weak checksum is
/// looked up and confirmed by its strong digest; a match emits `Copy` and
/// jumps a block ahead, otherwise one byte becomes literal. Near the end of
/// `new_data` the window shrinks so a short final block can still match.
pub fn compute_delta(sigs: &SignatureSet, new_data: &[u8]) -> Delta {
    let bs = sigs.block_size;
    let mut tokens = Vec::new();
    if sigs.is_empty() {
        LiteralSink { tokens: &mut tokens }.push(new_data);
        return Delta { block_size: bs, tokens };
    }
    let n = new_data.len();
    let mut pos = 0;
    let mut lit_start = 0;
    let mut win = bs.min(n);
    let mut weak = weak_checksum(&new_data[..win]);
    while win > 0 {
        if let Some(idx) = sigs.find(weak, &new_data[pos..pos + win]) {
            LiteralSink { tokens: &mut tokens }.push(&new_data[lit_start..pos]);
            tokens.push(DeltaToken::Copy(idx));
            pos += win;
            lit_start = pos;
            win = bs.min(n - pos);
            weak = weak_checksum(&new_data[pos..pos + win]);
            continue;
        }
        let out = new_data[pos];
        if pos + win < n {
            weak = roll(weak, out, new_data[pos + win], win);
        } else {
            weak = shrink(weak, out, win);
            win -= 1;
        }
        pos += 1;
    }
    LiteralSink { tokens: &mut tokens }.push(&new_data[lit_start..n]);
    Delta { block_size: bs, tokens }
}

/// Reconstructs the new file from the old one.
pub fn apply_delta(old_data: &[u8], delta: &Delta) -> Result<Vec<u8>, SyncError> {
    let bs = delta.block_size;
    let blocks = if bs == 0 { 0 } else { old_data.len().div_ceil(bs) };
    let mut out = Vec::new();
    for token in &delta.tokens {
        match token {
            DeltaToken::Copy(i) => {
                let i = *i as usize;
                if i >= blocks {
                    return Err(SyncError::CorruptDelta { index: i as u32, blocks: blocks as u32 });
                }
                out.extend_from_slice(&old_data[i * bs..((i + 1) * bs).min(old_data.len())]);
            }
            DeltaToken::Literal(bytes) => out.extend_from_slice(bytes),
        }
    }
    Ok(out)
}
