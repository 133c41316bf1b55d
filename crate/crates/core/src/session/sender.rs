//! Sending side: offers the file list, requests signatures for changed
//! files a few files ahead, and streams deltas.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use log::{debug, warn};

use super::codec::{token_len, FileStatus, Message, ProtocolError};
use super::wire::Wire;
use super::{fail, FileOutcome, FileReport, SessionError, SessionParams, SessionStats};
use crate::sync::{compute_delta, BlockSignature, DeltaToken, FileDigest, FileEntry, Manifest, SignatureSet};

/// Files whose signatures may be outstanding at once.
pub const SIG_WINDOW: usize = 4;
/// Target encoded size of one DELTA message.
pub const DELTA_CHUNK: usize = 256 << 10;

#[derive(Default)]
struct Pending {
    id: u32,
    block_size: u32,
    file_len: Option<u64>,
    blocks: Vec<BlockSignature>,
}

impl Pending {
    fn expected(&self) -> Option<usize> {
        self.file_len.map(|len| len.div_ceil(self.block_size as u64) as usize)
    }

    fn complete(&self) -> bool {
        self.expected() == Some(self.blocks.len())
    }
}

/// Sends `manifest` (paths relative to `base`) to the receiving peer.
pub fn run_sender(
    wire: &mut Wire<'_>,
    params: &SessionParams,
    base: &Path,
    manifest: &Manifest,
) -> Result<SessionStats, SessionError> {
    let start = wire.stream().now_us();
    let mut stats = SessionStats {
        files_total: manifest.entries().iter().filter(|e| e.is_file()).count(),
        ..SessionStats::default()
    };
    let result = Sender { wire: &mut *wire, params, base, entries: manifest.entries(), stats: &mut stats }.run();
    stats.elapsed_us = wire.stream().now_us().saturating_sub(start);
    stats.wire_bytes_sent = wire.bytes_sent();
    stats.wire_bytes_received = wire.bytes_received();
    match result {
        Ok(()) => Ok(stats),
        Err(e) => {
            let e = fail(wire, e);
            let completed_paths: Vec<String> = stats
                .files
                .iter()
                .filter(|f| f.outcome != FileOutcome::Failed)
                .map(|f| f.path.clone())
                .collect();
            Err(SessionError::Partial {
                completed: completed_paths.len(),
                total: stats.files_total,
                completed_paths,
                cause: Box::new(e),
            })
        }
    }
}

struct Sender<'w, 'a> {
    wire: &'w mut Wire<'a>,
    params: &'w SessionParams,
    base: &'w Path,
    entries: &'w [FileEntry],
    stats: &'w mut SessionStats,
}

impl Sender<'_, '_> {
    fn run(&mut self) -> Result<(), SessionError> {
        self.wire.send(&Message::FileList(self.entries.to_vec()))?;
        let dest: HashMap<String, FileEntry> = match self.wire.recv()? {
            Message::FileList(list) => list.into_iter().map(|e| (e.path.clone(), e)).collect(),
            Message::Error { code, message } => return Err(SessionError::Remote { code, message }),
            _ => return Err(ProtocolError::Unexpected("non-FILELIST").into()),
        };

        let mut queue: VecDeque<(u32, bool)> = VecDeque::new();
        for (id, e) in self.entries.iter().enumerate() {
            if !e.is_file() {
                continue;
            }
            if !self.params.options.checksum && dest.get(&e.path).is_some_and(|d| same_file(e, d)) {
                self.report(e, 0, 0, FileOutcome::UpToDate);
            } else {
                queue.push_back((id as u32, self.params.options.whole_file));
            }
        }
        debug!("sender: {} of {} files need transfer", queue.len(), self.stats.files_total);

        let mut requested: VecDeque<Pending> = VecDeque::new();
        let mut awaiting: HashMap<u32, FileReport> = HashMap::new();
        let mut retried: HashSet<u32> = HashSet::new();
        loop {
            while requested.len() < SIG_WINDOW {
                let Some((id, whole)) = queue.pop_front() else { break };
                let block_size = self.params.block_size;
                self.wire.send(&Message::SigRequest { file_id: id, block_size, whole_file: whole })?;
                requested.push_back(Pending { id, block_size, ..Pending::default() });
            }
            if requested.front().is_some_and(Pending::complete) {
                let p = requested.pop_front().unwrap();
                let report = self.send_file(p)?;
                awaiting.insert(report.0, report.1);
                continue;
            }
            if requested.is_empty() && queue.is_empty() && awaiting.is_empty() {
                break;
            }
            match self.wire.recv()? {
                Message::Signatures { file_id, block_size, file_len, first, blocks } => {
                    let p = requested
                        .iter_mut()
                        .find(|p| p.id == file_id)
                        .ok_or(ProtocolError::Unexpected("SIGNATURES for unrequested file"))?;
                    if block_size != p.block_size
                        || first as usize != p.blocks.len()
                        || p.file_len.is_some_and(|l| l != file_len)
                    {
                        return Err(ProtocolError::Malformed("SIGNATURES").into());
                    }
                    p.file_len = Some(file_len);
                    let start = p.blocks.len() as u32;
                    p.blocks.extend(blocks.into_iter().enumerate().map(|(i, (weak, strong))| BlockSignature {
                        index: start + i as u32,
                        weak,
                        strong,
                    }));
                    if p.blocks.len() > p.expected().unwrap_or(0) {
                        return Err(ProtocolError::Malformed("SIGNATURES").into());
                    }
                }
                Message::FileDone { file_id, status, .. } => {
                    let mut report = awaiting.remove(&file_id).ok_or(ProtocolError::Unexpected("FILE_DONE"))?;
                    match status {
                        FileStatus::Ok if report.outcome != FileOutcome::Failed => {
                            self.stats.files_transferred += 1;
                            self.stats.literal_bytes += report.literal_bytes;
                            self.stats.matched_bytes += report.matched_bytes;
                        }
                        FileStatus::DigestMismatch if retried.insert(file_id) => {
                            warn!("{}: digest mismatch at receiver, resending whole file", report.path);
                            queue.push_front((file_id, true));
                            continue;
                        }
                        _ => report.outcome = FileOutcome::Failed,
                    }
                    self.stats.files.push(report);
                }
                Message::Error { code, message } => return Err(SessionError::Remote { code, message }),
                _ => return Err(ProtocolError::Unexpected("message during file transfer").into()),
            }
        }

        self.wire.send(&Message::SessionDone)?;
        match self.wire.recv()? {
            Message::SessionDone => {}
            Message::Error { code, message } => return Err(SessionError::Remote { code, message }),
            _ => return Err(ProtocolError::Unexpected("message after SESSION_DONE").into()),
        }
        self.stats.files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    fn send_file(&mut self, p: Pending) -> Result<(u32, FileReport), SessionError> {
        let entry = &self.entries[p.id as usize];
        let path = self.base.join(&entry.path);
        let data = match std::fs::read(&path) {
            Ok(d) => d,
            Err(e) => {
                warn!("{}: {e}; skipped", path.display());
                self.wire.send(&Message::FileDone { file_id: p.id, status: FileStatus::Skipped, size: 0, digest: [0; 16] })?;
                let report = FileReport {
                    path: entry.path.clone(),
                    size: 0,
                    literal_bytes: 0,
                    matched_bytes: 0,
                    outcome: FileOutcome::Failed,
                };
                return Ok((p.id, report));
            }
        };
        let file_len = p.file_len.unwrap_or(0);
        let sigs = SignatureSet::from_parts(p.block_size as usize, file_len, p.blocks)?;
        let delta = compute_delta(&sigs, &data);
        let literal = delta.literal_bytes();

        let mut chunk: Vec<DeltaToken> = Vec::new();
        let mut chunk_len = 0;
        for token in delta.tokens {
            chunk_len += token_len(&token);
            chunk.push(token);
            if chunk_len >= DELTA_CHUNK {
                self.wire.send(&Message::Delta { file_id: p.id, tokens: std::mem::take(&mut chunk) })?;
                self.stats.delta_messages += 1;
                chunk_len = 0;
            }
        }
        if !chunk.is_empty() {
            self.wire.send(&Message::Delta { file_id: p.id, tokens: chunk })?;
            self.stats.delta_messages += 1;
        }
        let mut digest = FileDigest::new();
        digest.update(&data);
        let size = data.len() as u64;
        self.wire.send(&Message::FileDone { file_id: p.id, status: FileStatus::Ok, size, digest: digest.finish() })?;
        let report = FileReport {
            path: entry.path.clone(),
            size,
            literal_bytes: literal,
            matched_bytes: size - literal,
            outcome: FileOutcome::Updated,
        };
        Ok((p.id, report))
    }

    fn report(&mut self, e: &FileEntry, literal: u64, matched: u64, outcome: FileOutcome) {
        self.stats.files.push(FileReport {
            path: e.path.clone(),
            size: e.size,
            literal_bytes: literal,
            matched_bytes: matched,
            outcome,
        });
    }
}

/// Size and mtime fast path.
fn same_file(src: &FileEntry, dest: &FileEntry) -> bool {
    dest.is_file() && src.size == dest.size && src.mtime_secs == dest.mtime_secs && src.mtime_nanos == dest.mtime_nanos
}
