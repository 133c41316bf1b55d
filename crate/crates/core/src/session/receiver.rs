//! Receiving side: reports destination metadata, serves signatures of
//! existing files, and rebuilds changed files in a temporary file that is
//! renamed into place only after its digest checks out.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use tempfile::NamedTempFile;

use super::codec::{FileStatus, Message, ProtocolError};
use super::wire::Wire;
use super::{fail, FileOutcome, FileReport, SessionError, SessionParams, SessionStats};
use crate::sync::{compute_signatures, EntryKind, FileDigest, FileEntry, SyncError, MIN_BLOCK_SIZE};

/// Signatures per SIGNATURES message.
const SIG_CHUNK: usize = 1 << 16;

struct Basis {
    file: Option<File>,
    block_size: u64,
    len: u64,
}

struct Incoming {
    id: u32,
    out: BufWriter<NamedTempFile>,
    digest: FileDigest,
    written: u64,
    literal: u64,
    matched: u64,
}

/// Receives files into `dest`, creating it if needed.
pub fn run_receiver(wire: &mut Wire<'_>, params: &SessionParams, dest: &Path) -> Result<SessionStats, SessionError> {
    let start = wire.stream().now_us();
    let mut stats = SessionStats::default();
    let result = Receiver { wire: &mut *wire, dest, params, stats: &mut stats, entries: Vec::new() }.run();
    stats.elapsed_us = wire.stream().now_us().saturating_sub(start);
    stats.wire_bytes_sent = wire.bytes_sent();
    stats.wire_bytes_received = wire.bytes_received();
    match result {
        Ok(()) => Ok(stats),
        Err(e) => Err(fail(wire, e)),
    }
}

struct Receiver<'w, 'a> {
    wire: &'w mut Wire<'a>,
    dest: &'w Path,
    params: &'w SessionParams,
    stats: &'w mut SessionStats,
    entries: Vec<FileEntry>,
}

impl Receiver<'_, '_> {
    fn run(&mut self) -> Result<(), SessionError> {
        fs::create_dir_all(self.dest).map_err(|e| SessionError::io(self.dest.display(), e))?;
        self.entries = match self.wire.recv()? {
            Message::FileList(list) => list,
            Message::Error { code, message } => return Err(SessionError::Remote { code, message }),
            _ => return Err(ProtocolError::Unexpected("non-FILELIST").into()),
        };
        if self.entries.windows(2).any(|w| w[0].path >= w[1].path) {
            return Err(ProtocolError::Malformed("FILELIST").into());
        }
        self.stats.files_total = self.entries.iter().filter(|e| e.is_file()).count();

        let mut view = Vec::new();
        for e in &self.entries {
            let target = resolve(self.dest, &e.path)?;
            if let Ok(meta) = fs::symlink_metadata(&target) {
                let link = meta.file_type().is_symlink().then(|| fs::read_link(&target).ok()).flatten();
                view.push(FileEntry::from_metadata(e.path.clone(), &meta, link.map(|l| l.to_string_lossy().into())));
            }
        }
        self.wire.send(&Message::FileList(view))?;
        self.materialize_non_files()?;

        let mut bases: HashMap<u32, Basis> = HashMap::new();
        let mut current: Option<Incoming> = None;
        let mut requested = vec![false; self.entries.len()];
        loop {
            match self.wire.recv()? {
                Message::SigRequest { file_id, block_size, whole_file } => {
                    let entry = self.file_entry(file_id)?;
                    if (block_size as usize) < MIN_BLOCK_SIZE || block_size != self.params.block_size {
                        return Err(ProtocolError::Malformed("SIG_REQUEST").into());
                    }
                    let target = resolve(self.dest, &entry.path)?;
                    requested[file_id as usize] = true;
                    let basis = self.send_signatures(file_id, &target, block_size, whole_file)?;
                    bases.insert(file_id, basis);
                }
                Message::Delta { file_id, tokens } => {
                    let basis = bases.get_mut(&file_id).ok_or(ProtocolError::Unexpected("DELTA before SIG_REQUEST"))?;
                    if current.as_ref().is_some_and(|c| c.id != file_id) {
                        return Err(ProtocolError::Unexpected("interleaved DELTA").into());
                    }
                    if current.is_none() {
                        current = Some(self.open_incoming(file_id)?);
                    }
                    let inc = current.as_mut().unwrap();
                    self.stats.delta_messages += 1;
                    apply_tokens(inc, basis, &tokens)?;
                }
                Message::FileDone { file_id, status, size, digest } => {
                    let entry = self.file_entry(file_id)?.clone();
                    if bases.remove(&file_id).is_none() {
                        return Err(ProtocolError::Unexpected("FILE_DONE before SIG_REQUEST").into());
                    }
                    let inc = match current.take() {
                        Some(c) if c.id == file_id => Some(c),
                        Some(_) => return Err(ProtocolError::Unexpected("FILE_DONE for another file").into()),
                        None => None,
                    };
                    let reply = if status == FileStatus::Skipped {
                        self.push_report(&entry, 0, 0, FileOutcome::Failed);
                        FileStatus::Skipped
                    } else {
                        let inc = match inc {
                            Some(i) => i,
                            None => self.open_incoming(file_id)?,
                        };
                        self.finish_file(&entry, inc, size, digest)?
                    };
                    self.wire.send(&Message::FileDone { file_id, status: reply, size, digest })?;
                }
                Message::SessionDone => break,
                Message::Error { code, message } => return Err(SessionError::Remote { code, message }),
                _ => return Err(ProtocolError::Unexpected("message during file transfer").into()),
            }
        }
        if current.is_some() {
            return Err(ProtocolError::Unexpected("SESSION_DONE mid-file").into());
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.is_file() && !requested[i] {
                self.stats.files.push(FileReport {
                    path: e.path.clone(),
                    size: e.size,
                    literal_bytes: 0,
                    matched_bytes: 0,
                    outcome: FileOutcome::UpToDate,
                });
            }
        }
        self.stats.files.sort_by(|a, b| a.path.cmp(&b.path));
        self.apply_dir_metadata();
        self.wire.send(&Message::SessionDone)?;
        self.wire.flush()
    }

    fn file_entry(&self, id: u32) -> Result<&FileEntry, SessionError> {
        match self.entries.get(id as usize) {
            Some(e) if e.is_file() => Ok(e),
            _ => Err(ProtocolError::Malformed("file id").into()),
        }
    }

    fn materialize_non_files(&mut self) -> Result<(), SessionError> {
        for e in &self.entries {
            let target = resolve(self.dest, &e.path)?;
            let existing = fs::symlink_metadata(&target).ok();
            match &e.kind {
                EntryKind::File => {}
                EntryKind::Dir => {
                    if let Some(m) = &existing {
                        if m.is_dir() {
                            continue;
                        }
                        fs::remove_file(&target).map_err(|err| SessionError::io(target.display(), err))?;
                    }
                    fs::create_dir_all(&target).map_err(|err| SessionError::io(target.display(), err))?;
                }
                EntryKind::Symlink(link) => {
                    if let Some(m) = &existing {
                        if m.file_type().is_symlink() && fs::read_link(&target).is_ok_and(|t| t == Path::new(link)) {
                            continue;
                        }
                        if m.is_dir() {
                            warn!("{}: directory in the way of symlink; skipped", target.display());
                            continue;
                        }
                        fs::remove_file(&target).map_err(|err| SessionError::io(target.display(), err))?;
                    }
                    make_symlink(link, &target)?;
                }
            }
        }
        Ok(())
    }

    fn send_signatures(&mut self, id: u32, target: &Path, block_size: u32, whole: bool) -> Result<Basis, SessionError> {
        let existing = if whole {
            None
        } else {
            match fs::symlink_metadata(target) {
                Ok(m) if m.is_file() => Some(fs::read(target).map_err(|e| SessionError::io(target.display(), e))?),
                _ => None,
            }
        };
        let data = existing.as_deref().unwrap_or(&[]);
        let sigs = compute_signatures(data, block_size as usize)?;
        let blocks: Vec<(u32, [u8; 16])> = sigs.blocks().iter().map(|b| (b.weak, b.strong)).collect();
        let mut first = 0usize;
        loop {
            let end = (first + SIG_CHUNK).min(blocks.len());
            self.wire.send(&Message::Signatures {
                file_id: id,
                block_size,
                file_len: data.len() as u64,
                first: first as u32,
                blocks: blocks[first..end].to_vec(),
            })?;
            first = end;
            if first >= blocks.len() {
                break;
            }
        }
        let file = match existing {
            Some(_) => Some(File::open(target).map_err(|e| SessionError::io(target.display(), e))?),
            None => None,
        };
        Ok(Basis { file, block_size: block_size as u64, len: data.len() as u64 })
    }

    fn open_incoming(&self, id: u32) -> Result<Incoming, SessionError> {
        let entry = self.file_entry(id)?;
        let target = resolve(self.dest, &entry.path)?;
        let parent = target.parent().unwrap_or(self.dest);
        fs::create_dir_all(parent).map_err(|e| SessionError::io(parent.display(), e))?;
        let temp = tempfile::Builder::new()
            .prefix(".udrift.")
            .tempfile_in(parent)
            .map_err(|e| SessionError::io(parent.display(), e))?;
        Ok(Incoming {
            id,
            out: BufWriter::with_capacity(1 << 20, temp),
            digest: FileDigest::new(),
            written: 0,
            literal: 0,
            matched: 0,
        })
    }

    fn finish_file(
        &mut self,
        entry: &FileEntry,
        inc: Incoming,
        size: u64,
        digest: [u8; 16],
    ) -> Result<FileStatus, SessionError> {
        let target = resolve(self.dest, &entry.path)?;
        let Incoming { out, digest: ours, written, literal, matched, .. } = inc;
        let temp = out.into_inner().map_err(|e| SessionError::io(target.display(), e.into_error()))?;
        if written != size || ours.finish() != digest {
            warn!("{}: reconstructed file does not match sender digest", entry.path);
            return Ok(FileStatus::DigestMismatch);
        }
        let ctx = |e| SessionError::io(target.display(), e);
        set_mode(temp.as_file(), entry.mode).map_err(ctx)?;
        temp.as_file().set_modified(mtime(entry)).map_err(ctx)?;
        temp.persist(&target).map_err(|e| SessionError::io(target.display(), e.error))?;
        debug!("{}: {} literal, {} matched bytes", entry.path, literal, matched);
        self.stats.files_transferred += 1;
        self.stats.literal_bytes += literal;
        self.stats.matched_bytes += matched;
        self.push_report(entry, literal, matched, FileOutcome::Updated);
        Ok(FileStatus::Ok)
    }

    fn push_report(&mut self, e: &FileEntry, literal: u64, matched: u64, outcome: FileOutcome) {
        self.stats.files.push(FileReport { path: e.path.clone(), size: literal + matched, literal_bytes: literal, matched_bytes: matched, outcome });
    }

    /// Applies directory modes and mtimes deepest-first, after their
    /// contents have stopped changing.
    fn apply_dir_metadata(&self) {
        for e in self.entries.iter().rev().filter(|e| e.is_dir()) {
            let Ok(target) = resolve(self.dest, &e.path) else { continue };
            let res = File::open(&target).and_then(|f| {
                f.set_modified(mtime(e))?;
                set_mode(&f, e.mode)
            });
            if let Err(err) = res {
                warn!("{}: cannot apply metadata: {err}", target.display());
            }
        }
    }
}

fn apply_tokens(inc: &mut Incoming, basis: &mut Basis, tokens: &[crate::sync::DeltaToken]) -> Result<(), SessionError> {
    use crate::sync::DeltaToken;
    let mut buf = Vec::new();
    for t in tokens {
        let bytes: &[u8] = match t {
            DeltaToken::Literal(b) => {
                inc.literal += b.len() as u64;
                b
            }
            DeltaToken::Copy(i) => {
                let blocks = basis.len.div_ceil(basis.block_size);
                let Some(file) = basis.file.as_mut().filter(|_| (*i as u64) < blocks) else {
                    return Err(SyncError::CorruptDelta { index: *i, blocks: blocks as u32 }.into());
                };
                let offset = *i as u64 * basis.block_size;
                let len = basis.block_size.min(basis.len - offset) as usize;
                buf.resize(len, 0);
                file.seek(SeekFrom::Start(offset))
                    .and_then(|_| file.read_exact(&mut buf))
                    .map_err(|e| SessionError::io("reading basis file", e))?;
                inc.matched += len as u64;
                &buf
            }
        };
        inc.out.write_all(bytes).map_err(|e| SessionError::io("writing temporary file", e))?;
        inc.digest.update(bytes);
        inc.written += bytes.len() as u64;
    }
    Ok(())
}

/// Joins a validated relative path onto `root`, refusing to pass through
/// a symlinked ancestor.
fn resolve(root: &Path, rel: &str) -> Result<PathBuf, SessionError> {
    crate::sync::validate_path(rel).map_err(|_| ProtocolError::InvalidPath(rel.to_string()))?;
    let mut p = root.to_path_buf();
    let segments: Vec<&str> = rel.split('/').collect();
    for (i, seg) in segments.iter().enumerate() {
        p.push(seg);
        if i + 1 < segments.len() {
            match fs::symlink_metadata(&p) {
                Ok(m) if m.file_type().is_symlink() => return Err(ProtocolError::InvalidPath(rel.to_string()).into()),
                _ => {}
            }
        }
    }
    Ok(p)
}

fn mtime(e: &FileEntry) -> SystemTime {
    if e.mtime_secs >= 0 {
        UNIX_EPOCH + Duration::new(e.mtime_secs as u64, e.mtime_nanos)
    } else {
        UNIX_EPOCH - Duration::from_secs(e.mtime_secs.unsigned_abs()) + Duration::from_nanos(e.mtime_nanos as u64)
    }
}

#[cfg(unix)]
fn set_mode(f: &File, mode: u32) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    f.set_permissions(fs::Permissions::from_mode(mode & 0o7777))
}

#[cfg(not(unix))]
fn set_mode(f: &File, mode: u32) -> io::Result<()> {
    let mut p = f.metadata()?.permissions();
    p.set_readonly(mode & 0o222 == 0);
    f.set_permissions(p)
}

#[cfg(unix)]
fn make_symlink(link: &str, target: &Path) -> Result<(), SessionError> {
    std::os::unix::fs::symlink(link, target).map_err(|e| SessionError::io(target.display(), e))
}

#[cfg(not(unix))]
fn make_symlink(_link: &str, target: &Path) -> Result<(), SessionError> {
    warn!("{}: symlinks unsupported on this platform; skipped", target.display());
    Ok(())
}
