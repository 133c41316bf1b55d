//! Client and daemon entry points.

use std::path::{Path, PathBuf};
use std::thread;

use super::codec::{Direction, Hello, Options, ProtocolError};
use super::receiver::run_receiver;
use super::sender::run_sender;
use super::wire::Wire;
use super::{fail, handshake, SessionError, SessionStats};
use crate::sync::{scan_source, validate_path, DEFAULT_BLOCK_SIZE};
use crate::transport::{CipherKind, SimConfig, SimNetwork, SimReport, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncOptions {
    pub options: Options,
    pub block_size: u32,
    pub cipher: CipherKind,
}

impl Default for SyncOptions {
    fn default() -> Self {
        SyncOptions { options: Options::default(), block_size: DEFAULT_BLOCK_SIZE as u32, cipher: CipherKind::None }
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub root: PathBuf,
    pub block_size: u32,
}

impl ServeConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ServeConfig { root: root.into(), block_size: DEFAULT_BLOCK_SIZE as u32 }
    }
}

/// Pushes a local source to `remote_dest` on the peer. `source` follows the
/// trailing-slash convention of [`scan_source`].
pub fn push(stream: &Stream, source: &str, remote_dest: &str, opts: &SyncOptions) -> Result<SessionStats, SessionError> {
    let (base, manifest) = scan_source(source, opts.options.recursive)?;
    let mut wire = Wire::new(stream);
    let mut hello = Hello::new(opts.cipher, opts.block_size, Direction::Push, opts.options, true);
    hello.path = remote_dest.to_string();
    let (_, params) = handshake(&mut wire, &hello)?;
    let mut stats = run_sender(&mut wire, &params, &base, &manifest)?;
    stats.warnings_from(manifest.warnings());
    close(&mut wire)?;
    Ok(stats)
}

/// Pulls `remote_source` from the peer into the local directory `dest`.
pub fn pull(stream: &Stream, remote_source: &str, dest: &Path, opts: &SyncOptions) -> Result<SessionStats, SessionError> {
    let mut wire = Wire::new(stream);
    let mut hello = Hello::new(opts.cipher, opts.block_size, Direction::Pull, opts.options, true);
    hello.path = remote_source.to_string();
    let (_, params) = handshake(&mut wire, &hello)?;
    let stats = run_receiver(&mut wire, &params, dest)?;
    close(&mut wire)?;
    Ok(stats)
}

/// Serves one accepted connection against `cfg.root`.
pub fn serve(stream: &Stream, cfg: &ServeConfig) -> Result<SessionStats, SessionError> {
    let mut wire = Wire::new(stream);
    let cipher = stream.params().cipher;
    let hello = Hello::new(cipher, cfg.block_size, Direction::Push, Options::default(), false);
    let (remote, params) = handshake(&mut wire, &hello)?;
    let stats = match params.direction {
        Direction::Push => {
            let dest = match under_root(&cfg.root, &remote.path) {
                Ok(d) => d,
                Err(e) => return Err(fail(&mut wire, e)),
            };
            run_receiver(&mut wire, &params, &dest)?
        }
        Direction::Pull => {
            let source = match under_root(&cfg.root, &remote.path) {
                Ok(s) => s,
                Err(e) => return Err(fail(&mut wire, e)),
            };
            let mut source = source.to_string_lossy().into_owned();
            if remote.path.is_empty() || remote.path.ends_with('/') {
                source.push('/');
            }
            let (base, manifest) = match scan_source(&source, params.options.recursive) {
                Ok(m) => m,
                Err(e) => return Err(fail(&mut wire, e.into())),
            };
            let mut stats = run_sender(&mut wire, &params, &base, &manifest)?;
            stats.warnings_from(manifest.warnings());
            stats
        }
    };
    close(&mut wire)?;
    Ok(stats)
}

/// Maps a peer-supplied path onto the served root. Empty, `.` and trailing
/// slashes are accepted; anything else must be canonical.
fn under_root(root: &Path, path: &str) -> Result<PathBuf, SessionError> {
    let trimmed = path.trim_end_matches('/');
    if trimmed.is_empty() || trimmed == "." {
        return Ok(root.to_path_buf());
    }
    validate_path(trimmed).map_err(|_| ProtocolError::InvalidPath(path.to_string()))?;
    Ok(root.join(trimmed))
}

fn close(wire: &mut Wire<'_>) -> Result<(), SessionError> {
    wire.flush()?;
    wire.stream().finish();
    wire.drain_to_end()?;
    wire.stream().close()?;
    Ok(())
}

/// Result of an in-process sync over the emulated network.
#[derive(Debug, Clone)]
pub struct LocalSync {
    pub sender: SessionStats,
    pub receiver: SessionStats,
    pub network: SimReport,
}

/// Syncs `source` into the local directory `dest` through an emulated
/// link, exercising the full protocol stack.
pub fn sync_local(source: &str, dest: &Path, opts: &SyncOptions, sim: SimConfig) -> Result<LocalSync, SessionError> {
    let (net, client, server) = SimNetwork::connect(sim)?;
    let serve_cfg = ServeConfig { root: dest.to_path_buf(), block_size: opts.block_size };
    let server_thread = thread::Builder::new()
        .name("udrift-local-serve".into())
        .spawn(move || {
            let r = serve(&server, &serve_cfg);
            drop(server);
            r
        })
        .map_err(|e| SessionError::io("spawning receiver", e))?;
    let sent = push(&client, source, "", opts);
    drop(client);
    let received = server_thread.join().unwrap_or(Err(SessionError::Disconnected));
    let network = net.finish();
    let sender = sent?;
    let receiver = received?;
    Ok(LocalSync { sender, receiver, network })
}
