//! Timed transfers for benchmark rows.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BenchError, BenchReport, BenchRow, DiskProbe, TransferStats};
use crate::session::{self, Options, SessionError, SessionStats, SyncOptions};
use crate::sync::DEFAULT_BLOCK_SIZE;
use crate::transport::{self, CipherKind, LinkSpec, SimConfig, TransportConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolMode {
    /// The rate-controlled transport.
    Udrift,
    /// The same stack with one packet in flight: a window-limited baseline.
    StopAndWait,
}

impl ToolMode {
    pub fn label(self) -> &'static str {
        match self {
            ToolMode::Udrift => "udrift",
            ToolMode::StopAndWait => "stop-and-wait",
        }
    }
}

pub fn cipher_label(c: CipherKind) -> &'static str {
    match c {
        CipherKind::None => "none",
        CipherKind::Blowfish => "blowfish",
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    /// One file of incompressible bytes.
    Synthetic { bytes: u64, seed: u64 },
    /// An existing file or directory, sent recursively.
    Path(PathBuf),
}

#[derive(Debug, Clone)]
pub enum Peer {
    /// In-process emulated link. Timing is emulated link time; with
    /// `charge_cpu` packet-processing cost is charged too.
    Emulated { link: LinkSpec, charge_cpu: bool },
    /// A `udrift serve` daemon; `path` is the destination under its root.
    Remote { addr: String, path: String },
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dataset: Dataset,
    pub peer: Peer,
    pub modes: Vec<ToolMode>,
    pub ciphers: Vec<CipherKind>,
    pub key: Option<Vec<u8>>,
    pub repetitions: u32,
    pub bandwidth_cap_mbps: f64,
    pub block_size: u32,
    pub probe: DiskProbe,
    /// Directory for synthetic data and emulated destinations.
    pub scratch: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(dataset: Dataset, peer: Peer, probe: DiskProbe) -> Self {
        BenchConfig {
            dataset,
            peer,
            modes: vec![ToolMode::Udrift, ToolMode::StopAndWait],
            ciphers: vec![CipherKind::None],
            key: None,
            repetitions: 1,
            bandwidth_cap_mbps: 1000.0,
            block_size: DEFAULT_BLOCK_SIZE as u32,
            probe,
            scratch: None,
        }
    }
}

/// Runs every (cipher, mode) combination `repetitions` times. A failed
/// transfer marks its row failed; the report is still produced.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let scratch = match &cfg.scratch {
        Some(dir) => tempfile::Builder::new().prefix("udrift-bench.").tempdir_in(dir),
        None => tempfile::Builder::new().prefix("udrift-bench.").tempdir(),
    }
    .map_err(|e| BenchError::Io(format!("scratch directory: {e}")))?;
    let source = match &cfg.dataset {
        Dataset::Synthetic { bytes, seed } => {
            let dir = scratch.path().join("src");
            fs::create_dir(&dir).map_err(|e| BenchError::Io(e.to_string()))?;
            write_synthetic(&dir.join("synthetic.bin"), *bytes, *seed)?;
            format!("{}/", dir.display())
        }
        Dataset::Path(p) => {
            let s = p.to_string_lossy().into_owned();
            if p.is_dir() && !s.ends_with('/') {
                format!("{s}/")
            } else {
                s
            }
        }
    };

    let mut rows = Vec::new();
    for &cipher in &cfg.ciphers {
        for &mode in &cfg.modes {
            let (label, clabel) = (mode.label(), cipher_label(cipher));
            let mut runs = Vec::new();
            let mut failure = None;
            for rep in 0..cfg.repetitions.max(1) {
                match run_once(cfg, &source, scratch.path(), mode, cipher, rep) {
                    Ok(stats) => {
                        let t = TransferStats {
                            label: label.into(),
                            cipher: clabel.into(),
                            bytes: stats.file_bytes(),
                            seconds: stats.elapsed_us as f64 / 1e6,
                        };
                        info!("{label}/{clabel} run {rep}: {:.1} mbit/s", t.mbps());
                        runs.push(t);
                    }
                    Err(e) => {
                        warn!("{label}/{clabel} run {rep} failed: {e}");
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            rows.push(match failure {
                Some(reason) => BenchRow { runs, ..BenchRow::failed(label, clabel, reason) },
                None => BenchRow::from_runs(label, clabel, runs, &cfg.probe),
            });
        }
    }
    Ok(BenchReport { probe: cfg.probe, rows })
}

fn run_once(
    cfg: &BenchConfig,
    source: &str,
    scratch: &Path,
    mode: ToolMode,
    cipher: CipherKind,
    rep: u32,
) -> Result<SessionStats, SessionError> {
    let transport = TransportConfig {
        cipher,
        key: cfg.key.clone(),
        bandwidth_cap_mbps: cfg.bandwidth_cap_mbps,
        stop_and_wait: mode == ToolMode::StopAndWait,
        ..TransportConfig::default()
    };
    let opts = SyncOptions {
        options: Options { recursive: true, checksum: true, whole_file: true },
        block_size: cfg.block_size,
        cipher,
    };
    let stats = match &cfg.peer {
        Peer::Emulated { link, charge_cpu } => {
            let dest = tempfile::Builder::new()
                .prefix("dst.")
                .tempdir_in(scratch)
                .map_err(|e| SessionError::io("destination", e))?;
            let link = LinkSpec { seed: link.seed.wrapping_add(rep as u64), ..link.clone() };
            let mut sim = SimConfig::new(transport, link);
            sim.charge_cpu = *charge_cpu;
            session::sync_local(source, dest.path(), &opts, sim)?.sender
        }
        Peer::Remote { addr, path } => {
            let stream = transport::connect(addr.as_str(), transport)?;
            session::push(&stream, source, path, &opts)?
        }
    };
    if let Some(f) = stats.failed().next() {
        return Err(SessionError::Io(format!("{} failed to transfer", f.path)));
    }
    Ok(stats)
}

fn write_synthetic(path: &Path, bytes: u64, seed: u64) -> Result<(), BenchError> {
    let err = |e: std::io::Error| BenchError::Io(format!("{}: {e}", path.display()));
    let mut f = File::create(path).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0u8; 1 << 20];
    let mut left = bytes;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        rng.fill_bytes(&mut buf[..n]);
        f.write_all(&buf[..n]).map_err(err)?;
        left -= n as u64;
    }
    Ok(())
}
