//! Sequential disk throughput probes.
//!
//! Writes use 4 MiB buffers of incompressible data and end with `fsync`
//! before the clock stops. Reads ask the kernel to drop cached pages first
//! (Linux only; elsewhere a read probe may be served from cache).

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{mbps, BenchError};

const BUF: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiskProbe {
    pub read_mbps: f64,
    pub write_mbps: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub bytes: u64,
    pub seconds: f64,
}

impl Measured {
    pub fn mbps(&self) -> f64 {
        mbps(self.bytes, self.seconds)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> BenchError {
    BenchError::Io(format!("{}: {e}", path.display()))
}

fn check_size(bytes: u64) -> Result<(), BenchError> {
    if bytes == 0 {
        return Err(BenchError::Domain("probe size must be positive".into()));
    }
    Ok(())
}

/// Writes `bytes` to `path` (created or truncated) and syncs it.
pub fn measure_write(path: &Path, bytes: u64) -> Result<Measured, BenchError> {
    check_size(bytes)?;
    let mut buf = vec![0u8; BUF];
    ChaCha8Rng::seed_from_u64(bytes).fill_bytes(&mut buf);
    let start = Instant::now();
    let mut f = OpenOptions::new().write(true).create(true).truncate(true).open(path).map_err(|e| io_err(path, e))?;
    let mut left = bytes;
    while left > 0 {
        let n = left.min(BUF as u64) as usize;
        f.write_all(&buf[..n]).map_err(|e| io_err(path, e))?;
        left -= n as u64;
    }
    f.sync_all().map_err(|e| io_err(path, e))?;
    Ok(Measured { bytes, seconds: start.elapsed().as_secs_f64() })
}

/// Reads the first `bytes` of `path`; a shorter file is an error.
pub fn measure_read(path: &Path, bytes: u64) -> Result<Measured, BenchError> {
    check_size(bytes)?;
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    drop_cache(&f);
    let mut buf = vec![0u8; BUF];
    let start = Instant::now();
    let mut got = 0u64;
    while got < bytes {
        let want = (bytes - got).min(BUF as u64) as usize;
        let n = f.read(&mut buf[..want]).map_err(|e| io_err(path, e))?;
        if n == 0 {
            return Err(BenchError::Io(format!("{}: only {got} of {bytes} bytes readable", path.display())));
        }
        got += n as u64;
    }
    Ok(Measured { bytes: got, seconds: start.elapsed().as_secs_f64() })
}

pub fn probe_disk_write(path: &Path, bytes: u64) -> Result<f64, BenchError> {
    measure_write(path, bytes).map(|m| m.mbps())
}

pub fn probe_disk_read(path: &Path, bytes: u64) -> Result<f64, BenchError> {
    measure_read(path, bytes).map(|m| m.mbps())
}

/// Write-then-read probe through a scratch file in `dir`.
pub fn probe_disk(dir: &Path, bytes: u64) -> Result<DiskProbe, BenchError> {
    let scratch = tempfile::Builder::new()
        .prefix(".udrift-probe.")
        .tempfile_in(dir)
        .map_err(|e| io_err(dir, e))?
        .into_temp_path();
    let w = measure_write(&scratch, bytes)?;
    let r = measure_read(&scratch, bytes)?;
    let _ = fs::remove_file(&scratch);
    Ok(DiskProbe { read_mbps: r.mbps(), write_mbps: w.mbps(), bytes })
}

#[cfg(target_os = "linux")]
fn drop_cache(f: &File) {
    use std::os::unix::io::AsRawFd;
    // Best effort; failure just means a warmer cache.
    unsafe {
        libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED);
    }
}

#[cfg(not(target_os = "linux"))]
fn drop_cache(_f: &File) {}
