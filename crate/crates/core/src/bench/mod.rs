//! Benchmark harness: disk probes, timed transfers, long-distance-to-local
//! ratio (LLR), speedups, and table rendering.

mod probe;
mod report;
mod run;

pub use probe::{measure_read, measure_write, probe_disk, probe_disk_read, probe_disk_write, DiskProbe, Measured};
pub use report::{parse_markdown, render_json, render_report, Format};
pub use run::{run_benchmark, BenchConfig, Dataset, Peer, ToolMode};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{0}")]
    Io(String),
}

/// Megabits (10^6 bits) per second.
pub fn mbps(bytes: u64, seconds: f64) -> f64 {
    bytes as f64 * 8.0 / seconds / 1e6
}

/// Transfer speed over the slower of source read and destination write.
pub fn llr(transfer_mbps: f64, src_read_mbps: f64, dst_write_mbps: f64) -> Result<f64, BenchError> {
    for (name, v) in [("transfer", transfer_mbps), ("read", src_read_mbps), ("write", dst_write_mbps)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(BenchError::Domain(format!("{name} speed must be positive, got {v}")));
        }
    }
    Ok(transfer_mbps / src_read_mbps.min(dst_write_mbps))
}

/// `100 * (new - base) / base`, rounded half-up to an integer.
pub fn speedup_percent(new_mbps: f64, base_mbps: f64) -> Result<i64, BenchError> {
    if !(base_mbps.is_finite() && base_mbps > 0.0) || !new_mbps.is_finite() {
        return Err(BenchError::Domain(format!("baseline speed must be positive, got {base_mbps}")));
    }
    Ok(round_half_up(100.0 * (new_mbps - base_mbps) / base_mbps, 0) as i64)
}

/// Rounds half away from zero at `places` decimals. A relative nudge of
/// 1e-9 keeps exact decimal halves (like 0.125) from being lost to binary
/// representation error.
pub fn round_half_up(x: f64, places: u32) -> f64 {
    let scale = 10f64.powi(places as i32);
    let scaled = x * scale;
    let nudged = scaled.abs() * (1.0 + 1e-9);
    (nudged + 0.5).floor().copysign(scaled) / scale
}

/// Formats `x` rounded half-up to two decimals.
pub fn format_2dp(x: f64) -> String {
    format!("{:.2}", round_half_up(x, 2))
}

/// One timed transfer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferStats {
    pub label: String,
    pub cipher: String,
    pub bytes: u64,
    pub seconds: f64,
}

impl TransferStats {
    pub fn mbps(&self) -> f64 {
        mbps(self.bytes, self.seconds)
    }
}

/// One (tool mode, cipher) row: repetitions averaged, raw runs kept.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub cipher: String,
    pub mbps: f64,
    pub llr: f64,
    pub bytes: u64,
    pub seconds: f64,
    pub runs: Vec<TransferStats>,
    pub failed: Option<String>,
}

impl BenchRow {
    /// A row from averaged runs, with LLR under `probe`.
    pub fn from_runs(label: &str, cipher: &str, runs: Vec<TransferStats>, probe: &DiskProbe) -> BenchRow {
        let n = runs.len().max(1) as f64;
        let bytes = (runs.iter().map(|r| r.bytes as f64).sum::<f64>() / n).round() as u64;
        let seconds = runs.iter().map(|r| r.seconds).sum::<f64>() / n;
        let speed = mbps(bytes, seconds);
        let llr = llr(speed, probe.read_mbps, probe.write_mbps).unwrap_or(0.0);
        BenchRow { label: label.into(), cipher: cipher.into(), mbps: speed, llr, bytes, seconds, runs, failed: None }
    }

    /// A row known only by its speed, e.g. a published measurement.
    pub fn from_speed(label: &str, cipher: &str, speed_mbps: f64, probe: &DiskProbe) -> Result<BenchRow, BenchError> {
        Ok(BenchRow {
            label: label.into(),
            cipher: cipher.into(),
            mbps: speed_mbps,
            llr: llr(speed_mbps, probe.read_mbps, probe.write_mbps)?,
            bytes: 0,
            seconds: 0.0,
            runs: Vec::new(),
            failed: None,
        })
    }

    pub fn failed(label: &str, cipher: &str, reason: String) -> BenchRow {
        BenchRow {
            label: label.into(),
            cipher: cipher.into(),
            mbps: 0.0,
            llr: 0.0,
            bytes: 0,
            seconds: 0.0,
            runs: Vec::new(),
            failed: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub probe: DiskProbe,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llr_examples() {
        assert_eq!(format_2dp(llr(752.0, 3072.0, 1136.0).unwrap()), "0.66");
        assert_eq!(format_2dp(llr(401.0, 3072.0, 1136.0).unwrap()), "0.35");
        assert_eq!(llr(1136.0, 3072.0, 1136.0).unwrap(), 1.0);
        assert!(llr(0.0, 1.0, 1.0).is_err());
        assert!(llr(1.0, -1.0, 1.0).is_err());
        assert!(llr(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn llr_scale_invariant_and_monotone() {
        // Exact in binary: powers of two scale without rounding.
        for k in [0.25, 2.0, 1024.0] {
            assert_eq!(llr(300.0 * k, 900.0 * k, 600.0 * k).unwrap(), llr(300.0, 900.0, 600.0).unwrap());
        }
        assert!(llr(301.0, 900.0, 600.0).unwrap() > llr(300.0, 900.0, 600.0).unwrap());
        assert!(llr(300.0, 900.0, 700.0).unwrap() < llr(300.0, 900.0, 600.0).unwrap());
        assert_eq!(llr(300.0, 2000.0, 600.0).unwrap(), llr(300.0, 900.0, 600.0).unwrap());
    }

    #[test]
    fn speedups() {
        assert_eq!(speedup_percent(752.0, 401.0).unwrap(), 88);
        assert_eq!(speedup_percent(394.0, 280.0).unwrap(), 41);
        assert_eq!(speedup_percent(5.0, 5.0).unwrap(), 0);
        assert_eq!(speedup_percent(50.0, 100.0).unwrap(), -50);
        assert!(speedup_percent(1.0, 0.0).is_err());
    }

    #[test]
    fn half_up() {
        assert_eq!(round_half_up(0.125, 2), 0.13);
        assert_eq!(round_half_up(0.345, 2), 0.35);
        assert_eq!(round_half_up(1.005, 2), 1.01);
        assert_eq!(round_half_up(0.3449, 2), 0.34);
        assert_eq!(round_half_up(87.5, 0), 88.0);
        assert_eq!(round_half_up(-2.5, 0), -3.0);
    }

    #[test]
    fn mbps_is_decimal() {
        assert_eq!(mbps(125_000_000, 1.0), 1000.0);
        let t = TransferStats { label: "x".into(), cipher: "none".into(), bytes: 1_000_000, seconds: 8.0 };
        assert_eq!(t.mbps(), 1.0);
    }
}
