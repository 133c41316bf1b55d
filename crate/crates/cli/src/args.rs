//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "udrift",
    version,
    about = "rsync-style file sync over a rate-controlled UDP transport",
    args_conflicts_with_subcommands = true,
    subcommand_negates_reqs = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    #[command(flatten)]
    pub sync: SyncArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve a directory tree to udrift clients.
    Serve(ServeArgs),
    /// Time transfers and print a throughput/LLR table.
    Bench(BenchArgs),
    /// Measure sequential disk read and write speed.
    Probe(ProbeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CipherArg {
    None,
    Blowfish,
}

#[derive(Debug, Clone, Args)]
pub struct CipherOpts {
    /// Payload encryption.
    #[arg(long, value_enum, default_value = "none")]
    pub cipher: CipherArg,
    /// Pre-shared key file (raw bytes, or hex after a `hex:` prefix).
    /// Defaults to the hex key in UDRSYNC_KEY.
    #[arg(long, value_name = "PATH")]
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    /// Recurse into directories.
    #[arg(short, long)]
    pub recursive: bool,
    /// More output: -v lists files, -vv adds totals.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(flatten)]
    pub cipher: CipherOpts,
    /// Delta block size in bytes.
    #[arg(short = 'B', long, default_value_t = 2048, value_parser = clap::value_parser!(u32).range(64..))]
    pub block_size: u32,
    /// Sending rate cap in mbit/s.
    #[arg(long, alias = "bwcap", value_name = "MBPS")]
    pub bwlimit: Option<f64>,
    /// Send whole files instead of deltas.
    #[arg(short = 'W', long)]
    pub whole_file: bool,
    /// Compare by content instead of size and mtime.
    #[arg(short, long)]
    pub checksum: bool,
    /// Source: local path or host:port:path.
    #[arg(value_name = "SRC", required = true)]
    pub src: Option<String>,
    /// Destination: local path or host:port:path.
    #[arg(value_name = "DEST", required = true)]
    pub dest: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory served to clients.
    #[arg(long)]
    pub root: PathBuf,
    /// UDP port to listen on.
    #[arg(long)]
    pub port: u16,
    /// Address to bind.
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: String,
    /// Key enabling blowfish sessions (otherwise only plaintext is accepted).
    #[arg(long, value_name = "PATH")]
    pub key_file: Option<PathBuf>,
    /// Sending rate cap in mbit/s.
    #[arg(long, alias = "bwcap", value_name = "MBPS")]
    pub bwlimit: Option<f64>,
    /// Delta block size used when serving pulls.
    #[arg(short = 'B', long, default_value_t = 2048, value_parser = clap::value_parser!(u32).range(64..))]
    pub block_size: u32,
    /// Log verbosity (-vv info, -vvv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Udrift,
    StopAndWait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Markdown,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Synthetic dataset size (suffixes K, M, G are binary).
    #[arg(long, default_value = "64M", value_parser = parse_size)]
    pub size: u64,
    /// Send an existing file or directory instead of synthetic data.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Benchmark against a daemon (host:port:path) instead of an emulated link.
    #[arg(long, value_name = "HOST:PORT:PATH")]
    pub peer: Option<String>,
    /// Emulated round-trip time.
    #[arg(long, default_value_t = 104.0)]
    pub rtt_ms: f64,
    /// Emulated random loss fraction.
    #[arg(long, default_value_t = 0.001)]
    pub loss: f64,
    /// Emulated link capacity in mbit/s (0 = unlimited).
    #[arg(long, default_value_t = 100.0)]
    pub link_mbps: f64,
    /// Charge packet-processing CPU time to the emulated clock.
    #[arg(long)]
    pub charge_cpu: bool,
    /// Seed for the emulated link and synthetic data.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Sending rate cap in mbit/s (defaults to the link capacity).
    #[arg(long, alias = "bwcap", value_name = "MBPS")]
    pub bwlimit: Option<f64>,
    /// Ciphers to benchmark.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "none")]
    pub ciphers: Vec<CipherArg>,
    /// Tool modes to benchmark.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "udrift,stop-and-wait")]
    pub modes: Vec<ModeArg>,
    /// Timed runs per row; speed is total bytes over total time.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub repetitions: u32,
    /// Key for blowfish rows (defaults to UDRSYNC_KEY).
    #[arg(long, value_name = "PATH")]
    pub key_file: Option<PathBuf>,
    /// Table format for the report.
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: FormatArg,
    /// Emit one JSON object per row instead of a table.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Skip the disk probe and use these speeds (mbit/s) for LLR.
    #[arg(long, requires = "write_mbps")]
    pub read_mbps: Option<f64>,
    /// Destination write speed in mbit/s; used with --read-mbps.
    #[arg(long, requires = "read_mbps")]
    pub write_mbps: Option<f64>,
    /// Log verbosity (-vv info, -vvv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Directory to probe (defaults to the system temp dir).
    #[arg(long = "probe-dir", value_name = "DIR")]
    pub dir: Option<PathBuf>,
    /// Probe file size.
    #[arg(long = "probe-bytes", default_value = "256M", value_parser = parse_size)]
    pub bytes: u64,
}

pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, shift) = match s.char_indices().last() {
        Some((i, 'K' | 'k')) => (&s[..i], 10),
        Some((i, 'M' | 'm')) => (&s[..i], 20),
        Some((i, 'G' | 'g')) => (&s[..i], 30),
        _ => (s, 0),
    };
    let n: u64 = num.parse().map_err(|_| format!("invalid size {s:?}"))?;
    n.checked_shl(shift).filter(|v| v >> shift == n).ok_or_else(|| format!("size {s:?} too large"))
}

/// A sync endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Local(String),
    Remote { host: String, port: u16, path: String },
}

impl Endpoint {
    /// `host:port:path` (host may be a bracketed IPv6 literal) is remote;
    /// anything else is a local path.
    pub fn parse(s: &str) -> Endpoint {
        let (host, rest) = if let Some(stripped) = s.strip_prefix('[') {
            match stripped.split_once("]:") {
                Some((h, rest)) => (h.to_string(), rest),
                None => return Endpoint::Local(s.into()),
            }
        } else {
            match s.split_once(':') {
                Some((h, rest)) if !h.is_empty() && !h.contains('/') => (h.to_string(), rest),
                _ => return Endpoint::Local(s.into()),
            }
        };
        match rest.split_once(':') {
            Some((port, path)) if !port.is_empty() && port.bytes().all(|b| b.is_ascii_digit()) => match port.parse() {
                Ok(port) => Endpoint::Remote { host, port, path: path.into() },
                Err(_) => Endpoint::Local(s.into()),
            },
            _ => Endpoint::Local(s.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(Endpoint::parse("src/"), Endpoint::Local("src/".into()));
        assert_eq!(
            Endpoint::parse("host:9000:dst/"),
            Endpoint::Remote { host: "host".into(), port: 9000, path: "dst/".into() }
        );
        assert_eq!(
            Endpoint::parse("[::1]:9000:a:b"),
            Endpoint::Remote { host: "::1".into(), port: 9000, path: "a:b".into() }
        );
        assert_eq!(Endpoint::parse("host:9000:"), Endpoint::Remote { host: "host".into(), port: 9000, path: "".into() });
        assert_eq!(Endpoint::parse("a:b:c"), Endpoint::Local("a:b:c".into()));
        assert_eq!(Endpoint::parse("host:99999:x"), Endpoint::Local("host:99999:x".into()));
        assert_eq!(Endpoint::parse("./x:1:y"), Endpoint::Local("./x:1:y".into()));
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64M"), Ok(64 << 20));
        assert_eq!(parse_size("1024"), Ok(1024));
        assert_eq!(parse_size("2k"), Ok(2048));
        assert!(parse_size("x").is_err());
        assert!(parse_size("99999999999G").is_err());
    }

    #[test]
    fn parses_examples() {
        let cli = Cli::try_parse_from(["udrift", "-r", "src/", "host:9000:dst/"]).unwrap();
        assert!(cli.command.is_none());
        assert!(cli.sync.recursive);
        assert_eq!(cli.sync.cipher.cipher, CipherArg::None);
        let cli = Cli::try_parse_from(["udrift", "serve", "--root", "/data", "--port", "9000"]).unwrap();
        assert!(matches!(cli.command, Some(Command::Serve(ref s)) if s.port == 9000));
        assert!(Cli::try_parse_from(["udrift", "--bogus", "a", "b"]).is_err());
        assert!(Cli::try_parse_from(["udrift", "-B", "32", "a", "b"]).is_err());
        assert!(Cli::try_parse_from(["udrift", "only-one"]).is_err());
        assert!(Cli::try_parse_from(["udrift", "serve", "--port", "1"]).is_err());
    }
}
