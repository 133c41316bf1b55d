mod args;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;

use clap::Parser;
use log::{error, info, warn};
use udrift::bench::{self, BenchConfig, Dataset, DiskProbe, Format, Peer, ToolMode};
use udrift::cipher::{load_key, CipherError};
use udrift::session::{self, FileOutcome, Options, ServeConfig, SessionError, SessionStats, SyncOptions};
use udrift::transport::{self, CipherKind, LinkSpec, Listener, SimConfig, TransportConfig, TransportError};

use args::{BenchArgs, CipherArg, Cli, Command, Endpoint, FormatArg, ModeArg, ProbeArgs, ServeArgs, SyncArgs};

const EXIT_PARTIAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CIPHER: u8 = 3;
const EXIT_CONNECT: u8 = 4;

/// A failure carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        let code = if e.is_negotiation() { EXIT_CIPHER } else { EXIT_PARTIAL };
        Failure::new(code, e.to_string())
    }
}

fn connect_failure(e: TransportError) -> Failure {
    match e {
        TransportError::CipherUnavailable | TransportError::HandshakeRejected { .. } => {
            Failure::new(EXIT_CIPHER, format!("handshake refused: {e}"))
        }
        e => Failure::new(EXIT_CONNECT, format!("connect failed: {e}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let verbose = match &cli.command {
        Some(Command::Serve(s)) => s.verbose,
        Some(Command::Bench(b)) => b.verbose,
        Some(Command::Probe(_)) => 0,
        None => cli.sync.verbose,
    };
    let default_level = match verbose {
        0..=1 => "warn",
        2 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .target(env_logger::Target::Stderr)
        .init();

    let result = match cli.command {
        Some(Command::Serve(a)) => serve(a),
        Some(Command::Bench(a)) => run_bench(a),
        Some(Command::Probe(a)) => probe(a),
        None => sync(cli.sync),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("udrift: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cipher_kind(c: CipherArg) -> CipherKind {
    match c {
        CipherArg::None => CipherKind::None,
        CipherArg::Blowfish => CipherKind::Blowfish,
    }
}

/// Loads the key when `required`, or opportunistically from an explicit
/// key file.
fn key_for(required: bool, key_file: Option<&Path>) -> Result<Option<Vec<u8>>, Failure> {
    if !required && key_file.is_none() {
        return Ok(None);
    }
    match load_key(key_file) {
        Ok(k) => Ok(Some(k)),
        Err(CipherError::Missing) => {
            Err(Failure::new(EXIT_USAGE, "blowfish needs a key: pass --key-file or set UDRSYNC_KEY"))
        }
        Err(e) => Err(Failure::new(EXIT_CIPHER, e.to_string())),
    }
}

fn sync(a: SyncArgs) -> Result<(), Failure> {
    let src = Endpoint::parse(a.src.as_deref().unwrap_or_default());
    let dest = Endpoint::parse(a.dest.as_deref().unwrap_or_default());
    let cipher = cipher_kind(a.cipher.cipher);
    let key = key_for(cipher == CipherKind::Blowfish, a.cipher.key_file.as_deref())?;
    let opts = SyncOptions {
        options: Options { recursive: a.recursive, checksum: a.checksum, whole_file: a.whole_file },
        block_size: a.block_size,
        cipher,
    };
    let transport = |default_cap: f64| TransportConfig {
        cipher,
        key: key.clone(),
        bandwidth_cap_mbps: a.bwlimit.unwrap_or(default_cap),
        ..TransportConfig::default()
    };
    let local_source = |p: &str| {
        if Path::new(p).symlink_metadata().is_err() {
            return Err(Failure::new(EXIT_PARTIAL, format!("{p}: no such file or directory")));
        }
        Ok(())
    };

    let stats = match (src, dest) {
        (Endpoint::Remote { .. }, Endpoint::Remote { .. }) => {
            return Err(Failure::new(EXIT_USAGE, "source and destination cannot both be remote"));
        }
        (Endpoint::Local(s), Endpoint::Remote { host, port, path }) => {
            local_source(&s)?;
            let stream = transport::connect((host.as_str(), port), transport(1000.0)).map_err(connect_failure)?;
            session::push(&stream, &s, &path, &opts)?
        }
        (Endpoint::Remote { host, port, path }, Endpoint::Local(d)) => {
            let stream = transport::connect((host.as_str(), port), transport(1000.0)).map_err(connect_failure)?;
            session::pull(&stream, &path, Path::new(&d), &opts)?
        }
        (Endpoint::Local(s), Endpoint::Local(d)) => {
            local_source(&s)?;
            let sim = SimConfig::new(transport(10_000.0), LinkSpec::default());
            session::sync_local(&s, Path::new(&d), &opts, sim)?.sender
        }
    };
    report_sync(&stats, a.verbose);
    let failed: Vec<_> = stats.failed().map(|f| f.path.as_str()).collect();
    if !failed.is_empty() || !stats.warnings.is_empty() {
        for w in &stats.warnings {
            warn!("{w}");
        }
        return Err(Failure::new(EXIT_PARTIAL, format!("{} file(s) not transferred: {}", failed.len(), failed.join(", "))));
    }
    Ok(())
}

fn report_sync(stats: &SessionStats, verbose: u8) {
    let mut out = std::io::stdout().lock();
    if verbose >= 1 {
        for f in &stats.files {
            match f.outcome {
                FileOutcome::Updated => {
                    let _ = writeln!(out, "{}", f.path);
                }
                FileOutcome::UpToDate if verbose >= 2 => {
                    let _ = writeln!(out, "{} is uptodate", f.path);
                }
                FileOutcome::Failed => eprintln!("udrift: {}: failed", f.path),
                _ => {}
            }
        }
    }
    if verbose >= 2 {
        let secs = stats.elapsed_us as f64 / 1e6;
        let speed = if secs > 0.0 { bench::mbps(stats.file_bytes(), secs) } else { 0.0 };
        let _ = writeln!(
            out,
            "{} bytes transferred, {} bytes matched, {} files updated of {}",
            stats.literal_bytes, stats.matched_bytes, stats.files_transferred, stats.files_total
        );
        let _ = writeln!(out, "{:.3} s, {:.2} mbit/s", secs, speed);
    }
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    if !a.root.is_dir() {
        return Err(Failure::new(EXIT_USAGE, format!("{}: not a directory", a.root.display())));
    }
    let key = key_for(false, a.key_file.as_deref())?;
    let cfg = TransportConfig {
        key,
        bandwidth_cap_mbps: a.bwlimit.unwrap_or(1000.0),
        ..TransportConfig::default()
    };
    let listener = Listener::bind((a.bind.as_str(), a.port), cfg)
        .map_err(|e| Failure::new(EXIT_CONNECT, format!("bind {}:{}: {e}", a.bind, a.port)))?;
    let serve_cfg = Arc::new(ServeConfig { root: a.root.clone(), block_size: a.block_size });
    info!("serving {} on {}", a.root.display(), listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    loop {
        let stream = listener.accept().map_err(|e| Failure::new(EXIT_CONNECT, e.to_string()))?;
        let cfg = serve_cfg.clone();
        let spawned = thread::Builder::new().name("udrift-session".into()).spawn(move || {
            match session::serve(&stream, &cfg) {
                Ok(s) => info!(
                    "session done: {} files updated, {} literal bytes",
                    s.files_transferred, s.literal_bytes
                ),
                Err(e) => error!("session failed: {e}"),
            }
        });
        if let Err(e) = spawned {
            error!("cannot start session thread: {e}");
        }
    }
}

fn run_probe(p: &ProbeArgs) -> Result<DiskProbe, Failure> {
    let dir = p.dir.clone().unwrap_or_else(std::env::temp_dir);
    bench::probe_disk(&dir, p.bytes).map_err(|e| Failure::new(EXIT_PARTIAL, format!("disk probe: {e}")))
}

fn probe(a: ProbeArgs) -> Result<(), Failure> {
    let p = run_probe(&a)?;
    println!("read_mbps\twrite_mbps\tbytes");
    println!("{:.0}\t{:.0}\t{}", p.read_mbps, p.write_mbps, p.bytes);
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), Failure> {
    let ciphers: Vec<CipherKind> = a.ciphers.iter().copied().map(cipher_kind).collect();
    let key = key_for(ciphers.contains(&CipherKind::Blowfish), a.key_file.as_deref())?;
    let probe = match (a.read_mbps, a.write_mbps) {
        (Some(r), Some(w)) if r > 0.0 && w > 0.0 => DiskProbe { read_mbps: r, write_mbps: w, bytes: 0 },
        (Some(_), Some(_)) => return Err(Failure::new(EXIT_USAGE, "disk speeds must be positive")),
        _ => run_probe(&a.probe)?,
    };
    let peer = match &a.peer {
        Some(spec) => match Endpoint::parse(spec) {
            Endpoint::Remote { host, port, path } => Peer::Remote { addr: format!("{host}:{port}"), path },
            Endpoint::Local(_) => return Err(Failure::new(EXIT_USAGE, "--peer must be host:port:path")),
        },
        None => Peer::Emulated {
            link: LinkSpec::wan(a.rtt_ms, a.link_mbps, a.loss, a.seed),
            charge_cpu: a.charge_cpu,
        },
    };
    let dataset = match a.dataset {
        Some(p) => Dataset::Path(p),
        None => Dataset::Synthetic { bytes: a.size, seed: a.seed },
    };
    let mut cfg = BenchConfig::new(dataset, peer, probe);
    cfg.ciphers = ciphers;
    cfg.modes = a
        .modes
        .iter()
        .map(|m| match m {
            ModeArg::Udrift => ToolMode::Udrift,
            ModeArg::StopAndWait => ToolMode::StopAndWait,
        })
        .collect();
    cfg.key = key;
    cfg.repetitions = a.repetitions;
    cfg.bandwidth_cap_mbps = a.bwlimit.unwrap_or(if a.link_mbps > 0.0 { a.link_mbps } else { 1000.0 });
    let report = bench::run_benchmark(&cfg).map_err(|e| Failure::new(EXIT_PARTIAL, e.to_string()))?;
    let text = if a.json {
        bench::render_json(&report)
    } else {
        let format = match a.format {
            FormatArg::Tsv => Format::Tsv,
            FormatArg::Markdown => Format::Markdown,
        };
        bench::render_report(&report, format)
    };
    print!("{text}");
    if report.any_failed() {
        for row in report.rows.iter().filter(|r| r.failed.is_some()) {
            eprintln!("udrift: {}/{}: {}", row.label, row.cipher, row.failed.as_deref().unwrap_or_default());
        }
        return Err(Failure::new(EXIT_PARTIAL, "some benchmark rows failed"));
    }
    Ok(())
}
