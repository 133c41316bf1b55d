use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udrift::session::{
    self, handshake, Direction, ErrorCode, Hello, Message, Options, ServeConfig, SessionError, SyncOptions, Wire,
};
use udrift::sync::{EntryKind, FileEntry};
use udrift::transport::{CipherKind, LinkSpec, SimConfig, SimNetwork, TransportConfig};
use walkdir::WalkDir;

fn make_tree(root: &Path, seed: u64, files: usize, max_len: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..files {
        let depth = rng.gen_range(0..3);
        let mut dir = root.to_path_buf();
        for _ in 0..depth {
            dir.push(format!("d{}", rng.gen_range(0..4)));
        }
        fs::create_dir_all(&dir).unwrap();
        let len = match i % 5 {
            0 => 0,
            1 => 2048 * rng.gen_range(1..4),
            _ => rng.gen_range(1..max_len),
        };
        let mut data = vec![0u8; len];
        rng.fill(&mut data[..]);
        fs::write(dir.join(format!("f{i}.bin")), data).unwrap();
    }
}

/// Path -> (kind, bytes, mtime) for every entry under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, (bool, Vec<u8>, std::time::SystemTime)> {
    WalkDir::new(root)
        .min_depth(1)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| !e.file_type().is_dir())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            let meta = e.metadata().unwrap();
            (rel, (meta.is_file(), fs::read(e.path()).unwrap_or_default(), meta.modified().unwrap()))
        })
        .collect()
}

fn lossy(loss: f64, seed: u64) -> LinkSpec {
    LinkSpec::wan(20.0, 200.0, loss, seed)
}

fn sync(src: &Path, dst: &Path, opts: &SyncOptions, link: LinkSpec) -> session::LocalSync {
    let source = format!("{}/", src.display());
    session::sync_local(&source, dst, opts, SimConfig::new(TransportConfig::default(), link)).expect("sync")
}

fn recursive() -> SyncOptions {
    SyncOptions { options: Options { recursive: true, ..Options::default() }, ..SyncOptions::default() }
}

#[test]
fn tree_over_lossy_link_is_identical() {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    make_tree(src.path(), 1, 40, 200_000);
    let r = sync(src.path(), dst.path(), &recursive(), lossy(0.01, 3));
    assert_eq!(snapshot(src.path()), snapshot(dst.path()));
    assert_eq!(r.sender.files_transferred, 40);
    assert_eq!(r.receiver.files_transferred, 40);
    assert_eq!(r.sender.literal_bytes, r.receiver.literal_bytes);
    assert!(r.network.forward.lost > 0, "link should have dropped packets");
}

#[test]
fn resync_is_free_and_edits_are_small() {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    make_tree(src.path(), 2, 20, 100_000);
    sync(src.path(), dst.path(), &recursive(), lossy(0.0, 1));

    let again = sync(src.path(), dst.path(), &recursive(), lossy(0.0, 2));
    assert_eq!(again.sender.literal_bytes, 0);
    assert_eq!(again.sender.delta_messages, 0);
    assert_eq!(again.sender.files_transferred, 0);

    // With --checksum every file goes through the delta path but nothing
    // literal is sent.
    let mut opts = recursive();
    opts.options.checksum = true;
    let checked = sync(src.path(), dst.path(), &opts, lossy(0.0, 3));
    assert_eq!(checked.sender.files_transferred, 20);
    assert_eq!(checked.sender.literal_bytes, 0);

    // Rewrite one byte in the middle of the largest file.
    let (path, mut data) = WalkDir::new(src.path())
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().to_path_buf(), fs::read(e.path()).unwrap()))
        .max_by_key(|(_, d)| d.len())
        .unwrap();
    let mid = data.len() / 2;
    data[mid] ^= 0xff;
    fs::write(&path, &data).unwrap();
    let edited = sync(src.path(), dst.path(), &recursive(), lossy(0.0, 4));
    assert_eq!(edited.sender.files_transferred, 1);
    assert!(edited.sender.literal_bytes <= 2048, "literal {}", edited.sender.literal_bytes);
    assert_eq!(snapshot(src.path()), snapshot(dst.path()));
}

#[test]
fn whole_file_sends_everything() {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    make_tree(src.path(), 3, 10, 50_000);
    sync(src.path(), dst.path(), &recursive(), lossy(0.0, 1));
    let mut opts = recursive();
    opts.options.whole_file = true;
    opts.options.checksum = true;
    let r = sync(src.path(), dst.path(), &opts, lossy(0.0, 2));
    let total: u64 = snapshot(src.path()).values().map(|(_, d, _)| d.len() as u64).sum();
    assert_eq!(r.sender.literal_bytes, total);
}

#[test]
fn empty_source_sends_only_session_done() {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    let r = sync(src.path(), dst.path(), &recursive(), lossy(0.0, 1));
    assert_eq!(r.sender.files_total, 0);
    assert_eq!(r.sender.delta_messages, 0);
    assert!(snapshot(dst.path()).is_empty());
}

#[test]
fn source_without_trailing_slash_nests() {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    fs::create_dir(src.path().join("proj")).unwrap();
    fs::write(src.path().join("proj/a.txt"), b"hello").unwrap();
    let source = src.path().join("proj");
    session::sync_local(source.to_str().unwrap(), dst.path(), &recursive(), SimConfig::new(TransportConfig::default(), lossy(0.0, 1)))
        .unwrap();
    assert_eq!(fs::read(dst.path().join("proj/a.txt")).unwrap(), b"hello");
}

#[cfg(unix)]
#[test]
fn modes_and_symlinks_preserved() {
    use std::os::unix::fs::PermissionsExt;
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    fs::write(src.path().join("run.sh"), b"#!/bin/sh\n").unwrap();
    fs::set_permissions(src.path().join("run.sh"), fs::Permissions::from_mode(0o750)).unwrap();
    std::os::unix::fs::symlink("run.sh", src.path().join("link")).unwrap();
    sync(src.path(), dst.path(), &recursive(), lossy(0.0, 1));
    let mode = fs::metadata(dst.path().join("run.sh")).unwrap().permissions().mode() & 0o777;
    assert_eq!(mode, 0o750);
    assert_eq!(fs::read_link(dst.path().join("link")).unwrap(), Path::new("run.sh"));
}

fn pair(link: LinkSpec) -> (SimNetwork, udrift::transport::Stream, udrift::transport::Stream) {
    SimNetwork::connect(SimConfig::new(TransportConfig::default(), link)).unwrap()
}

#[test]
fn pull_mirrors_remote_tree() {
    let served = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    make_tree(&served.path().join("data"), 4, 15, 80_000);
    let (net, client, server) = pair(lossy(0.005, 9));
    let cfg = ServeConfig::new(served.path());
    let t = thread::spawn(move || session::serve(&server, &cfg));
    let stats = session::pull(&client, "data/", dst.path(), &recursive()).unwrap();
    drop(client);
    t.join().unwrap().unwrap();
    net.finish();
    assert_eq!(stats.files_transferred, 15);
    assert_eq!(snapshot(&served.path().join("data")), snapshot(dst.path()));
}

#[test]
fn escaping_destination_rejected() {
    let served = tempfile::tempdir().unwrap();
    let src = tempfile::tempdir().unwrap();
    fs::write(src.path().join("x"), b"1").unwrap();
    let (net, client, server) = pair(lossy(0.0, 1));
    let cfg = ServeConfig::new(served.path().join("root"));
    let t = thread::spawn(move || session::serve(&server, &cfg));
    let err = session::push(&client, &format!("{}/", src.path().display()), "../escape", &recursive()).unwrap_err();
    drop(client);
    let server_err = t.join().unwrap().unwrap_err();
    net.finish();
    assert!(matches!(err, SessionError::Partial { ref cause, .. } if matches!(**cause, SessionError::Remote { code: ErrorCode::Path, .. })), "{err:?}");
    assert!(matches!(server_err, SessionError::Protocol(_)), "{server_err:?}");
    assert!(!served.path().join("escape").exists());
}

#[test]
fn cipher_mismatch_reported() {
    let (net, client, server) = pair(lossy(0.0, 1));
    let t = thread::spawn(move || {
        let mut wire = Wire::new(&server);
        let mut hello = Hello::new(CipherKind::None, 2048, Direction::Push, Options::default(), false);
        hello.ciphers = 1;
        handshake(&mut wire, &hello).map(|_| ())
    });
    let mut wire = Wire::new(&client);
    let hello = Hello::new(CipherKind::Blowfish, 2048, Direction::Push, Options::default(), true);
    let local = handshake(&mut wire, &hello).unwrap_err();
    drop(wire);
    drop(client);
    let remote = t.join().unwrap().unwrap_err();
    net.finish();
    assert!(local.is_negotiation(), "{local:?}");
    assert!(matches!(remote, SessionError::Cipher { requested: CipherKind::Blowfish }));
}

/// Sends part of a file and then vanishes; the receiver must leave neither
/// a partial final file nor a temporary behind, and an existing file must
/// keep its old contents.
#[test]
fn interrupted_transfer_leaves_no_partial_file() {
    let served = tempfile::tempdir().unwrap();
    fs::write(served.path().join("keep.bin"), b"old contents").unwrap();
    let (net, client, server) = pair(lossy(0.0, 1));
    let cfg = ServeConfig::new(served.path());
    let t = thread::spawn(move || session::serve(&server, &cfg));

    let mut wire = Wire::new(&client);
    let hello = Hello::new(CipherKind::None, 2048, Direction::Push, Options::default(), true);
    handshake(&mut wire, &hello).unwrap();
    let entry = |path: &str| FileEntry {
        path: path.into(),
        size: 1 << 20,
        mtime_secs: 1,
        mtime_nanos: 0,
        mode: 0o644,
        kind: EntryKind::File,
    };
    wire.send(&Message::FileList(vec![entry("keep.bin"), entry("new.bin")])).unwrap();
    assert!(matches!(wire.recv().unwrap(), Message::FileList(v) if v.len() == 1));
    for id in 0..2 {
        wire.send(&Message::SigRequest { file_id: id, block_size: 2048, whole_file: false }).unwrap();
        assert!(matches!(wire.recv().unwrap(), Message::Signatures { .. }));
    }
    wire.send(&Message::Delta { file_id: 0, tokens: vec![udrift::sync::DeltaToken::Literal(vec![7; 60_000])] })
        .unwrap();
    wire.flush().unwrap();
    drop(wire);
    drop(client);

    let err = t.join().unwrap().unwrap_err();
    net.finish();
    assert!(matches!(err, SessionError::Disconnected | SessionError::Transport(_)), "{err:?}");
    assert_eq!(fs::read(served.path().join("keep.bin")).unwrap(), b"old contents");
    assert!(!served.path().join("new.bin").exists());
    let leftovers: Vec<_> = fs::read_dir(served.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers, vec![std::ffi::OsString::from("keep.bin")]);
}

#[test]
fn corrupt_copy_index_aborts() {
    let served = tempfile::tempdir().unwrap();
    let (net, client, server) = pair(lossy(0.0, 1));
    let cfg = ServeConfig::new(served.path());
    let t = thread::spawn(move || session::serve(&server, &cfg));
    let mut wire = Wire::new(&client);
    handshake(&mut wire, &Hello::new(CipherKind::None, 2048, Direction::Push, Options::default(), true)).unwrap();
    let entry =
        FileEntry { path: "f".into(), size: 1, mtime_secs: 0, mtime_nanos: 0, mode: 0o644, kind: EntryKind::File };
    wire.send(&Message::FileList(vec![entry])).unwrap();
    wire.recv().unwrap();
    wire.send(&Message::SigRequest { file_id: 0, block_size: 2048, whole_file: false }).unwrap();
    wire.recv().unwrap();
    wire.send(&Message::Delta { file_id: 0, tokens: vec![udrift::sync::DeltaToken::Copy(5)] }).unwrap();
    let reply = wire.recv().unwrap();
    assert!(matches!(reply, Message::Error { code: ErrorCode::Protocol, .. }), "{reply:?}");
    drop(wire);
    drop(client);
    assert!(t.join().unwrap().is_err());
    net.finish();
    assert!(!served.path().join("f").exists());
}
