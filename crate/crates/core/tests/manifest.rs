use std::fs;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udrift::sync::{scan_source, scan_tree, EntryKind};
use walkdir::WalkDir;

fn random_tree(root: &Path, files: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..files {
        let mut dir = root.to_path_buf();
        for _ in 0..rng.gen_range(0..4) {
            dir.push(["a", "b b", "c.d", "Ünï"][rng.gen_range(0..4)]);
        }
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("file-{i}.{}", rng.gen_range(0..3)));
        let data: Vec<u8> = (0..rng.gen_range(0..5000)).map(|_| rng.gen()).collect();
        fs::write(&path, data).unwrap();
        fs::set_permissions(&path, fs::Permissions::from_mode([0o644, 0o600, 0o755][i % 3])).unwrap();
    }
    symlink("a", root.join("link-to-a")).unwrap();
}

/// (path, is_dir, size, mode, symlink target) for every entry, via walkdir.
fn oracle(root: &Path, max_depth: usize) -> Vec<(String, bool, u64, u32, Option<String>)> {
    let mut out: Vec<_> = WalkDir::new(root)
        .min_depth(1)
        .max_depth(max_depth)
        .follow_links(false)
        .into_iter()
        .map(|e| e.unwrap())
        .map(|e| {
            let meta = e.path().symlink_metadata().unwrap();
            let rel = e.path().strip_prefix(root).unwrap().to_str().unwrap().to_owned();
            let target = meta
                .file_type()
                .is_symlink()
                .then(|| fs::read_link(e.path()).unwrap().to_str().unwrap().to_owned());
            let size = if meta.is_file() { meta.len() } else { 0 };
            (rel, meta.is_dir(), size, meta.permissions().mode() & 0o7777, target)
        })
        .collect();
    out.sort();
    out
}

fn scanned(root: &Path, recursive: bool) -> Vec<(String, bool, u64, u32, Option<String>)> {
    let m = scan_tree(root, recursive).unwrap();
    assert!(m.warnings().is_empty(), "{:?}", m.warnings());
    m.entries()
        .iter()
        .map(|e| {
            let target = match &e.kind {
                EntryKind::Symlink(t) => Some(t.clone()),
                _ => None,
            };
            let size = if e.kind == EntryKind::File { e.size } else { 0 };
            (e.path.clone(), e.kind == EntryKind::Dir, size, e.mode & 0o7777, target)
        })
        .collect()
}

#[test]
fn hundred_files_match_walkdir() {
    let dir = tempfile::tempdir().unwrap();
    random_tree(dir.path(), 100, 42);
    let expected = oracle(dir.path(), usize::MAX);
    assert_eq!(expected.iter().filter(|e| !e.1 && e.4.is_none()).count(), 100);
    assert_eq!(scanned(dir.path(), true), expected);
}

#[test]
fn non_recursive_is_top_level_only() {
    let dir = tempfile::tempdir().unwrap();
    random_tree(dir.path(), 30, 7);
    assert_eq!(scanned(dir.path(), false), oracle(dir.path(), 1));
}

#[test]
fn manifest_is_sorted_and_searchable() {
    let dir = tempfile::tempdir().unwrap();
    random_tree(dir.path(), 50, 9);
    let m = scan_tree(dir.path(), true).unwrap();
    let paths: Vec<&str> = m.entries().iter().map(|e| e.path.as_str()).collect();
    assert!(paths.windows(2).all(|w| w[0] < w[1]));
    for p in paths {
        assert_eq!(m.get(p).unwrap().path, p);
    }
    assert!(m.get("missing").is_none());
    let total: u64 = m.entries().iter().filter(|e| e.kind == EntryKind::File).map(|e| e.size).sum();
    assert_eq!(m.total_file_bytes(), total);
}

#[test]
fn trailing_slash_selects_contents() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(src.join("sub")).unwrap();
    fs::write(src.join("sub/x"), b"x").unwrap();

    let (base, m) = scan_source(&format!("{}/", src.display()), true).unwrap();
    assert_eq!(base, src);
    assert!(m.get("sub/x").is_some());

    let (base, m) = scan_source(src.to_str().unwrap(), true).unwrap();
    assert_eq!(base, dir.path());
    assert!(m.get("src/sub/x").is_some());
    assert!(m.get("src").is_some());
}
