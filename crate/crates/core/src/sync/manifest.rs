//! Directory-tree manifests.

use std::fs::{self, Metadata};
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use super::SyncError;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EntryKind {
    File,
    Dir,
    Symlink(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileEntry {
    /// Relative, `/`-separated, canonical.
    pub path: String,
    pub size: u64,
    pub mtime_secs: i64,
    pub mtime_nanos: u32,
    pub mode: u32,
    pub kind: EntryKind,
}

impl FileEntry {
    pub fn is_file(&self) -> bool {
        self.kind == EntryKind::File
    }

    pub fn is_dir(&self) -> bool {
        self.kind == EntryKind::Dir
    }

    /// Builds an entry from filesystem metadata (not following symlinks).
    pub fn from_metadata(path: String, meta: &Metadata, link_target: Option<String>) -> FileEntry {
        let (mtime_secs, mtime_nanos) = mtime_of(meta);
        let kind = if meta.file_type().is_symlink() {
            EntryKind::Symlink(link_target.unwrap_or_default())
        } else if meta.is_dir() {
            EntryKind::Dir
        } else {
            EntryKind::File
        };
        let size = if kind == EntryKind::File { meta.len() } else { 0 };
        FileEntry { path, size, mtime_secs, mtime_nanos, mode: mode_of(meta), kind }
    }
}

/// Sorted, immutable list of entries plus warnings for skipped children.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    entries: Vec<FileEntry>,
    warnings: Vec<String>,
}

impl Manifest {
    pub fn new(mut entries: Vec<FileEntry>) -> Result<Manifest, SyncError> {
        for e in &entries {
            validate_path(&e.path)?;
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        if let Some(w) = entries.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(SyncError::InvalidPath(w[0].path.clone()));
        }
        Ok(Manifest { entries, warnings: Vec::new() })
    }

    pub fn entries(&self) -> &[FileEntry] {
        &self.entries
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&FileEntry> {
        self.entries.binary_search_by(|e| e.path.as_str().cmp(path)).ok().map(|i| &self.entries[i])
    }

    pub fn total_file_bytes(&self) -> u64 {
        self.entries.iter().filter(|e| e.is_file()).map(|e| e.size).sum()
    }
}

/// Rejects empty, absolute, or non-canonical relative paths.
pub fn validate_path(path: &str) -> Result<(), SyncError> {
    let bad = path.is_empty()
        || path.starts_with('/')
        || path.contains('\\')
        || path.contains('\0')
        || path.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..");
    if bad {
        Err(SyncError::InvalidPath(path.to_string()))
    } else {
        Ok(())
    }
}

/// Scans `root`, recording entries relative to it. Symlinks are recorded,
/// not followed. Unreadable or non-UTF-8 children are skipped with a
/// warning.
pub fn scan_tree(root: &Path, recursive: bool) -> Result<Manifest, SyncError> {
    let meta = fs::metadata(root).map_err(|e| SyncError::io(root, e))?;
    if !meta.is_dir() {
        return Err(SyncError::Io(format!("{}: not a directory", root.display())));
    }
    let mut out = Manifest::default();
    walk(root, "", recursive, &mut out, true)?;
    out.entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Scans a command-line source. A directory named with a trailing `/`
/// contributes its contents; without one the directory itself becomes the
/// top-level entry. A plain file yields a single entry named after it.
/// Returns the directory the entry paths are relative to.
pub fn scan_source(source: &str, recursive: bool) -> Result<(PathBuf, Manifest), SyncError> {
    let path = PathBuf::from(source);
    let meta = fs::symlink_metadata(&path).map_err(|e| SyncError::io(&path, e))?;
    let contents_only = source.ends_with('/') || source == "." || source.ends_with("/.");
    if meta.is_dir() && contents_only {
        return Ok((path.clone(), scan_tree(&path, recursive)?));
    }
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| SyncError::InvalidPath(source.to_string()))?
        .to_string();
    let mut out = Manifest::default();
    let target = link_target(&path, &meta);
    out.entries.push(FileEntry::from_metadata(name.clone(), &meta, target));
    if meta.is_dir() && recursive {
        walk(&path, &name, true, &mut out, true)?;
    }
    out.entries.sort_by(|a, b| a.path.cmp(&b.path));
    let base = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((base, out))
}

fn walk(dir: &Path, prefix: &str, recursive: bool, out: &mut Manifest, is_root: bool) -> Result<(), SyncError> {
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if is_root => return Err(SyncError::io(dir, e)),
        Err(e) => {
            out.warnings.push(format!("skipping {}: {e}", dir.display()));
            return Ok(());
        }
    };
    for item in rd {
        let item = match item {
            Ok(i) => i,
            Err(e) => {
                out.warnings.push(format!("skipping entry in {}: {e}", dir.display()));
                continue;
            }
        };
        let full = item.path();
        let Some(name) = item.file_name().to_str().map(str::to_string) else {
            out.warnings.push(format!("skipping non-UTF-8 name {}", full.display()));
            continue;
        };
        let meta = match fs::symlink_metadata(&full) {
            Ok(m) => m,
            Err(e) => {
                out.warnings.push(format!("skipping {}: {e}", full.display()));
                continue;
            }
        };
        let rel = if prefix.is_empty() { name } else { format!("{prefix}/{name}") };
        let target = link_target(&full, &meta);
        let is_dir = meta.is_dir();
        out.entries.push(FileEntry::from_metadata(rel.clone(), &meta, target));
        if is_dir && recursive {
            walk(&full, &rel, true, out, false)?;
        }
    }
    Ok(())
}

fn link_target(path: &Path, meta: &Metadata) -> Option<String> {
    if !meta.file_type().is_symlink() {
        return None;
    }
    fs::read_link(path).ok().map(|t| t.to_string_lossy().into_owned())
}

fn mtime_of(meta: &Metadata) -> (i64, u32) {
    match meta.modified() {
        Ok(t) => match t.duration_since(UNIX_EPOCH) {
            Ok(d) => (d.as_secs() as i64, d.subsec_nanos()),
            Err(e) => {
                let d = e.duration();
                if d.subsec_nanos() == 0 {
                    (-(d.as_secs() as i64), 0)
                } else {
                    (-(d.as_secs() as i64) - 1, 1_000_000_000 - d.subsec_nanos())
                }
            }
        },
        Err(_) => (0, 0),
    }
}

#[cfg(unix)]
fn mode_of(meta: &Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o7777
}

#[cfg(not(unix))]
fn mode_of(meta: &Metadata) -> u32 {
    if meta.permissions().readonly() {
        0o444
    } else {
        0o644
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_rules() {
        for ok in ["a", "a/b", "a.txt", "..a", "a/.b"] {
            assert!(validate_path(ok).is_ok(), "{ok}");
        }
        for bad in ["", "/a", "../x", "a/../b", "a/./b", "a//b", "a/", "."] {
            assert!(validate_path(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_and_shallow() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_tree(dir.path(), true).unwrap().is_empty());
        fs::create_dir_all(dir.path().join("sub/deeper")).unwrap();
        fs::write(dir.path().join("top.txt"), b"x").unwrap();
        fs::write(dir.path().join("sub/inner.txt"), b"yy").unwrap();
        let shallow = scan_tree(dir.path(), false).unwrap();
        let names: Vec<_> = shallow.entries().iter().map(|e| e.path.as_str()).collect();
        assert_eq!(names, ["sub", "top.txt"]);
        let deep = scan_tree(dir.path(), true).unwrap();
        let names: Vec<_> = deep.entries().iter().map(|e| e.path.as_str()).collect();
        assert_eq!(names, ["sub", "sub/deeper", "sub/inner.txt", "top.txt"]);
        assert_eq!(deep.get("sub/inner.txt").unwrap().size, 2);
    }

    #[test]
    fn trailing_slash_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir(&src).unwrap();
        fs::write(src.join("f"), b"1").unwrap();
        let s = src.to_str().unwrap();
        let with_dir: Vec<_> = scan_source(s, true).unwrap().1.entries().iter().map(|e| e.path.clone()).collect();
        assert_eq!(with_dir, ["src", "src/f"]);
        let contents: Vec<_> =
            scan_source(&format!("{s}/"), true).unwrap().1.entries().iter().map(|e| e.path.clone()).collect();
        assert_eq!(contents, ["f"]);
        let (base, single) = scan_source(src.join("f").to_str().unwrap(), false).unwrap();
        assert_eq!(single.entries()[0].path, "f");
        assert_eq!(base, src);
    }

    #[cfg(unix)]
    #[test]
    fn symlinks_not_followed() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("real")).unwrap();
        fs::write(dir.path().join("real/f"), b"1").unwrap();
        std::os::unix::fs::symlink("real", dir.path().join("link")).unwrap();
        let m = scan_tree(dir.path(), true).unwrap();
        assert_eq!(m.get("link").unwrap().kind, EntryKind::Symlink("real".into()));
        assert!(m.get("link/f").is_none());
    }

    #[test]
    fn missing_root_is_error() {
        assert!(matches!(scan_tree(Path::new("/nonexistent/udrift"), true), Err(SyncError::Io(_))));
    }
}
