//! Output directory bookkeeping and the run manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// Every artifact written by the run, in emission order. The manifest
    /// itself is not listed.
    pub files: Vec<FileEntry>,
}

/// An output directory owned by one run.
pub struct Output {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source: e }
}

impl Output {
    /// Create `dir`, first removing the artifacts of a previous run recorded
    /// in its manifest. Any other content is refused.
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = dir.join(MANIFEST);
        if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| io_err(&manifest, e))?;
            let old: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("unreadable manifest {}: {e}", manifest.display())))?;
            for f in old.files {
                let p = dir.join(&f.name);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
                }
            }
            fs::remove_file(&manifest).map_err(|e| io_err(&manifest, e))?;
        }
        let mut rest = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if rest.next().is_some() {
            return Err(CliError::Config(format!(
                "output directory {} contains files not written by a previous run",
                dir.display()
            )));
        }
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        self.files.push(FileEntry { name: name.into(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Stream a large artifact through a buffered writer.
    pub fn stream<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let p = self.dir.join(name);
        let file = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
        let mut w = HashingWriter { inner: BufWriter::new(file), hash: Sha256::new(), bytes: 0 };
        body(&mut w).and_then(|_| w.inner.flush()).map_err(|e| io_err(&p, e))?;
        let sha256 = w.hash.finalize().iter().map(|b| format!("{b:02x}")).collect();
        self.files.push(FileEntry { name: name.into(), bytes: w.bytes, sha256 });
        Ok(())
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        manifest.files = self.files;
        let p = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))?;
        Ok(manifest)
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    hash: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hash.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            command: "test".into(),
            config_hash: String::new(),
            seed: 1,
            version: "0".into(),
            started_unix: 0,
            wall_clock_seconds: 0.0,
            files: vec![],
        }
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn stream_and_write_hash_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::open(dir.path()).unwrap();
        out.write("a.txt", b"hello\n").unwrap();
        out.stream("b.txt", |w| w.write_all(b"hello\n")).unwrap();
        let m = out.finish(manifest()).unwrap();
        assert_eq!(m.files[0].sha256, m.files[1].sha256);
        assert_eq!(m.files[1].bytes, 6);
    }

    #[test]
    fn rerun_replaces_previous_artifacts_and_refuses_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::open(dir.path()).unwrap();
        out.write("old.csv", b"1").unwrap();
        out.finish(manifest()).unwrap();
        let out = Output::open(dir.path()).unwrap();
        assert!(!dir.path().join("old.csv").exists());
        out.finish(manifest()).unwrap();
        fs::write(dir.path().join("foreign.txt"), b"x").unwrap();
        assert!(matches!(Output::open(dir.path()), Err(CliError::Config(_))));
    }
}
