//! Append-only stage manifest.
//!
//! One line per produced artifact:
//! `stage=<name> artifact=<file> key=<hex> sha256=<hex> seed=<n> time=<unix secs> elapsed_ms=<n>`.
//! `key` hashes the stage's configuration together with the digests of its
//! inputs, so a changed config or a rebuilt upstream artifact shows up as a
//! key mismatch downstream.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stage: String,
    pub artifact: String,
    pub key: String,
    pub sha256: String,
    pub seed: u64,
    pub time: u64,
    pub elapsed_ms: u64,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "stage={} artifact={} key={} sha256={} seed={} time={} elapsed_ms={}",
            self.stage, self.artifact, self.key, self.sha256, self.seed, self.time, self.elapsed_ms
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut e = ManifestEntry {
            stage: String::new(),
            artifact: String::new(),
            key: String::new(),
            sha256: String::new(),
            seed: 0,
            time: 0,
            elapsed_ms: 0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "stage" => e.stage = v.into(),
                "artifact" => e.artifact = v.into(),
                "key" => e.key = v.into(),
                "sha256" => e.sha256 = v.into(),
                "seed" => e.seed = v.parse().ok()?,
                "time" => e.time = v.parse().ok()?,
                "elapsed_ms" => e.elapsed_ms = v.parse().ok()?,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 7).then_some(e)
    }
}

/// Hex SHA-256 over `parts`, each length-prefixed so concatenations cannot collide.
pub fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).at(path)?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).at(path)?;
    Ok(hex::encode(h.finalize()))
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

#[derive(Clone, Debug)]
pub struct Manifest {
    dir: PathBuf,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn artifact_path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>> {
        let path = self.path();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut out = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            if !line.trim().is_empty() {
                out.push(ManifestEntry::parse(line).ok_or_else(|| {
                    Error::format(path.display().to_string(), offset, format!("bad manifest line {line:?}"))
                })?);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(out)
    }

    /// Most recent entry for `artifact`.
    pub fn latest(&self, artifact: &str) -> Result<Option<ManifestEntry>> {
        Ok(self.entries()?.into_iter().rev().find(|e| e.artifact == artifact))
    }

    /// Hashes the artifact on disk and appends its entry.
    pub fn record(&self, stage: &str, artifact: &str, key: &str, seed: u64, elapsed_ms: u64) -> Result<ManifestEntry> {
        let entry = ManifestEntry {
            stage: stage.into(),
            artifact: artifact.into(),
            key: key.into(),
            sha256: sha256_file(&self.artifact_path(artifact))?,
            seed,
            time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_ms,
        };
        let path = self.path();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
        writeln!(f, "{}", entry.to_line()).at(&path)?;
        Ok(entry)
    }

    /// Checks that `artifact` exists, was recorded under `expected_key`, and
    /// still has the recorded digest. Returns the digest.
    pub fn verify(&self, artifact: &str, expected_key: &str) -> Result<String> {
        let path = self.artifact_path(artifact);
        let stale = |found: String| Error::Stale {
            path: path.clone(),
            expected: expected_key.to_string(),
            found,
        };
        let entry = match self.latest(artifact)? {
            Some(e) if path.exists() => e,
            Some(_) => return Err(stale("missing file".into())),
            None => return Err(stale("no manifest entry".into())),
        };
        if entry.key != expected_key {
            return Err(stale(entry.key));
        }
        let sha = sha256_file(&path)?;
        if sha != entry.sha256 {
            return Err(Error::Stale {
                path,
                expected: entry.sha256,
                found: sha,
            });
        }
        Ok(sha)
    }

    /// Like [`Manifest::verify`], but treats staleness as "needs rebuilding".
    pub fn current(&self, artifact: &str, key: &str) -> Result<Option<String>> {
        match self.verify(artifact, key) {
            Ok(sha) => Ok(Some(sha)),
            Err(Error::Stale { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_line_roundtrip() {
        let e = ManifestEntry {
            stage: "train".into(),
            artifact: "model.ckpt".into(),
            key: "ab".into(),
            sha256: "cd".into(),
            seed: 9,
            time: 1,
            elapsed_ms: 2,
        };
        assert_eq!(ManifestEntry::parse(&e.to_line()), Some(e));
        assert_eq!(ManifestEntry::parse("stage=x"), None);
        assert_eq!(ManifestEntry::parse("stage=x artifact=y key=z sha256=w seed=q time=1 elapsed_ms=2"), None);
    }

    #[test]
    fn keys_are_length_prefixed() {
        assert_ne!(key_of(&["ab", "c"]), key_of(&["a", "bc"]));
        assert_eq!(key_of(&["a"]), key_of(&["a"]));
    }

    #[test]
    fn verify_detects_every_kind_of_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path());
        let stale = |r: Result<String>| matches!(r, Err(Error::Stale { .. }));

        assert!(stale(m.verify("a.bin", "k1")));
        write_atomic(&m.artifact_path("a.bin"), b"hello").unwrap();
        assert!(stale(m.verify("a.bin", "k1")));
        m.record("s", "a.bin", "k1", 0, 0).unwrap();
        assert_eq!(m.verify("a.bin", "k1").unwrap(), sha256_file(&m.artifact_path("a.bin")).unwrap());
        match m.verify("a.bin", "k2") {
            Err(Error::Stale { expected, found, .. }) => assert_eq!((expected.as_str(), found.as_str()), ("k2", "k1")),
            other => panic!("{other:?}"),
        }
        std::fs::write(m.artifact_path("a.bin"), b"tampered").unwrap();
        assert!(stale(m.verify("a.bin", "k1")));
        assert_eq!(m.current("a.bin", "k1").unwrap(), None);
        m.record("s", "a.bin", "k1", 0, 0).unwrap();
        assert!(m.current("a.bin", "k1").unwrap().is_some());
        std::fs::remove_file(m.artifact_path("a.bin")).unwrap();
        assert!(stale(m.verify("a.bin", "k1")));
    }
}
