use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster_io::write_file;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn digest_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Upstream artifacts (relative to the output dir) and raw inputs.
    pub inputs: BTreeMap<String, String>,
    /// Artifacts written, relative to the output dir.
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<RunManifest> {
        let path = out_dir.join(MANIFEST_FILE);
        match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&out_dir.join(MANIFEST_FILE), &json)
    }
}

/// Bookkeeping for one stage: verifies upstream artifacts and records the
/// digests of everything read and written.
pub struct StageIo {
    pub out_dir: PathBuf,
    name: String,
    manifest: RunManifest,
    record: StageRecord,
    started: Instant,
}

impl StageIo {
    pub fn begin(out_dir: &Path, name: &str, config_hash: &str) -> Result<StageIo> {
        Ok(StageIo {
            out_dir: out_dir.to_path_buf(),
            name: name.to_string(),
            manifest: RunManifest::load(out_dir)?,
            record: StageRecord {
                config_hash: config_hash.to_string(),
                ..Default::default()
            },
            started: Instant::now(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Reads an artifact of `producer`, failing unless it still matches the
    /// digest recorded when it was written.
    pub fn upstream(&mut self, rel: &str, producer: &str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        let stale = |reason: String| Error::StaleInput {
            path: path.clone(),
            reason,
        };
        let recorded = self
            .manifest
            .stages
            .get(producer)
            .and_then(|s| s.outputs.get(rel))
            .ok_or_else(|| stale(format!("not produced by a recorded `{producer}` run; run `{producer}` first")))?
            .clone();
        let bytes = std::fs::read(&path).map_err(|_| stale(format!("missing; run `{producer}` first")))?;
        let digest = digest_hex(&bytes);
        if digest != recorded {
            return Err(stale(format!(
                "digest {digest} differs from {recorded} recorded by `{producer}`; rerun `{producer}`"
            )));
        }
        self.record.inputs.insert(rel.to_string(), digest);
        Ok(bytes)
    }

    /// Verifies an artifact that is read by path (e.g. a sidecar pair).
    pub fn upstream_path(&mut self, rel: &str, producer: &str) -> Result<PathBuf> {
        self.upstream(rel, producer)?;
        Ok(self.path(rel))
    }

    /// Reads a raw input outside the output directory.
    pub fn raw(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.record
            .inputs
            .insert(path.display().to_string(), digest_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.path(rel), bytes)?;
        self.record.outputs.insert(rel.to_string(), digest_hex(bytes));
        Ok(())
    }

    /// Records a file written by other means.
    pub fn written(&mut self, rel: &str) -> Result<()> {
        let d = file_digest(&self.path(rel))?;
        self.record.outputs.insert(rel.to_string(), d);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.record.seeds.insert(name.to_string(), value);
    }

    pub fn finish(mut self) -> Result<StageRecord> {
        self.record.wall_clock_s = self.started.elapsed().as_secs_f64();
        // reload so that concurrent edits by other stages are kept
        let mut m = RunManifest::load(&self.out_dir)?;
        m.stages.insert(self.name.clone(), self.record.clone());
        m.save(&self.out_dir)?;
        Ok(self.record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn stale_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut io = StageIo::begin(dir.path(), "a", "h").unwrap();
        io.write("x/out.txt", b"hello").unwrap();
        io.finish().unwrap();
        let mut io = StageIo::begin(dir.path(), "b", "h").unwrap();
        assert_eq!(io.upstream("x/out.txt", "a").unwrap(), b"hello");
        assert!(matches!(io.upstream("x/out.txt", "c"), Err(Error::StaleInput { .. })));
        std::fs::write(dir.path().join("x/out.txt"), b"changed").unwrap();
        assert!(matches!(io.upstream("x/out.txt", "a"), Err(Error::StaleInput { .. })));
    }
}
