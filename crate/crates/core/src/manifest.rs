//! Run manifests: what ran, with which config and seed, and sha256 digests of
//! every file read or written.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::experiments::{read_report, ExperimentReport};

const MANIFEST_FORMAT: &str = "latentcf-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(h.finalize()),
        bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub versions: BTreeMap<String, String>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

/// Collects digests while a command runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl RunManifest {
    pub fn begin(command: &str, config: &impl Serialize, seed: u64) -> Result<ManifestBuilder> {
        let mut versions = BTreeMap::new();
        versions.insert("latentcf-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("manifest".to_string(), MANIFEST_VERSION.to_string());
        Ok(ManifestBuilder {
            manifest: RunManifest {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                command: command.to_string(),
                config: serde_json::to_value(config)?,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                versions,
                started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                wall_clock_secs: 0.0,
            },
            clock: Instant::now(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let m: RunManifest = serde_json::from_slice(&bytes)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("not a run manifest (format '{}')", m.format),
            });
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                what: "manifest",
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    /// Recomputes every output digest and fails on the first mismatch.
    pub fn verify_outputs(&self) -> Result<()> {
        for d in &self.outputs {
            let now = digest_file(&d.path)?;
            if now.sha256 != d.sha256 {
                return Err(Error::DigestMismatch {
                    path: d.path.clone(),
                    expected: d.sha256.clone(),
                    found: now.sha256,
                });
            }
        }
        Ok(())
    }
}

impl ManifestBuilder {
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.manifest.inputs.push(digest_file(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.manifest.outputs.push(digest_file(path)?);
        Ok(self)
    }

    /// Stamps the wall clock and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_secs = self.clock.elapsed().as_secs_f64();
        std::fs::write(path, serde_json::to_vec_pretty(&self.manifest)?).map_err(io_err(path))?;
        Ok(self.manifest)
    }
}

/// Where the manifest for `artifact` lives: `manifest.json` inside a
/// directory, `<file>.manifest.json` next to a file.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("manifest.json")
    } else {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

/// Loads a report directory, refusing it unless a manifest is present and
/// lists the current `report.json`.
pub fn load_report(dir: &Path) -> Result<ExperimentReport> {
    let mpath = manifest_path(dir);
    if !mpath.exists() {
        return Err(Error::MissingManifest {
            artifact: dir.to_path_buf(),
            manifest: mpath,
        });
    }
    let manifest = RunManifest::load(&mpath)?;
    let report_path = dir.join("report.json");
    let listed = manifest
        .outputs
        .iter()
        .find(|d| d.path.file_name() == report_path.file_name())
        .ok_or_else(|| Error::Malformed {
            path: mpath.clone(),
            reason: "manifest does not list report.json".into(),
        })?;
    let now = digest_file(&report_path)?;
    if now.sha256 != listed.sha256 {
        return Err(Error::DigestMismatch {
            path: report_path,
            expected: listed.sha256.clone(),
            found: now.sha256,
        });
    }
    read_report(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, b"abc").unwrap();
        let d = digest_file(&p).unwrap();
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(d.bytes, 3);
    }

    #[test]
    fn manifest_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(manifest_path(dir.path()), dir.path().join("manifest.json"));
        let f = dir.path().join("m.ckpt");
        assert_eq!(manifest_path(&f), dir.path().join("m.ckpt.manifest.json"));
    }

    #[test]
    fn tampered_output_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        std::fs::write(&p, b"one").unwrap();
        let mut b = RunManifest::begin("test", &serde_json::json!({"k": 1}), 3).unwrap();
        b.output(&p).unwrap();
        let m = b.finish(&dir.path().join("m.json")).unwrap();
        m.verify_outputs().unwrap();
        std::fs::write(&p, b"two").unwrap();
        assert!(matches!(m.verify_outputs(), Err(Error::DigestMismatch { .. })));
    }
}
