//! Workspace layout, provenance records and file digests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stage order of the full pipeline. `stats` follows `train` so it can
/// report the measured throughput of that run.
pub const STAGES: [&str; 9] = [
    "ingest", "filter", "dedup", "tokenize", "pack", "train", "generate", "stats", "report",
];

pub fn stage_dir(workspace: &Path, stage: &str) -> PathBuf {
    workspace.join(stage)
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Digest over every file under `root`: relative paths and contents, in
/// sorted path order.
pub fn sha256_tree(root: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = relative(root, entry.path());
            files.push((rel, entry.path().to_path_buf()));
        }
    }
    files.sort();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(Sha256::digest(fs::read(path)?));
    }
    Ok(hex::encode(h.finalize()))
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Files that hold nothing but wall-clock measurements.
pub fn is_telemetry(rel: &str) -> bool {
    rel.ends_with("timing.json")
}

/// Files mixing deterministic content with wall-clock measurements: the
/// metrics log (throughput columns) and the stats report (measured
/// throughput block).
pub fn carries_telemetry(rel: &str) -> bool {
    is_telemetry(rel) || rel.ends_with("metrics.csv") || rel == "stats/report.json"
}

/// What produced a stage's outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub tool_version: String,
    /// Input label → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the workspace → SHA-256. Wall-clock
    /// telemetry is listed separately, unhashed.
    pub outputs: BTreeMap<String, String>,
    pub telemetry: Vec<String>,
}

impl Provenance {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        Provenance {
            stage: stage.into(),
            config_hash: config_hash.into(),
            tool_version: TOOL_VERSION.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            telemetry: Vec::new(),
        }
    }

    /// Records an input's digest. Inputs carrying wall-clock telemetry are
    /// named but not hashed, so the record stays reproducible.
    pub fn input_file(&mut self, workspace: &Path, path: &Path) -> io::Result<()> {
        let rel = relative(workspace, path);
        let digest = if carries_telemetry(&rel) {
            "telemetry".to_string()
        } else {
            sha256_file(path)?
        };
        self.inputs.insert(rel, digest);
        Ok(())
    }

    /// Hashes every file of the stage directory (except this record).
    pub fn collect_outputs(&mut self, workspace: &Path, dir: &Path) -> io::Result<()> {
        let mut paths: Vec<PathBuf> = WalkDir::new(dir)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        paths.sort();
        for p in paths {
            let rel = relative(workspace, &p);
            if p.file_name().is_some_and(|n| n == PROVENANCE_FILE) {
                continue;
            }
            if carries_telemetry(&rel) {
                self.telemetry.push(rel);
            } else {
                self.outputs.insert(rel, sha256_file(&p)?);
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        write_json(&dir.join(PROVENANCE_FILE), self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    bytes.push(b'\n');
    fs::write(path, bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<T> {
    let bytes = fs::read(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

/// Every workspace file with wall-clock content removed: timing files are
/// dropped, throughput columns of metrics CSVs are cut, and the measured
/// throughput block of the stats report is nulled. Two runs of the same
/// configuration yield equal maps.
pub fn deterministic_view(workspace: &Path) -> io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(workspace) {
        let entry = entry.map_err(io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = relative(workspace, entry.path());
        if is_telemetry(&rel) {
            continue;
        }
        let bytes = fs::read(entry.path())?;
        let bytes = if rel.ends_with("metrics.csv") {
            String::from_utf8_lossy(&bytes)
                .lines()
                .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes()
        } else if rel == "stats/report.json" {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(io::Error::other)?;
            if let Some(m) = v.as_object_mut() {
                m.insert("measured_throughput".into(), serde_json::Value::Null);
            }
            serde_json::to_vec(&v).map_err(io::Error::other)?
        } else {
            bytes
        };
        out.insert(rel, bytes);
    }
    Ok(out)
}
