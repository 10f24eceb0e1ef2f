//! Pipeline configuration: JSON file, dotted-path overrides, validation.
//!
//! Relative paths in the file resolve against the file's directory. The
//! workspace falls back to `$FORGE_WORKSPACE` when the file omits it. A
//! top-level `seed`, when present, replaces the seed of every seeded stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use forge_core::dedup::DedupConfig;
use forge_core::filter::FilterConfig;
use forge_core::ingest::SourceSpec;
use forge_core::pack::{PackConfig, Tier};
use forge_train::config::{ModelConfig, OptimizerConfig, Positional, TrainSchedule};
use forge_train::generate::GenerateConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WORKSPACE_ENV: &str = "FORGE_WORKSPACE";

/// Invalid configuration, reported with the offending dotted field path.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn err(field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub sources: Vec<SourceSpec>,
    pub license_allowlist: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_file: PathBuf,
    pub merges_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackSection {
    pub batch_rows: usize,
    pub context: usize,
    pub tier: Tier,
    /// Fraction of tier documents held out for validation.
    pub val_fraction: f64,
    /// Seeded document shuffle before concatenation.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for PackSection {
    fn default() -> Self {
        let p = PackConfig::default();
        PackSection {
            batch_rows: p.batch_rows,
            context: p.context,
            tier: Tier::Large,
            val_fraction: 0.005,
            shuffle: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Defaults to `pack.context`.
    #[serde(default)]
    pub context: Option<usize>,
    /// Defaults to the tokenizer vocabulary size; must match it when set.
    #[serde(default)]
    pub vocab: Option<usize>,
    #[serde(default)]
    pub positional: Positional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub prompt: String,
    pub max_new: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GenerateConfig::default();
        GenerateSection {
            prompt: "module".into(),
            max_new: g.max_new,
            temperature: g.temperature,
            top_k: g.top_k,
            seed: g.seed,
        }
    }
}

impl GenerateSection {
    pub fn settings(&self) -> GenerateConfig {
        GenerateConfig {
            max_new: self.max_new,
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
        }
    }
}

/// Inputs of the energy estimate; see [`crate::report::emissions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionsInputs {
    pub avg_power_kw: f64,
    pub hours: f64,
    #[serde(default = "default_pue")]
    pub pue: f64,
    pub carbon_intensity_kg_per_kwh: f64,
}

fn default_pue() -> f64 {
    1.1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub emissions: Option<EmissionsInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub workspace_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub ingest: IngestSection,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub dedup: DedupConfig,
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub pack: PackSection,
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// A validated configuration with every path made absolute.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: PipelineConfig,
    pub workspace: PathBuf,
    /// SHA-256 of the configuration as written (after overrides), with
    /// `workspace_dir` removed so moving the workspace keeps the hash.
    pub config_hash: String,
}

impl Resolved {
    pub fn pack_config(&self) -> PackConfig {
        PackConfig {
            batch_rows: self.config.pack.batch_rows,
            context: self.config.pack.context,
        }
    }

    /// Model configuration with the vocabulary filled in.
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        let m = &self.config.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_head: m.d_head,
            context: m.context.unwrap_or(self.config.pack.context),
            vocab,
            positional: m.positional,
        }
    }
}

/// Applies `key=value` where key is a dotted path (array elements by index)
/// and value is JSON, or a bare string when it does not parse as JSON.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(assignment, "override must look like key=value"))?;
    if key.is_empty() {
        return Err(err(assignment, "empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| err(key, format!("`{part}` is not an array index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| err(key, format!("index {idx} out of range")))?
            }
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(err(key, format!("cannot descend into `{part}`"))),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn hash_value(v: &Value) -> String {
    let mut v = v.clone();
    if let Value::Object(map) = &mut v {
        map.remove("workspace_dir");
    }
    // serde_json maps are ordered by key, so this is canonical
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json value serializes")))
}

/// Reads, overrides, resolves and validates a configuration file.
pub fn load(path: &Path, overrides: &[String]) -> Result<Resolved, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("config", format!("{}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| err("config", format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_value(value, &base, std::env::var_os(WORKSPACE_ENV).map(PathBuf::from))
}

/// As [`load`], for an already parsed document. `base` anchors relative
/// paths; `env_workspace` is the fallback workspace.
pub fn from_value(value: Value, base: &Path, env_workspace: Option<PathBuf>) -> Result<Resolved, ConfigError> {
    let config_hash = hash_value(&value);
    let mut config: PipelineConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
        let field = e.path().to_string();
        err(if field == "." { "config".into() } else { field }, e.inner())
    })?;

    let workspace = match (&config.workspace_dir, env_workspace) {
        (Some(w), _) => resolve(base, w),
        (None, Some(w)) => w,
        (None, None) => {
            return Err(err(
                "workspace_dir",
                format!("not set in the config and ${WORKSPACE_ENV} is unset"),
            ))
        }
    };
    config.workspace_dir = Some(workspace.clone());

    for (i, s) in config.ingest.sources.iter_mut().enumerate() {
        s.root_path = resolve(base, &s.root_path);
        if !s.root_path.is_dir() {
            return Err(err(
                format!("ingest.sources.{i}.root_path"),
                format!("{} is not a directory", s.root_path.display()),
            ));
        }
    }
    if config.ingest.sources.is_empty() {
        return Err(err("ingest.sources", "at least one source is required"));
    }
    let names: BTreeSet<&str> = config.ingest.sources.iter().map(|s| s.name.as_str()).collect();
    if names.len() != config.ingest.sources.len() {
        return Err(err("ingest.sources", "source names must be unique"));
    }
    for (field, p) in [
        ("tokenizer.vocab_file", &mut config.tokenizer.vocab_file),
        ("tokenizer.merges_file", &mut config.tokenizer.merges_file),
    ] {
        *p = resolve(base, p);
        if !p.is_file() {
            return Err(err(field, format!("{} does not exist", p.display())));
        }
    }

    if let Some(seed) = config.seed {
        config.dedup.seed = seed;
        config.pack.seed = seed;
        config.schedule.seed = seed;
        config.generate.seed = seed;
    }

    config.filter.validate().map_err(|e| err("filter", e))?;
    config.dedup.lsh.validate().map_err(|e| err("dedup.lsh", e))?;
    if config.dedup.shingle_width == 0 {
        return Err(err("dedup.shingle_width", "must be >= 1"));
    }
    let pack = &config.pack;
    if pack.batch_rows == 0 {
        return Err(err("pack.batch_rows", "must be >= 1"));
    }
    if pack.context < 2 {
        return Err(err("pack.context", "must be >= 2"));
    }
    if !(pack.val_fraction > 0.0 && pack.val_fraction < 1.0) {
        return Err(err("pack.val_fraction", "must lie in (0, 1)"));
    }
    if let Some(ctx) = config.model.context {
        if ctx < pack.context {
            return Err(err(
                "model.context",
                format!("{ctx} is shorter than pack.context = {}", pack.context),
            ));
        }
    }
    let probe = ModelConfig {
        n_layers: config.model.n_layers,
        n_heads: config.model.n_heads,
        d_head: config.model.d_head,
        context: config.model.context.unwrap_or(pack.context),
        vocab: config.model.vocab.unwrap_or(2),
        positional: config.model.positional,
    };
    probe.validate().map_err(|e| err(e.field, e.message))?;
    config.optimizer.validate().map_err(|e| err(e.field, e.message))?;
    config.schedule.validate(&config.optimizer).map_err(|e| err(e.field, e.message))?;
    let g = &config.generate;
    if !(g.temperature >= 0.0 && g.temperature.is_finite()) {
        return Err(err("generate.temperature", "must be finite and >= 0"));
    }
    if g.top_k == Some(0) {
        return Err(err("generate.top_k", "must be >= 1"));
    }
    if let Some(e) = &config.report.emissions {
        crate::report::emissions(e).map_err(|x| err(format!("report.emissions.{}", x.field), x))?;
    }

    Ok(Resolved {
        config,
        workspace,
        config_hash,
    })
}
