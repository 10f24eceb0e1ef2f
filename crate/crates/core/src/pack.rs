//! Token stream packing and tier accounting.
//!
//! Documents are tokenized and joined with EOS into one stream. The stream
//! is cut into rows of `T + 1` ids with stride `T`, so consecutive rows share
//! one token and each row yields a length-`T` input view and the matching
//! target view shifted by one. Rows are grouped `B` at a time into batches.
//!
//! Packed batch file layout (all integers little-endian):
//!
//! ```text
//! magic "HPKB" | version u16 | B u32 | T u32 | id_width u8 | ids...
//! ```
//!
//! The ids are the batches' rows in order, `T + 1` ids per row. The final
//! batch may hold fewer than `B` rows; a JSON sidecar records the count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doc::{CleanDocument, SourceCategory};
use crate::tokenizer::TokenizerModel;

pub const BATCH_MAGIC: &[u8; 4] = b"HPKB";
pub const BATCH_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("invalid pack config: {0}")]
    Config(String),
    #[error("corrupt batch file: {0}")]
    Corrupt(String),
    #[error("unknown source category {0:?}")]
    UnknownCategory(String),
    #[error("proportion of a zero total")]
    ZeroTotal,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackConfig {
    /// Rows per batch.
    pub batch_rows: usize,
    /// Context length; rows hold `context + 1` ids.
    pub context: usize,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            batch_rows: 125,
            context: 2048,
        }
    }
}

impl PackConfig {
    pub fn new(batch_rows: usize, context: usize) -> Result<Self, PackError> {
        let cfg = PackConfig {
            batch_rows,
            context,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PackError> {
        if self.batch_rows < 1 {
            return Err(PackError::Config("B must be >= 1".into()));
        }
        if self.context < 2 {
            return Err(PackError::Config("T must be >= 2".into()));
        }
        Ok(())
    }

    pub fn row_stride(&self) -> usize {
        self.context + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub batch_index: usize,
    pub rows: usize,
    pub row_len: usize,
    /// `rows × row_len` ids, row-major.
    pub data: Vec<u32>,
    /// Set on a trailing batch with fewer than B rows.
    pub partial: bool,
}

impl PackedBatch {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.row_len..(i + 1) * self.row_len]
    }

    pub fn inputs(&self, i: usize) -> &[u32] {
        &self.row(i)[..self.row_len - 1]
    }

    pub fn targets(&self, i: usize) -> &[u32] {
        &self.row(i)[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackOutput {
    pub batches: Vec<PackedBatch>,
    pub dropped_tail: usize,
}

impl PackOutput {
    pub fn total_rows(&self) -> usize {
        self.batches.iter().map(|b| b.rows).sum()
    }

    /// Number of distinct stream positions present in some row.
    pub fn covered_positions(&self, context: usize) -> usize {
        match self.total_rows() {
            0 => 0,
            n => n * context + 1,
        }
    }
}

/// Tokenizes each document and appends EOS after it.
pub fn concat_stream(docs: &[CleanDocument], m: &TokenizerModel) -> Vec<u32> {
    let mut stream = Vec::new();
    for doc in docs {
        stream.extend(m.append_eos(m.encode(&doc.text)).ids);
    }
    stream
}

/// Seeded document-level shuffle, applied before [`concat_stream`] when
/// enabled.
pub fn shuffle_documents(docs: &mut [CleanDocument], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.shuffle(&mut rng);
}

pub fn pack(stream: &[u32], cfg: &PackConfig) -> PackOutput {
    let t = cfg.context;
    let row_len = cfg.row_stride();
    let n_rows = if stream.len() >= row_len {
        (stream.len() - 1) / t
    } else {
        0
    };
    let mut batches = Vec::new();
    let mut row = 0;
    while row < n_rows {
        let rows = cfg.batch_rows.min(n_rows - row);
        let mut data = Vec::with_capacity(rows * row_len);
        for r in row..row + rows {
            data.extend_from_slice(&stream[r * t..r * t + row_len]);
        }
        batches.push(PackedBatch {
            batch_index: batches.len(),
            rows,
            row_len,
            data,
            partial: rows < cfg.batch_rows,
        });
        row += rows;
    }
    let out = PackOutput {
        batches,
        dropped_tail: 0,
    };
    let covered = out.covered_positions(t);
    PackOutput {
        dropped_tail: stream.len() - covered,
        ..out
    }
}

/// Sidecar written next to a packed batch file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIndex {
    pub num_batches: usize,
    pub last_batch_rows: usize,
    pub dropped_tail: usize,
    pub vocab_size: usize,
}

pub fn id_width_for(vocab_size: usize) -> u8 {
    if vocab_size <= u16::MAX as usize + 1 {
        2
    } else {
        4
    }
}

/// Writes the batch file and its `.index.json` sidecar; returns the sidecar.
pub fn write_batches(
    path: &Path,
    out: &PackOutput,
    cfg: &PackConfig,
    vocab_size: usize,
) -> Result<BatchIndex, PackError> {
    let width = id_width_for(vocab_size);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BATCH_MAGIC)?;
    w.write_all(&BATCH_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.batch_rows as u32).to_le_bytes())?;
    w.write_all(&(cfg.context as u32).to_le_bytes())?;
    w.write_all(&[width])?;
    for batch in &out.batches {
        for &id in &batch.data {
            if id as usize >= vocab_size {
                return Err(PackError::Corrupt(format!(
                    "id {id} >= vocab size {vocab_size}"
                )));
            }
            match width {
                2 => w.write_all(&(id as u16).to_le_bytes())?,
                _ => w.write_all(&id.to_le_bytes())?,
            }
        }
    }
    w.flush()?;

    let index = BatchIndex {
        num_batches: out.batches.len(),
        last_batch_rows: out.batches.last().map_or(0, |b| b.rows),
        dropped_tail: out.dropped_tail,
        vocab_size,
    };
    fs::write(index_path(path), serde_json::to_vec_pretty(&index).unwrap())?;
    Ok(index)
}

pub fn index_path(batch_path: &Path) -> std::path::PathBuf {
    let mut name = batch_path.file_name().unwrap_or_default().to_os_string();
    name.push(".index.json");
    batch_path.with_file_name(name)
}

/// A batch file read back into memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchFile {
    pub config: PackConfig,
    pub id_width: u8,
    pub batches: Vec<PackedBatch>,
}

/// Reads and validates a batch file. When `vocab_size` is given every id
/// must be below it.
pub fn read_batches(path: &Path, vocab_size: Option<usize>) -> Result<BatchFile, PackError> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: String| PackError::Corrupt(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != BATCH_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BATCH_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let b = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let width = bytes[14];
    let config = PackConfig::new(b, t).map_err(|e| corrupt(e.to_string()))?;
    let ids: Vec<u32> = match width {
        2 => bytes[HEADER_LEN..]
            .chunks(2)
            .map(|c| c.try_into().map(|a| u16::from_le_bytes(a) as u32))
            .collect::<Result<_, _>>()
            .map_err(|_| corrupt("truncated id".into()))?,
        4 => bytes[HEADER_LEN..]
            .chunks(4)
            .map(|c| c.try_into().map(u32::from_le_bytes))
            .collect::<Result<_, _>>()
            .map_err(|_| corrupt("truncated id".into()))?,
        w => return Err(corrupt(format!("id width {w} not in {{2, 4}}"))),
    };
    let row_len = config.row_stride();
    if ids.len() % row_len != 0 {
        return Err(corrupt(format!(
            "{} ids is not a whole number of {row_len}-id rows",
            ids.len()
        )));
    }
    if let Some(v) = vocab_size {
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(corrupt(format!("id {bad} >= vocab size {v}")));
        }
    }
    let batches = ids
        .chunks(b * row_len)
        .enumerate()
        .map(|(i, chunk)| PackedBatch {
            batch_index: i,
            rows: chunk.len() / row_len,
            row_len,
            data: chunk.to_vec(),
            partial: chunk.len() < b * row_len,
        })
        .collect();
    Ok(BatchFile {
        config,
        id_width: width,
        batches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Small,
    Medium,
    Large,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Small, Tier::Medium, Tier::Large];

    pub fn categories(&self) -> BTreeSet<SourceCategory> {
        use SourceCategory::*;
        match self {
            Tier::Small => [HdlCode, SecurityKnowledge].into(),
            Tier::Medium => [HdlCode, SecurityKnowledge, CuratedNL].into(),
            Tier::Large => [HdlCode, SecurityKnowledge, CuratedNL, WebNL].into(),
        }
    }

    /// Published token totals of the full-scale tiers. Reference only.
    pub fn reference_total(&self) -> u64 {
        match self {
            Tier::Small => 4_838_384_488,
            Tier::Medium => 10_382_663_651,
            Tier::Large => 22_616_170_041,
        }
    }
}

/// Per-document token accounting produced by the tokenize stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: crate::doc::DocId,
    pub source: String,
    pub category: String,
    /// Tokens excluding the appended EOS.
    pub tokens: u64,
    pub words: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierManifest {
    pub tier: Tier,
    pub member_categories: BTreeSet<SourceCategory>,
    pub documents: usize,
    pub token_total: u64,
    pub per_source_tokens: BTreeMap<String, u64>,
    pub reference_total: u64,
}

pub fn tier_assign(entries: &[ManifestEntry], tier: Tier) -> Result<TierManifest, PackError> {
    let members = tier.categories();
    let mut per_source_tokens: BTreeMap<String, u64> = BTreeMap::new();
    let mut documents = 0;
    for e in entries {
        let cat: SourceCategory = e
            .category
            .parse()
            .map_err(|_| PackError::UnknownCategory(e.category.clone()))?;
        if members.contains(&cat) {
            documents += 1;
            *per_source_tokens.entry(e.source.clone()).or_default() += e.tokens;
        }
    }
    Ok(TierManifest {
        tier,
        member_categories: members,
        documents,
        token_total: per_source_tokens.values().sum(),
        per_source_tokens,
        reference_total: tier.reference_total(),
    })
}

/// A part/total ratio, carried as a fraction and printed as a percentage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proportion(pub f64);

impl Proportion {
    pub fn percent(&self) -> f64 {
        self.0 * 100.0
    }
}

impl std::fmt::Display for Proportion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.7}%", self.percent())
    }
}

pub fn proportion(part: u64, total: u64) -> Result<Proportion, PackError> {
    if total == 0 {
        return Err(PackError::ZeroTotal);
    }
    Ok(Proportion(part as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(b: usize, t: usize) -> PackConfig {
        PackConfig::new(b, t).unwrap()
    }

    #[test]
    fn config_bounds() {
        assert!(PackConfig::new(0, 4).is_err());
        assert!(PackConfig::new(1, 1).is_err());
        assert_eq!(PackConfig::default().row_stride(), 2049);
    }

    #[test]
    fn exact_single_batch() {
        let (b, t) = (2, 3);
        let stream: Vec<u32> = (0..(b * t + 1) as u32).collect();
        let out = pack(&stream, &cfg(b, t));
        assert_eq!(out.batches.len(), 1);
        assert!(!out.batches[0].partial);
        assert_eq!(out.dropped_tail, 0);
        assert_eq!(out.batches[0].row(0), &[0, 1, 2, 3]);
        assert_eq!(out.batches[0].row(1), &[3, 4, 5, 6]);
    }

    #[test]
    fn ten_tokens_two_by_three() {
        let stream: Vec<u32> = (0..10).collect();
        let out = pack(&stream, &cfg(2, 3));
        assert_eq!(out.batches.len(), 2);
        assert_eq!(out.batches[0].rows, 2);
        assert_eq!(out.batches[1].rows, 1);
        assert!(out.batches[1].partial);
        assert_eq!(out.batches[1].row(0), &[6, 7, 8, 9]);
        assert_eq!(out.batches[1].inputs(0), &[6, 7, 8]);
        assert_eq!(out.batches[1].targets(0), &[7, 8, 9]);
        assert_eq!(out.dropped_tail, 0);

        let out = pack(&stream[..9], &cfg(2, 3));
        assert_eq!(out.total_rows(), 2);
        assert_eq!(out.dropped_tail, 2);
    }

    #[test]
    fn empty_stream() {
        let out = pack(&[], &cfg(2, 3));
        assert!(out.batches.is_empty());
        assert_eq!(out.dropped_tail, 0);
        let out = pack(&[1, 2, 3], &cfg(2, 3));
        assert!(out.batches.is_empty());
        assert_eq!(out.dropped_tail, 3);
    }

    #[test]
    fn batch_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.hpkb");
        let stream: Vec<u32> = (0..45).map(|i| i * 1000).collect();
        let c = cfg(3, 4);
        let out = pack(&stream, &c);
        let index = write_batches(&path, &out, &c, 50_257).unwrap();
        assert_eq!(index.num_batches, 4);
        assert_eq!(index.last_batch_rows, 2);
        let file = read_batches(&path, Some(50_257)).unwrap();
        assert_eq!(file.id_width, 2);
        assert_eq!(file.batches, out.batches);
        let sidecar: BatchIndex =
            serde_json::from_slice(&fs::read(index_path(&path)).unwrap()).unwrap();
        assert_eq!(sidecar, index);
    }

    #[test]
    fn wide_ids_use_four_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hpkb");
        let stream: Vec<u32> = vec![70_000, 1, 2, 3, 4];
        let c = cfg(1, 2);
        let out = pack(&stream, &c);
        write_batches(&path, &out, &c, 100_000).unwrap();
        let file = read_batches(&path, None).unwrap();
        assert_eq!(file.id_width, 4);
        assert_eq!(file.batches[0].row(0), &[70_000, 1, 2]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hpkb");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_batches(&path, None), Err(PackError::Corrupt(_))));

        let c = cfg(1, 2);
        let out = pack(&[1, 2, 3], &c);
        write_batches(&path, &out, &c, 10).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_batches(&path, None), Err(PackError::Corrupt(_))));

        write_batches(&path, &out, &c, 10).unwrap();
        assert!(matches!(read_batches(&path, Some(3)), Err(PackError::Corrupt(_))));
    }

    fn entry(source: &str, category: &str, tokens: u64) -> ManifestEntry {
        ManifestEntry {
            id: crate::doc::DocId::from_text(source),
            source: source.into(),
            category: category.into(),
            tokens,
            words: 0,
        }
    }

    #[test]
    fn tiers_nest() {
        let entries = vec![
            entry("github", "hdl_code", 100),
            entry("cwe", "security_knowledge", 10),
            entry("arxiv", "curated_nl", 50),
            entry("c4", "web_nl", 500),
        ];
        let small = tier_assign(&entries, Tier::Small).unwrap();
        let medium = tier_assign(&entries, Tier::Medium).unwrap();
        let large = tier_assign(&entries, Tier::Large).unwrap();
        assert_eq!(small.token_total, 110);
        assert_eq!(medium.token_total, 160);
        assert_eq!(large.token_total, 660);
        assert!(small.member_categories.is_subset(&medium.member_categories));
        assert!(medium.member_categories.is_subset(&large.member_categories));
        assert!(!medium.per_source_tokens.contains_key("c4"));
        assert_eq!(large.per_source_tokens["c4"], 500);
        assert_eq!(small.reference_total, 4_838_384_488);

        let bad = vec![entry("x", "podcasts", 1)];
        assert!(matches!(
            tier_assign(&bad, Tier::Small),
            Err(PackError::UnknownCategory(_))
        ));
    }

    #[test]
    fn proportion_examples() {
        assert_eq!(proportion(70_000, 4_838_384_488).unwrap().to_string(), "0.0014468%");
        assert_eq!(proportion(7, 7).unwrap().to_string(), "100.0000000%");
        assert_eq!(proportion(0, 9).unwrap().to_string(), "0.0000000%");
        assert!(matches!(proportion(1, 0), Err(PackError::ZeroTotal)));
    }
}
