//! Document records shared by every corpus stage.
//!
//! A [`Document`] is the unit that flows through ingest → filter → dedup →
//! tokenize. It is persisted as one JSON object per line.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Stable 128-bit document identifier: the first 16 bytes of SHA-256 over
/// the UTF-8 text.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DocId(pub [u8; 16]);

impl DocId {
    pub fn from_text(text: &str) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        DocId(id)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Leading 64 bits, used wherever a document needs a cheap numeric key.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocId({})", self.to_hex())
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for DocId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| format!("bad document id {s:?}: {e}"))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| format!("document id {s:?} is not 16 bytes"))?;
        Ok(DocId(arr))
    }
}

impl Serialize for DocId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for DocId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which of the four corpus families a source belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCategory {
    /// Verilog / SystemVerilog / VHDL repositories.
    HdlCode,
    /// Hardware security material (CWE, Trust-Hub style benchmarks).
    SecurityKnowledge,
    /// Curated natural language: arxiv, books, wikipedia, stackexchange.
    #[serde(rename = "curated_nl")]
    CuratedNL,
    /// Web crawl natural language: c4, commoncrawl.
    #[serde(rename = "web_nl")]
    WebNL,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 4] = [
        SourceCategory::HdlCode,
        SourceCategory::SecurityKnowledge,
        SourceCategory::CuratedNL,
        SourceCategory::WebNL,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceCategory::HdlCode => "hdl_code",
            SourceCategory::SecurityKnowledge => "security_knowledge",
            SourceCategory::CuratedNL => "curated_nl",
            SourceCategory::WebNL => "web_nl",
        }
    }
}

impl fmt::Display for SourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown source category {s:?}"))
    }
}

/// Document language as decided by [`crate::ingest::classify_hdl`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lang {
    Verilog,
    SystemVerilog,
    #[serde(rename = "vhdl")]
    VHDL,
    NaturalLanguage,
    Other,
}

impl Lang {
    pub fn is_hdl(&self) -> bool {
        matches!(self, Lang::Verilog | Lang::SystemVerilog | Lang::VHDL)
    }
}

/// One corpus document. This is also the JSONL line schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocId,
    /// Name of the source snapshot the document came from (e.g. `cwe`).
    pub source: String,
    pub source_category: SourceCategory,
    pub path: String,
    pub lang: Lang,
    pub license: Option<String>,
    pub text: String,
}

impl Document {
    pub fn byte_len(&self) -> usize {
        self.text.len()
    }
}

/// Documents that survived ingest sanity checks.
pub type CleanDocument = Document;

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), lineno + 1),
            )
        })?;
        items.push(item);
    }
    Ok(items)
}
