//! Source snapshot ingestion.
//!
//! Walks a local directory snapshot, decodes each regular file, tags it with
//! a language and license, and runs the lexical sanity checks that gate
//! entry into the rest of the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::doc::{DocId, Document, Lang, SourceCategory};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read source root {path}: {source}")]
    UnreadableRoot {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A local snapshot of one corpus source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Label used for per-source accounting, e.g. `cwe` or `arxiv`.
    pub name: String,
    pub root_path: PathBuf,
    pub category: SourceCategory,
    /// License assumed for files that carry no SPDX header.
    #[serde(default)]
    pub default_license: Option<String>,
}

/// A document as read from disk, before sanity checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc: Document,
    /// False when the file was not valid UTF-8 and was decoded lossily.
    pub utf8_ok: bool,
}

impl RawDocument {
    pub fn byte_len(&self) -> usize {
        self.doc.byte_len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl SkipReport {
    pub fn record(&mut self, reason: impl Into<String>) {
        self.skipped += 1;
        *self.reasons.entry(reason.into()).or_default() += 1;
    }

    pub fn merge(&mut self, other: &SkipReport) {
        self.skipped += other.skipped;
        for (reason, n) in &other.reasons {
            *self.reasons.entry(reason.clone()).or_default() += n;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScanOutput {
    pub documents: Vec<RawDocument>,
    pub skipped: SkipReport,
}

/// Reads every regular file under `spec.root_path`, ordered by relative path.
pub fn scan_source(spec: &SourceSpec) -> Result<ScanOutput, IngestError> {
    fs::read_dir(&spec.root_path).map_err(|source| IngestError::UnreadableRoot {
        path: spec.root_path.clone(),
        source,
    })?;

    let mut out = ScanOutput::default();
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in WalkDir::new(&spec.root_path).follow_links(false) {
        let entry = match entry {
            Ok(e) => e,
            Err(_) => {
                out.skipped.record("unreadable directory entry");
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(&spec.root_path)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        files.push((rel, entry.into_path()));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    for (rel, full) in files {
        let bytes = match fs::read(&full) {
            Ok(b) => b,
            Err(_) => {
                out.skipped.record("unreadable file");
                continue;
            }
        };
        let (text, utf8_ok) = match String::from_utf8(bytes) {
            Ok(s) => (s, true),
            Err(e) => (String::from_utf8_lossy(e.as_bytes()).into_owned(), false),
        };
        let lang = classify_hdl(&rel, &text);
        let license = spdx_identifier(&text).or_else(|| spec.default_license.clone());
        out.documents.push(RawDocument {
            doc: Document {
                id: DocId::from_text(&text),
                source: spec.name.clone(),
                source_category: spec.category,
                path: rel,
                lang,
                license,
                text,
            },
            utf8_ok,
        });
    }
    Ok(out)
}

static SPDX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"SPDX-License-Identifier:\s*([^\r\n]*)").unwrap());

/// License expression from an `SPDX-License-Identifier:` tag in the first
/// 30 lines, if any.
pub fn spdx_identifier(text: &str) -> Option<String> {
    let head: String = text.lines().take(30).collect::<Vec<_>>().join("\n");
    let caps = SPDX.captures(&head)?;
    let expr = caps[1]
        .trim()
        .trim_end_matches("*/")
        .trim_end_matches("-->")
        .trim();
    (!expr.is_empty()).then(|| expr.to_string())
}

static VHDL_ENTITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bentity\s+\w+\s+is\b").unwrap());
static VHDL_ARCH: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\barchitecture\s+\w+\s+of\b").unwrap());
static MODULE_DECL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bmodule\s+\w+").unwrap());
static ENDMODULE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bendmodule\b").unwrap());
static SV_MARKERS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(class|interface|logic)\b").unwrap());

/// Decides the language of a file from its extension, falling back to
/// content keywords when the extension says nothing.
pub fn classify_hdl(path: &str, text: &str) -> Lang {
    let ext = Path::new(path)
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase());
    match ext.as_deref() {
        Some("sv" | "svh") => return Lang::SystemVerilog,
        Some("v" | "vh") => return Lang::Verilog,
        Some("vhd" | "vhdl") => return Lang::VHDL,
        _ => {}
    }

    if VHDL_ENTITY.is_match(text) && VHDL_ARCH.is_match(text) {
        return Lang::VHDL;
    }
    if MODULE_DECL.is_match(text) && ENDMODULE.is_match(text) {
        return if SV_MARKERS.is_match(text) {
            Lang::SystemVerilog
        } else {
            Lang::Verilog
        };
    }
    if looks_like_prose(text) {
        Lang::NaturalLanguage
    } else {
        Lang::Other
    }
}

fn looks_like_prose(text: &str) -> bool {
    let mut visible = 0usize;
    let mut letters = 0usize;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        visible += 1;
        if c.is_alphabetic() {
            letters += 1;
        }
    }
    let words = text.split_whitespace().count();
    visible > 0 && words >= 3 && letters * 100 >= visible * 80
}

/// Keeps a document iff its license (or the source default already folded
/// into it) is allowed. Matching is case-insensitive; an `OR` expression is
/// kept when any alternative is allowed and an `AND` expression when all are.
pub fn license_filter(doc: &Document, allowlist: &BTreeSet<String>) -> bool {
    debug_assert!(!allowlist.is_empty(), "license allowlist must be nonempty");
    let Some(expr) = doc.license.as_deref() else {
        return false;
    };
    let allowed = |id: &str| {
        let id = id.trim().trim_matches(|c| c == '(' || c == ')');
        allowlist.iter().any(|a| a.eq_ignore_ascii_case(id))
    };
    expr.split(" OR ")
        .any(|alt| alt.split(" AND ").all(allowed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub utf8_ok: bool,
    pub nonempty: bool,
    /// Always true for non-HDL documents.
    pub hdl_balance_ok: bool,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

static WORD_MODULE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bmodule\b").unwrap());
static WORD_ENTITY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bentity\b").unwrap());
static WORD_ARCH: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\barchitecture\b").unwrap());

/// Lexical verification: decode status, emptiness, and HDL block balance.
pub fn sanity_check(raw: &RawDocument) -> CleanReport {
    let text = &raw.doc.text;
    let mut reasons = Vec::new();

    let utf8_ok = raw.utf8_ok;
    if !utf8_ok {
        reasons.push("invalid utf-8".to_string());
    }
    let nonempty = !text.trim().is_empty();
    if !nonempty {
        reasons.push("empty".to_string());
    }
    let hdl_balance_ok = match raw.doc.lang {
        Lang::Verilog | Lang::SystemVerilog => {
            let ok = WORD_MODULE.find_iter(text).count() == ENDMODULE.find_iter(text).count();
            if !ok {
                reasons.push("unbalanced module/endmodule".to_string());
            }
            ok
        }
        Lang::VHDL => {
            let ok = !WORD_ENTITY.is_match(text) || WORD_ARCH.is_match(text);
            if !ok {
                reasons.push("entity without architecture".to_string());
            }
            ok
        }
        Lang::NaturalLanguage | Lang::Other => true,
    };

    let verdict = if utf8_ok && nonempty && hdl_balance_ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    CleanReport {
        utf8_ok,
        nonempty,
        hdl_balance_ok,
        verdict,
        reasons,
    }
}

/// Result of running ingest over several sources.
#[derive(Debug, Clone, Default)]
pub struct IngestOutput {
    pub documents: Vec<Document>,
    pub skipped: SkipReport,
    pub scanned: usize,
    pub license_dropped: usize,
    pub sanity_failed: usize,
}

/// Scans every source in order, then applies the license gate and sanity
/// checks. Only documents with a passing report are returned.
pub fn ingest_sources(
    sources: &[SourceSpec],
    allowlist: &BTreeSet<String>,
) -> Result<IngestOutput, IngestError> {
    let mut out = IngestOutput::default();
    for spec in sources {
        let scan = scan_source(spec)?;
        out.skipped.merge(&scan.skipped);
        for raw in scan.documents {
            out.scanned += 1;
            if !license_filter(&raw.doc, allowlist) {
                out.license_dropped += 1;
                continue;
            }
            let report = sanity_check(&raw);
            if report.verdict == Verdict::Fail {
                out.sanity_failed += 1;
                for reason in report.reasons {
                    out.skipped.record(format!("sanity: {reason}"));
                }
                continue;
            }
            out.documents.push(raw.doc);
        }
    }
    Ok(out)
}
