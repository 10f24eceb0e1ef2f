//! Text processing: NFC normalization, whitespace scrubbing, short-content
//! and hardware-keyword relevance filtering.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::{is_nfc, UnicodeNormalization};

use crate::doc::{CleanDocument, DocId, SourceCategory};

/// Seed vocabulary for hardware relevance. Not exhaustive; override in config.
pub const DEFAULT_KEYWORDS: &[&str] = &[
    "verilog",
    "systemverilog",
    "vhdl",
    "fpga",
    "asic",
    "rtl",
    "soc",
    "netlist",
    "testbench",
    "synthesis",
    "cwe",
    "hardware",
    "register",
    "flip",
    "flop",
    "clock",
    "latch",
    "trojan",
    "firmware",
    "microarchitecture",
    "silicon",
    "transistor",
    "chip",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterConfigError {
    #[error("min_keyword_hits must be >= 1")]
    MinKeywordHits,
    #[error("min_chars must be >= 1")]
    MinChars,
    #[error("keywords must be nonempty when keyword filtering is enabled")]
    NoKeywords,
    #[error("keyword {0:?} is not lowercase")]
    NotLowercase(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub keywords: BTreeSet<String>,
    pub min_keyword_hits: usize,
    pub min_chars: usize,
    pub scrub_nl_punct: bool,
    pub categories_subject_to_keywords: BTreeSet<SourceCategory>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            min_keyword_hits: 3,
            min_chars: 200,
            scrub_nl_punct: true,
            categories_subject_to_keywords: [SourceCategory::CuratedNL, SourceCategory::WebNL]
                .into(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterConfigError> {
        if self.min_keyword_hits == 0 {
            return Err(FilterConfigError::MinKeywordHits);
        }
        if self.min_chars == 0 {
            return Err(FilterConfigError::MinChars);
        }
        if !self.categories_subject_to_keywords.is_empty() && self.keywords.is_empty() {
            return Err(FilterConfigError::NoKeywords);
        }
        if let Some(k) = self.keywords.iter().find(|k| k.to_lowercase() != **k) {
            return Err(FilterConfigError::NotLowercase(k.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Keyword,
    Short,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub kept: bool,
    pub stage: FilterStage,
    pub keyword_hits: usize,
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: DocId,
    pub kept: bool,
    pub stage: FilterStage,
    pub keyword_hits: usize,
}

pub fn normalize_nfc(text: &str) -> String {
    if is_nfc(text) {
        text.to_string()
    } else {
        text.nfc().collect()
    }
}

fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Total case-insensitive whole-word occurrences of any keyword.
///
/// A keyword containing non-alphanumeric characters (`"flip flop"`,
/// `"system-on-chip"`) matches the same run of words in the text.
pub fn keyword_relevance(text: &str, keywords: &BTreeSet<String>) -> usize {
    let words: Vec<String> = word_tokens(text).collect();
    let mut hits = 0;
    for kw in keywords {
        let parts: Vec<String> = word_tokens(kw).collect();
        match parts.len() {
            0 => {}
            1 => hits += words.iter().filter(|w| **w == parts[0]).count(),
            n => hits += words.windows(n).filter(|w| *w == parts.as_slice()).count(),
        }
    }
    hits
}

/// Whitespace and control-character cleanup. For natural-language text with
/// `scrub_nl_punct`, runs of four or more identical punctuation marks also
/// collapse to one.
pub fn scrub(text: &str, is_code: bool, scrub_nl_punct: bool) -> String {
    let stripped: String = text
        .chars()
        .filter(|&c| !c.is_control() || c == '\n' || c == '\t')
        .collect();

    let mut lines: Vec<String> = Vec::new();
    for line in stripped.split('\n') {
        let mut out = String::with_capacity(line.len());
        let mut in_blank = false;
        for c in line.chars() {
            if c == ' ' || c == '\t' {
                if !in_blank {
                    out.push(' ');
                }
                in_blank = true;
            } else {
                out.push(c);
                in_blank = false;
            }
        }
        lines.push(out.trim().to_string());
    }

    let mut doc = String::with_capacity(stripped.len());
    let mut blank_run = 0;
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            blank_run += 1;
            // at most one empty line between paragraphs, i.e. two newlines
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        if i > 0 {
            doc.push('\n');
        }
        doc.push_str(line);
    }
    let mut doc = doc.trim().to_string();

    if !is_code && scrub_nl_punct {
        doc = collapse_punct_runs(&doc);
    }
    doc
}

fn collapse_punct_runs(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let mut j = i + 1;
        while j < chars.len() && chars[j] == c {
            j += 1;
        }
        if c.is_ascii_punctuation() && j - i >= 4 {
            out.push(c);
        } else {
            out.extend(&chars[i..j]);
        }
        i = j;
    }
    out
}

/// normalize → scrub → short filter → keyword filter.
pub fn filter_pipeline(
    doc: &CleanDocument,
    cfg: &FilterConfig,
) -> (Option<CleanDocument>, FilterVerdict) {
    let normalized = normalize_nfc(&doc.text);
    let text = scrub(&normalized, doc.lang.is_hdl(), cfg.scrub_nl_punct);

    if text.chars().count() < cfg.min_chars {
        let verdict = FilterVerdict {
            kept: false,
            stage: FilterStage::Short,
            keyword_hits: 0,
        };
        return (None, verdict);
    }

    let mut keyword_hits = 0;
    if cfg
        .categories_subject_to_keywords
        .contains(&doc.source_category)
    {
        keyword_hits = keyword_relevance(&text, &cfg.keywords);
        if keyword_hits < cfg.min_keyword_hits {
            let verdict = FilterVerdict {
                kept: false,
                stage: FilterStage::Keyword,
                keyword_hits,
            };
            return (None, verdict);
        }
    }

    let kept = CleanDocument {
        text,
        ..doc.clone()
    };
    let verdict = FilterVerdict {
        kept: true,
        stage: FilterStage::None,
        keyword_hits,
    };
    (Some(kept), verdict)
}

/// Runs [`filter_pipeline`] over a batch, preserving input order.
pub fn filter_all(
    docs: &[CleanDocument],
    cfg: &FilterConfig,
) -> (Vec<CleanDocument>, Vec<VerdictRecord>) {
    use rayon::prelude::*;

    let results: Vec<_> = docs.par_iter().map(|d| filter_pipeline(d, cfg)).collect();
    let mut kept = Vec::new();
    let mut log = Vec::with_capacity(docs.len());
    for (doc, (out, verdict)) in docs.iter().zip(results) {
        log.push(VerdictRecord {
            id: doc.id,
            kept: verdict.kept,
            stage: verdict.stage,
            keyword_hits: verdict.keyword_hits,
        });
        kept.extend(out);
    }
    (kept, log)
}
