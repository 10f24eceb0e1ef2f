//! Reports: corpus statistics, loss curves and the emissions estimate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use forge_core::pack::{proportion, ManifestEntry, Tier, TierManifest};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EmissionsInputs;

#[derive(Debug, Error, PartialEq)]
#[error("{field} must be a positive finite number, got {value}")]
pub struct EmissionsError {
    pub field: &'static str,
    pub value: f64,
}

/// `avg_power_kw × hours × pue × carbon_intensity_kg_per_kwh`, in kg CO2e.
pub fn emissions(e: &EmissionsInputs) -> Result<f64, EmissionsError> {
    for (field, value) in [
        ("avg_power_kw", e.avg_power_kw),
        ("hours", e.hours),
        ("pue", e.pue),
        ("carbon_intensity_kg_per_kwh", e.carbon_intensity_kg_per_kwh),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(EmissionsError { field, value });
        }
    }
    Ok(e.avg_power_kw * e.hours * e.pue * e.carbon_intensity_kg_per_kwh)
}

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("metrics: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics file has no rows")]
    Empty,
    #[error("metrics row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub val_loss: f64,
    pub perplexity: f64,
}

#[derive(Deserialize)]
struct MetricsRow {
    step: u64,
    val_loss: f64,
    perplexity: f64,
}

pub fn read_curve(metrics_csv: &Path) -> Result<Vec<CurvePoint>, CurveError> {
    let mut reader = csv::Reader::from_path(metrics_csv)?;
    let mut points = Vec::new();
    for (i, row) in reader.deserialize::<MetricsRow>().enumerate() {
        let row = row.map_err(|e| CurveError::Malformed {
            row: i + 1,
            message: e.to_string(),
        })?;
        if !row.val_loss.is_finite() || !row.perplexity.is_finite() {
            return Err(CurveError::Malformed {
                row: i + 1,
                message: "non-finite value".into(),
            });
        }
        points.push(CurvePoint {
            step: row.step,
            val_loss: row.val_loss,
            perplexity: row.perplexity,
        });
    }
    if points.is_empty() {
        return Err(CurveError::Empty);
    }
    Ok(points)
}

/// Self-contained SVG line chart with one marker per point.
pub fn svg_line_chart(title: &str, y_label: &str, points: &[(u64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 56.0;
    let (x_min, x_max) = points
        .iter()
        .fold((u64::MAX, 0), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let (y_min, y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    let x_span = (x_max.saturating_sub(x_min)).max(1) as f64;
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let px = |x: u64| PAD + (x - x_min) as f64 / x_span * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y_min) / y_span * (H - 2.0 * PAD);

    let polyline: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">step</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n\
         <text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{x_min}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{x_max}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        W / 2.0,
        xml_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label),
        H - PAD + 14.0,
        W - PAD,
        H - PAD + 14.0,
        PAD - 4.0,
        H - PAD,
        y_min,
        PAD - 4.0,
        PAD + 4.0,
        y_max,
        polyline.join(" "),
    );
    for &(x, y) in points {
        svg.push_str(&format!(
            "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>\n",
            px(x),
            py(y)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `val_loss.{csv,svg}` and `perplexity.{csv,svg}` into `out_dir`.
/// Nothing is written when the metrics cannot be read.
pub fn export_curves(metrics_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CurveError> {
    let points = read_curve(metrics_csv)?;
    let loss: Vec<(u64, f64)> = points.iter().map(|p| (p.step, p.val_loss)).collect();
    let ppl: Vec<(u64, f64)> = points.iter().map(|p| (p.step, p.perplexity)).collect();
    let files = [
        ("val_loss.csv", series_csv("val_loss", &loss)),
        ("val_loss.svg", svg_line_chart("Validation loss", "cross-entropy (nats)", &loss)),
        ("perplexity.csv", series_csv("perplexity", &ppl)),
        ("perplexity.svg", svg_line_chart("Validation perplexity", "perplexity", &ppl)),
    ];
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

fn series_csv(column: &str, points: &[(u64, f64)]) -> String {
    let mut s = format!("step,{column}\n");
    for (x, y) in points {
        s.push_str(&format!("{x},{y}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceShare {
    pub source: String,
    pub tokens: u64,
    pub proportion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub tier: Tier,
    pub documents: usize,
    pub token_total: u64,
    pub per_source: Vec<SourceShare>,
    /// Per-source tokens sum to the tier total.
    pub sums_match: bool,
}

pub fn tier_stats(m: &TierManifest) -> TierStats {
    let per_source = m
        .per_source_tokens
        .iter()
        .map(|(source, &tokens)| SourceShare {
            source: source.clone(),
            tokens,
            proportion: proportion(tokens, m.token_total)
                .map(|p| p.to_string())
                .unwrap_or_else(|_| "n/a".into()),
        })
        .collect();
    TierStats {
        tier: m.tier,
        documents: m.documents,
        token_total: m.token_total,
        per_source,
        sums_match: m.per_source_tokens.values().sum::<u64>() == m.token_total,
    }
}

/// Published full-scale figures, shown for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub note: String,
    pub tier_tokens: BTreeMap<String, u64>,
    pub cwe_entries_in_small_tier: CweShare,
    pub throughput_batches_per_sec: f64,
    pub throughput_tokens_per_sec: f64,
    pub training_days: f64,
    pub co2e_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweShare {
    pub tokens: u64,
    pub tier_total: u64,
    pub proportion: String,
}

pub const CWE_TOKENS: u64 = 70_000;

pub fn published_reference() -> PublishedReference {
    let small = Tier::Small.reference_total();
    PublishedReference {
        note: "figures of the original full-scale study; context only, not targets of this run".into(),
        tier_tokens: Tier::ALL
            .iter()
            .map(|t| (format!("{t:?}").to_lowercase(), t.reference_total()))
            .collect(),
        cwe_entries_in_small_tier: CweShare {
            tokens: CWE_TOKENS,
            tier_total: small,
            proportion: proportion(CWE_TOKENS, small).expect("nonzero total").to_string(),
        },
        throughput_batches_per_sec: 1.07,
        throughput_tokens_per_sec: 11_000.0,
        training_days: 8.0,
        co2e_kg: 90.0,
    }
}

/// Per-tier totals over all manifest entries.
pub fn all_tiers(entries: &[ManifestEntry]) -> Result<Vec<TierStats>, forge_core::pack::PackError> {
    Tier::ALL
        .iter()
        .map(|&t| forge_core::pack::tier_assign(entries, t).map(|m| tier_stats(&m)))
        .collect()
}
