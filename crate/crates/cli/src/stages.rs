//! Pipeline stages. Each reads the previous stage's outputs from the
//! workspace, writes its own directory, and records provenance.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use forge_core::dedup::{self, DedupReport, DupCluster};
use forge_core::doc::{read_jsonl, write_jsonl, CleanDocument, DocId, Document};
use forge_core::filter::{self, FilterStage, VerdictRecord};
use forge_core::ingest::{self, SkipReport};
use forge_core::pack::{self, ManifestEntry, PackConfig, Tier, TierManifest};
use forge_core::tokenizer::{self, TokenizerModel};
use forge_train::checkpoint;
use forge_train::config::ModelConfig;
use forge_train::generate::{self, GenerateConfig};
use forge_train::trainer::{SampleSpec, Trainer, METRICS_FILE};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::report::{self, PublishedReference, TierStats};
use crate::workspace::{read_json, stage_dir, write_json, Provenance};

pub const DOCUMENTS: &str = "documents.jsonl";
pub const REPORT: &str = "report.json";

/// Per-invocation options beyond the configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue training from the latest checkpoint instead of starting over.
    pub resume: bool,
    /// Replaces `generate.prompt`.
    pub prompt: Option<String>,
}

pub struct Ctx<'a> {
    pub r: &'a Resolved,
    pub opts: RunOptions,
}

impl Ctx<'_> {
    fn ws(&self) -> &Path {
        &self.r.workspace
    }

    fn dir(&self, stage: &str) -> PathBuf {
        stage_dir(self.ws(), stage)
    }

    /// Empties and recreates a stage directory.
    fn fresh_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.dir(stage);
        if d.exists() {
            fs::remove_dir_all(&d).with_context(|| format!("clearing {}", d.display()))?;
        }
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn prior(&self, stage: &str, file: &str) -> Result<PathBuf> {
        let p = self.dir(stage).join(file);
        ensure!(p.is_file(), "missing {} (run `{stage}` first)", p.display());
        Ok(p)
    }

    fn provenance(&self, stage: &str) -> Provenance {
        Provenance::new(stage, &self.r.config_hash)
    }

    fn finish(&self, mut prov: Provenance, dir: &Path) -> Result<()> {
        prov.collect_outputs(self.ws(), dir)?;
        prov.write(dir)?;
        Ok(())
    }

    fn tokenizer(&self) -> Result<TokenizerModel> {
        let t = &self.r.config.tokenizer;
        TokenizerModel::load(&t.vocab_file, &t.merges_file).context("loading tokenizer")
    }

    fn tokenizer_inputs(&self, prov: &mut Provenance) -> Result<()> {
        let t = &self.r.config.tokenizer;
        prov.inputs.insert("tokenizer.vocab_file".into(), crate::workspace::sha256_file(&t.vocab_file)?);
        prov.inputs.insert("tokenizer.merges_file".into(), crate::workspace::sha256_file(&t.merges_file)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub config_hash: String,
    pub scanned: usize,
    pub kept: usize,
    pub license_dropped: usize,
    pub sanity_failed: usize,
    pub skipped: SkipReport,
}

pub fn ingest(ctx: &Ctx) -> Result<String> {
    let cfg = &ctx.r.config.ingest;
    let out = ingest::ingest_sources(&cfg.sources, &cfg.license_allowlist)?;
    let dir = ctx.fresh_dir("ingest")?;
    write_jsonl(&dir.join(DOCUMENTS), &out.documents)?;
    let report = IngestReport {
        config_hash: ctx.r.config_hash.clone(),
        scanned: out.scanned,
        kept: out.documents.len(),
        license_dropped: out.license_dropped,
        sanity_failed: out.sanity_failed,
        skipped: out.skipped,
    };
    ensure!(
        report.kept + report.license_dropped + report.sanity_failed == report.scanned,
        "ingest accounting mismatch"
    );
    write_json(&dir.join(REPORT), &report)?;
    let mut prov = ctx.provenance("ingest");
    for s in &cfg.sources {
        prov.inputs.insert(
            format!("source:{}", s.name),
            crate::workspace::sha256_tree(&s.root_path)?,
        );
    }
    ctx.finish(prov, &dir)?;
    Ok(format!(
        "{} scanned, {} kept, {} license-dropped, {} failed sanity",
        report.scanned, report.kept, report.license_dropped, report.sanity_failed
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub config_hash: String,
    pub input: usize,
    pub kept: usize,
    pub dropped_short: usize,
    pub dropped_keyword: usize,
}

pub fn filter(ctx: &Ctx) -> Result<String> {
    let src = ctx.prior("ingest", DOCUMENTS)?;
    let docs: Vec<Document> = read_jsonl(&src)?;
    let (kept, log) = filter::filter_all(&docs, &ctx.r.config.filter);
    let count = |stage| log.iter().filter(|v: &&VerdictRecord| v.stage == stage).count();
    let report = FilterReport {
        config_hash: ctx.r.config_hash.clone(),
        input: docs.len(),
        kept: kept.len(),
        dropped_short: count(FilterStage::Short),
        dropped_keyword: count(FilterStage::Keyword),
    };
    ensure!(
        report.kept + report.dropped_short + report.dropped_keyword == report.input,
        "filter accounting mismatch"
    );
    let dir = ctx.fresh_dir("filter")?;
    write_jsonl(&dir.join(DOCUMENTS), &kept)?;
    write_jsonl(&dir.join("verdicts.jsonl"), &log)?;
    write_json(&dir.join(REPORT), &report)?;
    let mut prov = ctx.provenance("filter");
    prov.input_file(ctx.ws(), &src)?;
    ctx.finish(prov, &dir)?;
    Ok(format!(
        "{} in, {} kept, {} too short, {} off-topic",
        report.input, report.kept, report.dropped_short, report.dropped_keyword
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStageReport {
    pub config_hash: String,
    #[serde(flatten)]
    pub counts: DedupReport,
    pub kept: usize,
    pub b: usize,
    pub r: usize,
}

pub fn dedup(ctx: &Ctx) -> Result<String> {
    let src = ctx.prior("filter", DOCUMENTS)?;
    let docs: Vec<CleanDocument> = read_jsonl(&src)?;
    let cfg = &ctx.r.config.dedup;
    let out = dedup::dedup_all(docs, cfg)?;
    let r = &out.report;
    ensure!(
        out.kept.len() + r.exact_dropped + r.near_dropped == r.input,
        "dedup accounting mismatch"
    );
    let dir = ctx.fresh_dir("dedup")?;
    write_jsonl(&dir.join(DOCUMENTS), &out.kept)?;
    write_json(&dir.join("clusters.json"), &out.clusters as &[DupCluster])?;
    dedup::write_signatures(&dir.join("signatures.bin"), &out.signatures)?;
    let report = DedupStageReport {
        config_hash: ctx.r.config_hash.clone(),
        counts: out.report.clone(),
        kept: out.kept.len(),
        b: cfg.lsh.b,
        r: cfg.lsh.r,
    };
    write_json(&dir.join(REPORT), &report)?;
    let mut prov = ctx.provenance("dedup");
    prov.input_file(ctx.ws(), &src)?;
    ctx.finish(prov, &dir)?;
    Ok(format!(
        "{} in, {} exact and {} near duplicates dropped, {} clusters",
        r.input, r.exact_dropped, r.near_dropped, r.clusters
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeReport {
    pub config_hash: String,
    pub vocab_size: usize,
    pub documents: usize,
    /// Tokens excluding the per-document EOS.
    pub tokens: u64,
    pub stream_tokens: u64,
    pub words: u64,
    pub words_per_token: f64,
}

pub const MANIFEST: &str = "manifest.jsonl";
/// Per-document token ids, each followed by EOS, as little-endian u32.
pub const TOKENS: &str = "tokens.bin";

pub fn tokenize(ctx: &Ctx) -> Result<String> {
    let src = ctx.prior("dedup", DOCUMENTS)?;
    let docs: Vec<CleanDocument> = read_jsonl(&src)?;
    let m = ctx.tokenizer()?;
    let mut manifest = Vec::with_capacity(docs.len());
    let mut bytes = Vec::new();
    for d in &docs {
        let seq = m.append_eos(m.encode(&d.text));
        for id in &seq.ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            id: d.id,
            source: d.source.clone(),
            category: d.source_category.as_str().to_string(),
            tokens: seq.ids.len() as u64 - 1,
            words: d.text.split_whitespace().count() as u64,
        });
    }
    let tokens: u64 = manifest.iter().map(|e| e.tokens).sum();
    let words: u64 = manifest.iter().map(|e| e.words).sum();
    let report = TokenizeReport {
        config_hash: ctx.r.config_hash.clone(),
        vocab_size: m.vocab_size(),
        documents: docs.len(),
        tokens,
        stream_tokens: tokens + docs.len() as u64,
        words,
        words_per_token: if docs.is_empty() { 0.0 } else { tokenizer::words_per_token(&docs, &m)? },
    };
    ensure!(bytes.len() as u64 == report.stream_tokens * 4, "token stream accounting mismatch");
    let dir = ctx.fresh_dir("tokenize")?;
    write_jsonl(&dir.join(MANIFEST), &manifest)?;
    fs::write(dir.join(TOKENS), &bytes)?;
    write_json(&dir.join(REPORT), &report)?;
    let mut prov = ctx.provenance("tokenize");
    prov.input_file(ctx.ws(), &src)?;
    ctx.tokenizer_inputs(&mut prov)?;
    ctx.finish(prov, &dir)?;
    Ok(format!(
        "{} documents, {} tokens (+{} EOS), {} words per token",
        report.documents, report.tokens, report.documents, report.words_per_token
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub documents: usize,
    pub stream_tokens: usize,
    pub rows: usize,
    pub batches: usize,
    pub covered: usize,
    pub dropped_tail: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackReport {
    pub config_hash: String,
    pub tier: Tier,
    pub batch_rows: usize,
    pub context: usize,
    pub tier_documents: usize,
    pub tier_stream_tokens: usize,
    pub train: SplitReport,
    pub val: SplitReport,
    pub val_ids: Vec<DocId>,
}

pub const TRAIN_BATCHES: &str = "train.bin";
pub const VAL_BATCHES: &str = "val.bin";

fn read_token_stream(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    ensure!(bytes.len() % 4 == 0, "{} is not a whole number of u32 ids", path.display());
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn split_rank(seed: u64, id: &DocId) -> u64 {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(&id.0);
    dedup::stable_hash64(&key)
}

/// Chooses validation documents: lowest seeded hash rank first, at least
/// `ceil(fraction·n)` of them and enough tokens for one `T+1` row.
/// Returns member positions of the validation documents, ascending.
pub fn choose_validation(
    members: &[(DocId, usize)],
    seed: u64,
    fraction: f64,
    row_len: usize,
) -> Result<Vec<usize>> {
    let n = members.len();
    ensure!(n >= 2, "tier has {n} document(s); need at least 2 for a train/val split");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_rank(seed, &members[i].0), i));
    let min_docs = ((fraction * n as f64).ceil() as usize).max(1);
    let mut chosen = Vec::new();
    let mut tokens = 0;
    for &i in &order {
        if chosen.len() >= min_docs && tokens >= row_len {
            break;
        }
        if chosen.len() == n - 1 {
            break;
        }
        chosen.push(i);
        tokens += members[i].1;
    }
    ensure!(
        tokens >= row_len,
        "validation split has {tokens} tokens; one row needs {row_len}"
    );
    chosen.sort_unstable();
    Ok(chosen)
}

fn pack_split(stream: &[u32], cfg: &PackConfig, path: &Path, vocab: usize, documents: usize) -> Result<SplitReport> {
    let out = pack::pack(stream, cfg);
    ensure!(!out.batches.is_empty(), "{}: {} tokens make no full row", path.display(), stream.len());
    let covered = out.covered_positions(cfg.context);
    ensure!(covered + out.dropped_tail == stream.len(), "pack accounting mismatch");
    pack::write_batches(path, &out, cfg, vocab)?;
    Ok(SplitReport {
        documents,
        stream_tokens: stream.len(),
        rows: out.total_rows(),
        batches: out.batches.len(),
        covered,
        dropped_tail: out.dropped_tail,
    })
}

pub fn pack(ctx: &Ctx) -> Result<String> {
    let manifest_path = ctx.prior("tokenize", MANIFEST)?;
    let tokens_path = ctx.prior("tokenize", TOKENS)?;
    let tok_report: TokenizeReport = read_json(&ctx.prior("tokenize", REPORT)?)?;
    let manifest: Vec<ManifestEntry> = read_jsonl(&manifest_path)?;
    let stream = read_token_stream(&tokens_path)?;
    let expected: u64 = manifest.iter().map(|e| e.tokens + 1).sum();
    ensure!(expected == stream.len() as u64, "manifest and token stream disagree");

    let mut offsets = Vec::with_capacity(manifest.len());
    let mut at = 0usize;
    for e in &manifest {
        let len = e.tokens as usize + 1;
        offsets.push(at..at + len);
        at += len;
    }

    let p = &ctx.r.config.pack;
    let cfg = ctx.r.pack_config();
    let tier_manifest: TierManifest = pack::tier_assign(&manifest, p.tier)?;
    let tier_cats = p.tier.categories();
    let members: Vec<usize> = manifest
        .iter()
        .enumerate()
        .filter(|(_, e)| e.category.parse().map(|c| tier_cats.contains(&c)).unwrap_or(false))
        .map(|(i, _)| i)
        .collect();
    let sized: Vec<(DocId, usize)> = members.iter().map(|&i| (manifest[i].id, offsets[i].len())).collect();
    let val_pos = choose_validation(&sized, p.seed, p.val_fraction, cfg.row_stride())?;
    let val_docs: Vec<usize> = val_pos.iter().map(|&k| members[k]).collect();
    let mut train_docs: Vec<usize> = members.iter().copied().filter(|i| !val_docs.contains(i)).collect();
    if p.shuffle {
        train_docs.shuffle(&mut ChaCha8Rng::seed_from_u64(p.seed));
    }
    let concat = |docs: &[usize]| -> Vec<u32> { docs.iter().flat_map(|&i| stream[offsets[i].clone()].iter().copied()).collect() };
    let train_stream = concat(&train_docs);
    let val_stream = concat(&val_docs);
    ensure!(
        train_stream.len() + val_stream.len() == (tier_manifest.token_total as usize + tier_manifest.documents),
        "tier accounting mismatch"
    );

    let dir = ctx.fresh_dir("pack")?;
    let vocab = tok_report.vocab_size;
    let train = pack_split(&train_stream, &cfg, &dir.join(TRAIN_BATCHES), vocab, train_docs.len())?;
    let val = pack_split(&val_stream, &cfg, &dir.join(VAL_BATCHES), vocab, val_docs.len())?;
    write_json(&dir.join("tier_manifest.json"), &tier_manifest)?;
    let report = PackReport {
        config_hash: ctx.r.config_hash.clone(),
        tier: p.tier,
        batch_rows: cfg.batch_rows,
        context: cfg.context,
        tier_documents: members.len(),
        tier_stream_tokens: train_stream.len() + val_stream.len(),
        train,
        val,
        val_ids: val_docs.iter().map(|&i| manifest[i].id).collect(),
    };
    write_json(&dir.join(REPORT), &report)?;
    let mut prov = ctx.provenance("pack");
    prov.input_file(ctx.ws(), &manifest_path)?;
    prov.input_file(ctx.ws(), &tokens_path)?;
    ctx.finish(prov, &dir)?;
    Ok(format!(
        "tier {:?}: {} train rows ({} dropped), {} val rows ({} dropped)",
        p.tier, report.train.rows, report.train.dropped_tail, report.val.rows, report.val.dropped_tail
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub perplexity: f64,
    pub sample_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub model: ModelConfig,
    pub num_params: usize,
    pub steps: u64,
    pub checkpoints: Vec<CheckpointSummary>,
}

fn model_config(ctx: &Ctx, vocab: usize) -> Result<ModelConfig> {
    if let Some(v) = ctx.r.config.model.vocab {
        ensure!(v == vocab, "model.vocab = {v} but the tokenizer has {vocab} entries");
    }
    Ok(ctx.r.model_config(vocab))
}

pub fn train(ctx: &Ctx) -> Result<String> {
    let train_path = ctx.prior("pack", TRAIN_BATCHES)?;
    let val_path = ctx.prior("pack", VAL_BATCHES)?;
    let m = ctx.tokenizer()?;
    let vocab = m.vocab_size();
    let train_batches = pack::read_batches(&train_path, Some(vocab))?.batches;
    let val_batches = pack::read_batches(&val_path, Some(vocab))?.batches;
    let cfg = &ctx.r.config;
    let model_cfg = model_config(ctx, vocab)?;

    let dir = ctx.dir("train");
    let mut trainer = if ctx.opts.resume && dir.exists() {
        let latest = checkpoint::latest(&dir)?;
        let t = Trainer::resume(&latest)?;
        let fresh = Trainer::new(model_cfg.clone(), cfg.optimizer.clone(), cfg.schedule.clone())?;
        ensure!(
            t.config_hash() == fresh.config_hash(),
            "checkpoint {} was produced by a different model/optimizer/schedule configuration",
            latest.display()
        );
        t
    } else {
        ctx.fresh_dir("train")?;
        Trainer::new(model_cfg.clone(), cfg.optimizer.clone(), cfg.schedule.clone())?
    };
    let sample = SampleSpec {
        codec: &m,
        prompt: cfg.generate.prompt.clone(),
        generate: cfg.generate.settings(),
    };
    trainer.run(&train_batches, &val_batches, &sample, Some(&dir))?;

    // the summary covers every checkpoint on disk, resumed or not
    let mut steps: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(checkpoint::META_FILE).is_file())
        .collect();
    steps.sort();
    let checkpoints = steps
        .iter()
        .map(|p| {
            let meta = checkpoint::load_meta(p)?;
            Ok(CheckpointSummary {
                step: meta.step,
                train_loss: meta.train_loss,
                val_loss: meta.val_loss,
                perplexity: meta.perplexity,
                sample_text: meta.sample_text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = TrainSummary {
        config_hash: ctx.r.config_hash.clone(),
        num_params: trainer.model.num_params(),
        model: model_cfg,
        steps: trainer.step,
        checkpoints,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let mut prov = ctx.provenance("train");
    prov.input_file(ctx.ws(), &train_path)?;
    prov.input_file(ctx.ws(), &val_path)?;
    ctx.tokenizer_inputs(&mut prov)?;
    ctx.finish(prov, &dir)?;
    let last = summary.checkpoints.last().expect("at least one checkpoint");
    Ok(format!(
        "{} steps, {} parameters, val loss {:.4} (perplexity {:.2})",
        summary.steps, summary.num_params, last.val_loss, last.perplexity
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub config_hash: String,
    pub checkpoint_step: u64,
    pub prompt: String,
    pub continuation: String,
    pub settings: GenerateConfig,
}

pub fn generate(ctx: &Ctx) -> Result<String> {
    let train_dir = ctx.dir("train");
    ensure!(train_dir.is_dir(), "missing {} (run `train` first)", train_dir.display());
    let latest = checkpoint::latest(&train_dir)?;
    let (meta, model) = checkpoint::load_model(&latest)?;
    let m = ctx.tokenizer()?;
    ensure!(model.cfg.vocab == m.vocab_size(), "checkpoint vocabulary does not match the tokenizer");
    let g = &ctx.r.config.generate;
    let prompt = ctx.opts.prompt.clone().unwrap_or_else(|| g.prompt.clone());
    let settings = g.settings();
    let continuation = generate::generate(&model, &m, &prompt, &settings)?;
    let dir = ctx.fresh_dir("generate")?;
    let record = SampleRecord {
        config_hash: ctx.r.config_hash.clone(),
        checkpoint_step: meta.step,
        prompt,
        continuation,
        settings,
    };
    write_json(&dir.join("sample.json"), &record)?;
    let mut prov = ctx.provenance("generate");
    prov.input_file(ctx.ws(), &latest.join(checkpoint::PARAMS_FILE))?;
    ctx.tokenizer_inputs(&mut prov)?;
    ctx.finish(prov, &dir)?;
    Ok(format!("step {}: {:?} -> {:?}", record.checkpoint_step, record.prompt, record.continuation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub step: u64,
    pub tokens_per_sec: f64,
    pub batches_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropCounts {
    pub ingest: IngestReport,
    pub filter: FilterReport,
    pub dedup: DedupStageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub config_hash: String,
    pub configured_tier: Tier,
    pub tiers: Vec<TierStats>,
    pub words_per_token: f64,
    pub drops: DropCounts,
    pub packing: PackReport,
    /// Wall-clock measurement of the latest train run; absent before training.
    pub measured_throughput: Option<Throughput>,
    pub published_reference: PublishedReference,
}

/// Mean throughput over the checkpoints after step 0 of the latest run.
fn measured_throughput(metrics: &Path) -> Result<Option<Throughput>> {
    #[derive(Deserialize)]
    struct Row {
        step: u64,
        tokens_per_sec: f64,
        batches_per_sec: f64,
    }
    let mut rdr = csv::Reader::from_path(metrics)?;
    let rows: Vec<Row> = rdr.deserialize().collect::<Result<_, _>>()?;
    let timed: Vec<&Row> = rows.iter().filter(|r| r.step > 0).collect();
    let Some(last) = timed.last() else {
        return Ok(None);
    };
    let n = timed.len() as f64;
    Ok(Some(Throughput {
        step: last.step,
        tokens_per_sec: timed.iter().map(|r| r.tokens_per_sec).sum::<f64>() / n,
        batches_per_sec: timed.iter().map(|r| r.batches_per_sec).sum::<f64>() / n,
    }))
}

pub fn stats(ctx: &Ctx) -> Result<String> {
    let manifest_path = ctx.prior("tokenize", MANIFEST)?;
    let manifest: Vec<ManifestEntry> = read_jsonl(&manifest_path)?;
    let tiers = report::all_tiers(&manifest)?;
    ensure!(tiers.iter().all(|t| t.sums_match), "per-source tokens do not sum to tier totals");
    let inputs = [
        ctx.prior("ingest", REPORT)?,
        ctx.prior("filter", REPORT)?,
        ctx.prior("dedup", REPORT)?,
        ctx.prior("tokenize", REPORT)?,
        ctx.prior("pack", REPORT)?,
    ];
    let tok: TokenizeReport = read_json(&inputs[3])?;
    let metrics = ctx.dir("train").join(METRICS_FILE);
    let measured = if metrics.is_file() { measured_throughput(&metrics)? } else { None };
    let report = StatsReport {
        config_hash: ctx.r.config_hash.clone(),
        configured_tier: ctx.r.config.pack.tier,
        tiers,
        words_per_token: tok.words_per_token,
        drops: DropCounts {
            ingest: read_json(&inputs[0])?,
            filter: read_json(&inputs[1])?,
            dedup: read_json(&inputs[2])?,
        },
        packing: read_json(&inputs[4])?,
        measured_throughput: measured,
        published_reference: report::published_reference(),
    };
    let dir = ctx.fresh_dir("stats")?;
    write_json(&dir.join(REPORT), &report)?;
    let mut prov = ctx.provenance("stats");
    prov.input_file(ctx.ws(), &manifest_path)?;
    for p in &inputs {
        prov.input_file(ctx.ws(), p)?;
    }
    if metrics.is_file() {
        prov.input_file(ctx.ws(), &metrics)?;
    }
    ctx.finish(prov, &dir)?;
    let totals: Vec<String> = report
        .tiers
        .iter()
        .map(|t| format!("{:?} {}", t.tier, t.token_total))
        .collect();
    Ok(format!("tier tokens: {}", totals.join(", ")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionsRecord {
    pub inputs: crate::config::EmissionsInputs,
    pub kg_co2e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub checkpoints: usize,
    pub final_step: u64,
    pub final_val_loss: f64,
    pub final_perplexity: f64,
    pub curves: Vec<String>,
    pub emissions: Option<EmissionsRecord>,
}

pub fn report(ctx: &Ctx) -> Result<String> {
    let metrics = ctx.prior("train", METRICS_FILE)?;
    let points = report::read_curve(&metrics)?;
    let dir = ctx.fresh_dir("report")?;
    let curves = report::export_curves(&metrics, &dir)?;
    let emissions = match &ctx.r.config.report.emissions {
        Some(e) => Some(EmissionsRecord {
            inputs: e.clone(),
            kg_co2e: report::emissions(e)?,
        }),
        None => None,
    };
    let last = points.last().expect("read_curve rejects empty metrics");
    let summary = RunReport {
        config_hash: ctx.r.config_hash.clone(),
        checkpoints: points.len(),
        final_step: last.step,
        final_val_loss: last.val_loss,
        final_perplexity: last.perplexity,
        curves: curves
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        emissions,
    };
    write_json(&dir.join(REPORT), &summary)?;
    let mut prov = ctx.provenance("report");
    prov.input_file(ctx.ws(), &metrics)?;
    ctx.finish(prov, &dir)?;
    Ok(match &summary.emissions {
        Some(e) => format!("{} curve points, {:.3} kg CO2e estimated", summary.checkpoints, e.kg_co2e),
        None => format!("{} curve points", summary.checkpoints),
    })
}

pub type StageFn = fn(&Ctx) -> Result<String>;

pub fn lookup(stage: &str) -> Option<StageFn> {
    let f: StageFn = match stage {
        "ingest" => ingest,
        "filter" => filter,
        "dedup" => dedup,
        "tokenize" => tokenize,
        "pack" => pack,
        "stats" => stats,
        "train" => train,
        "generate" => generate,
        "report" => report,
        _ => return None,
    };
    Some(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn members(sizes: &[usize]) -> Vec<(DocId, usize)> {
        sizes.iter().enumerate().map(|(i, &n)| (DocId::from_text(&format!("doc {i}")), n)).collect()
    }

    #[test]
    fn validation_takes_fraction_then_enough_tokens() {
        let m = members(&[100; 40]);
        let v = choose_validation(&m, 1, 0.05, 17).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.windows(2).all(|w| w[0] < w[1]));

        // tiny documents: keep adding until one row fits
        let m = members(&[5; 40]);
        let v = choose_validation(&m, 1, 0.05, 17).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn validation_is_seeded_and_leaves_training_data() {
        let m = members(&[50; 30]);
        let a = choose_validation(&m, 1, 0.2, 10).unwrap();
        assert_eq!(a, choose_validation(&m, 1, 0.2, 10).unwrap());
        assert_ne!(a, choose_validation(&m, 2, 0.2, 10).unwrap());

        assert!(choose_validation(&members(&[50]), 1, 0.5, 10).is_err());
        // at least one document always stays in training
        assert!(choose_validation(&members(&[5, 5, 5]), 1, 0.5, 100).is_err());
        assert!(choose_validation(&members(&[5, 5, 50]), 1, 0.01, 10).unwrap().len() <= 2);
    }
}
