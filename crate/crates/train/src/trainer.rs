//! Training loop: accumulated micro-batches, Adam steps, periodic
//! evaluation with a sample continuation, resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use forge_core::pack::PackedBatch;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{AdamState, StepError};
use crate::checkpoint::{self, CheckpointError, CheckpointMeta, RngState};
use crate::config::{ConfigError, ModelConfig, OptimizerConfig, TrainSchedule};
use crate::generate::{self, Codec, GenerateConfig, GenerateError};
use crate::model::{Model, ModelError};
use crate::ops;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,train_loss,val_loss,perplexity,tokens_per_sec,batches_per_sec";
/// Per-checkpoint wallclock and throughput; kept apart from `meta.json`
/// because it varies between otherwise identical runs.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{0} batch set is empty")]
    EmptyData(&'static str),
    #[error("batch {index}: {message}")]
    BatchShape { index: usize, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Evaluation record written at step 0 and every `checkpoint_every` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub perplexity: f64,
    pub sample_text: String,
    pub tokens_per_sec: f64,
    pub batches_per_sec: f64,
    pub wallclock_secs: f64,
}

impl CheckpointRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3}",
            self.step,
            self.train_loss.map(|l| l.to_string()).unwrap_or_default(),
            self.val_loss,
            self.perplexity,
            self.tokens_per_sec,
            self.batches_per_sec
        )
    }
}

/// Fixed prompt used for the sample continuation at each checkpoint.
pub struct SampleSpec<'a> {
    pub codec: &'a dyn Codec,
    pub prompt: String,
    pub generate: GenerateConfig,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub optimizer: OptimizerConfig,
    pub schedule: TrainSchedule,
    pub step: u64,
    /// Micro-batches consumed so far; the data stream position.
    pub cursor: u64,
    last_train_loss: Option<f64>,
}

fn check_batches(batches: &[PackedBatch], cfg: &ModelConfig, what: &'static str) -> Result<(), TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyData(what));
    }
    for b in batches {
        let bad = |message: String| TrainError::BatchShape { index: b.batch_index, message };
        if b.row_len < 2 || b.row_len - 1 > cfg.context {
            return Err(bad(format!("row length {} does not fit context {}", b.row_len, cfg.context)));
        }
        if b.rows == 0 || b.data.len() != b.rows * b.row_len {
            return Err(bad(format!("{} ids for {} rows of {}", b.data.len(), b.rows, b.row_len)));
        }
    }
    Ok(())
}

fn split(batch: &PackedBatch) -> (Vec<u32>, Vec<u32>, usize, usize) {
    let t = batch.row_len - 1;
    let mut inputs = Vec::with_capacity(batch.rows * t);
    let mut targets = Vec::with_capacity(batch.rows * t);
    for r in 0..batch.rows {
        inputs.extend_from_slice(batch.inputs(r));
        targets.extend_from_slice(batch.targets(r));
    }
    (inputs, targets, batch.rows, t)
}

impl Trainer {
    pub fn new(model: ModelConfig, optimizer: OptimizerConfig, schedule: TrainSchedule) -> Result<Self, TrainError> {
        optimizer.validate()?;
        schedule.validate(&optimizer)?;
        let model = Model::init(&model, schedule.seed)?;
        let adam = AdamState::new(&model.tensors);
        Ok(Trainer {
            model,
            adam,
            optimizer,
            schedule,
            step: 0,
            cursor: 0,
            last_train_loss: None,
        })
    }

    /// Restores the exact state saved in a checkpoint directory.
    pub fn resume(dir: &Path) -> Result<Self, TrainError> {
        let (meta, model, adam) = checkpoint::load_state(dir)?;
        Ok(Trainer {
            model,
            adam,
            optimizer: meta.optimizer,
            schedule: meta.schedule,
            step: meta.step,
            cursor: meta.rng_state.data_cursor,
            last_train_loss: meta.train_loss,
        })
    }

    pub fn config_hash(&self) -> String {
        checkpoint::config_hash(&self.model.cfg, &self.optimizer, &self.schedule)
    }

    /// One optimizer step over `grad_accum` consecutive micro-batches
    /// (wrapping around the training set). Returns the mean micro-batch loss.
    pub fn train_step(&mut self, train: &[PackedBatch]) -> Result<f64, TrainError> {
        let accum = self.optimizer.grad_accum;
        let mut grads = self.model.zero_grads();
        let mut loss_sum = 0.0;
        for _ in 0..accum {
            let batch = &train[(self.cursor % train.len() as u64) as usize];
            let (inputs, targets, b, t) = split(batch);
            loss_sum += self
                .model
                .loss_and_grad(&inputs, &targets, b, t, &mut grads, 1.0 / accum as f64)?;
            self.cursor += 1;
        }
        let loss = loss_sum / accum as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step + 1 });
        }
        self.adam.step(&mut self.model.tensors, &grads, &self.optimizer)?;
        self.step += 1;
        self.last_train_loss = Some(loss);
        Ok(loss)
    }

    /// Mean cross-entropy over every target position of `val`.
    pub fn evaluate(&self, val: &[PackedBatch]) -> Result<f64, TrainError> {
        let mut sum = 0.0;
        let mut positions = 0usize;
        for batch in val {
            let (inputs, targets, b, t) = split(batch);
            sum += self.model.loss(&inputs, &targets, b, t)? * (b * t) as f64;
            positions += b * t;
        }
        Ok(sum / positions as f64)
    }

    fn record(
        &self,
        val: &[PackedBatch],
        sample: &SampleSpec<'_>,
        tokens_per_sec: f64,
        batches_per_sec: f64,
        started: Instant,
    ) -> Result<CheckpointRecord, TrainError> {
        let val_loss = self.evaluate(val)?;
        let gen_cfg = GenerateConfig {
            seed: sample.generate.seed ^ self.schedule.seed.rotate_left(17) ^ self.step,
            ..sample.generate.clone()
        };
        let sample_text = generate::generate(&self.model, sample.codec, &sample.prompt, &gen_cfg)?;
        Ok(CheckpointRecord {
            step: self.step,
            train_loss: self.last_train_loss,
            val_loss,
            perplexity: ops::perplexity(val_loss),
            sample_text,
            tokens_per_sec,
            batches_per_sec,
            wallclock_secs: started.elapsed().as_secs_f64(),
        })
    }

    fn persist(&self, root: &Path, rec: &CheckpointRecord) -> Result<(), TrainError> {
        let dir = checkpoint::checkpoint_dir(root, rec.step);
        let meta = CheckpointMeta {
            step: rec.step,
            val_loss: rec.val_loss,
            perplexity: rec.perplexity,
            train_loss: rec.train_loss,
            sample_text: rec.sample_text.clone(),
            config_hash: self.config_hash(),
            rng_state: RngState {
                seed: self.schedule.seed,
                data_cursor: self.cursor,
            },
            model: self.model.cfg.clone(),
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
        };
        checkpoint::save(&dir, &meta, &self.model, &self.adam)?;
        let timing = serde_json::json!({
            "wallclock_secs": rec.wallclock_secs,
            "tokens_per_sec": rec.tokens_per_sec,
            "batches_per_sec": rec.batches_per_sec,
        });
        fs::write(dir.join(TIMING_FILE), format!("{timing:#}\n"))?;

        let metrics = root.join(METRICS_FILE);
        let fresh = !metrics.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(metrics)?;
        if fresh {
            writeln!(f, "{METRICS_HEADER}")?;
        }
        writeln!(f, "{}", rec.csv_row())?;
        Ok(())
    }

    /// Trains to `schedule.total_steps`, evaluating at step 0 (fresh runs),
    /// every `checkpoint_every` steps and at the final step. With `out`,
    /// each evaluation is persisted as a checkpoint and a metrics row.
    pub fn run(
        &mut self,
        train: &[PackedBatch],
        val: &[PackedBatch],
        sample: &SampleSpec<'_>,
        out: Option<&Path>,
    ) -> Result<Vec<CheckpointRecord>, TrainError> {
        check_batches(train, &self.model.cfg, "training")?;
        check_batches(val, &self.model.cfg, "validation")?;
        if let Some(root) = out {
            fs::create_dir_all(root)?;
        }
        let started = Instant::now();
        let mut records = Vec::new();
        let emit = |this: &Self, records: &mut Vec<CheckpointRecord>, tps: f64, bps: f64| -> Result<(), TrainError> {
            let rec = this.record(val, sample, tps, bps, started)?;
            if let Some(root) = out {
                this.persist(root, &rec)?;
            }
            records.push(rec);
            Ok(())
        };
        if self.step == 0 {
            emit(self, &mut records, 0.0, 0.0)?;
        }
        let mut window = Instant::now();
        let (mut tokens, mut micro) = (0usize, 0usize);
        while self.step < self.schedule.total_steps {
            let before = self.cursor;
            self.train_step(train)?;
            for c in before..self.cursor {
                let b = &train[(c % train.len() as u64) as usize];
                tokens += b.rows * (b.row_len - 1);
                micro += 1;
            }
            if self.step % self.schedule.checkpoint_every == 0 || self.step == self.schedule.total_steps {
                let secs = window.elapsed().as_secs_f64().max(1e-9);
                emit(self, &mut records, tokens as f64 / secs, micro as f64 / secs)?;
                window = Instant::now();
                tokens = 0;
                micro = 0;
            }
        }
        Ok(records)
    }
}
