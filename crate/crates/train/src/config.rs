use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn err(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    LearnedAbsolute,
    Rotary,
}

/// Architecture constants of the full-size model: layers, heads, head
/// dimension, context length. Kept for reference; desk runs use small values.
pub const FULL_SCALE: (usize, usize, usize, usize) = (24, 32, 64, 2048);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub context: usize,
    pub vocab: usize,
    #[serde(default)]
    pub positional: Positional,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// The 24-layer, 32-head, 64-dim, 2048-context configuration.
    pub fn full_scale(vocab: usize) -> Self {
        let (n_layers, n_heads, d_head, context) = FULL_SCALE;
        ModelConfig {
            n_layers,
            n_heads,
            d_head,
            context,
            vocab,
            positional: Positional::LearnedAbsolute,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_layers == 0 {
            return Err(err("model.n_layers", "must be >= 1"));
        }
        if self.n_heads == 0 || self.d_head == 0 {
            return Err(err("model.n_heads", "heads and head dimension must be >= 1"));
        }
        if self.context < 2 {
            return Err(err("model.context", "must be >= 2"));
        }
        if self.vocab < 2 {
            return Err(err("model.vocab", "must be >= 2"));
        }
        if self.positional == Positional::Rotary && self.d_head % 2 != 0 {
            return Err(err("model.d_head", "rotary embeddings need an even head dimension"));
        }
        Ok(())
    }

    /// Total trainable scalars.
    pub fn num_params(&self) -> usize {
        let c = self.d_model();
        let per_layer = 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (4 * c * c + 4 * c) + (4 * c * c + c);
        let pos = match self.positional {
            Positional::LearnedAbsolute => self.context * c,
            Positional::Rotary => 0,
        };
        self.vocab * c + pos + self.n_layers * per_layer + 2 * c + self.vocab * c + self.vocab
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Decoupled; applied to weight matrices and embeddings only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-7,
            grad_accum: 25,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(err("optimizer.lr", "must be a positive finite number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(err("optimizer.weight_decay", "must be >= 0"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(err("optimizer.beta1", "must lie in (0, 1)"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(err("optimizer.beta2", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(err("optimizer.eps", "must be > 0"));
        }
        if self.grad_accum == 0 {
            return Err(err("optimizer.grad_accum", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_steps: u64,
    /// Micro-iterations; must equal `total_steps * grad_accum` when given.
    #[serde(default)]
    pub total_iterations: Option<u64>,
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainSchedule {
    /// 30,000 steps, 750,000 iterations, evaluation every 1,000 steps.
    pub fn full_scale() -> Self {
        TrainSchedule {
            total_steps: 30_000,
            total_iterations: Some(750_000),
            checkpoint_every: 1_000,
            seed: 0,
        }
    }

    pub fn validate(&self, opt: &OptimizerConfig) -> Result<(), ConfigError> {
        if self.total_steps == 0 {
            return Err(err("schedule.total_steps", "must be >= 1"));
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.total_steps {
            return Err(err(
                "schedule.checkpoint_every",
                format!("must lie in [1, total_steps = {}]", self.total_steps),
            ));
        }
        if let Some(iters) = self.total_iterations {
            let expected = self.total_steps * opt.grad_accum as u64;
            if iters != expected {
                return Err(err(
                    "schedule.total_iterations",
                    format!(
                        "{iters} != total_steps ({}) x grad_accum ({}) = {expected}",
                        self.total_steps, opt.grad_accum
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_schedule_is_consistent() {
        let opt = OptimizerConfig::default();
        assert_eq!(opt.grad_accum, 25);
        TrainSchedule::full_scale().validate(&opt).unwrap();

        let mut bad = TrainSchedule::full_scale();
        bad.total_iterations = Some(700_000);
        let e = bad.validate(&opt).unwrap_err();
        assert_eq!(e.field, "schedule.total_iterations");
    }

    #[test]
    fn full_scale_model_dimensions() {
        let cfg = ModelConfig::full_scale(50_257);
        cfg.validate().unwrap();
        assert_eq!(cfg.d_model(), 2048);
        assert_eq!(cfg.context, 2048);
    }

    #[test]
    fn invalid_model_configs() {
        let base = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_head: 3,
            context: 4,
            vocab: 8,
            positional: Positional::Rotary,
        };
        assert_eq!(base.validate().unwrap_err().field, "model.d_head");
        let c = ModelConfig { context: 1, positional: Positional::LearnedAbsolute, ..base.clone() };
        assert_eq!(c.validate().unwrap_err().field, "model.context");
    }

    #[test]
    fn optimizer_bounds() {
        let ok = OptimizerConfig::default();
        ok.validate().unwrap();
        for (field, bad) in [
            ("optimizer.beta1", OptimizerConfig { beta1: 1.0, ..ok.clone() }),
            ("optimizer.beta2", OptimizerConfig { beta2: 0.0, ..ok.clone() }),
            ("optimizer.eps", OptimizerConfig { eps: 0.0, ..ok.clone() }),
            ("optimizer.grad_accum", OptimizerConfig { grad_accum: 0, ..ok.clone() }),
        ] {
            assert_eq!(bad.validate().unwrap_err().field, field);
        }
    }
}
