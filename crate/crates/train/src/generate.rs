//! Autoregressive text continuation.

use forge_core::tokenizer::TokenizerModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("temperature must be finite and >= 0, got {0}")]
    Temperature(f64),
    #[error("top_k must be >= 1")]
    TopK,
    #[error("decode failed: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub max_new: usize,
    /// 0 selects greedy argmax decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            max_new: 32,
            temperature: 0.0,
            top_k: None,
            seed: 0,
        }
    }
}

/// Text to ids and back. Implemented by the BPE tokenizer and by
/// [`WordCodec`] for toy runs.
pub trait Codec {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> Result<String, GenerateError>;
    fn eos_id(&self) -> u32;
}

impl Codec for TokenizerModel {
    fn encode(&self, text: &str) -> Vec<u32> {
        TokenizerModel::encode(self, text).ids
    }

    fn decode(&self, ids: &[u32]) -> Result<String, GenerateError> {
        TokenizerModel::decode(self, ids)
            .map(|d| d.text)
            .map_err(|e| GenerateError::Decode(e.to_string()))
    }

    fn eos_id(&self) -> u32 {
        TokenizerModel::eos_id(self)
    }
}

/// Whitespace word vocabulary; id 0 is the end-of-text marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordCodec {
    words: Vec<String>,
}

impl WordCodec {
    pub const EOS: &'static str = "<|endoftext|>";

    /// Vocabulary in first-seen order over `corpus`.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = vec![Self::EOS.to_string()];
        for text in corpus {
            for w in text.split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        WordCodec { words }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }
}

impl Codec for WordCodec {
    /// Unknown words are skipped.
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .filter_map(|w| self.words.iter().position(|x| x == w).map(|i| i as u32))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<String, GenerateError> {
        let words: Option<Vec<&str>> = ids.iter().map(|&i| self.words.get(i as usize).map(String::as_str)).collect();
        words
            .map(|w| w.join(" "))
            .ok_or_else(|| GenerateError::Decode("id outside word vocabulary".into()))
    }

    fn eos_id(&self) -> u32 {
        0
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_next(logits: &[f64], cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> u32 {
    if cfg.temperature == 0.0 {
        return argmax(logits) as u32;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = cfg.top_k {
        // stable sort keeps the lowest id first among equal logits
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        order.truncate(k.min(logits.len()));
    }
    let max = order.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / cfg.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i as u32;
        }
        u -= w;
    }
    *order.last().expect("non-empty vocabulary") as u32
}

/// Continues `prompt` until `eos` or `max_new` tokens. The returned ids
/// include the stopping EOS when one was produced. An empty prompt starts
/// from `eos`; the window is cropped to the model context.
pub fn generate_ids(model: &Model, prompt: &[u32], eos: u32, cfg: &GenerateConfig) -> Result<Vec<u32>, GenerateError> {
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(GenerateError::Temperature(cfg.temperature));
    }
    if cfg.top_k == Some(0) {
        return Err(GenerateError::TopK);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx: Vec<u32> = if prompt.is_empty() { vec![eos] } else { prompt.to_vec() };
    let v = model.cfg.vocab;
    let mut out = Vec::new();
    while out.len() < cfg.max_new {
        let start = ctx.len().saturating_sub(model.cfg.context);
        let window = &ctx[start..];
        let t = window.len();
        let logits = model.forward(window, 1, t)?;
        let next = sample_next(&logits[(t - 1) * v..t * v], cfg, &mut rng);
        out.push(next);
        if next == eos {
            break;
        }
        ctx.push(next);
    }
    Ok(out)
}

/// Decoded continuation of `prompt`, without the stopping EOS.
pub fn generate(model: &Model, codec: &dyn Codec, prompt: &str, cfg: &GenerateConfig) -> Result<String, GenerateError> {
    let eos = codec.eos_id();
    let mut ids = generate_ids(model, &codec.encode(prompt), eos, cfg)?;
    if ids.last() == Some(&eos) {
        ids.pop();
    }
    codec.decode(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Positional};

    fn toy() -> Model {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_head: 4,
            context: 8,
            vocab: 16,
            positional: Positional::LearnedAbsolute,
        };
        Model::init(&cfg, 3).unwrap()
    }

    #[test]
    fn argmax_ties_go_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn greedy_is_deterministic_and_crops_context() {
        let m = toy();
        let cfg = GenerateConfig { max_new: 20, ..Default::default() };
        let a = generate_ids(&m, &[1, 2, 3], 15, &cfg).unwrap();
        let b = generate_ids(&m, &[1, 2, 3], 15, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 20);
        // prompts longer than the context are cropped, not rejected
        generate_ids(&m, &[1; 30], 15, &cfg).unwrap();
    }

    #[test]
    fn empty_prompt_and_bad_settings() {
        let m = toy();
        let cfg = GenerateConfig { max_new: 3, temperature: 1.0, seed: 9, ..Default::default() };
        let out = generate_ids(&m, &[], 15, &cfg).unwrap();
        assert!(!out.is_empty());
        let bad = GenerateConfig { temperature: -1.0, ..cfg.clone() };
        assert_eq!(generate_ids(&m, &[1], 15, &bad), Err(GenerateError::Temperature(-1.0)));
        let bad = GenerateConfig { top_k: Some(0), ..cfg };
        assert_eq!(generate_ids(&m, &[1], 15, &bad), Err(GenerateError::TopK));
    }

    #[test]
    fn top_one_equals_greedy() {
        let m = toy();
        let greedy = GenerateConfig { max_new: 10, ..Default::default() };
        let top1 = GenerateConfig { max_new: 10, temperature: 0.7, top_k: Some(1), seed: 4 };
        assert_eq!(
            generate_ids(&m, &[5, 6], 15, &greedy).unwrap(),
            generate_ids(&m, &[5, 6], 15, &top1).unwrap()
        );
    }

    #[test]
    fn word_codec_roundtrip() {
        let c = WordCodec::from_corpus(["the clock drives the latch"]);
        assert_eq!(c.vocab_size(), 5);
        let ids = c.encode("the latch");
        assert_eq!(ids, vec![1, 4]);
        assert_eq!(c.decode(&ids).unwrap(), "the latch");
    }
}
