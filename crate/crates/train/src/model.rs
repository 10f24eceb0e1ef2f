//! Pre-norm decoder-only transformer with hand-written backward pass.
//!
//! Per layer: `x + attn(ln1(x))`, then `x + mlp(ln2(x))` where the MLP is
//! `proj(gelu(fc(.)))` with a 4x hidden width. A final layer norm feeds a
//! linear head over the vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, Positional};
use crate::ops;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {t} exceeds context {context}")]
    ContextOverflow { t: usize, context: usize },
    #[error("expected {expected} tokens for a {b}x{t} batch, got {got}")]
    Shape {
        expected: usize,
        got: usize,
        b: usize,
        t: usize,
    },
}

/// How a tensor is initialized and whether weight decay touches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Linear or embedding weight: N(0, 0.02²), decayed.
    Weight,
    /// Zero-initialized, never decayed.
    Bias,
    /// Layer-norm gain: ones, never decayed.
    NormGain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>, kind: TensorKind) -> Self {
        let n = shape.iter().product();
        Tensor {
            name,
            shape,
            kind,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    attn_proj_w: usize,
    attn_proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    mlp_proj_w: usize,
    mlp_proj_b: usize,
}

#[derive(Debug, Clone)]
struct Index {
    wte: usize,
    wpe: Option<usize>,
    layers: Vec<LayerIx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<Tensor>, Index) {
    let (v, c, t) = (cfg.vocab, cfg.d_model(), cfg.context);
    let mut tensors: Vec<Tensor> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, kind: TensorKind| {
        tensors.push(Tensor::zeros(name, shape, kind));
        tensors.len() - 1
    };
    use TensorKind::*;
    let wte = add("wte".into(), vec![v, c], Weight);
    let wpe = match cfg.positional {
        Positional::LearnedAbsolute => Some(add("wpe".into(), vec![t, c], Weight)),
        Positional::Rotary => None,
    };
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let p = |s: &str| format!("h{l}.{s}");
            LayerIx {
                ln1_g: add(p("ln1.g"), vec![c], NormGain),
                ln1_b: add(p("ln1.b"), vec![c], Bias),
                qkv_w: add(p("attn.qkv.w"), vec![3 * c, c], Weight),
                qkv_b: add(p("attn.qkv.b"), vec![3 * c], Bias),
                attn_proj_w: add(p("attn.proj.w"), vec![c, c], Weight),
                attn_proj_b: add(p("attn.proj.b"), vec![c], Bias),
                ln2_g: add(p("ln2.g"), vec![c], NormGain),
                ln2_b: add(p("ln2.b"), vec![c], Bias),
                fc_w: add(p("mlp.fc.w"), vec![4 * c, c], Weight),
                fc_b: add(p("mlp.fc.b"), vec![4 * c], Bias),
                mlp_proj_w: add(p("mlp.proj.w"), vec![c, 4 * c], Weight),
                mlp_proj_b: add(p("mlp.proj.b"), vec![c], Bias),
            }
        })
        .collect();
    let lnf_g = add("lnf.g".into(), vec![c], NormGain);
    let lnf_b = add("lnf.b".into(), vec![c], Bias);
    let head_w = add("head.w".into(), vec![v, c], Weight);
    let head_b = add("head.b".into(), vec![v], Bias);
    let index = Index {
        wte,
        wpe,
        layers,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
    };
    (tensors, index)
}

/// Per-tensor gradient buffers, parallel to [`Model::tensors`].
pub type Grads = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tensors: Vec<Tensor>,
    index: Index,
}

struct LayerActs {
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    atty: Vec<f64>,
    resid2: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fch: Vec<f64>,
    fch_gelu: Vec<f64>,
    resid3: Vec<f64>,
}

struct Acts {
    encoded: Vec<f64>,
    layers: Vec<LayerActs>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    logits: Vec<f64>,
}

impl Model {
    /// Zero-filled parameters in the standard layout.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (tensors, index) = build_layout(cfg);
        Ok(Model {
            cfg: cfg.clone(),
            tensors,
            index,
        })
    }

    /// Weights ~ N(0, 0.02²), biases 0, norm gains 1, from a seeded stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        for t in &mut model.tensors {
            match t.kind {
                TensorKind::Weight => t.data.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                TensorKind::Bias => t.data.fill(0.0),
                TensorKind::NormGain => t.data.fill(1.0),
            }
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    fn check_input(&self, tokens: &[u32], b: usize, t: usize) -> Result<(), ModelError> {
        if t > self.cfg.context {
            return Err(ModelError::ContextOverflow {
                t,
                context: self.cfg.context,
            });
        }
        if tokens.len() != b * t {
            return Err(ModelError::Shape {
                expected: b * t,
                got: tokens.len(),
                b,
                t,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.cfg.vocab) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab,
            });
        }
        Ok(())
    }

    fn run_forward(&self, tokens: &[u32], b: usize, t: usize) -> Acts {
        let c = self.cfg.d_model();
        let nh = self.cfg.n_heads;
        let v = self.cfg.vocab;
        let bt = b * t;
        let ix = &self.index;

        let mut encoded = vec![0.0; bt * c];
        let wte = self.p(ix.wte);
        for (row, &tok) in tokens.iter().enumerate() {
            let out = &mut encoded[row * c..(row + 1) * c];
            out.copy_from_slice(&wte[tok as usize * c..(tok as usize + 1) * c]);
            if let Some(wpe) = ix.wpe {
                let pos = row % t;
                for (o, p) in out.iter_mut().zip(&self.p(wpe)[pos * c..(pos + 1) * c]) {
                    *o += p;
                }
            }
        }

        let mut layers = Vec::with_capacity(ix.layers.len());
        for li in &ix.layers {
            let x: &[f64] = layers.last().map_or(&encoded, |l: &LayerActs| &l.resid3);
            let mut a = LayerActs {
                ln1: vec![0.0; bt * c],
                ln1_mean: vec![0.0; bt],
                ln1_rstd: vec![0.0; bt],
                qkv: vec![0.0; bt * 3 * c],
                att: vec![0.0; b * nh * t * t],
                atty: vec![0.0; bt * c],
                resid2: vec![0.0; bt * c],
                ln2: vec![0.0; bt * c],
                ln2_mean: vec![0.0; bt],
                ln2_rstd: vec![0.0; bt],
                fch: vec![0.0; bt * 4 * c],
                fch_gelu: vec![0.0; bt * 4 * c],
                resid3: vec![0.0; bt * c],
            };
            ops::layernorm_forward(&mut a.ln1, &mut a.ln1_mean, &mut a.ln1_rstd, x, self.p(li.ln1_g), self.p(li.ln1_b), c);
            ops::matmul_forward(&mut a.qkv, &a.ln1, self.p(li.qkv_w), Some(self.p(li.qkv_b)), c, 3 * c);
            if self.cfg.positional == Positional::Rotary {
                ops::rotary_apply(&mut a.qkv, t, c, nh, 1.0);
            }
            ops::attention_forward(&mut a.atty, &mut a.att, &a.qkv, b, t, c, nh);
            let mut proj = vec![0.0; bt * c];
            ops::matmul_forward(&mut proj, &a.atty, self.p(li.attn_proj_w), Some(self.p(li.attn_proj_b)), c, c);
            for i in 0..bt * c {
                a.resid2[i] = x[i] + proj[i];
            }
            ops::layernorm_forward(&mut a.ln2, &mut a.ln2_mean, &mut a.ln2_rstd, &a.resid2, self.p(li.ln2_g), self.p(li.ln2_b), c);
            ops::matmul_forward(&mut a.fch, &a.ln2, self.p(li.fc_w), Some(self.p(li.fc_b)), c, 4 * c);
            ops::gelu_forward(&mut a.fch_gelu, &a.fch);
            ops::matmul_forward(&mut proj, &a.fch_gelu, self.p(li.mlp_proj_w), Some(self.p(li.mlp_proj_b)), 4 * c, c);
            for i in 0..bt * c {
                a.resid3[i] = a.resid2[i] + proj[i];
            }
            layers.push(a);
        }

        let last: &[f64] = layers.last().map_or(&encoded, |l| &l.resid3);
        let mut lnf = vec![0.0; bt * c];
        let mut lnf_mean = vec![0.0; bt];
        let mut lnf_rstd = vec![0.0; bt];
        ops::layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, last, self.p(ix.lnf_g), self.p(ix.lnf_b), c);
        let mut logits = vec![0.0; bt * v];
        ops::matmul_forward(&mut logits, &lnf, self.p(ix.head_w), Some(self.p(ix.head_b)), c, v);

        Acts {
            encoded,
            layers,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits,
        }
    }

    /// Logits `[B, T, V]` for a row-major `[B, T]` token batch.
    pub fn forward(&self, tokens: &[u32], b: usize, t: usize) -> Result<Vec<f64>, ModelError> {
        self.check_input(tokens, b, t)?;
        Ok(self.run_forward(tokens, b, t).logits)
    }

    pub fn loss(&self, inputs: &[u32], targets: &[u32], b: usize, t: usize) -> Result<f64, ModelError> {
        self.check_input(targets, b, t)?;
        let logits = self.forward(inputs, b, t)?;
        Ok(ops::cross_entropy(&logits, targets, self.cfg.vocab))
    }

    /// Mean cross-entropy; adds `scale ·` its gradient into `grads`.
    pub fn loss_and_grad(
        &self,
        inputs: &[u32],
        targets: &[u32],
        b: usize,
        t: usize,
        grads: &mut Grads,
        scale: f64,
    ) -> Result<f64, ModelError> {
        self.check_input(inputs, b, t)?;
        self.check_input(targets, b, t)?;
        let c = self.cfg.d_model();
        let nh = self.cfg.n_heads;
        let v = self.cfg.vocab;
        let bt = b * t;
        let ix = self.index.clone();
        let acts = self.run_forward(inputs, b, t);
        let loss = ops::cross_entropy(&acts.logits, targets, v);

        // d(mean CE)/dlogits = (softmax - onehot) / (B*T)
        let mut dlogits = vec![0.0; bt * v];
        ops::softmax_rows(&mut dlogits, &acts.logits, v);
        let norm = scale / bt as f64;
        for (row, &tgt) in targets.iter().enumerate() {
            let r = &mut dlogits[row * v..(row + 1) * v];
            r[tgt as usize] -= 1.0;
            r.iter_mut().for_each(|g| *g *= norm);
        }

        let mut dlnf = vec![0.0; bt * c];
        {
            let (head_w, head_b) = two_mut(grads, ix.head_w, ix.head_b);
            ops::matmul_backward(&mut dlnf, head_w, Some(head_b), &dlogits, &acts.lnf, self.p(ix.head_w), c, v);
        }
        drop(dlogits);

        let last: &[f64] = acts.layers.last().map_or(&acts.encoded, |l| &l.resid3);
        let mut dresid = vec![0.0; bt * c];
        {
            let (g, bias) = two_mut(grads, ix.lnf_g, ix.lnf_b);
            ops::layernorm_backward(&mut dresid, g, bias, &dlnf, last, self.p(ix.lnf_g), &acts.lnf_mean, &acts.lnf_rstd, c);
        }

        for (l, li) in ix.layers.iter().enumerate().rev() {
            let a = &acts.layers[l];
            let x: &[f64] = if l == 0 { &acts.encoded } else { &acts.layers[l - 1].resid3 };

            // MLP branch: resid3 = resid2 + proj(gelu(fc(ln2(resid2))))
            let mut dfch_gelu = vec![0.0; bt * 4 * c];
            {
                let (w, bias) = two_mut(grads, li.mlp_proj_w, li.mlp_proj_b);
                ops::matmul_backward(&mut dfch_gelu, w, Some(bias), &dresid, &a.fch_gelu, self.p(li.mlp_proj_w), 4 * c, c);
            }
            let mut dfch = vec![0.0; bt * 4 * c];
            ops::gelu_backward(&mut dfch, &a.fch, &dfch_gelu);
            let mut dln2 = vec![0.0; bt * c];
            {
                let (w, bias) = two_mut(grads, li.fc_w, li.fc_b);
                ops::matmul_backward(&mut dln2, w, Some(bias), &dfch, &a.ln2, self.p(li.fc_w), c, 4 * c);
            }
            let mut dresid2 = dresid.clone();
            {
                let (g, bias) = two_mut(grads, li.ln2_g, li.ln2_b);
                ops::layernorm_backward(&mut dresid2, g, bias, &dln2, &a.resid2, self.p(li.ln2_g), &a.ln2_mean, &a.ln2_rstd, c);
            }

            // attention branch: resid2 = x + proj(attn(qkv(ln1(x))))
            let mut datty = vec![0.0; bt * c];
            {
                let (w, bias) = two_mut(grads, li.attn_proj_w, li.attn_proj_b);
                ops::matmul_backward(&mut datty, w, Some(bias), &dresid2, &a.atty, self.p(li.attn_proj_w), c, c);
            }
            let mut dqkv = vec![0.0; bt * 3 * c];
            ops::attention_backward(&mut dqkv, &datty, &a.qkv, &a.att, b, t, c, nh);
            if self.cfg.positional == Positional::Rotary {
                ops::rotary_apply(&mut dqkv, t, c, nh, -1.0);
            }
            let mut dln1 = vec![0.0; bt * c];
            {
                let (w, bias) = two_mut(grads, li.qkv_w, li.qkv_b);
                ops::matmul_backward(&mut dln1, w, Some(bias), &dqkv, &a.ln1, self.p(li.qkv_w), c, 3 * c);
            }
            let mut dx = dresid2;
            {
                let (g, bias) = two_mut(grads, li.ln1_g, li.ln1_b);
                ops::layernorm_backward(&mut dx, g, bias, &dln1, x, self.p(li.ln1_g), &a.ln1_mean, &a.ln1_rstd, c);
            }
            dresid = dx;
        }

        for (row, &tok) in inputs.iter().enumerate() {
            let d = &dresid[row * c..(row + 1) * c];
            let wte = &mut grads[ix.wte][tok as usize * c..(tok as usize + 1) * c];
            for (g, &x) in wte.iter_mut().zip(d) {
                *g += x;
            }
            if let Some(wpe) = ix.wpe {
                let pos = row % t;
                let gp = &mut grads[wpe][pos * c..(pos + 1) * c];
                for (g, &x) in gp.iter_mut().zip(d) {
                    *g += x;
                }
            }
        }
        Ok(loss)
    }
}

fn two_mut(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "layout places each weight before its bias");
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(positional: Positional) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_head: 4,
            context: 8,
            vocab: 32,
            positional,
        }
    }

    #[test]
    fn layout_matches_param_count() {
        for pos in [Positional::LearnedAbsolute, Positional::Rotary] {
            let cfg = tiny(pos);
            let m = Model::zeros(&cfg).unwrap();
            assert_eq!(m.num_params(), cfg.num_params());
        }
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let cfg = tiny(Positional::LearnedAbsolute);
        let a = Model::init(&cfg, 5).unwrap();
        let b = Model::init(&cfg, 5).unwrap();
        assert_eq!(a.tensors, b.tensors);
        let c = Model::init(&cfg, 6).unwrap();
        assert_ne!(a.tensors, c.tensors);
        for t in &a.tensors {
            match t.kind {
                TensorKind::Bias => assert!(t.data.iter().all(|&x| x == 0.0), "{}", t.name),
                TensorKind::NormGain => assert!(t.data.iter().all(|&x| x == 1.0)),
                TensorKind::Weight => assert!(t.data.iter().any(|&x| x != 0.0)),
            }
        }
    }

    #[test]
    fn forward_shape_and_errors() {
        let cfg = tiny(Positional::LearnedAbsolute);
        let m = Model::init(&cfg, 1).unwrap();
        let logits = m.forward(&[1, 2, 3, 4, 5, 6], 2, 3).unwrap();
        assert_eq!(logits.len(), 2 * 3 * 32);
        assert!(matches!(
            m.forward(&[40], 1, 1),
            Err(ModelError::TokenOutOfRange { id: 40, .. })
        ));
        assert!(matches!(
            m.forward(&[0; 9], 1, 9),
            Err(ModelError::ContextOverflow { .. })
        ));
        assert!(matches!(m.forward(&[0; 5], 2, 3), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn causal_mask_is_exact() {
        for pos in [Positional::LearnedAbsolute, Positional::Rotary] {
            let cfg = tiny(pos);
            let m = Model::init(&cfg, 2).unwrap();
            let t = 8;
            let base: Vec<u32> = (0..t as u32).map(|i| (i * 7 + 3) % 32).collect();
            let before = m.forward(&base, 1, t).unwrap();
            for j in 0..t {
                let mut perturbed = base.clone();
                perturbed[j] = (perturbed[j] + 11) % 32;
                let after = m.forward(&perturbed, 1, t).unwrap();
                let v = cfg.vocab;
                assert_eq!(&before[..j * v], &after[..j * v], "position {j}");
                assert_ne!(&before[j * v..(j + 1) * v], &after[j * v..(j + 1) * v]);
            }
        }
    }
}
