use forge_train::adam::AdamState;
use forge_train::config::{ModelConfig, OptimizerConfig, Positional};
use forge_train::generate::{generate_ids, GenerateConfig};
use forge_train::gradcheck::grad_check;
use forge_train::ops::perplexity;
use forge_train::model::{Model, Tensor, TensorKind};

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
fn analytic_gradients_match_finite_differences() {
    for pos in [Positional::LearnedAbsolute, Positional::Rotary] {
        let r = grad_check(&tiny(pos), 1e-5, 400, 11).unwrap();
        println!("{pos:?}: {r:?}");
        assert_eq!(r.checked, 400);
        assert!(r.max_rel_error < 1e-4, "{pos:?}: {r:?}");
    }
}

#[test]
fn grad_check_is_deterministic() {
    let cfg = tiny(Positional::LearnedAbsolute);
    let a = grad_check(&cfg, 1e-5, 200, 3).unwrap();
    let b = grad_check(&cfg, 1e-5, 200, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn confident_model_has_vanishing_gradient() {
    // zero every weight and put a large bias on the target token: the loss
    // and every gradient collapse toward zero
    let cfg = tiny(Positional::LearnedAbsolute);
    let mut m = Model::init(&cfg, 0).unwrap();
    for t in &mut m.tensors {
        if t.kind == TensorKind::Weight {
            t.data.fill(0.0);
        }
    }
    let head_b = m.tensors.iter_mut().find(|t| t.name == "head.b").unwrap();
    head_b.data[7] = 60.0;
    let inputs: Vec<u32> = (0..16).map(|i| i % 32).collect();
    let targets = vec![7u32; 16];
    let mut grads = m.zero_grads();
    let loss = m.loss_and_grad(&inputs, &targets, 2, 8, &mut grads, 1.0).unwrap();
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    assert!(loss < 1e-20, "loss {loss}");
    assert!(norm < 1e-8, "grad norm {norm}");
}

#[derive(serde::Deserialize)]
struct AdamTrace {
    a: f64,
    c: f64,
    x0: f64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    trace: Vec<f64>,
}

#[test]
fn adam_matches_scalar_reference_trace() {
    let r: AdamTrace =
        serde_json::from_str(include_str!("data/adam_scalar_trace.json")).unwrap();
    let cfg = OptimizerConfig {
        lr: r.lr,
        weight_decay: r.weight_decay,
        beta1: r.beta1,
        beta2: r.beta2,
        eps: r.eps,
        grad_accum: 1,
    };
    let mut params = vec![Tensor {
        name: "x".into(),
        shape: vec![1],
        kind: TensorKind::Weight,
        data: vec![r.x0],
    }];
    let mut st = AdamState::new(&params);
    assert_eq!(r.trace.len(), 100);
    for expected in &r.trace {
        let x = params[0].data[0];
        let grads = vec![vec![r.a * (x - r.c)]];
        st.step(&mut params, &grads, &cfg).unwrap();
        assert!((params[0].data[0] - expected).abs() < 1e-10);
    }
}

#[test]
fn init_statistics_of_large_matrices() {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 4,
        d_head: 16,
        context: 64,
        vocab: 512,
        positional: Positional::LearnedAbsolute,
    };
    let m = Model::init(&cfg, 42).unwrap();
    let mut checked = 0;
    for t in m.tensors.iter().filter(|t| t.kind == TensorKind::Weight && t.len() >= 10_000) {
        let n = t.len() as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let std = (t.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002, "{} mean {mean}", t.name);
        assert!((std - 0.02).abs() < 0.002, "{} std {std}", t.name);
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn initial_loss_is_near_uniform() {
    for (vocab, pos) in [(64, Positional::LearnedAbsolute), (1000, Positional::Rotary), (50_257, Positional::LearnedAbsolute)] {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_head: 8,
            context: 16,
            vocab,
            positional: pos,
        };
        let m = Model::init(&cfg, 9).unwrap();
        let tokens: Vec<u32> = (0..33u32).map(|i| (i * 7919) % vocab as u32).collect();
        let loss = m.loss(&tokens[..16], &tokens[1..17], 1, 16).unwrap();
        let ln_v = (vocab as f64).ln();
        assert!((loss - ln_v).abs() / ln_v < 0.02, "V={vocab}: {loss} vs {ln_v}");
    }
}

#[test]
fn untrained_samples_are_near_uniform() {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_head: 8,
        context: 16,
        vocab: 64,
        positional: Positional::LearnedAbsolute,
    };
    let m = Model::init(&cfg, 5).unwrap();
    let eos = 0;
    let mut counts = vec![0usize; cfg.vocab];
    let mut total = 0;
    let mut seed = 0;
    while total < 10_000 {
        let gen = GenerateConfig {
            max_new: (10_000 - total).min(200),
            temperature: 1.0,
            top_k: None,
            seed,
        };
        for id in generate_ids(&m, &[], eos, &gen).unwrap() {
            counts[id as usize] += 1;
            total += 1;
        }
        seed += 1;
    }
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    let ln_v = (cfg.vocab as f64).ln();
    assert!((entropy - ln_v).abs() / ln_v < 0.05, "{entropy} vs {ln_v}");
}

#[test]
fn greedy_generation_repeats() {
    let m = Model::init(&tiny(Positional::Rotary), 8).unwrap();
    let gen = GenerateConfig {
        max_new: 12,
        ..Default::default()
    };
    assert_eq!(
        generate_ids(&m, &[3, 4, 5], 31, &gen).unwrap(),
        generate_ids(&m, &[3, 4, 5], 31, &gen).unwrap()
    );
}

#[test]
fn gpt2_vocabulary_perplexity() {
    let loss = 50_257f64.ln();
    assert!((loss - 10.825).abs() < 1e-3);
    assert!((perplexity(loss) - 50_257.0).abs() / 50_257.0 < 1e-9);
}
