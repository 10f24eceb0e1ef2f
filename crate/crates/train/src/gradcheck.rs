//! Finite-difference check of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::model::{Model, ModelError};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const MIN_SAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Tensor name and flat offset of the worst entry.
    pub worst: (String, usize),
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients against central differences of the loss on
/// `samples` parameters drawn uniformly over all scalars. Model, batch and
/// sample positions all derive from `seed`.
pub fn grad_check(cfg: &ModelConfig, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport, ModelError> {
    let mut model = Model::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (b, t) = (2, cfg.context);
    let inputs: Vec<u32> = (0..b * t).map(|_| rng.random_range(0..cfg.vocab as u32)).collect();
    let targets: Vec<u32> = (0..b * t).map(|_| rng.random_range(0..cfg.vocab as u32)).collect();

    let mut grads = model.zero_grads();
    model.loss_and_grad(&inputs, &targets, b, t, &mut grads, 1.0)?;

    let total = model.num_params();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (String::new(), 0),
    };
    for _ in 0..samples.max(MIN_SAMPLES) {
        let mut flat = rng.random_range(0..total);
        let ti = model
            .tensors
            .iter()
            .position(|t| {
                if flat < t.len() {
                    true
                } else {
                    flat -= t.len();
                    false
                }
            })
            .expect("flat index within parameter count");
        let orig = model.tensors[ti].data[flat];
        model.tensors[ti].data[flat] = orig + eps;
        let up = model.loss(&inputs, &targets, b, t)?;
        model.tensors[ti].data[flat] = orig - eps;
        let down = model.loss(&inputs, &targets, b, t)?;
        model.tensors[ti].data[flat] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(grads[ti][flat], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (model.tensors[ti].name.clone(), flat);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
