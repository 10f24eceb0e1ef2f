//! Forward and backward kernels.
//!
//! Every reduction runs in a fixed sequential order inside one task, and
//! tasks only write disjoint outputs, so results are bit-identical for any
//! rayon pool size.

use rayon::prelude::*;

pub const LN_EPS: f64 = 1e-5;

/// `out[n, o] = bias[o] + Σ_c inp[n, c] · w[o, c]` with `w` stored `[oc, c]`.
pub fn matmul_forward(out: &mut [f64], inp: &[f64], w: &[f64], bias: Option<&[f64]>, c: usize, oc: usize) {
    out.par_chunks_mut(oc)
        .zip(inp.par_chunks(c))
        .for_each(|(out_row, in_row)| {
            for (o, out_v) in out_row.iter_mut().enumerate() {
                let w_row = &w[o * c..(o + 1) * c];
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for (x, y) in in_row.iter().zip(w_row) {
                    acc += x * y;
                }
                *out_v = acc;
            }
        });
}

/// Accumulates gradients of [`matmul_forward`] into `dinp`, `dw`, `dbias`.
pub fn matmul_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    dbias: Option<&mut [f64]>,
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    c: usize,
    oc: usize,
) {
    let n = inp.len() / c;
    dinp.par_chunks_mut(c)
        .zip(dout.par_chunks(oc))
        .for_each(|(din_row, dout_row)| {
            for (o, &g) in dout_row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let w_row = &w[o * c..(o + 1) * c];
                for (d, &wv) in din_row.iter_mut().zip(w_row) {
                    *d += g * wv;
                }
            }
        });
    dw.par_chunks_mut(c).enumerate().for_each(|(o, dw_row)| {
        for row in 0..n {
            let g = dout[row * oc + o];
            if g == 0.0 {
                continue;
            }
            let in_row = &inp[row * c..(row + 1) * c];
            for (d, &x) in dw_row.iter_mut().zip(in_row) {
                *d += g * x;
            }
        }
    });
    if let Some(db) = dbias {
        db.par_iter_mut().enumerate().for_each(|(o, d)| {
            for row in 0..n {
                *d += dout[row * oc + o];
            }
        });
    }
}

/// Row-wise layer norm; stores per-row mean and reciprocal std for backward.
pub fn layernorm_forward(
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
    inp: &[f64],
    gain: &[f64],
    bias: &[f64],
    c: usize,
) {
    for (row, x) in inp.chunks(c).enumerate() {
        let m = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        let o = &mut out[row * c..(row + 1) * c];
        for i in 0..c {
            o[i] = (x[i] - m) * s * gain[i] + bias[i];
        }
        mean[row] = m;
        rstd[row] = s;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dinp: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    gain: &[f64],
    mean: &[f64],
    rstd: &[f64],
    c: usize,
) {
    for (row, x) in inp.chunks(c).enumerate() {
        let g = &dout[row * c..(row + 1) * c];
        let (m, s) = (mean[row], rstd[row]);
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = gain[i] * g[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= c as f64;
        dnorm_norm_mean /= c as f64;
        let d = &mut dinp[row * c..(row + 1) * c];
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = gain[i] * g[i];
            dbias[i] += g[i];
            dgain[i] += norm * g[i];
            d[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu_forward(out: &mut [f64], inp: &[f64]) {
    for (o, &x) in out.iter_mut().zip(inp) {
        let cube = 0.044715 * x * x * x;
        *o = 0.5 * x * (1.0 + (GELU_SCALE * (x + cube)).tanh());
    }
}

pub fn gelu_backward(dinp: &mut [f64], inp: &[f64], dout: &[f64]) {
    for ((d, &x), &g) in dinp.iter_mut().zip(inp).zip(dout) {
        let cube = 0.044715 * x * x * x;
        let arg = GELU_SCALE * (x + cube);
        let th = arg.tanh();
        let sech2 = 1.0 - th * th;
        let local = 0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x);
        *d += local * g;
    }
}

/// Rotates consecutive (even, odd) pairs of every head of `q` and `k` in a
/// `[B*T, 3C]` qkv buffer by position-dependent angles. `sign = -1` applies
/// the inverse rotation (used on gradients).
pub fn rotary_apply(qkv: &mut [f64], t: usize, c: usize, n_heads: usize, sign: f64) {
    let hs = c / n_heads;
    for (row, r) in qkv.chunks_mut(3 * c).enumerate() {
        let pos = (row % t) as f64;
        for part in 0..2 {
            for h in 0..n_heads {
                let base = part * c + h * hs;
                for i in 0..hs / 2 {
                    let freq = 10_000f64.powf(-2.0 * i as f64 / hs as f64);
                    let (sin, cos) = (sign * pos * freq).sin_cos();
                    let (a, b) = (r[base + 2 * i], r[base + 2 * i + 1]);
                    r[base + 2 * i] = a * cos - b * sin;
                    r[base + 2 * i + 1] = a * sin + b * cos;
                }
            }
        }
    }
}

/// Causal multi-head attention. `qkv` is `[B, T, 3C]`, `att` receives the
/// `[B, H, T, T]` softmax weights, `out` is `[B, T, C]`.
pub fn attention_forward(out: &mut [f64], att: &mut [f64], qkv: &[f64], b: usize, t: usize, c: usize, n_heads: usize) {
    debug_assert_eq!(qkv.len(), b * t * 3 * c);
    let hs = c / n_heads;
    let scale = 1.0 / (hs as f64).sqrt();
    out.par_chunks_mut(t * c)
        .zip(att.par_chunks_mut(n_heads * t * t))
        .enumerate()
        .for_each(|(bi, (out_b, att_b))| {
            let qkv_b = &qkv[bi * t * 3 * c..(bi + 1) * t * 3 * c];
            for h in 0..n_heads {
                for ti in 0..t {
                    let q = &qkv_b[ti * 3 * c + h * hs..ti * 3 * c + (h + 1) * hs];
                    let row = &mut att_b[(h * t + ti) * t..(h * t + ti + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=ti {
                        let k = &qkv_b[s * 3 * c + c + h * hs..s * 3 * c + c + (h + 1) * hs];
                        let dot: f64 = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                        row[s] = dot;
                        max = max.max(dot);
                    }
                    let mut sum = 0.0;
                    for v in row.iter_mut().take(ti + 1) {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut().take(ti + 1) {
                        *v /= sum;
                    }
                    for v in row.iter_mut().skip(ti + 1) {
                        *v = 0.0;
                    }
                    let o = &mut out_b[ti * c + h * hs..ti * c + (h + 1) * hs];
                    o.fill(0.0);
                    for s in 0..=ti {
                        let p = row[s];
                        let v = &qkv_b[s * 3 * c + 2 * c + h * hs..s * 3 * c + 2 * c + (h + 1) * hs];
                        for (oi, vi) in o.iter_mut().zip(v) {
                            *oi += p * vi;
                        }
                    }
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(dqkv: &mut [f64], dout: &[f64], qkv: &[f64], att: &[f64], b: usize, t: usize, c: usize, n_heads: usize) {
    let hs = c / n_heads;
    let scale = 1.0 / (hs as f64).sqrt();
    debug_assert_eq!(dqkv.len(), b * t * 3 * c);
    dqkv.par_chunks_mut(t * 3 * c).enumerate().for_each(|(bi, dqkv_b)| {
        let qkv_b = &qkv[bi * t * 3 * c..(bi + 1) * t * 3 * c];
        let att_b = &att[bi * n_heads * t * t..(bi + 1) * n_heads * t * t];
        let dout_b = &dout[bi * t * c..(bi + 1) * t * c];
        let mut dp = vec![0.0; t];
        for h in 0..n_heads {
            for ti in 0..t {
                let p = &att_b[(h * t + ti) * t..(h * t + ti + 1) * t];
                let dy = &dout_b[ti * c + h * hs..ti * c + (h + 1) * hs];
                // dv and dp
                for s in 0..=ti {
                    let vo = s * 3 * c + 2 * c + h * hs;
                    let v = &qkv_b[vo..vo + hs];
                    dp[s] = dy.iter().zip(v).map(|(a, b)| a * b).sum();
                    for i in 0..hs {
                        dqkv_b[vo + i] += p[s] * dy[i];
                    }
                }
                let weighted: f64 = (0..=ti).map(|s| p[s] * dp[s]).sum();
                let qo = ti * 3 * c + h * hs;
                for s in 0..=ti {
                    let ds = p[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = s * 3 * c + c + h * hs;
                    for i in 0..hs {
                        dqkv_b[qo + i] += ds * qkv_b[ko + i];
                        dqkv_b[ko + i] += ds * qkv_b[qo + i];
                    }
                }
            }
        }
    });
}

/// Softmax over each `vocab`-wide row of `logits`.
pub fn softmax_rows(probs: &mut [f64], logits: &[f64], vocab: usize) {
    probs
        .par_chunks_mut(vocab)
        .zip(logits.par_chunks(vocab))
        .for_each(|(p, l)| {
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pi, &li) in p.iter_mut().zip(l) {
                *pi = (li - max).exp();
                sum += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= sum;
            }
        });
}

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], targets: &[u32], vocab: usize) -> f64 {
    assert_eq!(logits.len(), targets.len() * vocab, "logits/targets shape mismatch");
    let per_row: Vec<f64> = logits
        .par_chunks(vocab)
        .zip(targets.par_iter())
        .map(|(l, &tgt)| {
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            lse - l[tgt as usize]
        })
        .collect();
    per_row.iter().sum::<f64>() / targets.len() as f64
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_hand_fixture() {
        // one row of three logits, then another; hand-computed:
        // row 0: logits [1, 2, 3], target 2 → ln(e^1+e^2+e^3) - 3
        // row 1: logits [0, 0, ln 2], target 0 → ln(1+1+2) - 0 = ln 4
        let logits = [1.0, 2.0, 3.0, 0.0, 0.0, 2f64.ln()];
        let row0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let row1 = 4f64.ln();
        let got = cross_entropy(&logits, &[2, 0], 3);
        assert!((got - (row0 + row1) / 2.0).abs() < 1e-6);
        assert!((row0 - 0.407_605_964_444_380_8).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 50_257;
        let logits = vec![0.0; 2 * v];
        let loss = cross_entropy(&logits, &[0, 17], v);
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        assert!((perplexity(loss) - v as f64).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_approach_zero_loss() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = [0.0, margin, 0.0];
            let loss = cross_entropy(&logits, &[1], 3);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(7f64.ln()) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn rotary_inverse_restores_input() {
        let (t, c, h) = (3, 8, 2);
        let orig: Vec<f64> = (0..t * 3 * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = orig.clone();
        rotary_apply(&mut x, t, c, h, 1.0);
        assert_ne!(x, orig);
        rotary_apply(&mut x, t, c, h, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
