//! Differentiable building blocks: linear layers bound to [`ParamStore`]
//! names, activations, row softmax and multi-head attention. Every forward
//! returns the cache its explicit backward rule needs; backward rules
//! accumulate parameter gradients into the store and return input gradients.

use crate::mat::Mat;
use crate::params::ParamStore;
use crate::rng::Rng;

/// Register `prefix.weight` ([in×out], Gaussian std 1/√in) and `prefix.bias`
/// ([1×out], zeros).
pub fn init_linear(ps: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) {
    let std = 1.0 / (in_dim as f64).sqrt();
    ps.insert(&format!("{prefix}.weight"), Mat::randn(in_dim, out_dim, std, rng));
    ps.insert(&format!("{prefix}.bias"), Mat::zeros(1, out_dim));
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    pub input: Mat,
}

/// y = x·W + b.
pub fn linear_forward(ps: &ParamStore, prefix: &str, x: &Mat) -> (Mat, LinearCache) {
    let w = ps.get(&format!("{prefix}.weight"));
    let b = ps.get(&format!("{prefix}.bias"));
    let mut y = x.matmul(w);
    for r in 0..y.rows() {
        for (v, &bias) in y.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    (y, LinearCache { input: x.clone() })
}

/// Accumulates dW = xᵀ·dy and db = Σ dy; returns dx = dy·Wᵀ.
pub fn linear_backward(ps: &mut ParamStore, prefix: &str, cache: &LinearCache, d_out: &Mat) -> Mat {
    let w_name = format!("{prefix}.weight");
    let dx = d_out.matmul_nt(ps.get(&w_name));
    let dw = cache.input.matmul_tn(d_out);
    ps.accumulate_grad(&w_name, &dw);
    ps.accumulate_grad(&format!("{prefix}.bias"), &d_out.col_sum());
    dx
}

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Mat, d_out: &Mat) -> Mat {
    assert_eq!(input.shape(), d_out.shape());
    let mut dx = d_out.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(input.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: &Mat) -> Mat {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given its output y: dx = dy ⊙ y(1−y).
pub fn sigmoid_backward(output: &Mat, d_out: &Mat) -> Mat {
    assert_eq!(output.shape(), d_out.shape());
    let mut dx = d_out.clone();
    for (g, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        *g *= y * (1.0 - y);
    }
    dx
}

pub fn softplus(x: f64) -> f64 {
    // Stable: ln(1+e^x) = max(x,0) + ln(1+e^-|x|).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax. −∞ entries get weight exactly 0; each row must contain
/// at least one finite entry.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(m.is_finite(), "softmax row {r} has no finite entry");
        let mut sum = 0.0;
        let o = out.row_mut(r);
        for (dst, &v) in o.iter_mut().zip(row) {
            let e = (v - m).exp();
            *dst = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for dst in o.iter_mut() {
            *dst *= inv;
        }
    }
    out
}

/// Backward through row softmax given its output y:
/// dx = y ⊙ (dy − Σ_j dy_j·y_j).
pub fn softmax_rows_backward(output: &Mat, d_out: &Mat) -> Mat {
    assert_eq!(output.shape(), d_out.shape());
    let mut dx = Mat::zeros(output.rows(), output.cols());
    for r in 0..output.rows() {
        let y = output.row(r);
        let dy = d_out.row(r);
        let dot: f64 = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
        for (dst, (&yi, &dyi)) in dx.row_mut(r).iter_mut().zip(y.iter().zip(dy)) {
            *dst = yi * (dyi - dot);
        }
    }
    dx
}

/// Linear-layer prefixes for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaNames<'a> {
    pub wq: &'a str,
    pub wk: &'a str,
    pub wv: &'a str,
    pub wo: &'a str,
}

pub fn init_mha(ps: &mut ParamStore, names: &MhaNames, channels: usize, rng: &mut Rng) {
    init_linear(ps, names.wq, channels, channels, rng);
    init_linear(ps, names.wk, channels, channels, rng);
    init_linear(ps, names.wv, channels, channels, rng);
    init_linear(ps, names.wo, channels, channels, rng);
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    qp: Mat,
    kp: Mat,
    vp: Mat,
    /// Per-head attention weights [nq×nk].
    pub attn: Vec<Mat>,
    heads: usize,
}

fn head_slice(m: &Mat, h: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(m.rows(), d);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * d..(h + 1) * d]);
    }
    out
}

fn head_write(dst: &mut Mat, src: &Mat, h: usize, d: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * d..(h + 1) * d].copy_from_slice(src.row(r));
    }
}

/// Multi-head attention without residual (callers add their own).
///
/// `bias`, when present, is one [nq×nk] additive logit matrix per head.
/// `key_valid`, when present, excludes padded keys from the softmax by
/// forcing their logits to −∞; their contents then cannot influence the
/// output (weight exactly 0).
pub fn mha_forward(
    ps: &ParamStore,
    names: &MhaNames,
    heads: usize,
    q_in: &Mat,
    k_in: &Mat,
    v_in: &Mat,
    bias: Option<&[Mat]>,
    key_valid: Option<&[bool]>,
) -> (Mat, MhaCache) {
    let channels = q_in.cols();
    assert_eq!(channels % heads, 0, "head count must divide channels");
    let d = channels / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let (qp, q_cache) = linear_forward(ps, names.wq, q_in);
    let (kp, k_cache) = linear_forward(ps, names.wk, k_in);
    let (vp, v_cache) = linear_forward(ps, names.wv, v_in);

    let mut concat = Mat::zeros(q_in.rows(), channels);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&qp, h, d);
        let kh = head_slice(&kp, h, d);
        let vh = head_slice(&vp, h, d);
        let mut scores = qh.matmul_nt(&kh);
        scores.scale(scale);
        if let Some(b) = bias {
            scores.add_assign(&b[h]);
        }
        if let Some(valid) = key_valid {
            for r in 0..scores.rows() {
                for (s, &ok) in scores.row_mut(r).iter_mut().zip(valid) {
                    if !ok {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let a = softmax_rows(&scores);
        let oh = a.matmul(&vh);
        head_write(&mut concat, &oh, h, d);
        attn.push(a);
    }

    let (out, o_cache) = linear_forward(ps, names.wo, &concat);
    (
        out,
        MhaCache {
            q_cache,
            k_cache,
            v_cache,
            o_cache,
            qp,
            kp,
            vp,
            attn,
            heads,
        },
    )
}

/// Returns (d_q_in, d_k_in, d_v_in, d_bias-per-head if requested).
pub fn mha_backward(
    ps: &mut ParamStore,
    names: &MhaNames,
    cache: &MhaCache,
    d_out: &Mat,
    want_bias_grad: bool,
) -> (Mat, Mat, Mat, Option<Vec<Mat>>) {
    let heads = cache.heads;
    let channels = cache.qp.cols();
    let d = channels / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let d_concat = linear_backward(ps, names.wo, &cache.o_cache, d_out);

    let mut d_qp = Mat::zeros(cache.qp.rows(), channels);
    let mut d_kp = Mat::zeros(cache.kp.rows(), channels);
    let mut d_vp = Mat::zeros(cache.vp.rows(), channels);
    let mut d_bias = if want_bias_grad { Some(Vec::with_capacity(heads)) } else { None };

    for h in 0..heads {
        let a = &cache.attn[h];
        let qh = head_slice(&cache.qp, h, d);
        let kh = head_slice(&cache.kp, h, d);
        let vh = head_slice(&cache.vp, h, d);
        let d_oh = head_slice(&d_concat, h, d);

        let d_a = d_oh.matmul_nt(&vh);
        let d_vh = a.matmul_tn(&d_oh);
        let mut d_scores = softmax_rows_backward(a, &d_a);

        if let Some(b) = d_bias.as_mut() {
            b.push(d_scores.clone());
        }

        d_scores.scale(scale);
        let d_qh = d_scores.matmul(&kh);
        let d_kh = d_scores.matmul_tn(&qh);

        head_write(&mut d_qp, &d_qh, h, d);
        head_write(&mut d_kp, &d_kh, h, d);
        head_write(&mut d_vp, &d_vh, h, d);
    }

    let d_q_in = linear_backward(ps, names.wq, &cache.q_cache, &d_qp);
    let d_k_in = linear_backward(ps, names.wk, &cache.k_cache, &d_kp);
    let d_v_in = linear_backward(ps, names.wv, &cache.v_cache, &d_vp);
    (d_q_in, d_k_in, d_v_in, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Central-difference check of d(loss)/d(param scalar) for a scalar loss
    /// defined as a fixed random projection of the block output.
    fn check_param_grads(
        ps: &mut ParamStore,
        forward: &dyn Fn(&ParamStore) -> Mat,
        backward: &dyn Fn(&mut ParamStore, &Mat),
        tol: f64,
    ) {
        let out0 = forward(ps);
        let mut rng = Rng::new(900);
        let proj = Mat::randn(out0.rows(), out0.cols(), 1.0, &mut rng);
        let loss = |out: &Mat| -> f64 {
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };

        ps.zero_grads();
        backward(ps, &proj);

        let names: Vec<String> = ps.names().map(|s| s.to_string()).collect();
        let h = 1e-5;
        for name in &names {
            let n = ps.get(name).len();
            for flat in (0..n).step_by(1.max(n / 7)) {
                let orig = ps.scalar(name, flat);
                ps.set_scalar(name, flat, orig + h);
                let up = loss(&forward(ps));
                ps.set_scalar(name, flat, orig - h);
                let down = loss(&forward(ps));
                ps.set_scalar(name, flat, orig);
                let numeric = (up - down) / (2.0 * h);
                let analytic = ps.grad_scalar(name, flat);
                assert!(
                    rel_err(analytic, numeric) < tol,
                    "{name}[{flat}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn linear_gradients_are_exact() {
        let mut rng = Rng::new(1);
        let mut ps = ParamStore::new(1);
        init_linear(&mut ps, "lin", 4, 3, &mut rng);
        let x = Mat::randn(5, 4, 1.0, &mut rng);

        let forward = |ps: &ParamStore| linear_forward(ps, "lin", &x).0;
        let backward = |ps: &mut ParamStore, proj: &Mat| {
            let (_, cache) = linear_forward(ps, "lin", &x);
            let _ = linear_backward(ps, "lin", &cache, proj);
        };
        check_param_grads(&mut ps, &forward, &backward, 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches() {
        let mut rng = Rng::new(2);
        let x = Mat::randn(6, 5, 2.0, &mut rng);
        let y = softmax_rows(&x);
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // Finite differences on the input.
        let proj = Mat::randn(6, 5, 1.0, &mut rng);
        let loss = |x: &Mat| -> f64 {
            softmax_rows(x)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let dx = softmax_rows_backward(&y, &proj);
        let h = 1e-6;
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let up = loss(&xp);
            xp.data_mut()[i] = orig - h;
            let down = loss(&xp);
            xp.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(rel_err(dx.data()[i], numeric) < 1e-5);
        }
    }

    #[test]
    fn mha_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let mut ps = ParamStore::new(3);
        let names = MhaNames {
            wq: "t.wq",
            wk: "t.wk",
            wv: "t.wv",
            wo: "t.wo",
        };
        init_mha(&mut ps, &names, 8, &mut rng);
        let q = Mat::randn(4, 8, 1.0, &mut rng);
        let k = Mat::randn(6, 8, 1.0, &mut rng);
        let v = Mat::randn(6, 8, 1.0, &mut rng);
        let valid = vec![true, true, true, true, false, false];

        let forward =
            |ps: &ParamStore| mha_forward(ps, &names, 2, &q, &k, &v, None, Some(&valid)).0;
        let backward = |ps: &mut ParamStore, proj: &Mat| {
            let (_, cache) = mha_forward(ps, &names, 2, &q, &k, &v, None, Some(&valid));
            let _ = mha_backward(ps, &names, &cache, proj, false);
        };
        check_param_grads(&mut ps, &forward, &backward, 1e-4);
    }

    #[test]
    fn masked_keys_cannot_influence_output() {
        let mut rng = Rng::new(4);
        let mut ps = ParamStore::new(4);
        let names = MhaNames {
            wq: "m.wq",
            wk: "m.wk",
            wv: "m.wv",
            wo: "m.wo",
        };
        init_mha(&mut ps, &names, 4, &mut rng);
        let q = Mat::randn(3, 4, 1.0, &mut rng);
        let mut k = Mat::randn(5, 4, 1.0, &mut rng);
        let mut v = Mat::randn(5, 4, 1.0, &mut rng);
        let valid = vec![true, true, true, false, false];

        let (out_a, _) = mha_forward(&ps, &names, 2, &q, &k, &v, None, Some(&valid));
        // Rewrite masked rows with garbage.
        for r in 3..5 {
            for c in 0..4 {
                k.set(r, c, 1e6 * (r + c) as f64);
                v.set(r, c, -777.0);
            }
        }
        let (out_b, _) = mha_forward(&ps, &names, 2, &q, &k, &v, None, Some(&valid));
        assert_eq!(out_a, out_b, "masked K/V contents leaked into output");
    }

    #[test]
    fn attention_rows_are_probabilities() {
        let mut rng = Rng::new(5);
        let mut ps = ParamStore::new(5);
        let names = MhaNames {
            wq: "p.wq",
            wk: "p.wk",
            wv: "p.wv",
            wo: "p.wo",
        };
        init_mha(&mut ps, &names, 8, &mut rng);
        let q = Mat::randn(5, 8, 1.0, &mut rng);
        let k = Mat::randn(7, 8, 1.0, &mut rng);
        let (_, cache) = mha_forward(&ps, &names, 4, &q, &k, &k, None, None);
        for a in &cache.attn {
            for r in 0..a.rows() {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(a.row(r).iter().all(|&w| w >= 0.0));
            }
        }
    }
}
