//! Training kit: Gaussian heatmap target assignment, penalty-reduced focal
//! loss, smooth-L1 box regression, query classification supervision,
//! finite-difference gradient verification and a minimal SGD/Adam optimizer.

use std::collections::BTreeMap;

use crate::config::OptimKind;
use crate::error::{Error, Result};
use crate::evalkit::DetectionBox;
use crate::gfa::{BoxDecode, QuerySet};
use crate::lmfa::Heatmap;
use crate::mat::Mat;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::SparseTensor2D;

/// Per-site, per-class supervision targets aligned with the fused tensor.
#[derive(Debug, Clone)]
pub struct GaussianTargetMap {
    /// [N_voxels × Cls] values in [0, 1].
    pub targets: Mat,
    /// (site row, class) of the positive sample for each assigned GT.
    pub positives: Vec<(usize, usize)>,
    /// GT objects with no active site within their radius.
    pub skipped: usize,
}

/// CornerNet-style radius: the largest Gaussian radius (in cells) keeping
/// IoU >= min_overlap against shifted/scaled copies of the footprint.
fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * c1).max(0.0).sqrt();
    let r1 = (b1 + sq1) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let sq2 = (b2 * b2 - 16.0 * c2).max(0.0).sqrt();
    let r2 = (b2 + sq2) / 8.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (b3 + sq3) / (2.0 * a3);

    r1.min(r2).min(r3)
}

const TARGET_MIN_OVERLAP: f64 = 0.1;

/// Nearest active site per GT becomes the positive (target 1); surrounding
/// sites receive exp(−d²/2σ²) centered on the positive site, combined across
/// objects of the same class by max. A GT whose nearest site lies farther
/// than its radius is counted and skipped.
pub fn assign_heatmap_targets(
    gts: &[DetectionBox],
    fused2d: &SparseTensor2D,
    decode: &BoxDecode,
    classes: usize,
) -> GaussianTargetMap {
    let n = fused2d.n_active();
    let mut targets = Mat::zeros(n, classes);
    let mut positives = Vec::new();
    let mut skipped = 0usize;

    let cell = decode.voxel.voxel_size[0] * decode.stride as f64;
    for gt in gts {
        let cls = gt.cls as usize;
        if cls >= classes {
            skipped += 1;
            continue;
        }
        let (gx, gy) = decode.meters_to_cell(gt.cx, gt.cy);
        // Footprint in cells; radius from the min-overlap rule, floored at
        // one cell, sigma = r/3.
        let lc = gt.l / cell;
        let wc = gt.w / cell;
        let radius = gaussian_radius(lc, wc, TARGET_MIN_OVERLAP).max(1.0);
        let sigma = radius / 3.0;

        let mut best: Option<(usize, f64)> = None;
        for (row, &[ix, iy]) in fused2d.coords().iter().enumerate() {
            let dx = ix as f64 - gx;
            let dy = iy as f64 - gy;
            let d2 = dx * dx + dy * dy;
            if best.map_or(true, |(_, bd)| d2 < bd) {
                best = Some((row, d2));
            }
        }
        let (pos_row, pos_d2) = match best {
            Some(b) => b,
            None => {
                skipped += 1;
                continue;
            }
        };
        if pos_d2.sqrt() > radius {
            skipped += 1;
            continue;
        }
        positives.push((pos_row, cls));
        let [px, py] = fused2d.coords()[pos_row];
        let denom = 2.0 * sigma * sigma;
        for (row, &[ix, iy]) in fused2d.coords().iter().enumerate() {
            let dx = (ix - px) as f64;
            let dy = (iy - py) as f64;
            let g = (-(dx * dx + dy * dy) / denom).exp();
            if g > targets.at(row, cls) {
                targets.set(row, cls, g);
            }
        }
        targets.set(pos_row, cls, 1.0);
    }
    GaussianTargetMap {
        targets,
        positives,
        skipped,
    }
}

const FOCAL_ALPHA: f64 = 2.0;
const FOCAL_BETA: f64 = 4.0;
const P_EPS: f64 = 1e-12;

/// Penalty-reduced focal loss over sigmoid scores, normalized by the
/// positive count (or 1 when there are none). Returns the loss and its
/// analytic gradient w.r.t. the scores.
pub fn focal_loss(pred: &Heatmap, tgt: &GaussianTargetMap) -> (f64, Mat) {
    let p_mat = &pred.scores;
    let t_mat = &tgt.targets;
    assert_eq!(p_mat.shape(), t_mat.shape(), "heatmap/target shapes");
    let n_pos = t_mat.data().iter().filter(|&&t| t == 1.0).count().max(1) as f64;

    let mut loss = 0.0;
    let mut grad = Mat::zeros(p_mat.rows(), p_mat.cols());
    for i in 0..p_mat.len() {
        let p = p_mat.data()[i].clamp(P_EPS, 1.0 - P_EPS);
        let t = t_mat.data()[i];
        let (l, g) = if t == 1.0 {
            let lp = p.ln();
            let om = 1.0 - p;
            (
                -om.powf(FOCAL_ALPHA) * lp,
                FOCAL_ALPHA * om * lp - om * om / p,
            )
        } else {
            let w = (1.0 - t).powf(FOCAL_BETA);
            let lom = (1.0 - p).ln();
            (
                -w * p.powf(FOCAL_ALPHA) * lom,
                -w * (FOCAL_ALPHA * p * lom - p * p / (1.0 - p)),
            )
        };
        loss += l;
        grad.data_mut()[i] = g / n_pos;
    }
    (loss / n_pos, grad)
}

/// Smooth-L1 (δ = 1) summed over the 8 regression dims, averaged over
/// matched pairs. Returns loss and gradient w.r.t. predictions.
pub fn box_regression_loss(pred: &Mat, target: &Mat) -> (f64, Mat) {
    assert_eq!(pred.shape(), target.shape());
    let n_pairs = pred.rows();
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    if n_pairs == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n_pairs as f64;
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let r = pred.data()[i] - target.data()[i];
        let (l, g) = if r.abs() < 1.0 {
            (0.5 * r * r, r)
        } else {
            (r.abs() - 0.5, r.signum())
        };
        loss += l * inv;
        grad.data_mut()[i] = g * inv;
    }
    (loss, grad)
}

/// Binary cross-entropy on query class logits against one-hot targets
/// (all-zero rows for unmatched queries), averaged over all entries.
/// Returns loss and gradient w.r.t. the logits.
pub fn query_cls_loss(logits: &Mat, target: &Mat) -> (f64, Mat) {
    assert_eq!(logits.shape(), target.shape());
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.len() {
        let z = logits.data()[i];
        let t = target.data()[i];
        // Stable BCE-with-logits: max(z,0) − z·t + ln(1+e^−|z|).
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        grad.data_mut()[i] = (p - t) / n;
    }
    (loss / n, grad)
}

/// Match each query to its nearest GT center within `radius` cells.
pub fn match_queries(
    queries: &QuerySet,
    gts: &[DetectionBox],
    decode: &BoxDecode,
    radius: f64,
) -> Vec<Option<usize>> {
    queries
        .pos
        .iter()
        .map(|&[ix, iy]| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let (gx, gy) = decode.meters_to_cell(gt.cx, gt.cy);
                let dx = ix as f64 - gx;
                let dy = iy as f64 - gy;
                let d2 = dx * dx + dy * dy;
                if d2.sqrt() <= radius && best.map_or(true, |(_, bd)| d2 < bd) {
                    best = Some((gi, d2));
                }
            }
            best.map(|(gi, _)| gi)
        })
        .collect()
}

pub const MATCH_RADIUS_CELLS: f64 = 2.0;

/// Regression target for a (query, GT) pair, matching the head layout
/// (Δx, Δy, z, log l, log w, log h, sin θ, cos θ).
pub fn regression_target(q_pos: [i64; 2], gt: &DetectionBox, decode: &BoxDecode) -> [f64; 8] {
    let (gx, gy) = decode.meters_to_cell(gt.cx, gt.cy);
    [
        gx - q_pos[0] as f64,
        gy - q_pos[1] as f64,
        gt.cz,
        gt.l.ln(),
        gt.w.ln(),
        gt.h.ln(),
        gt.yaw.sin(),
        gt.yaw.cos(),
    ]
}

/// Loss components for one step. `total = heatmap + λ·reg`, where the
/// regression branch bundles box smooth-L1 and query classification.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub heatmap_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub positives: usize,
}

impl LossBreakdown {
    pub fn combine(heatmap_loss: f64, reg_loss: f64, lambda: f64, positives: usize) -> Self {
        LossBreakdown {
            heatmap_loss,
            reg_loss,
            total: heatmap_loss + lambda * reg_loss,
            positives,
        }
    }
}

/// One probe for the finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub flat: usize,
}

/// Deterministically pick up to `count` scalar probes among parameters whose
/// name matches `filter`.
pub fn select_probes(
    ps: &ParamStore,
    filter: impl Fn(&str) -> bool,
    count: usize,
    rng: &mut Rng,
) -> Vec<Probe> {
    let mut pool: Vec<Probe> = Vec::new();
    let names: Vec<String> = ps.names().map(|s| s.to_string()).collect();
    for name in names {
        if !filter(&name) {
            continue;
        }
        for flat in 0..ps.get(&name).len() {
            pool.push(Probe {
                name: name.clone(),
                flat,
            });
        }
    }
    if pool.len() <= count {
        return pool;
    }
    // Partial Fisher-Yates for the first `count` slots.
    let n = pool.len();
    for i in 0..count {
        let j = i + rng.below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    pub worst: String,
}

pub const GRADCHECK_STEP: f64 = 1e-5;

/// Central-difference comparison of analytic gradients already accumulated
/// in the store against the scalar `loss` closure, over the given probes.
pub fn grad_check(
    ps: &mut ParamStore,
    loss: &dyn Fn(&ParamStore) -> f64,
    probes: &[Probe],
) -> GradCheckReport {
    let mut max_rel = 0.0;
    let mut worst = String::new();
    for probe in probes {
        let orig = ps.scalar(&probe.name, probe.flat);
        ps.set_scalar(&probe.name, probe.flat, orig + GRADCHECK_STEP);
        let up = loss(ps);
        ps.set_scalar(&probe.name, probe.flat, orig - GRADCHECK_STEP);
        let down = loss(ps);
        ps.set_scalar(&probe.name, probe.flat, orig);
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let analytic = ps.grad_scalar(&probe.name, probe.flat);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = format!(
                "{}[{}]: analytic {analytic:.3e} vs numeric {numeric:.3e}",
                probe.name, probe.flat
            );
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        probes: probes.len(),
        worst,
    }
}

/// SGD or Adam (β = 0.9/0.999, ε = 1e-8) over every parameter in the store.
#[derive(Debug)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from the accumulated gradients. A non-finite
    /// gradient aborts, naming the parameter.
    pub fn step(&mut self, ps: &mut ParamStore) -> Result<()> {
        if let Some(name) = ps.find_non_finite_grad() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter '{name}'"
            )));
        }
        self.step += 1;
        let names: Vec<String> = ps.names().map(|s| s.to_string()).collect();
        match self.kind {
            OptimKind::Sgd => {
                for name in names {
                    let grad = ps.grad(&name).clone();
                    let p = ps.get_mut(&name);
                    for (pv, gv) in p.data_mut().iter_mut().zip(grad.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for name in names {
                    let grad = ps.grad(&name).clone();
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
                    for ((mv, vv), gv) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut().iter_mut())
                        .zip(grad.data())
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                    }
                    let m_snapshot = m.clone();
                    let v_snapshot = v.clone();
                    let p = ps.get_mut(&name);
                    for ((pv, mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m_snapshot.data())
                        .zip(v_snapshot.data())
                    {
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        *pv -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
