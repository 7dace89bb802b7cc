//! Global feature aggregation: object queries initialized from high-scoring
//! voxels, a fixed-size zero-padded key/value bank, scale-adaptive
//! self-attention (attention logits biased by a learnable multiple of the
//! log pairwise distance), one cross-attention decode round and the
//! prediction heads.

use crate::error::{Error, Result};
use crate::evalkit::DetectionBox;
use crate::lmfa::Heatmap;
use crate::mat::Mat;
use crate::nn::{
    init_linear, init_mha, linear_backward, linear_forward, mha_backward, mha_forward, relu,
    relu_backward, softplus, softplus_grad, LinearCache, MhaCache, MhaNames,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{SparseTensor2D, VoxelGridConfig};

const SASA_NAMES: MhaNames<'static> = MhaNames {
    wq: "gfa.sasa.wq",
    wk: "gfa.sasa.wk",
    wv: "gfa.sasa.wv",
    wo: "gfa.sasa.wo",
};

const CROSS_NAMES: MhaNames<'static> = MhaNames {
    wq: "gfa.cross.wq",
    wk: "gfa.cross.wk",
    wv: "gfa.cross.wv",
    wo: "gfa.cross.wo",
};

#[derive(Debug, Clone, Copy)]
pub struct GfaConfig {
    pub n_query: usize,
    pub n_kv: usize,
    pub heads: usize,
    /// Exclude zero-padded K/V rows from the softmax (the stable reading of
    /// the padding rule; `false` lets them participate as zero vectors).
    pub mask_padded: bool,
}

pub fn init_gfa(ps: &mut ParamStore, channels: usize, classes: usize, heads: usize, rng: &mut Rng) {
    assert_eq!(channels % heads, 0, "heads must divide channels");
    init_linear(ps, "gfa.pe.0", 2, channels, rng);
    init_linear(ps, "gfa.pe.1", channels, channels, rng);
    init_mha(ps, &SASA_NAMES, channels, rng);
    init_linear(ps, "gfa.sasa.eta", channels, heads, rng);
    init_mha(ps, &CROSS_NAMES, channels, rng);
    init_linear(ps, "gfa.ffn.0", channels, 2 * channels, rng);
    init_linear(ps, "gfa.ffn.1", 2 * channels, channels, rng);
}

pub fn init_heads(ps: &mut ParamStore, channels: usize, classes: usize, rng: &mut Rng) {
    init_linear(ps, "gfa.head.cls", channels, classes, rng);
    init_linear(ps, "gfa.head.reg", channels, 8, rng);
}

/// Object queries: features, stride-8 positions and the position embedding.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Q, [N_query × C].
    pub feats: Mat,
    /// Stride-8 BEV cell per query.
    pub pos: Vec<[i64; 2]>,
    /// Position embedding added at initialization, [N_query × C].
    pub pe: Mat,
    /// Source rows into the enhanced fused tensor.
    pub rows: Vec<usize>,
    /// Argmax class at selection time.
    pub cls: Vec<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Fixed-size key/value bank. K and V share the selected feature rows; the
/// attention projections differentiate them.
#[derive(Debug, Clone)]
pub struct KVSet {
    /// [N_KV × C]; padded rows are all-zero.
    pub feats: Mat,
    /// Per-entry stride-8 coordinates; padding holds (0, 0).
    pub pos: Vec<[i64; 2]>,
    /// True for real entries, false for padding.
    pub valid: Vec<bool>,
    /// Source rows into the enhanced fused tensor (None for padding).
    pub rows: Vec<Option<usize>>,
}

impl KVSet {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug)]
pub struct PeCache {
    lin0: LinearCache,
    pre: Mat,
    lin1: LinearCache,
}

/// Two-layer MLP over positions normalized to [0,1]² by the stride-8 grid
/// extent.
pub fn position_embedding(
    ps: &ParamStore,
    pos: &[[i64; 2]],
    grid: [i64; 2],
) -> (Mat, PeCache) {
    let mut norm = Mat::zeros(pos.len(), 2);
    for (r, &[x, y]) in pos.iter().enumerate() {
        norm.set(r, 0, x as f64 / grid[0].max(1) as f64);
        norm.set(r, 1, y as f64 / grid[1].max(1) as f64);
    }
    let (pre, lin0) = linear_forward(ps, "gfa.pe.0", &norm);
    let hidden = relu(&pre);
    let (pe, lin1) = linear_forward(ps, "gfa.pe.1", &hidden);
    (pe, PeCache { lin0, pre, lin1 })
}

pub fn position_embedding_backward(cache: &PeCache, ps: &mut ParamStore, d_pe: &Mat) {
    let d_hidden = linear_backward(ps, "gfa.pe.1", &cache.lin1, d_pe);
    let d_pre = relu_backward(&cache.pre, &d_hidden);
    // Positions are data, not parameters; the input gradient stops here.
    let _ = linear_backward(ps, "gfa.pe.0", &cache.lin0, &d_pre);
}

#[derive(Debug)]
pub struct InitQueriesCache {
    pe: PeCache,
    rows: Vec<usize>,
    n_voxels: usize,
}

/// Select the top-`n_query` sites by max-over-class score (argmax class
/// recorded) and form Q = F_query + PE(Pos_query).
pub fn init_queries(
    fused2d: &SparseTensor2D,
    hm: &Heatmap,
    n_query: usize,
    ps: &ParamStore,
    grid: [i64; 2],
) -> (QuerySet, InitQueriesCache) {
    let n = fused2d.n_active();
    let mut ranked: Vec<(usize, f64, usize)> = (0..n)
        .map(|r| {
            let row = hm.scores.row(r);
            let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
            for (c, &s) in row.iter().enumerate() {
                if s > best {
                    best = s;
                    best_c = c;
                }
            }
            (r, best, best_c)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(n_query);

    let rows: Vec<usize> = ranked.iter().map(|&(r, _, _)| r).collect();
    let cls: Vec<usize> = ranked.iter().map(|&(_, _, c)| c).collect();
    let pos: Vec<[i64; 2]> = rows.iter().map(|&r| fused2d.coords()[r]).collect();
    let f_query = fused2d.feats.gather_rows(&rows);
    let (pe, pe_cache) = position_embedding(ps, &pos, grid);
    let mut feats = f_query;
    feats.add_assign(&pe);
    (
        QuerySet {
            feats,
            pos,
            pe,
            rows: rows.clone(),
            cls,
        },
        InitQueriesCache {
            pe: pe_cache,
            rows,
            n_voxels: n,
        },
    )
}

/// Backward: d(Q) flows into the PE parameters and back to the gathered
/// fused-tensor rows.
pub fn init_queries_backward(
    cache: &InitQueriesCache,
    ps: &mut ParamStore,
    d_q: &Mat,
) -> Mat {
    position_embedding_backward(&cache.pe, ps, d_q);
    let mut d_fused = Mat::zeros(cache.n_voxels, d_q.cols());
    for (i, &row) in cache.rows.iter().enumerate() {
        for (dst, &v) in d_fused.row_mut(row).iter_mut().zip(d_q.row(i)) {
            *dst += v;
        }
    }
    d_fused
}

/// Rowwise max over class scores, top-`n_kv` selection (ties to the lower
/// row), zero padding up to exactly `n_kv` rows.
pub fn select_kv(fused2d: &SparseTensor2D, hm: &Heatmap, n_kv: usize) -> KVSet {
    let n = fused2d.n_active();
    let mut ranked: Vec<(usize, f64)> = (0..n)
        .map(|r| {
            let best = hm
                .scores
                .row(r)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            (r, best)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(n_kv);

    let channels = fused2d.channels();
    let mut feats = Mat::zeros(n_kv, channels);
    let mut pos = vec![[0i64, 0i64]; n_kv];
    let mut valid = vec![false; n_kv];
    let mut rows: Vec<Option<usize>> = vec![None; n_kv];
    for (i, &(r, _)) in ranked.iter().enumerate() {
        feats.row_mut(i).copy_from_slice(fused2d.feats.row(r));
        pos[i] = fused2d.coords()[r];
        valid[i] = true;
        rows[i] = Some(r);
    }
    KVSet {
        feats,
        pos,
        valid,
        rows,
    }
}

/// Euclidean distances between all pairs of query positions, in stride-8
/// cell units. Symmetric with a zero diagonal.
pub fn pairwise_distances(pos: &[[i64; 2]]) -> Mat {
    let n = pos.len();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = (pos[i][0] - pos[j][0]) as f64;
            let dy = (pos[i][1] - pos[j][1]) as f64;
            let d = (dx * dx + dy * dy).sqrt();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

#[derive(Debug)]
pub struct SasaCache {
    eta_lin: LinearCache,
    eta_raw: Mat,
    log_dis: Mat,
    mha: MhaCache,
    heads: usize,
}

/// η per query and head: −softplus(eta_fc(Q)), so the log-distance bias
/// always penalizes distance.
pub fn compute_eta(ps: &ParamStore, q_feats: &Mat, heads: usize) -> (Mat, Mat, LinearCache) {
    let (raw, lin) = linear_forward(ps, "gfa.sasa.eta", q_feats);
    debug_assert_eq!(raw.cols(), heads);
    let eta = raw.map(|v| -softplus(v));
    (eta, raw, lin)
}

/// Scale-adaptive self-attention with an explicit η (exposed so the η = 0
/// identity is testable exactly): per head,
/// A = softmax(QKᵀ/√d + η·log(max(Dis, 1))), residual added.
pub fn sasa_with_eta(
    ps: &ParamStore,
    q: &QuerySet,
    eta: &Mat,
    eta_raw: Mat,
    eta_lin: LinearCache,
    heads: usize,
) -> (Mat, SasaCache) {
    let n = q.len();
    let dis = pairwise_distances(&q.pos);
    // Clamp to one cell before the log: the self term (and anything closer
    // than a cell) contributes zero bias.
    let log_dis = dis.map(|d| d.max(1.0).ln());

    let mut bias: Vec<Mat> = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut b = Mat::zeros(n, n);
        for i in 0..n {
            let e = eta.at(i, h);
            for j in 0..n {
                b.set(i, j, e * log_dis.at(i, j));
            }
        }
        bias.push(b);
    }

    let (attn_out, mha) = mha_forward(
        ps,
        &SASA_NAMES,
        heads,
        &q.feats,
        &q.feats,
        &q.feats,
        Some(&bias),
        None,
    );
    let mut out = q.feats.clone();
    out.add_assign(&attn_out);
    (
        out,
        SasaCache {
            eta_lin,
            eta_raw,
            log_dis,
            mha,
            heads,
        },
    )
}

pub fn sasa_self_attention(ps: &ParamStore, q: &QuerySet, heads: usize) -> (Mat, SasaCache) {
    let (eta, raw, lin) = compute_eta(ps, &q.feats, heads);
    sasa_with_eta(ps, q, &eta, raw, lin, heads)
}

/// Returns the gradient w.r.t. the pre-SASA query features.
pub fn sasa_backward(cache: &SasaCache, ps: &mut ParamStore, d_out: &Mat) -> Mat {
    let (d_q, d_k, d_v, d_bias) = mha_backward(ps, &SASA_NAMES, &cache.mha, d_out, true);
    let d_bias = d_bias.expect("bias grads requested");

    // d_eta[i,h] = Σ_j d_bias_h[i,j] · log_dis[i,j]
    let n = cache.log_dis.rows();
    let mut d_eta = Mat::zeros(n, cache.heads);
    for (h, db) in d_bias.iter().enumerate() {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += db.at(i, j) * cache.log_dis.at(i, j);
            }
            d_eta.set(i, h, acc);
        }
    }
    // η = −softplus(raw).
    let mut d_raw = d_eta;
    for (g, &r) in d_raw.data_mut().iter_mut().zip(cache.eta_raw.data()) {
        *g *= -softplus_grad(r);
    }
    let d_from_eta = linear_backward(ps, "gfa.sasa.eta", &cache.eta_lin, &d_raw);

    // Residual plus the three attention inputs plus the eta path, all on the
    // same query features.
    let mut d_feats = d_out.clone();
    d_feats.add_assign(&d_q);
    d_feats.add_assign(&d_k);
    d_feats.add_assign(&d_v);
    d_feats.add_assign(&d_from_eta);
    d_feats
}

#[derive(Debug)]
pub struct CrossCache {
    pe_q: PeCache,
    pe_kv: PeCache,
    mha: MhaCache,
    ffn0: LinearCache,
    ffn_pre: Mat,
    ffn1: LinearCache,
    valid: Vec<bool>,
    kv_rows: Vec<Option<usize>>,
    n_voxels: usize,
}

/// One decoder round: cross attention (position embeddings added to queries
/// and keys, padded keys excluded when masking is on) with residual, then a
/// two-layer feed-forward block with residual.
pub fn cross_attention_decode(
    q_feats: &Mat,
    q_pos: &[[i64; 2]],
    kv: &KVSet,
    ps: &ParamStore,
    cfg: &GfaConfig,
    grid: [i64; 2],
    n_voxels: usize,
) -> Result<(Mat, CrossCache)> {
    if kv.n_valid() == 0 {
        return Err(Error::Degenerate(
            "cross attention over an all-padded K/V bank".into(),
        ));
    }
    let (pe_q, pe_q_cache) = position_embedding(ps, q_pos, grid);
    let (pe_kv, pe_kv_cache) = position_embedding(ps, &kv.pos, grid);

    let mut q_in = q_feats.clone();
    q_in.add_assign(&pe_q);
    let mut k_in = kv.feats.clone();
    k_in.add_assign(&pe_kv);

    let key_valid = if cfg.mask_padded {
        Some(kv.valid.as_slice())
    } else {
        None
    };
    let (attn_out, mha) = mha_forward(
        ps,
        &CROSS_NAMES,
        cfg.heads,
        &q_in,
        &k_in,
        &kv.feats,
        None,
        key_valid,
    );
    let mut q1 = q_feats.clone();
    q1.add_assign(&attn_out);

    let (pre, ffn0) = linear_forward(ps, "gfa.ffn.0", &q1);
    let hidden = relu(&pre);
    let (ffn_out, ffn1) = linear_forward(ps, "gfa.ffn.1", &hidden);
    let mut q2 = q1;
    q2.add_assign(&ffn_out);

    Ok((
        q2,
        CrossCache {
            pe_q: pe_q_cache,
            pe_kv: pe_kv_cache,
            mha,
            ffn0,
            ffn_pre: pre,
            ffn1,
            valid: kv.valid.clone(),
            kv_rows: kv.rows.clone(),
            n_voxels,
        },
    ))
}

/// Returns (d_query_feats, d_fused_from_kv): the K/V feature gradients are
/// already scattered back to their source rows in the enhanced fused tensor.
pub fn cross_attention_backward(
    cache: &CrossCache,
    ps: &mut ParamStore,
    d_out: &Mat,
) -> (Mat, Mat) {
    // FFN with residual: q2 = q1 + ffn(q1).
    let d_hidden = linear_backward(ps, "gfa.ffn.1", &cache.ffn1, d_out);
    let d_pre = relu_backward(&cache.ffn_pre, &d_hidden);
    let d_from_ffn = linear_backward(ps, "gfa.ffn.0", &cache.ffn0, &d_pre);
    let mut d_q1 = d_out.clone();
    d_q1.add_assign(&d_from_ffn);

    // Attention with residual: q1 = q + attn(q + pe_q, kv + pe_kv, kv).
    let (d_q_in, d_k_in, d_v_in, _) = mha_backward(ps, &CROSS_NAMES, &cache.mha, &d_q1, false);

    position_embedding_backward(&cache.pe_q, ps, &d_q_in);
    position_embedding_backward(&cache.pe_kv, ps, &d_k_in);

    let mut d_q_feats = d_q1;
    d_q_feats.add_assign(&d_q_in);

    // K and V both read the bank features.
    let mut d_kv_feats = d_k_in;
    d_kv_feats.add_assign(&d_v_in);
    let mut d_fused = Mat::zeros(cache.n_voxels, d_kv_feats.cols());
    for (i, row) in cache.kv_rows.iter().enumerate() {
        if let Some(r) = row {
            for (dst, &v) in d_fused.row_mut(*r).iter_mut().zip(d_kv_feats.row(i)) {
                *dst += v;
            }
        }
    }
    (d_q_feats, d_fused)
}

/// Geometry needed to place a BEV cell prediction into meters.
#[derive(Debug, Clone, Copy)]
pub struct BoxDecode {
    pub stride: u32,
    pub voxel: VoxelGridConfig,
}

impl BoxDecode {
    /// Meters-per-cell along x/y at this stride.
    fn cell(&self) -> [f64; 2] {
        [
            self.voxel.voxel_size[0] * self.stride as f64,
            self.voxel.voxel_size[1] * self.stride as f64,
        ]
    }

    /// Center of cell (ix, iy) shifted by (dx, dy) cells, in meters.
    /// Convention: x = (ix + 0.5 + dx) · stride · voxel_x + xmin, so a zero
    /// offset lands on the cell center (0.2 m for cell 0 at stride 8 on the
    /// 0.05 m grid).
    pub fn cell_to_meters(&self, pos: [i64; 2], dx: f64, dy: f64) -> (f64, f64) {
        let [cx, cy] = self.cell();
        (
            (pos[0] as f64 + 0.5 + dx) * cx + self.voxel.point_range[0],
            (pos[1] as f64 + 0.5 + dy) * cy + self.voxel.point_range[1],
        )
    }

    /// Inverse map: meters to fractional cell coordinates.
    pub fn meters_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let [cx, cy] = self.cell();
        (
            (x - self.voxel.point_range[0]) / cx - 0.5,
            (y - self.voxel.point_range[1]) / cy - 0.5,
        )
    }
}

/// Raw head outputs retained for the loss and its backward pass.
#[derive(Debug)]
pub struct HeadsOut {
    /// [N_query × Cls] pre-sigmoid logits.
    pub cls_logits: Mat,
    /// [N_query × 8]: (Δx, Δy, z, log l, log w, log h, sin θ, cos θ).
    pub reg: Mat,
}

#[derive(Debug)]
pub struct HeadsCache {
    cls_lin: LinearCache,
    reg_lin: LinearCache,
}

/// Per-query class logits and box parameters, decoded into world-frame
/// detection boxes.
pub fn ffn_predict(
    q_feats: &Mat,
    q_pos: &[[i64; 2]],
    ps: &ParamStore,
    decode: &BoxDecode,
) -> (Vec<DetectionBox>, HeadsOut, HeadsCache) {
    let (cls_logits, cls_lin) = linear_forward(ps, "gfa.head.cls", q_feats);
    let (reg, reg_lin) = linear_forward(ps, "gfa.head.reg", q_feats);

    let mut boxes = Vec::with_capacity(q_feats.rows());
    for r in 0..q_feats.rows() {
        let row = reg.row(r);
        let (cx, cy) = decode.cell_to_meters(q_pos[r], row[0], row[1]);
        let cz = row[2];
        let (l, w, h) = (row[3].exp(), row[4].exp(), row[5].exp());
        let (sin, cos) = (row[6], row[7]);
        let norm = (sin * sin + cos * cos).sqrt().max(1e-12);
        let yaw = (sin / norm).atan2(cos / norm);

        let (mut best, mut best_c) = (f64::NEG_INFINITY, 0usize);
        for (c, &logit) in cls_logits.row(r).iter().enumerate() {
            if logit > best {
                best = logit;
                best_c = c;
            }
        }
        let confidence = 1.0 / (1.0 + (-best).exp());
        boxes.push(DetectionBox {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw,
            cls: best_c as u32,
            score: confidence,
        });
    }
    (boxes, HeadsOut { cls_logits, reg }, HeadsCache { cls_lin, reg_lin })
}

/// Gradients w.r.t. the raw head outputs -> gradient w.r.t. query features.
pub fn heads_backward(
    cache: &HeadsCache,
    ps: &mut ParamStore,
    d_cls_logits: &Mat,
    d_reg: &Mat,
) -> Mat {
    let mut d_q = linear_backward(ps, "gfa.head.cls", &cache.cls_lin, d_cls_logits);
    let d_q2 = linear_backward(ps, "gfa.head.reg", &cache.reg_lin, d_reg);
    d_q.add_assign(&d_q2);
    d_q
}
