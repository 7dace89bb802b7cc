//! Local multi-scale feature aggregation: heatmap-scored key voxel
//! selection, cross-scale KNN neighborhood gathering, MLP aggregation with
//! masked mean pooling, learnable scale-weighted fusion, and scatter-back
//! into the fused BEV tensor.

use crate::error::{Error, Result};
use crate::knn::knn_indices;
use crate::mat::Mat;
use crate::nn::{
    init_linear, linear_backward, linear_forward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_rows, softmax_rows_backward, LinearCache,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{gather, rescale_coords, scatter_replace, SparseTensor2D};

/// Per-voxel per-class foreground scores, row-aligned with the fused tensor.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// Sigmoid outputs in (0, 1), shape [N_voxels × Cls].
    pub scores: Mat,
}

/// The selected key voxels, in rank order (best first).
#[derive(Debug, Clone)]
pub struct KeyVoxelSet {
    /// Row indices into the fused BEV tensor.
    pub rows: Vec<usize>,
    /// Stride-8 BEV coordinates of each key voxel.
    pub coords_s8: Vec<[i64; 2]>,
    /// Features gathered from the fused tensor, [N_key × C].
    pub feats: Mat,
    /// Ranking score (max over classes).
    pub scores: Vec<f64>,
}

impl KeyVoxelSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Gathered neighborhoods for one scale: flattened [N_key · k] rows.
#[derive(Debug, Clone)]
pub struct ScaleNeighbors {
    pub k: usize,
    /// Row index into the scale tensor, None for padding.
    pub indices: Vec<Option<usize>>,
    /// Gathered neighbor features, [(N_key·k) × C_i]; padded rows are zero.
    pub feats: Mat,
    /// Active-site count of the source scale tensor.
    pub n_sites: usize,
}

/// Neighborhoods at scales s4, s5, s6.
#[derive(Debug, Clone)]
pub struct NeighborSet {
    pub scales: [ScaleNeighbors; 3],
    pub n_key: usize,
}

/// Learned per-key scale weights, rows on the 3-simplex.
#[derive(Debug, Clone)]
pub struct ScaleWeights {
    pub w: Mat,
}

/// Eq-style neighbor count schedule: M, M/2, M/4 across scales 4..6.
pub fn neighbor_count(scale: usize, m: usize) -> Result<usize> {
    if !(4..=6).contains(&scale) {
        return Err(Error::Config(format!(
            "neighbor_count: scale index {scale} outside 4..=6"
        )));
    }
    Ok(m >> (scale - 4))
}

pub fn init_lmfa(
    ps: &mut ParamStore,
    scale_channels: [usize; 3],
    channels: usize,
    classes: usize,
    rng: &mut Rng,
) {
    init_linear(ps, "lmfa.heatmap", channels, classes, rng);
    for (i, &ci) in scale_channels.iter().enumerate() {
        let scale = i + 4;
        init_linear(ps, &format!("lmfa.mlp.s{scale}.0"), ci, channels, rng);
        init_linear(ps, &format!("lmfa.mlp.s{scale}.1"), channels, channels, rng);
    }
    init_linear(ps, "lmfa.scale_fc", channels, 3, rng);
    init_linear(ps, "lmfa.fuse", 2 * channels, channels, rng);
}

#[derive(Debug)]
pub struct HeatmapCache {
    lin: LinearCache,
    scores: Mat,
}

/// Per-site linear map plus sigmoid.
pub fn predict_heatmap(fused2d: &SparseTensor2D, ps: &ParamStore) -> (Heatmap, HeatmapCache) {
    let (logits, lin) = linear_forward(ps, "lmfa.heatmap", &fused2d.feats);
    let scores = sigmoid(&logits);
    (
        Heatmap {
            scores: scores.clone(),
        },
        HeatmapCache { lin, scores },
    )
}

/// d(loss)/d(scores) -> d(loss)/d(fused2d features).
pub fn predict_heatmap_backward(
    cache: &HeatmapCache,
    ps: &mut ParamStore,
    d_scores: &Mat,
) -> Mat {
    let d_logits = sigmoid_backward(&cache.scores, d_scores);
    linear_backward(ps, "lmfa.heatmap", &cache.lin, &d_logits)
}

/// Rank sites by max-over-class score (ties to the lower row index) and keep
/// the best `n_key`; all sites when fewer exist.
pub fn select_key_voxels(
    hm: &Heatmap,
    fused2d: &SparseTensor2D,
    n_key: usize,
) -> KeyVoxelSet {
    let n = fused2d.n_active();
    debug_assert_eq!(hm.scores.rows(), n);
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
    ranked.truncate(n_key);

    let rows: Vec<usize> = ranked.iter().map(|&(r, _)| r).collect();
    let scores: Vec<f64> = ranked.iter().map(|&(_, s)| s).collect();
    let coords_s8: Vec<[i64; 2]> = rows.iter().map(|&r| fused2d.coords()[r]).collect();
    let feats = fused2d.feats.gather_rows(&rows);
    KeyVoxelSet {
        rows,
        coords_s8,
        feats,
        scores,
    }
}

/// Gather the k-nearest active sites of each scale around every key voxel.
/// Key coordinates move into each scale space by floor division (1, 2, 4);
/// shortfalls pad with zeros.
pub fn knn_gather(
    keys: &KeyVoxelSet,
    scales: [&SparseTensor2D; 3],
    m: usize,
) -> Result<NeighborSet> {
    knn_gather_jobs(keys, scales, m, 1)
}

/// Per-key queries are independent; `jobs > 1` splits them over threads and
/// writes disjoint row ranges, so the result is identical to the sequential
/// path.
pub fn knn_gather_jobs(
    keys: &KeyVoxelSet,
    scales: [&SparseTensor2D; 3],
    m: usize,
    jobs: usize,
) -> Result<NeighborSet> {
    let mut out: Vec<ScaleNeighbors> = Vec::with_capacity(3);
    for (si, t) in scales.iter().enumerate() {
        let scale = si + 4;
        let k = neighbor_count(scale, m)?;
        let factor = 1i64 << si;
        let qcoords = rescale_coords(&keys.coords_s8, factor)?;
        let found = knn_queries(t.coords(), &qcoords, k, jobs);
        let mut indices: Vec<Option<usize>> = Vec::with_capacity(keys.len() * k);
        let mut feats = Mat::zeros(keys.len() * k, t.channels());
        for (qi, rows) in found.iter().enumerate() {
            for j in 0..k {
                let flat = qi * k + j;
                match rows.get(j) {
                    Some(&row) => {
                        indices.push(Some(row));
                        feats.row_mut(flat).copy_from_slice(t.feats.row(row));
                    }
                    None => indices.push(None),
                }
            }
        }
        out.push(ScaleNeighbors {
            k,
            indices,
            feats,
            n_sites: t.n_active(),
        });
    }
    let scales_arr: [ScaleNeighbors; 3] = out.try_into().expect("three scales");
    Ok(NeighborSet {
        scales: scales_arr,
        n_key: keys.len(),
    })
}

fn knn_queries(
    sites: &[[i64; 2]],
    queries: &[[i64; 2]],
    k: usize,
    jobs: usize,
) -> Vec<Vec<usize>> {
    if jobs <= 1 || queries.len() < 2 * jobs {
        return queries.iter().map(|&q| knn_indices(sites, q, k)).collect();
    }
    let chunk = queries.len().div_ceil(jobs);
    let mut results: Vec<Vec<Vec<usize>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| scope.spawn(move || qs.iter().map(|&q| knn_indices(sites, q, k)).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            results.push(h.join().expect("knn worker"));
        }
    });
    results.into_iter().flatten().collect()
}

#[derive(Debug)]
pub struct AggregateCache {
    per_scale: Vec<AggScaleCache>,
    n_key: usize,
}

#[derive(Debug)]
struct AggScaleCache {
    lin0: LinearCache,
    pre_relu: Mat,
    lin1: LinearCache,
    k: usize,
    indices: Vec<Option<usize>>,
    counts: Vec<usize>,
}

/// Shared two-layer MLP per scale applied to every neighbor feature, then a
/// masked mean over the real neighbors of each key: [N_key × C] per scale.
pub fn aggregate_neighbors(
    ns: &NeighborSet,
    ps: &ParamStore,
) -> ([Mat; 3], AggregateCache) {
    let mut outputs: Vec<Mat> = Vec::with_capacity(3);
    let mut caches: Vec<AggScaleCache> = Vec::with_capacity(3);
    for (si, sn) in ns.scales.iter().enumerate() {
        let scale = si + 4;
        let (pre, lin0) = linear_forward(ps, &format!("lmfa.mlp.s{scale}.0"), &sn.feats);
        let hidden = relu(&pre);
        let (mapped, lin1) = linear_forward(ps, &format!("lmfa.mlp.s{scale}.1"), &hidden);

        let channels = mapped.cols();
        let mut agg = Mat::zeros(ns.n_key, channels);
        let mut counts = vec![0usize; ns.n_key];
        for key in 0..ns.n_key {
            for j in 0..sn.k {
                let flat = key * sn.k + j;
                if sn.indices[flat].is_some() {
                    counts[key] += 1;
                    for (dst, &v) in agg.row_mut(key).iter_mut().zip(mapped.row(flat)) {
                        *dst += v;
                    }
                }
            }
            if counts[key] > 0 {
                let inv = 1.0 / counts[key] as f64;
                for v in agg.row_mut(key) {
                    *v *= inv;
                }
            }
        }
        outputs.push(agg);
        caches.push(AggScaleCache {
            lin0,
            pre_relu: pre,
            lin1,
            k: sn.k,
            indices: sn.indices.clone(),
            counts,
        });
    }
    let arr: [Mat; 3] = outputs.try_into().expect("three scales");
    (
        arr,
        AggregateCache {
            per_scale: caches,
            n_key: ns.n_key,
        },
    )
}

/// Returns per-scale gradients w.r.t. the gathered neighbor features.
pub fn aggregate_neighbors_backward(
    cache: &AggregateCache,
    ps: &mut ParamStore,
    d_agg: &[Mat; 3],
) -> [Mat; 3] {
    let mut out: Vec<Mat> = Vec::with_capacity(3);
    for (si, sc) in cache.per_scale.iter().enumerate() {
        let scale = si + 4;
        let d = &d_agg[si];
        let channels = d.cols();
        let mut d_mapped = Mat::zeros(cache.n_key * sc.k, channels);
        for key in 0..cache.n_key {
            if sc.counts[key] == 0 {
                continue;
            }
            let inv = 1.0 / sc.counts[key] as f64;
            for j in 0..sc.k {
                let flat = key * sc.k + j;
                if sc.indices[flat].is_some() {
                    for (dst, &v) in d_mapped.row_mut(flat).iter_mut().zip(d.row(key)) {
                        *dst = v * inv;
                    }
                }
            }
        }
        let d_hidden = linear_backward(ps, &format!("lmfa.mlp.s{scale}.1"), &sc.lin1, &d_mapped);
        let d_pre = relu_backward(&sc.pre_relu, &d_hidden);
        let d_feats = linear_backward(ps, &format!("lmfa.mlp.s{scale}.0"), &sc.lin0, &d_pre);
        out.push(d_feats);
    }
    out.try_into().expect("three scales")
}

#[derive(Debug)]
pub struct FuseKeysCache {
    fc: LinearCache,
    weights: Mat,
    agg: [Mat; 3],
    cat_cache: LinearCache,
    key_feats: Mat,
}

/// Scale weights from a per-key FC + softmax; blend the three aggregated
/// features; project [F_key | blended] back to C channels.
pub fn adaptive_fuse(
    keys: &KeyVoxelSet,
    agg: &[Mat; 3],
    ps: &ParamStore,
) -> (Mat, ScaleWeights, FuseKeysCache) {
    let (logits, fc) = linear_forward(ps, "lmfa.scale_fc", &keys.feats);
    let weights = softmax_rows(&logits);

    let n = keys.len();
    let channels = keys.feats.cols();
    let mut blended = Mat::zeros(n, channels);
    for r in 0..n {
        for (si, a) in agg.iter().enumerate() {
            let w = weights.at(r, si);
            for (dst, &v) in blended.row_mut(r).iter_mut().zip(a.row(r)) {
                *dst += w * v;
            }
        }
    }
    let cat = keys.feats.hcat(&blended);
    let (out, cat_cache) = linear_forward(ps, "lmfa.fuse", &cat);
    (
        out,
        ScaleWeights {
            w: weights.clone(),
        },
        FuseKeysCache {
            fc,
            weights,
            agg: agg.clone(),
            cat_cache,
            key_feats: keys.feats.clone(),
        },
    )
}

/// Returns (d_key_feats, per-scale d_agg).
pub fn adaptive_fuse_backward(
    cache: &FuseKeysCache,
    ps: &mut ParamStore,
    d_out: &Mat,
) -> (Mat, [Mat; 3]) {
    let channels = cache.key_feats.cols();
    let n = cache.key_feats.rows();

    let d_cat = linear_backward(ps, "lmfa.fuse", &cache.cat_cache, d_out);
    let mut d_keys = Mat::zeros(n, channels);
    let mut d_blended = Mat::zeros(n, channels);
    for r in 0..n {
        d_keys.row_mut(r).copy_from_slice(&d_cat.row(r)[..channels]);
        d_blended
            .row_mut(r)
            .copy_from_slice(&d_cat.row(r)[channels..]);
    }

    let mut d_weights = Mat::zeros(n, 3);
    let mut d_agg = [
        Mat::zeros(n, channels),
        Mat::zeros(n, channels),
        Mat::zeros(n, channels),
    ];
    for r in 0..n {
        for si in 0..3 {
            let a_row = cache.agg[si].row(r);
            let mut dot = 0.0;
            for (&db, &av) in d_blended.row(r).iter().zip(a_row) {
                dot += db * av;
            }
            d_weights.set(r, si, dot);
            let w = cache.weights.at(r, si);
            for (dst, &db) in d_agg[si].row_mut(r).iter_mut().zip(d_blended.row(r)) {
                *dst += w * db;
            }
        }
    }
    let d_logits = softmax_rows_backward(&cache.weights, &d_weights);
    let d_keys_fc = linear_backward(ps, "lmfa.scale_fc", &cache.fc, &d_logits);
    d_keys.add_assign(&d_keys_fc);
    (d_keys, d_agg)
}

#[derive(Debug, Clone, Copy)]
pub struct LmfaConfig {
    pub n_key: usize,
    pub m: usize,
    /// Worker threads for the per-key KNN queries (result-deterministic).
    pub jobs: usize,
}

pub struct LmfaOutput {
    pub enhanced: SparseTensor2D,
    pub heatmap: Heatmap,
    pub keys: KeyVoxelSet,
}

pub struct LmfaCache {
    hm: HeatmapCache,
    agg: AggregateCache,
    fuse: FuseKeysCache,
    key_rows: Vec<usize>,
    neighbors: NeighborSet,
    n_voxels: usize,
}

/// Full LMFA pass over the (stem-projected) fused BEV tensor. Exactly the
/// selected key rows change; every other row is bit-identical to the input.
pub fn lmfa_forward(
    fused2d: &SparseTensor2D,
    scales: [&SparseTensor2D; 3],
    ps: &ParamStore,
    cfg: LmfaConfig,
) -> Result<(LmfaOutput, LmfaCache)> {
    if fused2d.n_active() == 0 {
        return Err(Error::Degenerate("LMFA on empty fused tensor".into()));
    }
    let (heatmap, hm_cache) = predict_heatmap(fused2d, ps);
    let keys = select_key_voxels(&heatmap, fused2d, cfg.n_key);
    let neighbors = knn_gather_jobs(&keys, scales, cfg.m, cfg.jobs.max(1))?;
    let (agg, agg_cache) = aggregate_neighbors(&neighbors, ps);
    let (new_feats, _weights, fuse_cache) = adaptive_fuse(&keys, &agg, ps);
    let enhanced = scatter_replace(fused2d, &keys.coords_s8, &new_feats)?;
    Ok((
        LmfaOutput {
            enhanced,
            heatmap,
            keys: keys.clone(),
        },
        LmfaCache {
            hm: hm_cache,
            agg: agg_cache,
            fuse: fuse_cache,
            key_rows: keys.rows,
            neighbors,
            n_voxels: fused2d.n_active(),
        },
    ))
}

/// Backward through LMFA.
///
/// Inputs: gradient w.r.t. the enhanced tensor's features and w.r.t. the
/// heatmap scores. Outputs: gradient w.r.t. the input fused features and the
/// three per-scale BEV tensors feeding KNN.
pub fn lmfa_backward(
    cache: &LmfaCache,
    ps: &mut ParamStore,
    d_enhanced: &Mat,
    d_heatmap: &Mat,
) -> (Mat, [Mat; 3]) {
    let channels = d_enhanced.cols();
    // Non-key rows pass straight through; key rows went through the fuse.
    let mut d_fused = d_enhanced.clone();
    let mut d_new_feats = Mat::zeros(cache.key_rows.len(), channels);
    for (i, &row) in cache.key_rows.iter().enumerate() {
        d_new_feats.row_mut(i).copy_from_slice(d_enhanced.row(row));
        d_fused.row_mut(row).fill(0.0);
    }

    let (d_key_feats, d_agg) = adaptive_fuse_backward(&cache.fuse, ps, &d_new_feats);
    let d_neighbor_feats = aggregate_neighbors_backward(&cache.agg, ps, &d_agg);

    // Key features were gathered from the fused tensor.
    for (i, &row) in cache.key_rows.iter().enumerate() {
        for (dst, &v) in d_fused.row_mut(row).iter_mut().zip(d_key_feats.row(i)) {
            *dst += v;
        }
    }

    // Heatmap head shares the fused features.
    let d_from_hm = predict_heatmap_backward(&cache.hm, ps, d_heatmap);
    debug_assert_eq!(d_from_hm.rows(), cache.n_voxels);
    d_fused.add_assign(&d_from_hm);

    // Neighbor features scatter back into the per-scale tensors.
    let mut d_scales: Vec<Mat> = Vec::with_capacity(3);
    for (si, sn) in cache.neighbors.scales.iter().enumerate() {
        let d_flat = &d_neighbor_feats[si];
        let mut d_scale = Mat::zeros(sn.n_sites, d_flat.cols());
        for (flat, idx) in sn.indices.iter().enumerate() {
            if let Some(row) = idx {
                for (dst, &v) in d_scale.row_mut(*row).iter_mut().zip(d_flat.row(flat)) {
                    *dst += v;
                }
            }
        }
        d_scales.push(d_scale);
    }
    (d_fused, d_scales.try_into().expect("three scales"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::knn_brute;

    fn tensor2d(coords: Vec<[i64; 2]>, feats: Mat, stride: u32) -> SparseTensor2D {
        SparseTensor2D::new(coords, feats, stride)
    }

    fn random_tensor2d(n: usize, channels: usize, extent: i64, stride: u32, rng: &mut Rng) -> SparseTensor2D {
        let mut coords = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while coords.len() < n {
            let c = [rng.below(extent as u64) as i64, rng.below(extent as u64) as i64];
            if seen.insert(c) {
                coords.push(c);
            }
        }
        tensor2d(coords, Mat::randn(n, channels, 1.0, rng), stride)
    }

    #[test]
    fn neighbor_count_schedule() {
        assert_eq!(neighbor_count(4, 8).unwrap(), 8);
        assert_eq!(neighbor_count(5, 8).unwrap(), 4);
        assert_eq!(neighbor_count(6, 8).unwrap(), 2);
        assert_eq!(neighbor_count(6, 4).unwrap(), 1);
        assert_eq!(neighbor_count(5, 32).unwrap(), 16);
        assert!(neighbor_count(3, 8).is_err());
        assert!(neighbor_count(7, 8).is_err());
    }

    #[test]
    fn heatmap_zero_params_gives_half() {
        let mut ps = ParamStore::new(0);
        ps.insert("lmfa.heatmap.weight", Mat::zeros(3, 2));
        ps.insert("lmfa.heatmap.bias", Mat::zeros(1, 2));
        let t = tensor2d(vec![[0, 0], [1, 1]], Mat::filled(2, 3, 0.7), 8);
        let (hm, _) = predict_heatmap(&t, &ps);
        assert_eq!(hm.scores.rows(), t.n_active());
        for v in hm.scores.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_matches_hand_sigmoid() {
        let mut ps = ParamStore::new(0);
        ps.insert("lmfa.heatmap.weight", Mat::from_vec(2, 1, vec![0.5, -1.0]));
        ps.insert("lmfa.heatmap.bias", Mat::from_vec(1, 1, vec![0.25]));
        let t = tensor2d(vec![[0, 0]], Mat::from_vec(1, 2, vec![2.0, 0.5]), 8);
        let (hm, _) = predict_heatmap(&t, &ps);
        let logit: f64 = 2.0 * 0.5 + 0.5 * (-1.0) + 0.25;
        let expect = 1.0 / (1.0 + (-logit).exp());
        assert!((hm.scores.at(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn key_selection_tie_breaks_to_lower_row() {
        let t = tensor2d(
            vec![[0, 0], [1, 0], [2, 0], [3, 0]],
            Mat::zeros(4, 2),
            8,
        );
        let hm = Heatmap {
            scores: Mat::from_vec(4, 1, vec![0.9, 0.2, 0.9, 0.5]),
        };
        let keys = select_key_voxels(&hm, &t, 2);
        assert_eq!(keys.rows, vec![0, 2]);
    }

    #[test]
    fn key_selection_takes_all_when_short() {
        let t = tensor2d(vec![[0, 0], [1, 0]], Mat::zeros(2, 1), 8);
        let hm = Heatmap {
            scores: Mat::from_vec(2, 1, vec![0.1, 0.9]),
        };
        let keys = select_key_voxels(&hm, &t, 500);
        assert_eq!(keys.len(), 2);
        assert_eq!(keys.rows, vec![1, 0]);
    }

    #[test]
    fn key_selection_matches_full_sort_oracle() {
        let mut rng = Rng::new(31);
        let n = 5000;
        let t = random_tensor2d(n, 2, 200, 8, &mut rng);
        let scores = Mat::randn(n, 3, 1.0, &mut rng).map(|v| 1.0 / (1.0 + (-v).exp()));
        let hm = Heatmap { scores };
        let n_key = 137;
        let keys = select_key_voxels(&hm, &t, n_key);

        let mut oracle: Vec<(usize, f64)> = (0..n)
            .map(|r| {
                (
                    r,
                    hm.scores.row(r).iter().copied().fold(f64::MIN, f64::max),
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<usize> = oracle[..n_key].iter().map(|&(r, _)| r).collect();
        assert_eq!(keys.rows, want);
    }

    #[test]
    fn key_selection_invariant_to_monotone_score_transform() {
        let mut rng = Rng::new(32);
        let n = 800;
        let t = random_tensor2d(n, 2, 100, 8, &mut rng);
        let scores = Mat::randn(n, 3, 1.0, &mut rng).map(|v| 1.0 / (1.0 + (-v).exp()));
        let a = select_key_voxels(&Heatmap { scores: scores.clone() }, &t, 50);
        // Strictly monotone transform: argtop must not change.
        let warped = scores.map(|v| (3.0 * v).exp() + 0.1 * v);
        let b = select_key_voxels(&Heatmap { scores: warped }, &t, 50);
        assert_eq!(a.rows, b.rows);
    }

    fn keyset_at(coords: Vec<[i64; 2]>, feats: Mat) -> KeyVoxelSet {
        let n = coords.len();
        KeyVoxelSet {
            rows: (0..n).collect(),
            coords_s8: coords,
            feats,
            scores: vec![1.0; n],
        }
    }

    #[test]
    fn knn_gather_obvious_neighbors() {
        let s4 = tensor2d(
            vec![[10, 10], [10, 11], [20, 20]],
            Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]),
            8,
        );
        let s5 = tensor2d(vec![[5, 5]], Mat::from_vec(1, 1, vec![4.0]), 16);
        let s6 = tensor2d(vec![[2, 2]], Mat::from_vec(1, 1, vec![5.0]), 32);
        let keys = keyset_at(vec![[10, 10]], Mat::zeros(1, 1));
        let ns = knn_gather(&keys, [&s4, &s5, &s6], 8).unwrap();
        // Scale 4: k=8 but only 3 sites; nearest two are (10,10) and (10,11).
        assert_eq!(ns.scales[0].k, 8);
        assert_eq!(ns.scales[0].indices[0], Some(0));
        assert_eq!(ns.scales[0].indices[1], Some(1));
        assert_eq!(ns.scales[0].indices[2], Some(2));
        assert_eq!(ns.scales[0].indices[3], None);
        // Scale 5: key maps to (5,5), its own cell counts.
        assert_eq!(ns.scales[1].indices[0], Some(0));
        assert_eq!(ns.scales[1].feats.at(0, 0), 4.0);
    }

    #[test]
    fn knn_gather_empty_scale_is_all_pad() {
        let s4 = tensor2d(vec![[0, 0]], Mat::from_vec(1, 1, vec![1.0]), 8);
        let s5 = SparseTensor2D::empty(1, 16);
        let s6 = SparseTensor2D::empty(1, 32);
        let keys = keyset_at(vec![[0, 0]], Mat::zeros(1, 1));
        let ns = knn_gather(&keys, [&s4, &s5, &s6], 8).unwrap();
        assert!(ns.scales[1].indices.iter().all(|i| i.is_none()));
        assert!(ns.scales[2].indices.iter().all(|i| i.is_none()));
        assert!(ns.scales[1].feats.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn knn_gather_matches_exhaustive_oracle() {
        let mut rng = Rng::new(33);
        let s4 = random_tensor2d(2000, 2, 128, 8, &mut rng);
        let s5 = random_tensor2d(700, 2, 64, 16, &mut rng);
        let s6 = random_tensor2d(150, 2, 32, 32, &mut rng);
        let n_keys = 100;
        let key_coords: Vec<[i64; 2]> = (0..n_keys)
            .map(|_| [rng.below(128) as i64, rng.below(128) as i64])
            .collect();
        let keys = keyset_at(key_coords.clone(), Mat::zeros(n_keys, 2));
        let m = 8;
        let ns = knn_gather(&keys, [&s4, &s5, &s6], m).unwrap();

        for (si, t) in [&s4, &s5, &s6].into_iter().enumerate() {
            let k = neighbor_count(si + 4, m).unwrap();
            let factor = 1i64 << si;
            for (qi, &q) in key_coords.iter().enumerate() {
                let mapped = [q[0].div_euclid(factor), q[1].div_euclid(factor)];
                let want = knn_brute(t.coords(), mapped, k);
                for j in 0..k {
                    let got = ns.scales[si].indices[qi * k + j];
                    assert_eq!(got, want.get(j).copied(), "scale {si} key {qi} slot {j}");
                }
            }
        }
    }

    fn identity_mlp(ps: &mut ParamStore, scale: usize, c: usize) {
        let mut eye = Mat::zeros(c, c);
        for i in 0..c {
            eye.set(i, i, 1.0);
        }
        ps.insert(&format!("lmfa.mlp.s{scale}.0.weight"), eye.clone());
        ps.insert(&format!("lmfa.mlp.s{scale}.0.bias"), Mat::zeros(1, c));
        ps.insert(&format!("lmfa.mlp.s{scale}.1.weight"), eye);
        ps.insert(&format!("lmfa.mlp.s{scale}.1.bias"), Mat::zeros(1, c));
    }

    #[test]
    fn aggregate_identity_mlp_mean_of_equal_vectors() {
        let c = 3;
        let mut ps = ParamStore::new(0);
        for s in 4..=6 {
            identity_mlp(&mut ps, s, c);
        }
        // Two keys, k=2 at scale 4 requires m=2? m must give k per scale:
        // use m=4 -> k = (4,2,1).
        let f = [0.5, 1.5, 2.0];
        let mut ns_feats = Mat::zeros(2 * 4, c);
        let mut indices = Vec::new();
        for key in 0..2 {
            for j in 0..4 {
                ns_feats.row_mut(key * 4 + j).copy_from_slice(&f);
                indices.push(Some(0usize));
            }
        }
        let ns = NeighborSet {
            scales: [
                ScaleNeighbors {
                    k: 4,
                    indices,
                    feats: ns_feats,
                    n_sites: 1,
                },
                ScaleNeighbors {
                    k: 2,
                    indices: vec![Some(0), Some(0), Some(0), Some(0)],
                    feats: Mat::from_vec(4, c, vec![0.5, 1.5, 2.0, 0.5, 1.5, 2.0, 0.5, 1.5, 2.0, 0.5, 1.5, 2.0]),
                    n_sites: 1,
                },
                ScaleNeighbors {
                    k: 1,
                    indices: vec![Some(0), Some(0)],
                    feats: Mat::from_vec(2, c, vec![0.5, 1.5, 2.0, 0.5, 1.5, 2.0]),
                    n_sites: 1,
                },
            ],
            n_key: 2,
        };
        let (agg, _) = aggregate_neighbors(&ns, &ps);
        for a in &agg {
            for key in 0..2 {
                for ch in 0..c {
                    assert!((a.at(key, ch) - f[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aggregate_masks_pad_neighbors() {
        let c = 2;
        let mut ps = ParamStore::new(0);
        for s in 4..=6 {
            identity_mlp(&mut ps, s, c);
        }
        let mk = |idx: Vec<Option<usize>>, feats: Mat, k: usize| ScaleNeighbors {
            k,
            indices: idx,
            feats,
            n_sites: 1,
        };
        // One key; scale4 k=2 with one real + one pad.
        let ns = NeighborSet {
            scales: [
                mk(
                    vec![Some(0), None],
                    Mat::from_vec(2, c, vec![2.0, 4.0, 0.0, 0.0]),
                    2,
                ),
                mk(vec![Some(0)], Mat::from_vec(1, c, vec![1.0, 1.0]), 1),
                mk(vec![None], Mat::zeros(1, c), 1),
            ],
            n_key: 1,
        };
        let (agg, _) = aggregate_neighbors(&ns, &ps);
        // Mean over the single real neighbor.
        assert_eq!(agg[0].row(0), &[2.0, 4.0]);
        // All-pad scale yields zeros.
        assert_eq!(agg[2].row(0), &[0.0, 0.0]);
    }

    #[test]
    fn aggregate_matches_naive_loop_oracle() {
        let mut rng = Rng::new(34);
        let c = 4;
        let scale_c = [3usize, 4, 5];
        let mut ps = ParamStore::new(0);
        init_lmfa(&mut ps, scale_c, c, 2, &mut rng);
        let n_key = 6;
        let ks = [4usize, 2, 1];
        let mut scales = Vec::new();
        for (si, &k) in ks.iter().enumerate() {
            let n_flat = n_key * k;
            let mut indices = Vec::with_capacity(n_flat);
            let mut feats = Mat::zeros(n_flat, scale_c[si]);
            for flat in 0..n_flat {
                if rng.uniform() < 0.8 {
                    indices.push(Some(rng.below(50) as usize));
                    let row = Mat::randn(1, scale_c[si], 1.0, &mut rng);
                    feats.row_mut(flat).copy_from_slice(row.row(0));
                } else {
                    indices.push(None);
                }
            }
            scales.push(ScaleNeighbors {
                k,
                indices,
                feats,
                n_sites: 50,
            });
        }
        let ns = NeighborSet {
            scales: scales.try_into().unwrap(),
            n_key,
        };
        let (agg, _) = aggregate_neighbors(&ns, &ps);

        // Naive per-element recomputation.
        for (si, sn) in ns.scales.iter().enumerate() {
            let scale = si + 4;
            let w0 = ps.get(&format!("lmfa.mlp.s{scale}.0.weight"));
            let b0 = ps.get(&format!("lmfa.mlp.s{scale}.0.bias"));
            let w1 = ps.get(&format!("lmfa.mlp.s{scale}.1.weight"));
            let b1 = ps.get(&format!("lmfa.mlp.s{scale}.1.bias"));
            for key in 0..n_key {
                let mut acc = vec![0.0; c];
                let mut count = 0;
                for j in 0..sn.k {
                    let flat = key * sn.k + j;
                    if sn.indices[flat].is_none() {
                        continue;
                    }
                    count += 1;
                    let x = sn.feats.row(flat);
                    let mut hidden = vec![0.0; c];
                    for h in 0..c {
                        let mut v = b0.at(0, h);
                        for (i, &xv) in x.iter().enumerate() {
                            v += xv * w0.at(i, h);
                        }
                        hidden[h] = v.max(0.0);
                    }
                    for o in 0..c {
                        let mut v = b1.at(0, o);
                        for (h, &hv) in hidden.iter().enumerate() {
                            v += hv * w1.at(h, o);
                        }
                        acc[o] += v;
                    }
                }
                for o in 0..c {
                    let want = if count > 0 { acc[o] / count as f64 } else { 0.0 };
                    assert!(
                        (agg[si].at(key, o) - want).abs() < 1e-6,
                        "scale {si} key {key} ch {o}"
                    );
                }
            }
        }
    }

    #[test]
    fn adaptive_fuse_zero_fc_gives_uniform_weights() {
        let c = 3;
        let mut rng = Rng::new(35);
        let mut ps = ParamStore::new(0);
        ps.insert("lmfa.scale_fc.weight", Mat::zeros(c, 3));
        ps.insert("lmfa.scale_fc.bias", Mat::zeros(1, 3));
        init_linear(&mut ps, "lmfa.fuse", 2 * c, c, &mut rng);
        let keys = keyset_at(vec![[0, 0], [1, 1]], Mat::randn(2, c, 1.0, &mut rng));
        let agg = [
            Mat::randn(2, c, 1.0, &mut rng),
            Mat::randn(2, c, 1.0, &mut rng),
            Mat::randn(2, c, 1.0, &mut rng),
        ];
        let (_, weights, _) = adaptive_fuse(&keys, &agg, &ps);
        for r in 0..2 {
            for si in 0..3 {
                assert!((weights.w.at(r, si) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_fuse_rows_sum_to_one_and_shift_invariant() {
        let c = 4;
        let mut rng = Rng::new(36);
        let mut ps = ParamStore::new(0);
        init_lmfa(&mut ps, [c, c, c], c, 2, &mut rng);
        let keys = keyset_at(
            (0..10).map(|i| [i as i64, 0]).collect(),
            Mat::randn(10, c, 1.0, &mut rng),
        );
        let agg = [
            Mat::randn(10, c, 1.0, &mut rng),
            Mat::randn(10, c, 1.0, &mut rng),
            Mat::randn(10, c, 1.0, &mut rng),
        ];
        let (_, weights, _) = adaptive_fuse(&keys, &agg, &ps);
        for r in 0..10 {
            let s: f64 = weights.w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(weights.w.row(r).iter().all(|&v| v >= 0.0));
        }
        // Adding a constant to all three logits must not change the weights:
        // shift the fc bias uniformly.
        let before = weights.w.clone();
        for i in 0..3 {
            let v = ps.get("lmfa.scale_fc.bias").at(0, i);
            ps.get_mut("lmfa.scale_fc.bias").set(0, i, v + 5.0);
        }
        let (_, after, _) = adaptive_fuse(&keys, &agg, &ps);
        assert!(before.max_abs_diff(&after.w) < 1e-9);
    }

    #[test]
    fn adaptive_fuse_saturated_logits_select_single_scale() {
        let c = 2;
        let mut rng = Rng::new(37);
        let mut ps = ParamStore::new(0);
        // FC forced to produce a huge logit on scale 1.
        ps.insert("lmfa.scale_fc.weight", Mat::zeros(c, 3));
        let mut bias = Mat::zeros(1, 3);
        bias.set(0, 1, 60.0);
        ps.insert("lmfa.scale_fc.bias", bias);
        // Fuse = pick the blended half (identity on cols C..2C).
        let mut w = Mat::zeros(2 * c, c);
        for i in 0..c {
            w.set(c + i, i, 1.0);
        }
        ps.insert("lmfa.fuse.weight", w);
        ps.insert("lmfa.fuse.bias", Mat::zeros(1, c));

        let keys = keyset_at(vec![[0, 0]], Mat::randn(1, c, 1.0, &mut rng));
        let agg = [
            Mat::randn(1, c, 1.0, &mut rng),
            Mat::randn(1, c, 1.0, &mut rng),
            Mat::randn(1, c, 1.0, &mut rng),
        ];
        let (out, weights, _) = adaptive_fuse(&keys, &agg, &ps);
        assert!((weights.w.at(0, 1) - 1.0).abs() < 1e-5);
        for ch in 0..c {
            assert!((out.at(0, ch) - agg[1].at(0, ch)).abs() < 1e-5);
        }
    }

    #[test]
    fn adaptive_fuse_matches_naive_recomputation() {
        let c = 3;
        let mut rng = Rng::new(38);
        let mut ps = ParamStore::new(0);
        init_lmfa(&mut ps, [c, c, c], c, 2, &mut rng);
        let n = 5;
        let keys = keyset_at(
            (0..n).map(|i| [i as i64, 1]).collect(),
            Mat::randn(n, c, 1.0, &mut rng),
        );
        let agg = [
            Mat::randn(n, c, 1.0, &mut rng),
            Mat::randn(n, c, 1.0, &mut rng),
            Mat::randn(n, c, 1.0, &mut rng),
        ];
        let (out, weights, _) = adaptive_fuse(&keys, &agg, &ps);

        let wf = ps.get("lmfa.fuse.weight");
        let bf = ps.get("lmfa.fuse.bias");
        for r in 0..n {
            let mut blended = vec![0.0; c];
            for si in 0..3 {
                for ch in 0..c {
                    blended[ch] += weights.w.at(r, si) * agg[si].at(r, ch);
                }
            }
            for o in 0..c {
                let mut v = bf.at(0, o);
                for i in 0..c {
                    v += keys.feats.at(r, i) * wf.at(i, o);
                    v += blended[i] * wf.at(c + i, o);
                }
                assert!((out.at(r, o) - v).abs() < 1e-6);
            }
        }
    }

    fn build_scene(rng: &mut Rng, n: usize, c: usize) -> (SparseTensor2D, SparseTensor2D, SparseTensor2D, SparseTensor2D) {
        let fused = random_tensor2d(n, c, 40, 8, rng);
        let s4 = fused.clone();
        let s5 = random_tensor2d(n / 3 + 1, c, 20, 16, rng);
        let s6 = random_tensor2d(n / 8 + 1, c, 10, 32, rng);
        (fused, s4, s5, s6)
    }

    #[test]
    fn lmfa_forward_touches_exactly_the_key_rows() {
        let mut rng = Rng::new(39);
        let c = 4;
        let mut ps = ParamStore::new(0);
        init_lmfa(&mut ps, [c, c, c], c, 2, &mut rng);
        let (fused, s4, s5, s6) = build_scene(&mut rng, 60, c);

        for n_key in [1usize, 7, 60] {
            let cfg = LmfaConfig { n_key, m: 4, jobs: 1 };
            let (out, _) = lmfa_forward(&fused, [&s4, &s5, &s6], &ps, cfg).unwrap();
            let mut changed = 0;
            for r in 0..fused.n_active() {
                if out.enhanced.feats.row(r) != fused.feats.row(r) {
                    changed += 1;
                    assert!(out.keys.rows.contains(&r), "non-key row {r} changed");
                }
            }
            assert!(changed <= n_key.min(fused.n_active()));
            if n_key == 1 {
                assert_eq!(changed, 1);
            }
            // Non-key rows bit-identical.
            for r in 0..fused.n_active() {
                if !out.keys.rows.contains(&r) {
                    assert_eq!(out.enhanced.feats.row(r), fused.feats.row(r));
                }
            }
        }
    }

    #[test]
    fn lmfa_gradients_match_finite_differences() {
        let mut rng = Rng::new(40);
        let c = 3;
        let mut ps = ParamStore::new(0);
        init_lmfa(&mut ps, [c, c, c], c, 2, &mut rng);
        let (fused, s4, s5, s6) = build_scene(&mut rng, 25, c);
        let cfg = LmfaConfig { n_key: 6, m: 4, jobs: 1 };

        let proj_hm = Mat::randn(fused.n_active(), 2, 1.0, &mut rng);
        let proj_out = Mat::randn(fused.n_active(), c, 1.0, &mut rng);
        let loss = |ps: &ParamStore| -> f64 {
            let (o, _) = lmfa_forward(&fused, [&s4, &s5, &s6], ps, cfg).unwrap();
            let a: f64 = o
                .enhanced
                .feats
                .data()
                .iter()
                .zip(proj_out.data())
                .map(|(x, p)| x * p)
                .sum();
            let b: f64 = o
                .heatmap
                .scores
                .data()
                .iter()
                .zip(proj_hm.data())
                .map(|(x, p)| x * p)
                .sum();
            a + b
        };

        ps.zero_grads();
        let (_, cache) = lmfa_forward(&fused, [&s4, &s5, &s6], &ps, cfg).unwrap();
        let _ = lmfa_backward(&cache, &mut ps, &proj_out, &proj_hm);

        let names: Vec<String> = ps.names().map(|s| s.to_string()).collect();
        let h = 1e-5;
        for name in names {
            let n = ps.get(&name).len();
            for flat in (0..n).step_by(1.max(n / 5)) {
                let orig = ps.scalar(&name, flat);
                ps.set_scalar(&name, flat, orig + h);
                let up = loss(&ps);
                ps.set_scalar(&name, flat, orig - h);
                let down = loss(&ps);
                ps.set_scalar(&name, flat, orig);
                let numeric = (up - down) / (2.0 * h);
                let analytic = ps.grad_scalar(&name, flat);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "{name}[{flat}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}
