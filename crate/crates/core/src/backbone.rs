//! Sparse 3D convolutional backbone: submanifold and strided convolutions
//! built from per-kernel-offset rulebooks (gather, matmul, scatter-add), six
//! stages at strides {1,2,4,8,16,32} and the multi-scale fusion tensor.
//!
//! Convolution convention: `out[x] = Σ_d W_d · in[x + d] + b` over the 3³
//! offsets `d ∈ {-1,0,1}³`; strided layers evaluate at `in = 2·o + d` and
//! produce exactly the sites `floor(x/2)` of active inputs. Weights live in
//! the store as one `[27·Cin × Cout]` matrix per layer; offset `d` owns the
//! row block starting at `idx(d)·Cin`.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{init_linear, relu, relu_backward};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::SparseTensor3D;

pub const KERNEL_OFFSETS: usize = 27;

/// Offset index for (dx, dy, dz) ∈ {-1,0,1}³; (0,0,0) is index 13.
#[inline]
pub fn offset_index(dx: i64, dy: i64, dz: i64) -> usize {
    (((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1)) as usize
}

fn offset_of(idx: usize) -> [i64; 3] {
    let i = idx as i64;
    [i / 9 - 1, (i / 3) % 3 - 1, i % 3 - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Output active set equals the input active set (no dilation).
    Submanifold,
    /// Stride-2 downsampling; output sites are `floor(coord / 2)`.
    Strided,
}

#[derive(Debug, Clone)]
pub struct ConvLayerSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// ParamStore prefix, e.g. `backbone.stage2.layer0`.
    pub param_prefix: String,
    /// Apply ReLU after bias (layers that are non-final within a stage).
    pub relu: bool,
}

impl ConvLayerSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.param_prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.param_prefix)
    }
}

pub fn init_conv(ps: &mut ParamStore, spec: &ConvLayerSpec, rng: &mut Rng) {
    init_linear(
        ps,
        &spec.param_prefix,
        KERNEL_OFFSETS * spec.in_channels,
        spec.out_channels,
        rng,
    );
}

/// Per-offset (input_row, output_row) pair lists.
type Rulebook = Vec<Vec<(usize, usize)>>;

#[derive(Debug, Clone)]
pub struct ConvCache {
    rulebook: Rulebook,
    input_feats: Mat,
    n_out: usize,
    /// Pre-activation output, kept when the layer has a ReLU.
    pre_act: Option<Mat>,
}

fn build_rulebook_submanifold(t: &SparseTensor3D) -> Rulebook {
    let mut rb: Rulebook = vec![Vec::new(); KERNEL_OFFSETS];
    for (out_row, &[x, y, z]) in t.coords().iter().enumerate() {
        for (idx, pairs) in rb.iter_mut().enumerate() {
            let [dx, dy, dz] = offset_of(idx);
            if let Some(in_row) = t.row_of([x + dx, y + dy, z + dz]) {
                pairs.push((in_row, out_row));
            }
        }
    }
    rb
}

fn strided_output_coords(t: &SparseTensor3D) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &[x, y, z] in t.coords() {
        let o = [x.div_euclid(2), y.div_euclid(2), z.div_euclid(2)];
        if seen.insert(o) {
            out.push(o);
        }
    }
    out
}

fn build_rulebook_strided(t: &SparseTensor3D, out_coords: &[[i64; 3]]) -> Rulebook {
    let mut rb: Rulebook = vec![Vec::new(); KERNEL_OFFSETS];
    for (out_row, &[ox, oy, oz]) in out_coords.iter().enumerate() {
        for (idx, pairs) in rb.iter_mut().enumerate() {
            let [dx, dy, dz] = offset_of(idx);
            if let Some(in_row) = t.row_of([2 * ox + dx, 2 * oy + dy, 2 * oz + dz]) {
                pairs.push((in_row, out_row));
            }
        }
    }
    rb
}

fn block_rows(m: &Mat, start: usize, n: usize) -> Mat {
    let mut out = Mat::zeros(n, m.cols());
    for r in 0..n {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

fn conv_apply(
    rulebook: &Rulebook,
    input: &Mat,
    n_out: usize,
    spec: &ConvLayerSpec,
    ps: &ParamStore,
) -> Mat {
    let w = ps.get(&spec.weight_name());
    let b = ps.get(&spec.bias_name());
    let cin = spec.in_channels;
    let mut out = Mat::zeros(n_out, spec.out_channels);
    for r in 0..n_out {
        out.row_mut(r).copy_from_slice(b.row(0));
    }
    for (idx, pairs) in rulebook.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let mut gathered = Mat::zeros(pairs.len(), cin);
        for (g, &(in_row, _)) in pairs.iter().enumerate() {
            gathered.row_mut(g).copy_from_slice(input.row(in_row));
        }
        let w_block = block_rows(w, idx * cin, cin);
        let partial = gathered.matmul(&w_block);
        for (g, &(_, out_row)) in pairs.iter().enumerate() {
            for (dst, &v) in out.row_mut(out_row).iter_mut().zip(partial.row(g)) {
                *dst += v;
            }
        }
    }
    out
}

fn conv_forward(
    t: &SparseTensor3D,
    spec: &ConvLayerSpec,
    ps: &ParamStore,
) -> Result<(SparseTensor3D, ConvCache)> {
    if t.channels() != spec.in_channels {
        return Err(Error::Shape(format!(
            "{}: input has {} channels, layer expects {}",
            spec.param_prefix,
            t.channels(),
            spec.in_channels
        )));
    }
    let (out_coords, out_stride, rulebook) = match spec.kind {
        ConvKind::Submanifold => (
            t.coords().to_vec(),
            t.stride(),
            build_rulebook_submanifold(t),
        ),
        ConvKind::Strided => {
            let coords = strided_output_coords(t);
            let rb = build_rulebook_strided(t, &coords);
            (coords, t.stride() * 2, rb)
        }
    };
    let n_out = out_coords.len();
    let pre = conv_apply(&rulebook, &t.feats, n_out, spec, ps);
    let (feats, pre_act) = if spec.relu {
        (relu(&pre), Some(pre))
    } else {
        (pre, None)
    };
    let cache = ConvCache {
        rulebook,
        input_feats: t.feats.clone(),
        n_out,
        pre_act,
    };
    Ok((SparseTensor3D::new(out_coords, feats, out_stride), cache))
}

/// Submanifold convolution: output active set identical to the input's.
pub fn submanifold_conv3d(
    t: &SparseTensor3D,
    spec: &ConvLayerSpec,
    ps: &ParamStore,
) -> Result<(SparseTensor3D, ConvCache)> {
    assert_eq!(spec.kind, ConvKind::Submanifold);
    conv_forward(t, spec, ps)
}

/// Stride-2 sparse convolution; doubles the tensor stride.
pub fn strided_sparse_conv3d(
    t: &SparseTensor3D,
    spec: &ConvLayerSpec,
    ps: &ParamStore,
) -> Result<(SparseTensor3D, ConvCache)> {
    assert_eq!(spec.kind, ConvKind::Strided);
    conv_forward(t, spec, ps)
}

/// Accumulates weight/bias gradients and returns the input-feature gradient.
pub fn conv3d_backward(
    cache: &ConvCache,
    spec: &ConvLayerSpec,
    ps: &mut ParamStore,
    d_out: &Mat,
) -> Mat {
    let d_pre = match &cache.pre_act {
        Some(pre) => relu_backward(pre, d_out),
        None => d_out.clone(),
    };
    debug_assert_eq!(d_pre.rows(), cache.n_out);

    let cin = spec.in_channels;
    let w_name = spec.weight_name();
    let mut d_in = Mat::zeros(cache.input_feats.rows(), cin);
    let mut d_w = Mat::zeros(KERNEL_OFFSETS * cin, spec.out_channels);

    for (idx, pairs) in cache.rulebook.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let mut gathered_in = Mat::zeros(pairs.len(), cin);
        let mut gathered_d = Mat::zeros(pairs.len(), spec.out_channels);
        for (g, &(in_row, out_row)) in pairs.iter().enumerate() {
            gathered_in
                .row_mut(g)
                .copy_from_slice(cache.input_feats.row(in_row));
            gathered_d.row_mut(g).copy_from_slice(d_pre.row(out_row));
        }
        let w_block = block_rows(ps.get(&w_name), idx * cin, cin);
        let d_gathered_in = gathered_d.matmul_nt(&w_block);
        for (g, &(in_row, _)) in pairs.iter().enumerate() {
            for (dst, &v) in d_in.row_mut(in_row).iter_mut().zip(d_gathered_in.row(g)) {
                *dst += v;
            }
        }
        let d_w_block = gathered_in.matmul_tn(&gathered_d);
        for r in 0..cin {
            for c in 0..spec.out_channels {
                d_w.add_at(idx * cin + r, c, d_w_block.at(r, c));
            }
        }
    }
    ps.accumulate_grad(&w_name, &d_w);
    ps.accumulate_grad(&spec.bias_name(), &d_pre.col_sum());
    d_in
}

/// Backbone layout: per-stage channel widths. Stage 1 holds a single
/// submanifold layer; stages 2..6 a strided transition plus a submanifold
/// layer. ReLU sits after every non-final layer within a stage.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: [usize; 6],
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            in_channels: 4,
            channels: [8, 16, 16, 32, 32, 32],
        }
    }

    /// Layer specs per stage, in execution order.
    pub fn stage_layers(&self) -> Vec<Vec<ConvLayerSpec>> {
        let mut stages = Vec::with_capacity(6);
        for (i, &width) in self.channels.iter().enumerate() {
            let stage_no = i + 1;
            let mut layers = Vec::new();
            if i == 0 {
                layers.push(ConvLayerSpec {
                    kind: ConvKind::Submanifold,
                    in_channels: self.in_channels,
                    out_channels: width,
                    param_prefix: format!("backbone.stage{stage_no}.layer0"),
                    relu: false,
                });
            } else {
                layers.push(ConvLayerSpec {
                    kind: ConvKind::Strided,
                    in_channels: self.channels[i - 1],
                    out_channels: width,
                    param_prefix: format!("backbone.stage{stage_no}.layer0"),
                    relu: true,
                });
                layers.push(ConvLayerSpec {
                    kind: ConvKind::Submanifold,
                    in_channels: width,
                    out_channels: width,
                    param_prefix: format!("backbone.stage{stage_no}.layer1"),
                    relu: false,
                });
            }
            stages.push(layers);
        }
        stages
    }
}

pub fn init_backbone(ps: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) {
    for stage in cfg.stage_layers() {
        for spec in stage {
            init_conv(ps, &spec, rng);
        }
    }
}

/// The six stage outputs, strides 1..32.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub stages: Vec<SparseTensor3D>,
}

impl StageOutputs {
    /// 1-based stage accessor.
    pub fn stage(&self, i: usize) -> &SparseTensor3D {
        &self.stages[i - 1]
    }
}

#[derive(Debug)]
pub struct BackboneCache {
    /// (spec, cache) per layer, in execution order.
    layers: Vec<(ConvLayerSpec, ConvCache)>,
    /// Layer count per stage, to locate stage boundaries while reversing.
    per_stage: Vec<usize>,
}

pub fn run_backbone(
    t0: &SparseTensor3D,
    cfg: &BackboneConfig,
    ps: &ParamStore,
) -> Result<(StageOutputs, BackboneCache)> {
    if t0.stride() != 1 {
        return Err(Error::Stride {
            expected: 1,
            got: t0.stride(),
        });
    }
    let mut stages = Vec::with_capacity(6);
    let mut layers = Vec::new();
    let mut per_stage = Vec::new();
    let mut current = t0.clone();
    for stage_specs in cfg.stage_layers() {
        per_stage.push(stage_specs.len());
        for spec in stage_specs {
            let (next, cache) = conv_forward(&current, &spec, ps)?;
            layers.push((spec, cache));
            current = next;
        }
        stages.push(current.clone());
    }
    Ok((StageOutputs { stages }, BackboneCache { layers, per_stage }))
}

/// Gradients flowing into the tapped stage outputs (s4, s5, s6); rows align
/// with the corresponding stage tensors.
#[derive(Debug, Clone)]
pub struct StageTapGrads {
    pub d_s4: Mat,
    pub d_s5: Mat,
    pub d_s6: Mat,
}

/// Reverse the whole backbone. Tap gradients enter at their stage boundary
/// and accumulate with the gradient arriving from deeper stages. Returns the
/// gradient w.r.t. the stride-1 input features.
pub fn backbone_backward(cache: &BackboneCache, ps: &mut ParamStore, taps: &StageTapGrads) -> Mat {
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for &n in &cache.per_stage {
        bounds.push((start, start + n));
        start += n;
    }

    let mut d_current: Option<Mat> = None;
    for stage in (0..6).rev() {
        let tap = match stage {
            3 => Some(&taps.d_s4),
            4 => Some(&taps.d_s5),
            5 => Some(&taps.d_s6),
            _ => None,
        };
        if let Some(t) = tap {
            match d_current.as_mut() {
                Some(d) => d.add_assign(t),
                None => d_current = Some(t.clone()),
            }
        }
        let (lo, hi) = bounds[stage];
        let mut d = d_current.take().expect("gradient present at stage exit");
        for li in (lo..hi).rev() {
            let (spec, conv_cache) = &cache.layers[li];
            d = conv3d_backward(conv_cache, spec, ps, &d);
        }
        d_current = Some(d);
    }
    d_current.expect("input gradient")
}

#[derive(Debug)]
pub struct FuseCache {
    /// Per output row: source rows in (s4, s5, s6), if present.
    sources: Vec<[Option<usize>; 3]>,
    widths: [usize; 3],
    n_s4: usize,
    n_s5: usize,
    n_s6: usize,
}

/// Map s5/s6 sites into stride-8 coordinate space (coordinates ×2 / ×4, one
/// target cell each) and concatenate features over the union of active
/// sites, zero-filled where a source scale has no site there.
pub fn fuse_multiscale(
    s4: &SparseTensor3D,
    s5: &SparseTensor3D,
    s6: &SparseTensor3D,
) -> Result<(SparseTensor3D, FuseCache)> {
    for (t, want) in [(s4, 8), (s5, 16), (s6, 32)] {
        if t.stride() != want {
            return Err(Error::Stride {
                expected: want,
                got: t.stride(),
            });
        }
    }
    let widths = [s4.channels(), s5.channels(), s6.channels()];
    let total: usize = widths.iter().sum();

    let mut coords: Vec<[i64; 3]> = Vec::new();
    let mut index: std::collections::HashMap<[i64; 3], usize> = std::collections::HashMap::new();
    let mut sources: Vec<[Option<usize>; 3]> = Vec::new();

    {
        let mut place = |coord: [i64; 3], scale: usize, row: usize| {
            let out_row = *index.entry(coord).or_insert_with(|| {
                coords.push(coord);
                sources.push([None; 3]);
                coords.len() - 1
            });
            sources[out_row][scale] = Some(row);
        };
        for (row, &c) in s4.coords().iter().enumerate() {
            place(c, 0, row);
        }
        for (row, &[x, y, z]) in s5.coords().iter().enumerate() {
            place([2 * x, 2 * y, 2 * z], 1, row);
        }
        for (row, &[x, y, z]) in s6.coords().iter().enumerate() {
            place([4 * x, 4 * y, 4 * z], 2, row);
        }
    }

    let mut feats = Mat::zeros(coords.len(), total);
    for (out_row, src) in sources.iter().enumerate() {
        let mut offset = 0;
        for (scale, t) in [s4, s5, s6].into_iter().enumerate() {
            if let Some(r) = src[scale] {
                feats.row_mut(out_row)[offset..offset + widths[scale]]
                    .copy_from_slice(t.feats.row(r));
            }
            offset += widths[scale];
        }
    }
    let cache = FuseCache {
        sources,
        widths,
        n_s4: s4.n_active(),
        n_s5: s5.n_active(),
        n_s6: s6.n_active(),
    };
    Ok((SparseTensor3D::new(coords, feats, 8), cache))
}

/// Split the fused-tensor gradient back into per-stage feature gradients.
pub fn fuse_multiscale_backward(cache: &FuseCache, d_fused: &Mat) -> (Mat, Mat, Mat) {
    let [c4, c5, c6] = cache.widths;
    let mut d4 = Mat::zeros(cache.n_s4, c4);
    let mut d5 = Mat::zeros(cache.n_s5, c5);
    let mut d6 = Mat::zeros(cache.n_s6, c6);
    for (out_row, src) in cache.sources.iter().enumerate() {
        let row = d_fused.row(out_row);
        if let Some(r) = src[0] {
            for (dst, &v) in d4.row_mut(r).iter_mut().zip(&row[..c4]) {
                *dst += v;
            }
        }
        if let Some(r) = src[1] {
            for (dst, &v) in d5.row_mut(r).iter_mut().zip(&row[c4..c4 + c5]) {
                *dst += v;
            }
        }
        if let Some(r) = src[2] {
            for (dst, &v) in d6.row_mut(r).iter_mut().zip(&row[c4 + c5..]) {
                *dst += v;
            }
        }
    }
    (d4, d5, d6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn spec(kind: ConvKind, cin: usize, cout: usize, prefix: &str, relu: bool) -> ConvLayerSpec {
        ConvLayerSpec {
            kind,
            in_channels: cin,
            out_channels: cout,
            param_prefix: prefix.to_string(),
            relu,
        }
    }

    fn random_tensor(n: usize, channels: usize, extent: i64, rng: &mut Rng) -> SparseTensor3D {
        let mut coords = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while coords.len() < n {
            let c = [
                rng.below(extent as u64) as i64,
                rng.below(extent as u64) as i64,
                rng.below(extent as u64) as i64,
            ];
            if seen.insert(c) {
                coords.push(c);
            }
        }
        SparseTensor3D::new(coords, Mat::randn(n, channels, 1.0, rng), 1)
    }

    /// Densify, convolve densely, compare at the sparse op's active sites.
    fn dense_oracle(
        t: &SparseTensor3D,
        spec: &ConvLayerSpec,
        ps: &ParamStore,
        extent: i64,
        out: &SparseTensor3D,
    ) {
        let w = ps.get(&spec.weight_name());
        let b = ps.get(&spec.bias_name());
        let cin = spec.in_channels;
        let at = |coord: [i64; 3]| -> Option<&[f64]> {
            t.row_of(coord).map(|r| t.feats.row(r))
        };
        let _ = extent;
        for (out_row, &[ox, oy, oz]) in out.coords().iter().enumerate() {
            for c_out in 0..spec.out_channels {
                let mut acc = b.at(0, c_out);
                for idx in 0..KERNEL_OFFSETS {
                    let [dx, dy, dz] = offset_of(idx);
                    let in_coord = match spec.kind {
                        ConvKind::Submanifold => [ox + dx, oy + dy, oz + dz],
                        ConvKind::Strided => [2 * ox + dx, 2 * oy + dy, 2 * oz + dz],
                    };
                    if let Some(f) = at(in_coord) {
                        for (ci, &v) in f.iter().enumerate() {
                            acc += v * w.at(idx * cin + ci, c_out);
                        }
                    }
                }
                if spec.relu {
                    acc = acc.max(0.0);
                }
                let got = out.feats.at(out_row, c_out);
                let denom = acc.abs().max(got.abs()).max(1.0);
                assert!(
                    (got - acc).abs() / denom < 1e-5,
                    "site {out_row} ch {c_out}: sparse {got} dense {acc}"
                );
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let t = random_tensor(50, 3, 8, &mut rng);
        let s = spec(ConvKind::Submanifold, 3, 3, "id", false);
        let mut ps = ParamStore::new(0);
        let mut w = Mat::zeros(KERNEL_OFFSETS * 3, 3);
        let center = offset_index(0, 0, 0);
        for c in 0..3 {
            w.set(center * 3 + c, c, 1.0);
        }
        ps.insert("id.weight", w);
        ps.insert("id.bias", Mat::zeros(1, 3));
        let (out, _) = submanifold_conv3d(&t, &s, &ps).unwrap();
        assert_eq!(out.coords(), t.coords());
        assert!(out.feats.max_abs_diff(&t.feats) < 1e-12);
    }

    #[test]
    fn isolated_site_sees_only_center_weight() {
        let mut rng = Rng::new(2);
        let t = SparseTensor3D::new(vec![[5, 5, 5]], Mat::randn(1, 2, 1.0, &mut rng), 1);
        let s = spec(ConvKind::Submanifold, 2, 4, "iso", false);
        let mut ps = ParamStore::new(0);
        init_conv(&mut ps, &s, &mut rng);
        let (out, _) = submanifold_conv3d(&t, &s, &ps).unwrap();

        let w = ps.get("iso.weight");
        let b = ps.get("iso.bias");
        let center = offset_index(0, 0, 0);
        for c_out in 0..4 {
            let mut acc = b.at(0, c_out);
            for ci in 0..2 {
                acc += t.feats.at(0, ci) * w.at(center * 2 + ci, c_out);
            }
            assert!((out.feats.at(0, c_out) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_collapses_neighbors_to_origin() {
        let t = SparseTensor3D::new(
            vec![[0, 0, 0], [1, 1, 1]],
            Mat::from_vec(2, 1, vec![1.0, 2.0]),
            1,
        );
        let s = spec(ConvKind::Strided, 1, 1, "st", false);
        let mut ps = ParamStore::new(0);
        let mut rng = Rng::new(3);
        init_conv(&mut ps, &s, &mut rng);
        let (out, _) = strided_sparse_conv3d(&t, &s, &ps).unwrap();
        assert_eq!(out.coords(), &[[0, 0, 0]]);
        assert_eq!(out.stride(), 2);
    }

    #[test]
    fn strided_on_empty_is_empty() {
        let t = SparseTensor3D::empty(3, 1);
        let s = spec(ConvKind::Strided, 3, 2, "e", false);
        let mut ps = ParamStore::new(0);
        let mut rng = Rng::new(4);
        init_conv(&mut ps, &s, &mut rng);
        let (out, _) = strided_sparse_conv3d(&t, &s, &ps).unwrap();
        assert_eq!(out.n_active(), 0);
        assert_eq!(out.stride(), 2);
    }

    #[test]
    fn sparse_matches_dense_oracle_randomized() {
        let mut rng = Rng::new(42);
        for trial in 0..20 {
            let n = 20 + rng.below(280) as usize;
            let extent = 4 + rng.below(9) as i64; // up to 12³ grid
            let t = random_tensor(n.min((extent * extent * extent) as usize / 2 + 1), 3, extent, &mut rng);
            for kind in [ConvKind::Submanifold, ConvKind::Strided] {
                let s = spec(kind, 3, 5, &format!("t{trial}k{:?}", kind), trial % 2 == 0);
                let mut ps = ParamStore::new(0);
                init_conv(&mut ps, &s, &mut rng);
                let (out, _) = conv_forward(&t, &s, &ps).unwrap();
                dense_oracle(&t, &s, &ps, extent, &out);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        let t = random_tensor(40, 2, 6, &mut rng);
        for kind in [ConvKind::Submanifold, ConvKind::Strided] {
            let s = spec(kind, 2, 3, "g", false);
            let mut ps = ParamStore::new(0);
            init_conv(&mut ps, &s, &mut rng);

            let (out, cache) = conv_forward(&t, &s, &ps).unwrap();
            let proj = Mat::randn(out.feats.rows(), out.feats.cols(), 1.0, &mut rng);
            ps.zero_grads();
            let _ = conv3d_backward(&cache, &s, &mut ps, &proj);

            let loss = |ps: &ParamStore| -> f64 {
                let (o, _) = conv_forward(&t, &s, ps).unwrap();
                o.feats
                    .data()
                    .iter()
                    .zip(proj.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let h = 1e-5;
            for name in ["g.weight", "g.bias"] {
                let n = ps.get(name).len();
                for flat in (0..n).step_by(1.max(n / 11)) {
                    let orig = ps.scalar(name, flat);
                    ps.set_scalar(name, flat, orig + h);
                    let up = loss(&ps);
                    ps.set_scalar(name, flat, orig - h);
                    let down = loss(&ps);
                    ps.set_scalar(name, flat, orig);
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = ps.grad_scalar(name, flat);
                    let err = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(err < 1e-7, "{name}[{flat}] {analytic} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn backbone_survives_single_site_and_reports_strides() {
        let mut rng = Rng::new(8);
        let cfg = BackboneConfig::desk();
        let mut ps = ParamStore::new(0);
        init_backbone(&mut ps, &cfg, &mut rng);
        let t = SparseTensor3D::new(vec![[33, 21, 5]], Mat::randn(1, 4, 1.0, &mut rng), 1);
        let (outs, _) = run_backbone(&t, &cfg, &ps).unwrap();
        for (i, s) in outs.stages.iter().enumerate() {
            assert!(s.n_active() >= 1, "stage {} lost the lone site", i + 1);
            assert_eq!(s.stride(), 1 << i);
            assert_eq!(s.channels(), cfg.channels[i]);
        }
    }

    #[test]
    fn backbone_site_counts_non_increasing_in_downsampled_stages() {
        let mut rng = Rng::new(9);
        let cfg = BackboneConfig::desk();
        let mut ps = ParamStore::new(0);
        init_backbone(&mut ps, &cfg, &mut rng);
        let t = random_tensor(2000, 4, 64, &mut rng);
        let (outs, _) = run_backbone(&t, &cfg, &ps).unwrap();
        for i in 1..6 {
            assert!(outs.stages[i].n_active() <= outs.stages[i - 1].n_active());
        }
    }

    #[test]
    fn backbone_is_deterministic() {
        let mut rng = Rng::new(10);
        let cfg = BackboneConfig::desk();
        let mut ps = ParamStore::new(0);
        init_backbone(&mut ps, &cfg, &mut rng);
        let t = random_tensor(500, 4, 32, &mut rng);
        let (a, _) = run_backbone(&t, &cfg, &ps).unwrap();
        let (b, _) = run_backbone(&t, &cfg, &ps).unwrap();
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            assert_eq!(sa.coords(), sb.coords());
            assert_eq!(sa.feats, sb.feats);
        }
    }

    #[test]
    fn fuse_zero_fills_missing_scales() {
        let s4 = SparseTensor3D::new(vec![[3, 3, 0]], Mat::from_vec(1, 2, vec![1.0, 2.0]), 8);
        let s5 = SparseTensor3D::new(vec![[5, 5, 0]], Mat::from_vec(1, 1, vec![7.0]), 16);
        let s6 = SparseTensor3D::new(vec![[1, 1, 0]], Mat::from_vec(1, 1, vec![9.0]), 32);
        let (fused, _) = fuse_multiscale(&s4, &s5, &s6).unwrap();
        assert_eq!(fused.channels(), 4);
        assert_eq!(fused.stride(), 8);
        // s4-only site.
        let r = fused.row_of([3, 3, 0]).unwrap();
        assert_eq!(fused.feats.row(r), &[1.0, 2.0, 0.0, 0.0]);
        // s5 site lands at ×2.
        let r = fused.row_of([10, 10, 0]).unwrap();
        assert_eq!(fused.feats.row(r), &[0.0, 0.0, 7.0, 0.0]);
        // s6 site lands at ×4.
        let r = fused.row_of([4, 4, 0]).unwrap();
        assert_eq!(fused.feats.row(r), &[0.0, 0.0, 0.0, 9.0]);
    }

    #[test]
    fn fuse_concatenates_all_three_when_present() {
        let s4 = SparseTensor3D::new(vec![[4, 4, 4]], Mat::from_vec(1, 1, vec![1.0]), 8);
        let s5 = SparseTensor3D::new(vec![[2, 2, 2]], Mat::from_vec(1, 1, vec![2.0]), 16);
        let s6 = SparseTensor3D::new(vec![[1, 1, 1]], Mat::from_vec(1, 1, vec![3.0]), 32);
        let (fused, _) = fuse_multiscale(&s4, &s5, &s6).unwrap();
        assert_eq!(fused.n_active(), 1);
        assert_eq!(fused.feats.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fuse_active_set_is_union_oracle() {
        let mut rng = Rng::new(11);
        let cfg = BackboneConfig::desk();
        let mut ps = ParamStore::new(0);
        init_backbone(&mut ps, &cfg, &mut rng);
        let t = random_tensor(1500, 4, 48, &mut rng);
        let (outs, _) = run_backbone(&t, &cfg, &ps).unwrap();
        let (fused, _) =
            fuse_multiscale(outs.stage(4), outs.stage(5), outs.stage(6)).unwrap();

        let mut expect = std::collections::HashSet::new();
        for &c in outs.stage(4).coords() {
            expect.insert(c);
        }
        for &[x, y, z] in outs.stage(5).coords() {
            expect.insert([2 * x, 2 * y, 2 * z]);
        }
        for &[x, y, z] in outs.stage(6).coords() {
            expect.insert([4 * x, 4 * y, 4 * z]);
        }
        let got: std::collections::HashSet<_> = fused.coords().iter().copied().collect();
        assert_eq!(got, expect);
        assert_eq!(
            fused.channels(),
            cfg.channels[3] + cfg.channels[4] + cfg.channels[5]
        );
        let max_n = outs.stage(4).n_active().max(outs.stage(5).n_active()).max(outs.stage(6).n_active());
        assert!(fused.n_active() >= max_n);
    }

    #[test]
    fn fuse_backward_routes_blocks_to_sources() {
        let s4 = SparseTensor3D::new(vec![[4, 4, 4]], Mat::from_vec(1, 2, vec![1.0, 1.5]), 8);
        let s5 = SparseTensor3D::new(vec![[2, 2, 2], [0, 0, 0]], Mat::from_vec(2, 1, vec![2.0, 4.0]), 16);
        let s6 = SparseTensor3D::new(vec![[1, 1, 1]], Mat::from_vec(1, 1, vec![3.0]), 32);
        let (fused, cache) = fuse_multiscale(&s4, &s5, &s6).unwrap();
        let mut d = Mat::zeros(fused.n_active(), 4);
        for r in 0..d.rows() {
            for c in 0..4 {
                d.set(r, c, (r * 4 + c) as f64 + 1.0);
            }
        }
        let (d4, d5, d6) = fuse_multiscale_backward(&cache, &d);
        let shared = fused.row_of([4, 4, 4]).unwrap();
        assert_eq!(d4.row(0), &d.row(shared)[0..2]);
        assert_eq!(d5.at(0, 0), d.at(shared, 2));
        assert_eq!(d6.at(0, 0), d.at(shared, 3));
        let lone5 = fused.row_of([0, 0, 0]).unwrap();
        assert_eq!(d5.at(1, 0), d.at(lone5, 2));
    }
}
