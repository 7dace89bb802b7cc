//! End-to-end pipeline: voxelize → backbone → multi-scale fusion → height
//! compression → stem projection → LMFA → GFA → heads, with a full explicit
//! backward pass, the training step, inference post-processing and the
//! module-filtered gradient check that backs `cmd_gradcheck`.

use std::time::Instant;

use serde::Serialize;

use crate::backbone::{
    backbone_backward, fuse_multiscale, fuse_multiscale_backward, init_backbone, run_backbone,
    BackboneCache, BackboneConfig, FuseCache, StageTapGrads,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evalkit::{nms_bev, DetectionBox};
use crate::gfa::{
    cross_attention_backward, cross_attention_decode, ffn_predict, heads_backward, init_gfa,
    init_heads, init_queries, init_queries_backward, sasa_backward, sasa_self_attention,
    select_kv, BoxDecode, CrossCache, GfaConfig, HeadsCache, HeadsOut, InitQueriesCache,
    QuerySet, SasaCache,
};
use crate::lmfa::{
    init_lmfa, lmfa_backward, lmfa_forward, Heatmap, KeyVoxelSet, LmfaCache, LmfaConfig,
};
use crate::mat::Mat;
use crate::nn::{init_linear, linear_backward, linear_forward, LinearCache};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scene::SceneSample;
use crate::tensor::{
    height_compress, voxelize, PointCloud, SparseTensor2D, SparseTensor3D, VoxelizeStats,
};
use crate::train::{
    assign_heatmap_targets, box_regression_loss, focal_loss, match_queries, query_cls_loss,
    regression_target, LossBreakdown, MATCH_RADIUS_CELLS,
};

pub const BEV_STRIDE: u32 = 8;

/// Fixed stage names for run reports.
pub const REPORT_STAGES: [&str; 6] = ["voxelize", "backbone", "lmfa", "gfa", "heads", "postprocess"];

/// Build a freshly initialized parameter store for the configuration.
pub fn init_params(cfg: &PipelineConfig, seed: u64) -> ParamStore {
    let mut ps = ParamStore::new(seed);
    let mut rng = Rng::new(seed).fork(0x1A17);
    let bb = BackboneConfig {
        in_channels: 4,
        channels: cfg.channels,
    };
    init_backbone(&mut ps, &bb, &mut rng);
    let fused_width = cfg.channels[3] + cfg.channels[4] + cfg.channels[5];
    init_linear(&mut ps, "stem", fused_width, cfg.width(), &mut rng);
    init_lmfa(
        &mut ps,
        [cfg.channels[3], cfg.channels[4], cfg.channels[5]],
        cfg.width(),
        cfg.classes,
        &mut rng,
    );
    init_gfa(&mut ps, cfg.width(), cfg.classes, cfg.heads, &mut rng);
    init_heads(&mut ps, cfg.width(), cfg.classes, &mut rng);
    ps
}

pub fn box_decode(cfg: &PipelineConfig) -> BoxDecode {
    BoxDecode {
        stride: BEV_STRIDE,
        voxel: cfg.voxel,
    }
}

/// Wall time (ms) per reporting stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub name: String,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub stages: Vec<StageTiming>,
    /// Active sites after each backbone stage (strides 1..32).
    pub backbone_sites: Vec<usize>,
    /// Active BEV sites of the fused tensor.
    pub fused_sites: usize,
    pub peak_memory_bytes: usize,
    pub detections: usize,
    pub points_out_of_range: usize,
}

pub struct ForwardResult {
    pub boxes_raw: Vec<DetectionBox>,
    pub heatmap: Heatmap,
    pub heads: HeadsOut,
    pub queries: QuerySet,
    pub keys: KeyVoxelSet,
    pub fused2d: SparseTensor2D,
    pub enhanced: SparseTensor2D,
    pub stage_sites: [usize; 6],
    pub voxel_stats: VoxelizeStats,
    pub timings: Vec<StageTiming>,
    pub peak_memory_bytes: usize,
}

pub struct ForwardCache {
    backbone: BackboneCache,
    fuse: FuseCache,
    /// 3D-row → 2D-row maps for the fusion tensor and the three per-scale
    /// tensors.
    hc_fused: Vec<usize>,
    hc_scales: [Vec<usize>; 3],
    scale_rows3d: [usize; 3],
    stem: LinearCache,
    lmfa: LmfaCache,
    initq: InitQueriesCache,
    sasa: SasaCache,
    cross: CrossCache,
    heads: HeadsCache,
}

fn bev_row_map(t3d: &SparseTensor3D, t2d: &SparseTensor2D) -> Vec<usize> {
    t3d.coords()
        .iter()
        .map(|&[x, y, _]| t2d.row_of([x, y]).expect("height-compressed cell"))
        .collect()
}

fn tensor3d_bytes(t: &SparseTensor3D) -> usize {
    t.n_active() * (t.channels() * 8 + 24)
}

fn tensor2d_bytes(t: &SparseTensor2D) -> usize {
    t.n_active() * (t.channels() * 8 + 16)
}

/// Full forward pass. `jobs` parallelizes the per-key KNN queries without
/// changing results.
pub fn forward(
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    ps: &ParamStore,
    jobs: usize,
) -> Result<(ForwardResult, ForwardCache)> {
    let mut timings = Vec::new();
    let mut peak_memory = 0usize;

    let t = Instant::now();
    let (t0, voxel_stats) = voxelize(cloud, &cfg.voxel)?;
    timings.push(StageTiming {
        name: "voxelize".into(),
        ms: t.elapsed().as_secs_f64() * 1e3,
    });
    if t0.n_active() == 0 {
        return Err(Error::Degenerate("no points inside the voxel range".into()));
    }

    let t = Instant::now();
    let bb_cfg = BackboneConfig {
        in_channels: 4,
        channels: cfg.channels,
    };
    let (stages, backbone_cache) = run_backbone(&t0, &bb_cfg, ps)?;
    let stage_sites: [usize; 6] = std::array::from_fn(|i| stages.stages[i].n_active());
    let (fused3d, fuse_cache) = fuse_multiscale(stages.stage(4), stages.stage(5), stages.stage(6))?;
    let fused2d_raw = height_compress(&fused3d);
    let hc_fused = bev_row_map(&fused3d, &fused2d_raw);
    let p4 = height_compress(stages.stage(4));
    let p5 = height_compress(stages.stage(5));
    let p6 = height_compress(stages.stage(6));
    let hc_scales = [
        bev_row_map(stages.stage(4), &p4),
        bev_row_map(stages.stage(5), &p5),
        bev_row_map(stages.stage(6), &p6),
    ];
    let scale_rows3d = [
        stages.stage(4).n_active(),
        stages.stage(5).n_active(),
        stages.stage(6).n_active(),
    ];
    peak_memory += stages.stages.iter().map(tensor3d_bytes).sum::<usize>()
        + tensor3d_bytes(&fused3d)
        + tensor2d_bytes(&fused2d_raw)
        + tensor2d_bytes(&p4)
        + tensor2d_bytes(&p5)
        + tensor2d_bytes(&p6)
        + tensor3d_bytes(&t0);
    timings.push(StageTiming {
        name: "backbone".into(),
        ms: t.elapsed().as_secs_f64() * 1e3,
    });

    let t = Instant::now();
    let (stem_feats, stem_cache) = linear_forward(ps, "stem", &fused2d_raw.feats);
    let fused2d = fused2d_raw.with_feats(stem_feats);
    let lmfa_cfg = LmfaConfig {
        n_key: cfg.n_key,
        m: cfg.m,
        jobs,
    };
    let (lmfa_out, lmfa_cache) = lmfa_forward(&fused2d, [&p4, &p5, &p6], ps, lmfa_cfg)?;
    peak_memory += 2 * tensor2d_bytes(&fused2d);
    timings.push(StageTiming {
        name: "lmfa".into(),
        ms: t.elapsed().as_secs_f64() * 1e3,
    });

    let t = Instant::now();
    let grid = cfg.voxel.bev_dims(BEV_STRIDE);
    let (queries, initq_cache) = init_queries(
        &lmfa_out.enhanced,
        &lmfa_out.heatmap,
        cfg.n_query,
        ps,
        grid,
    );
    let (q1, sasa_cache) = sasa_self_attention(ps, &queries, cfg.heads);
    let kv = select_kv(&lmfa_out.enhanced, &lmfa_out.heatmap, cfg.n_kv);
    let gfa_cfg = GfaConfig {
        n_query: cfg.n_query,
        n_kv: cfg.n_kv,
        heads: cfg.heads,
        mask_padded: cfg.mask_padded,
    };
    let (q2, cross_cache) = cross_attention_decode(
        &q1,
        &queries.pos,
        &kv,
        ps,
        &gfa_cfg,
        grid,
        lmfa_out.enhanced.n_active(),
    )?;
    peak_memory += kv.feats.len() * 8 + q2.len() * 8 * 3;
    timings.push(StageTiming {
        name: "gfa".into(),
        ms: t.elapsed().as_secs_f64() * 1e3,
    });

    let t = Instant::now();
    let decode = box_decode(cfg);
    let (boxes_raw, heads_out, heads_cache) = ffn_predict(&q2, &queries.pos, ps, &decode);
    timings.push(StageTiming {
        name: "heads".into(),
        ms: t.elapsed().as_secs_f64() * 1e3,
    });

    Ok((
        ForwardResult {
            boxes_raw,
            heatmap: lmfa_out.heatmap,
            heads: heads_out,
            queries,
            keys: lmfa_out.keys,
            fused2d,
            enhanced: lmfa_out.enhanced,
            stage_sites,
            voxel_stats,
            timings,
            peak_memory_bytes: peak_memory,
        },
        ForwardCache {
            backbone: backbone_cache,
            fuse: fuse_cache,
            hc_fused,
            hc_scales,
            scale_rows3d,
            stem: stem_cache,
            lmfa: lmfa_cache,
            initq: initq_cache,
            sasa: sasa_cache,
            cross: cross_cache,
            heads: heads_cache,
        },
    ))
}

/// Gradients entering the backward pass, aligned with the forward outputs.
pub struct BackwardSignals {
    /// w.r.t. heatmap sigmoid scores, [N_voxels × Cls].
    pub d_heatmap: Mat,
    /// w.r.t. class logits, [N_query × Cls].
    pub d_cls_logits: Mat,
    /// w.r.t. raw regression outputs, [N_query × 8].
    pub d_reg: Mat,
}

/// Full reverse pass; accumulates parameter gradients into the store.
pub fn backward(cache: &ForwardCache, ps: &mut ParamStore, signals: &BackwardSignals) {
    let d_q2 = heads_backward(&cache.heads, ps, &signals.d_cls_logits, &signals.d_reg);
    let (d_q1, d_enh_from_kv) = cross_attention_backward(&cache.cross, ps, &d_q2);
    let d_q0 = sasa_backward(&cache.sasa, ps, &d_q1);
    let mut d_enhanced = init_queries_backward(&cache.initq, ps, &d_q0);
    d_enhanced.add_assign(&d_enh_from_kv);

    let (d_fused_stem, d_pscales) = lmfa_backward(&cache.lmfa, ps, &d_enhanced, &signals.d_heatmap);
    let d_fused_raw = linear_backward(ps, "stem", &cache.stem, &d_fused_stem);

    // Height compression broadcasts the 2D gradient to every contributing 3D
    // site.
    let fused_width = d_fused_raw.cols();
    let mut d_fused3d = Mat::zeros(cache.hc_fused.len(), fused_width);
    for (row3d, &row2d) in cache.hc_fused.iter().enumerate() {
        d_fused3d
            .row_mut(row3d)
            .copy_from_slice(d_fused_raw.row(row2d));
    }
    let (mut d_s4, mut d_s5, mut d_s6) = fuse_multiscale_backward(&cache.fuse, &d_fused3d);

    for (si, d_scale2d) in d_pscales.iter().enumerate() {
        let target = match si {
            0 => &mut d_s4,
            1 => &mut d_s5,
            _ => &mut d_s6,
        };
        debug_assert_eq!(target.rows(), cache.scale_rows3d[si]);
        for (row3d, &row2d) in cache.hc_scales[si].iter().enumerate() {
            for (dst, &v) in target
                .row_mut(row3d)
                .iter_mut()
                .zip(d_scale2d.row(row2d))
            {
                *dst += v;
            }
        }
    }

    let taps = StageTapGrads {
        d_s4,
        d_s5,
        d_s6,
    };
    let _ = backbone_backward(&cache.backbone, ps, &taps);
}

/// Forward + loss + backward for one scene. `grad_scale` divides the
/// gradient contribution (full-batch averaging); losses are returned
/// unscaled.
pub fn scene_loss_and_grads(
    scene: &SceneSample,
    cfg: &PipelineConfig,
    ps: &mut ParamStore,
    jobs: usize,
    grad_scale: f64,
) -> Result<LossBreakdown> {
    let (fwd, cache) = forward(&scene.cloud, cfg, ps, jobs)?;
    let decode = box_decode(cfg);

    let targets = assign_heatmap_targets(&scene.gt, &fwd.fused2d, &decode, cfg.classes);
    let (heatmap_loss, mut d_heatmap) = focal_loss(&fwd.heatmap, &targets);

    let matches = match_queries(&fwd.queries, &scene.gt, &decode, MATCH_RADIUS_CELLS);
    let matched: Vec<(usize, usize)> = matches
        .iter()
        .enumerate()
        .filter_map(|(qi, m)| m.map(|gi| (qi, gi)))
        .collect();

    let n_query = fwd.queries.len();
    let mut pred_rows = Mat::zeros(matched.len(), 8);
    let mut tgt_rows = Mat::zeros(matched.len(), 8);
    for (mi, &(qi, gi)) in matched.iter().enumerate() {
        pred_rows.row_mut(mi).copy_from_slice(fwd.heads.reg.row(qi));
        let t = regression_target(fwd.queries.pos[qi], &scene.gt[gi], &decode);
        tgt_rows.row_mut(mi).copy_from_slice(&t);
    }
    let (box_loss, d_box_rows) = box_regression_loss(&pred_rows, &tgt_rows);
    let mut d_reg = Mat::zeros(n_query, 8);
    for (mi, &(qi, _)) in matched.iter().enumerate() {
        d_reg.row_mut(qi).copy_from_slice(d_box_rows.row(mi));
    }

    let mut cls_target = Mat::zeros(n_query, cfg.classes);
    for &(qi, gi) in &matched {
        cls_target.set(qi, scene.gt[gi].cls as usize, 1.0);
    }
    let (cls_loss, mut d_cls) = query_cls_loss(&fwd.heads.cls_logits, &cls_target);

    let reg_loss = box_loss + cls_loss;
    let breakdown = LossBreakdown::combine(heatmap_loss, reg_loss, cfg.lambda, matched.len());

    // total = heatmap + λ·(box + cls); scale everything by grad_scale.
    d_heatmap.scale(grad_scale);
    d_reg.scale(cfg.lambda * grad_scale);
    d_cls.scale(cfg.lambda * grad_scale);
    backward(
        &cache,
        ps,
        &BackwardSignals {
            d_heatmap,
            d_cls_logits: d_cls,
            d_reg,
        },
    );
    Ok(breakdown)
}

/// Mean loss over every scene with gradients accumulated (full batch). The
/// caller owns zero_grads and the optimizer step.
pub fn batch_loss_and_grads(
    scenes: &[SceneSample],
    cfg: &PipelineConfig,
    ps: &mut ParamStore,
    jobs: usize,
) -> Result<LossBreakdown> {
    assert!(!scenes.is_empty());
    let scale = 1.0 / scenes.len() as f64;
    let mut heatmap = 0.0;
    let mut reg = 0.0;
    let mut positives = 0;
    for scene in scenes {
        let b = scene_loss_and_grads(scene, cfg, ps, jobs, scale)?;
        heatmap += b.heatmap_loss * scale;
        reg += b.reg_loss * scale;
        positives += b.positives;
    }
    Ok(LossBreakdown::combine(heatmap, reg, cfg.lambda, positives))
}

/// Inference: forward, confidence threshold, optional class-wise NMS.
pub fn infer(
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    ps: &ParamStore,
    jobs: usize,
    apply_nms: bool,
) -> Result<(Vec<DetectionBox>, RunReport)> {
    let (fwd, _) = forward(cloud, cfg, ps, jobs)?;
    let t = Instant::now();
    let thresholded: Vec<DetectionBox> = fwd
        .boxes_raw
        .iter()
        .filter(|b| b.score >= cfg.score_thresh)
        .copied()
        .collect();
    let kept = if apply_nms {
        nms_bev(&thresholded, cfg.nms_iou)
    } else {
        thresholded
    };
    let mut timings = fwd.timings.clone();
    timings.push(StageTiming {
        name: "postprocess".into(),
        ms: t.elapsed().as_secs_f64() * 1e3,
    });

    let report = RunReport {
        stages: timings,
        backbone_sites: fwd.stage_sites.to_vec(),
        fused_sites: fwd.fused2d.n_active(),
        peak_memory_bytes: fwd.peak_memory_bytes,
        detections: kept.len(),
        points_out_of_range: fwd.voxel_stats.points_out_of_range,
    };
    Ok((kept, report))
}

/// Which parameters a gradcheck run probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckModule {
    All,
    Backbone,
    Lmfa,
    Gfa,
    Heads,
}

impl GradCheckModule {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "backbone" => Ok(Self::Backbone),
            "lmfa" => Ok(Self::Lmfa),
            "gfa" => Ok(Self::Gfa),
            "heads" => Ok(Self::Heads),
            other => Err(Error::Config(format!(
                "unknown gradcheck module '{other}' (all|backbone|lmfa|gfa|heads)"
            ))),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        match self {
            Self::All => true,
            Self::Backbone => name.starts_with("backbone.") || name.starts_with("stem."),
            Self::Lmfa => name.starts_with("lmfa."),
            Self::Gfa => name.starts_with("gfa.") && !name.starts_with("gfa.head."),
            Self::Heads => name.starts_with("gfa.head."),
        }
    }
}

/// Small fixed scene and config for gradient checking: full desk topology at
/// reduced size so several hundred finite-difference probes stay fast.
pub fn gradcheck_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.voxel.voxel_size = [0.4, 0.4, 0.4];
    cfg.voxel.point_range = [-8.0, -8.0, -3.0, 8.0, 8.0, 1.0];
    cfg.channels = [4, 8, 8, 8, 8, 8];
    cfg.heads = 2;
    cfg.n_key = 12;
    cfg.n_query = 8;
    cfg.n_kv = 48;
    cfg.m = 4;
    cfg.scene.vehicles = 2;
    cfg.scene.pedestrians = 1;
    cfg.scene.cyclists = 1;
    cfg.scene.ground_points = 260;
    cfg.scene.clutter_points = 40;
    cfg.scene.points_per_object = 60;
    cfg
}

pub struct GradCheckOutcome {
    pub report: crate::train::GradCheckReport,
    pub per_module: Vec<(String, f64, usize)>,
}

/// Run the full pipeline on a fixed synthetic scene, define the scalar loss
/// as a frozen random projection of (heatmap scores, class logits, raw
/// regression outputs), and compare analytic parameter gradients against
/// central differences over probes drawn from the requested module(s).
pub fn run_gradcheck(module: GradCheckModule, probes_per_group: usize) -> Result<GradCheckOutcome> {
    let cfg = gradcheck_config();
    let seed = 2024;
    let mut ps = init_params(&cfg, seed);
    let scene = crate::scene::generate_scene(
        &crate::scene::SceneSpec::from_config(&cfg.scene, &cfg.voxel),
        seed,
    );

    // Frozen projections; shapes depend only on the (fixed) scene topology.
    let (fwd0, _) = forward(&scene.cloud, &cfg, &ps, 1)?;
    let mut prng = Rng::new(77);
    let proj_hm = Mat::randn(fwd0.heatmap.scores.rows(), fwd0.heatmap.scores.cols(), 1.0, &mut prng);
    let proj_cls = Mat::randn(fwd0.heads.cls_logits.rows(), fwd0.heads.cls_logits.cols(), 1.0, &mut prng);
    let proj_reg = Mat::randn(fwd0.heads.reg.rows(), fwd0.heads.reg.cols(), 1.0, &mut prng);

    let project = |fwd: &ForwardResult| -> f64 {
        let a: f64 = fwd
            .heatmap
            .scores
            .data()
            .iter()
            .zip(proj_hm.data())
            .map(|(x, p)| x * p)
            .sum();
        let b: f64 = fwd
            .heads
            .cls_logits
            .data()
            .iter()
            .zip(proj_cls.data())
            .map(|(x, p)| x * p)
            .sum();
        let c: f64 = fwd
            .heads
            .reg
            .data()
            .iter()
            .zip(proj_reg.data())
            .map(|(x, p)| x * p)
            .sum();
        a + b + c
    };
    let loss = |ps: &ParamStore| -> f64 {
        let (fwd, _) = forward(&scene.cloud, &cfg, ps, 1).expect("gradcheck forward");
        project(&fwd)
    };

    ps.zero_grads();
    let (_, cache) = forward(&scene.cloud, &cfg, &ps, 1)?;
    backward(
        &cache,
        &mut ps,
        &BackwardSignals {
            d_heatmap: proj_hm.clone(),
            d_cls_logits: proj_cls.clone(),
            d_reg: proj_reg.clone(),
        },
    );

    let groups: Vec<GradCheckModule> = match module {
        GradCheckModule::All => vec![
            GradCheckModule::Backbone,
            GradCheckModule::Lmfa,
            GradCheckModule::Gfa,
            GradCheckModule::Heads,
        ],
        other => vec![other],
    };

    let mut per_module = Vec::new();
    let mut worst = crate::train::GradCheckReport {
        max_rel_err: 0.0,
        probes: 0,
        worst: String::new(),
    };
    for group in groups {
        let mut rng = Rng::new(31 + group_tag(group));
        let probes = crate::train::select_probes(
            &ps,
            |name| group.matches(name),
            probes_per_group,
            &mut rng,
        );
        let report = crate::train::grad_check(&mut ps, &loss, &probes);
        per_module.push((
            format!("{group:?}").to_lowercase(),
            report.max_rel_err,
            report.probes,
        ));
        worst.probes += report.probes;
        if report.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = report.max_rel_err;
            worst.worst = report.worst;
        }
    }
    Ok(GradCheckOutcome {
        report: worst,
        per_module,
    })
}

fn group_tag(g: GradCheckModule) -> u64 {
    match g {
        GradCheckModule::All => 0,
        GradCheckModule::Backbone => 1,
        GradCheckModule::Lmfa => 2,
        GradCheckModule::Gfa => 3,
        GradCheckModule::Heads => 4,
    }
}
