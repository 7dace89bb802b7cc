//! Pipeline configuration: presets ("kitti", "nuscenes", "desk") overlaid by
//! a flat `key = value` text file with dotted keys. Unknown keys, type
//! mismatches and out-of-range values are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::VoxelGridConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Synthetic scene generation knobs (class counts and point budgets).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub vehicles: usize,
    pub pedestrians: usize,
    pub cyclists: usize,
    pub ground_points: usize,
    pub clutter_points: usize,
    /// Surface points an object at 10 m would receive; actual counts fall
    /// off with squared range.
    pub points_per_object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub voxel: VoxelGridConfig,
    pub channels: [usize; 6],
    pub classes: usize,
    pub n_key: usize,
    pub m: usize,
    pub n_query: usize,
    pub n_kv: usize,
    pub heads: usize,
    pub mask_padded: bool,
    pub lr: f64,
    pub lambda: f64,
    pub optimizer: OptimKind,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub scene: SceneConfig,
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "kitti" => Ok(Self::kitti()),
            "nuscenes" => Ok(Self::nuscenes()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected kitti | nuscenes | desk)"
            ))),
        }
    }

    fn common() -> Self {
        PipelineConfig {
            voxel: VoxelGridConfig {
                voxel_size: [0.05, 0.05, 0.1],
                point_range: [0.0, -40.0, -3.0, 70.4, 40.0, 1.0],
                max_points_per_voxel: 10,
            },
            channels: [8, 16, 16, 32, 32, 32],
            classes: 3,
            n_key: 500,
            m: 8,
            n_query: 200,
            n_kv: 10_000,
            heads: 4,
            mask_padded: true,
            lr: 3e-3,
            lambda: 0.25,
            optimizer: OptimKind::Adam,
            score_thresh: 0.1,
            nms_iou: 0.5,
            scene: SceneConfig {
                vehicles: 12,
                pedestrians: 6,
                cyclists: 4,
                ground_points: 9000,
                clutter_points: 900,
                points_per_object: 260,
            },
        }
    }

    pub fn kitti() -> Self {
        Self::common()
    }

    pub fn nuscenes() -> Self {
        let mut cfg = Self::common();
        cfg.voxel.voxel_size = [0.075, 0.075, 0.2];
        cfg.voxel.point_range = [-54.0, -54.0, -5.0, 54.0, 54.0, 3.0];
        cfg
    }

    /// Small grid and budgets sized for CPU experiments.
    pub fn desk() -> Self {
        let mut cfg = Self::common();
        cfg.voxel.voxel_size = [0.2, 0.2, 0.4];
        cfg.voxel.point_range = [-20.0, -20.0, -3.0, 20.0, 20.0, 1.0];
        cfg.n_key = 64;
        cfg.n_query = 32;
        cfg.n_kv = 512;
        cfg.scene = SceneConfig {
            vehicles: 3,
            pedestrians: 2,
            cyclists: 1,
            ground_points: 1400,
            clutter_points: 150,
            points_per_object: 260,
        };
        cfg
    }

    /// The channel width shared by LMFA and GFA (the stage-4 width; the
    /// fused tensor is stem-projected down to it).
    pub fn width(&self) -> usize {
        self.channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("model.classes must be >= 1".into()));
        }
        if self.n_key == 0 || self.n_query == 0 || self.n_kv == 0 {
            return Err(Error::Config("selection sizes must be >= 1".into()));
        }
        if self.m == 0 || self.m % 4 != 0 {
            return Err(Error::Config(format!(
                "lmfa.m must be a positive multiple of 4 (neighbor counts stay integral across the three scales), got {}",
                self.m
            )));
        }
        if self.heads == 0 || self.width() % self.heads != 0 {
            return Err(Error::Config(format!(
                "gfa.heads ({}) must divide the stage-4 width ({})",
                self.heads,
                self.width()
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("train.lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::Config("infer.score_thresh must lie in [0,1]".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config("infer.nms_iou must lie in (0,1]".into()));
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::Config(format!(
            "key '{key}': cannot parse '{value}' as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "key '{key}': expected true/false, got '{other}'"
        ))),
    }
}

fn apply_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "voxel.dx" => cfg.voxel.voxel_size[0] = parse(key, value)?,
        "voxel.dy" => cfg.voxel.voxel_size[1] = parse(key, value)?,
        "voxel.dz" => cfg.voxel.voxel_size[2] = parse(key, value)?,
        "voxel.max_points" => cfg.voxel.max_points_per_voxel = parse(key, value)?,
        "range.xmin" => cfg.voxel.point_range[0] = parse(key, value)?,
        "range.ymin" => cfg.voxel.point_range[1] = parse(key, value)?,
        "range.zmin" => cfg.voxel.point_range[2] = parse(key, value)?,
        "range.xmax" => cfg.voxel.point_range[3] = parse(key, value)?,
        "range.ymax" => cfg.voxel.point_range[4] = parse(key, value)?,
        "range.zmax" => cfg.voxel.point_range[5] = parse(key, value)?,
        "model.channels" => {
            let parts: Vec<&str> = value.split(',').map(|s| s.trim()).collect();
            if parts.len() != 6 {
                return Err(Error::Config(format!(
                    "model.channels expects 6 comma-separated widths, got {}",
                    parts.len()
                )));
            }
            for (i, p) in parts.iter().enumerate() {
                cfg.channels[i] = parse(key, p)?;
            }
        }
        "model.classes" => cfg.classes = parse(key, value)?,
        "lmfa.n_key" => cfg.n_key = parse(key, value)?,
        "lmfa.m" => cfg.m = parse(key, value)?,
        "gfa.n_query" => cfg.n_query = parse(key, value)?,
        "gfa.n_kv" => cfg.n_kv = parse(key, value)?,
        "gfa.heads" => cfg.heads = parse(key, value)?,
        "gfa.mask_padded" => cfg.mask_padded = parse_bool(key, value)?,
        "train.lr" => cfg.lr = parse(key, value)?,
        "train.lambda" => cfg.lambda = parse(key, value)?,
        "train.optimizer" => {
            cfg.optimizer = match value.trim() {
                "sgd" => OptimKind::Sgd,
                "adam" => OptimKind::Adam,
                other => {
                    return Err(Error::Config(format!(
                        "train.optimizer: expected sgd|adam, got '{other}'"
                    )))
                }
            }
        }
        "infer.score_thresh" => cfg.score_thresh = parse(key, value)?,
        "infer.nms_iou" => cfg.nms_iou = parse(key, value)?,
        "scene.vehicles" => cfg.scene.vehicles = parse(key, value)?,
        "scene.pedestrians" => cfg.scene.pedestrians = parse(key, value)?,
        "scene.cyclists" => cfg.scene.cyclists = parse(key, value)?,
        "scene.ground_points" => cfg.scene.ground_points = parse(key, value)?,
        "scene.clutter_points" => cfg.scene.clutter_points = parse(key, value)?,
        "scene.points_per_object" => cfg.scene.points_per_object = parse(key, value)?,
        other => {
            return Err(Error::Config(format!("unknown configuration key '{other}'")));
        }
    }
    Ok(())
}

/// Parse `key = value` lines ('#' comments and blank lines allowed). A
/// `preset = name` line selects the base configuration; it defaults to
/// "desk" and must precede any override it should not clobber.
pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::desk();
    let mut seen_any_override = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key == "preset" {
            if seen_any_override {
                return Err(Error::Config(format!(
                    "line {}: preset must come before other keys",
                    lineno + 1
                )));
            }
            cfg = PipelineConfig::preset(value)?;
        } else {
            apply_key(&mut cfg, key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            seen_any_override = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_with_kitti_preset() {
        let cfg = parse_config_str("preset = kitti\n").unwrap();
        assert_eq!(cfg.voxel.voxel_size, [0.05, 0.05, 0.1]);
        assert_eq!(cfg.voxel.point_range, [0.0, -40.0, -3.0, 70.4, 40.0, 1.0]);
        assert_eq!(cfg.voxel.max_points_per_voxel, 10);
        assert_eq!(cfg.n_key, 500);
        assert_eq!(cfg.n_query, 200);
        assert_eq!(cfg.n_kv, 10_000);
    }

    #[test]
    fn nuscenes_preset_range() {
        let cfg = parse_config_str("preset = nuscenes").unwrap();
        assert_eq!(cfg.voxel.point_range, [-54.0, -54.0, -5.0, 54.0, 54.0, 3.0]);
        assert_eq!(cfg.voxel.voxel_size, [0.075, 0.075, 0.2]);
    }

    #[test]
    fn m_must_be_multiple_of_four() {
        let err = parse_config_str("lmfa.m = 7").unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
        assert!(parse_config_str("lmfa.m = 16").is_ok());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config_str("does.not.exist = 1").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(parse_config_str("lmfa.n_key = banana").is_err());
        assert!(parse_config_str("gfa.mask_padded = maybe").is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(parse_config_str("infer.score_thresh = 1.5").is_err());
        assert!(parse_config_str("train.lr = -1").is_err());
        assert!(parse_config_str("voxel.dx = 0").is_err());
    }

    #[test]
    fn overrides_apply_over_preset() {
        let cfg = parse_config_str("preset = kitti\nlmfa.n_key = 123\n# comment\n").unwrap();
        assert_eq!(cfg.n_key, 123);
        assert_eq!(cfg.voxel.voxel_size, [0.05, 0.05, 0.1]);
    }

    #[test]
    fn default_preset_is_desk() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::desk());
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(parse_config_str("gfa.heads = 5").is_err());
        assert!(parse_config_str("gfa.heads = 8").is_ok());
    }
}
