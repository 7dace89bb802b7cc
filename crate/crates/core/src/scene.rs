//! Synthetic scene generation and point-file IO.
//!
//! Scenes are a pure function of (spec, seed) through the counter-based
//! generator in [`crate::rng`], so identical inputs reproduce byte-identical
//! point clouds on every platform. Boxes are placed by rejection sampling
//! without BEV overlap; surface points are sampled on box faces with a point
//! budget falling off with squared range, mimicking real LiDAR sparsity.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::evalkit::{bev_rotated_iou, DetectionBox};
use crate::rng::Rng;
use crate::tensor::{Point, PointCloud, VoxelGridConfig};

/// Per-class box size priors (mean/std of l, w, h in meters) and the class
/// ids used across the pipeline.
pub const CLASS_NAMES: [&str; 3] = ["vehicle", "pedestrian", "cyclist"];

#[derive(Debug, Clone, Copy)]
struct SizePrior {
    mean: [f64; 3],
    std: [f64; 3],
}

const PRIORS: [SizePrior; 3] = [
    SizePrior {
        mean: [4.4, 1.9, 1.6],
        std: [0.35, 0.12, 0.08],
    },
    SizePrior {
        mean: [0.8, 0.8, 1.75],
        std: [0.08, 0.08, 0.1],
    },
    SizePrior {
        mean: [1.8, 0.6, 1.7],
        std: [0.15, 0.06, 0.08],
    },
];

const GROUND_Z: f64 = -1.8;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MIN_POINTS_PER_OBJECT: usize = 12;

/// Full scene specification: class counts, point budgets and the world
/// range. Derives from the pipeline configuration.
#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub counts: [usize; 3],
    pub ground_points: usize,
    pub clutter_points: usize,
    pub points_per_object: usize,
    pub point_range: [f64; 6],
}

impl SceneSpec {
    pub fn from_config(scene: &SceneConfig, voxel: &VoxelGridConfig) -> Self {
        SceneSpec {
            counts: [scene.vehicles, scene.pedestrians, scene.cyclists],
            ground_points: scene.ground_points,
            clutter_points: scene.clutter_points,
            points_per_object: scene.points_per_object,
            point_range: voxel.point_range,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub gt: Vec<DetectionBox>,
    /// Objects dropped because no non-overlapping placement was found.
    pub placement_failures: usize,
}

fn sample_box(class: usize, spec: &SceneSpec, rng: &mut Rng) -> DetectionBox {
    let prior = PRIORS[class];
    let mut dims = [0.0; 3];
    for a in 0..3 {
        dims[a] = (prior.mean[a] + rng.normal_scaled(prior.std[a])).max(prior.mean[a] * 0.5);
    }
    let [l, w, h] = dims;
    // Keep the whole footprint inside the range with a half-diagonal margin
    // and off the ego origin.
    let margin = (l * l + w * w).sqrt() / 2.0 + 0.5;
    let r = &spec.point_range;
    let (mut cx, mut cy);
    loop {
        cx = rng.uniform_in(r[0] + margin, r[3] - margin);
        cy = rng.uniform_in(r[1] + margin, r[4] - margin);
        if cx * cx + cy * cy > 9.0 {
            break;
        }
    }
    let yaw = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
    DetectionBox {
        cx,
        cy,
        cz: GROUND_Z + h / 2.0,
        l,
        w,
        h,
        yaw,
        cls: class as u32,
        score: 1.0,
    }
}

/// Surface-point budget for an object at the given BEV range: quadratic
/// falloff normalized at 10 m, floored so every box stays detectable.
fn object_point_budget(base: usize, range: f64) -> usize {
    let scaled = base as f64 / (range / 10.0).max(0.5).powi(2);
    (scaled as usize).clamp(MIN_POINTS_PER_OBJECT, base * 4)
}

/// Sample one point on the box surface (4 side faces + top, area-weighted),
/// pulled slightly inward so containment tests are strict.
fn sample_surface_point(b: &DetectionBox, rng: &mut Rng) -> Point {
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    let side_l = b.l * b.h; // faces normal to ±y
    let side_w = b.w * b.h; // faces normal to ±x
    let top = b.l * b.w;
    let total = 2.0 * side_l + 2.0 * side_w + top;
    let pick = rng.uniform() * total;
    let (mut u, mut v, mut z) = (0.0, 0.0, 0.0);
    if pick < 2.0 * side_l {
        // y = ±hw face.
        u = rng.uniform_in(-hl, hl);
        v = if pick < side_l { -hw } else { hw };
        z = rng.uniform_in(-hh, hh);
    } else if pick < 2.0 * side_l + 2.0 * side_w {
        let q = pick - 2.0 * side_l;
        u = if q < side_w { -hl } else { hl };
        v = rng.uniform_in(-hw, hw);
        z = rng.uniform_in(-hh, hh);
    } else {
        u = rng.uniform_in(-hl, hl);
        v = rng.uniform_in(-hw, hw);
        z = hh;
    }
    // Pull inward so the point is strictly inside the box.
    u *= 0.96;
    v *= 0.96;
    z *= 0.96;
    let (s, c) = b.yaw.sin_cos();
    Point {
        x: b.cx + c * u - s * v,
        y: b.cy + s * u + c * v,
        z: b.cz + z,
        intensity: (0.55 + rng.normal_scaled(0.1)).clamp(0.0, 1.0),
    }
}

/// Generate a scene: non-overlapping boxes, face-sampled object points,
/// ground plane and clutter.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> SceneSample {
    let mut rng = Rng::new(seed).fork(0x5CE11E);
    let r = spec.point_range;
    let mut gt: Vec<DetectionBox> = Vec::new();
    let mut placement_failures = 0usize;

    for (class, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let candidate = sample_box(class, spec, &mut rng);
                let clear = gt.iter().all(|b| bev_rotated_iou(b, &candidate) == 0.0);
                if clear {
                    gt.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                placement_failures += 1;
            }
        }
    }

    let mut points: Vec<Point> = Vec::new();
    // Ground plane with mild undulation.
    for _ in 0..spec.ground_points {
        let x = rng.uniform_in(r[0], r[3]);
        let y = rng.uniform_in(r[1], r[4]);
        points.push(Point {
            x,
            y,
            z: GROUND_Z + rng.normal_scaled(0.03),
            intensity: (0.3 + rng.normal_scaled(0.05)).clamp(0.0, 1.0),
        });
    }
    // Sparse clutter above ground.
    for _ in 0..spec.clutter_points {
        points.push(Point {
            x: rng.uniform_in(r[0], r[3]),
            y: rng.uniform_in(r[1], r[4]),
            z: rng.uniform_in(GROUND_Z + 0.1, r[5] - 0.05),
            intensity: rng.uniform(),
        });
    }
    // Object surfaces.
    for b in &gt {
        let range = (b.cx * b.cx + b.cy * b.cy).sqrt();
        let budget = object_point_budget(spec.points_per_object, range);
        for _ in 0..budget {
            points.push(sample_surface_point(b, &mut rng));
        }
    }

    SceneSample {
        cloud: PointCloud { points },
        gt,
        placement_failures,
    }
}

const RECORD_BYTES: u64 = 16;

/// Read a KITTI-style `.bin`: little-endian f32 records (x, y, z, intensity)
/// with no header. The file length must be a multiple of 16 bytes.
pub fn read_point_bin(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let len = bytes.len() as u64;
    if len % RECORD_BYTES != 0 {
        return Err(Error::PointFile {
            len,
            offset: len - len % RECORD_BYTES,
        });
    }
    let mut points = Vec::with_capacity((len / RECORD_BYTES) as usize);
    for rec in bytes.chunks_exact(RECORD_BYTES as usize) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        points.push(Point {
            x: f(0),
            y: f(1),
            z: f(2),
            intensity: f(3).clamp(0.0, 1.0),
        });
    }
    Ok(PointCloud { points })
}

pub fn write_point_bin(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(pc.points.len() * RECORD_BYTES as usize);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}
