//! Sparse voxel tensors: active-site coordinate lists with per-site feature
//! rows and an exact coordinate-to-row index, plus voxelization, height
//! compression and the gather/scatter primitives.
//!
//! Row order is always construction order (first occurrence). The hash index
//! is used for lookup only, never iterated, so every operation here is
//! deterministic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// One LiDAR return. Intensity is normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Voxel grid geometry: cell sizes, the covered range and the per-voxel
/// point cap used by the mean encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridConfig {
    /// (dx, dy, dz) in meters.
    pub voxel_size: [f64; 3],
    /// (xmin, ymin, zmin, xmax, ymax, zmax) in meters.
    pub point_range: [f64; 6],
    pub max_points_per_voxel: usize,
}

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Config(format!(
                "voxel_size must be positive, got {:?}",
                self.voxel_size
            )));
        }
        for axis in 0..3 {
            if !(self.point_range[axis + 3] > self.point_range[axis]) {
                return Err(Error::Config(format!(
                    "point_range max must exceed min on axis {axis}: {:?}",
                    self.point_range
                )));
            }
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be >= 1".into()));
        }
        Ok(())
    }

    /// Grid dimensions (nx, ny, nz) at stride 1.
    pub fn grid_dims(&self) -> [i64; 3] {
        let mut dims = [0i64; 3];
        for axis in 0..3 {
            let extent = self.point_range[axis + 3] - self.point_range[axis];
            dims[axis] = (extent / self.voxel_size[axis]).round().max(1.0) as i64;
        }
        dims
    }

    /// BEV grid dimensions (nx, ny) at the given stride, rounding up.
    pub fn bev_dims(&self, stride: u32) -> [i64; 2] {
        let d = self.grid_dims();
        let s = stride as i64;
        [(d[0] + s - 1) / s, (d[1] + s - 1) / s]
    }
}

fn valid_stride(stride: u32) -> bool {
    matches!(stride, 1 | 2 | 4 | 8 | 16 | 32)
}

/// Sparse 3D tensor over integer voxel coordinates.
#[derive(Debug, Clone)]
pub struct SparseTensor3D {
    coords: Vec<[i64; 3]>,
    pub feats: Mat,
    stride: u32,
    index: HashMap<[i64; 3], usize>,
}

impl SparseTensor3D {
    pub fn new(coords: Vec<[i64; 3]>, feats: Mat, stride: u32) -> Self {
        assert!(valid_stride(stride), "invalid stride {stride}");
        assert_eq!(coords.len(), feats.rows(), "coords/feats row mismatch");
        let mut index = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            let prev = index.insert(c, row);
            assert!(prev.is_none(), "duplicate coordinate {c:?}");
        }
        SparseTensor3D {
            coords,
            feats,
            stride,
            index,
        }
    }

    pub fn empty(channels: usize, stride: u32) -> Self {
        Self::new(Vec::new(), Mat::zeros(0, channels), stride)
    }

    pub fn n_active(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn coords(&self) -> &[[i64; 3]] {
        &self.coords
    }

    pub fn row_of(&self, coord: [i64; 3]) -> Option<usize> {
        self.index.get(&coord).copied()
    }
}

/// Sparse 2D (bird's-eye-view) tensor.
#[derive(Debug, Clone)]
pub struct SparseTensor2D {
    coords: Vec<[i64; 2]>,
    pub feats: Mat,
    stride: u32,
    index: HashMap<[i64; 2], usize>,
}

impl SparseTensor2D {
    pub fn new(coords: Vec<[i64; 2]>, feats: Mat, stride: u32) -> Self {
        assert!(valid_stride(stride), "invalid stride {stride}");
        assert_eq!(coords.len(), feats.rows(), "coords/feats row mismatch");
        let mut index = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            let prev = index.insert(c, row);
            assert!(prev.is_none(), "duplicate coordinate {c:?}");
        }
        SparseTensor2D {
            coords,
            feats,
            stride,
            index,
        }
    }

    pub fn empty(channels: usize, stride: u32) -> Self {
        Self::new(Vec::new(), Mat::zeros(0, channels), stride)
    }

    pub fn n_active(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn coords(&self) -> &[[i64; 2]] {
        &self.coords
    }

    pub fn row_of(&self, coord: [i64; 2]) -> Option<usize> {
        self.index.get(&coord).copied()
    }

    /// Same coordinate layout, new feature rows.
    pub fn with_feats(&self, feats: Mat) -> Self {
        assert_eq!(feats.rows(), self.coords.len());
        SparseTensor2D {
            coords: self.coords.clone(),
            feats,
            stride: self.stride,
            index: self.index.clone(),
        }
    }
}

/// Counters accumulated while voxelizing.
#[derive(Debug, Clone, Copy, Default)]
pub struct VoxelizeStats {
    pub points_in_range: usize,
    pub points_out_of_range: usize,
    /// Points ignored because their voxel already held `max_points_per_voxel`.
    pub points_over_cap: usize,
}

/// Voxelize a point cloud: one active site per occupied voxel, feature = mean
/// of the first `max_points_per_voxel` points (x, y, z, intensity) in arrival
/// order. Points outside the range are dropped and counted. Output stride 1.
pub fn voxelize(
    pc: &PointCloud,
    cfg: &VoxelGridConfig,
) -> Result<(SparseTensor3D, VoxelizeStats)> {
    cfg.validate()?;
    let dims = cfg.grid_dims();
    let mut stats = VoxelizeStats::default();

    let mut coords: Vec<[i64; 3]> = Vec::new();
    let mut sums: Vec<[f64; 4]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();

    for p in &pc.points {
        let vals = [p.x, p.y, p.z];
        let mut cell = [0i64; 3];
        let mut in_range = true;
        for axis in 0..3 {
            let offset = vals[axis] - cfg.point_range[axis];
            if offset < 0.0 {
                in_range = false;
                break;
            }
            let idx = (offset / cfg.voxel_size[axis]).floor() as i64;
            if idx >= dims[axis] {
                in_range = false;
                break;
            }
            cell[axis] = idx;
        }
        if !in_range {
            stats.points_out_of_range += 1;
            continue;
        }
        stats.points_in_range += 1;
        let row = *index.entry(cell).or_insert_with(|| {
            coords.push(cell);
            sums.push([0.0; 4]);
            counts.push(0);
            coords.len() - 1
        });
        if counts[row] >= cfg.max_points_per_voxel {
            stats.points_over_cap += 1;
            continue;
        }
        counts[row] += 1;
        sums[row][0] += p.x;
        sums[row][1] += p.y;
        sums[row][2] += p.z;
        sums[row][3] += p.intensity;
    }

    let mut feats = Mat::zeros(coords.len(), 4);
    for (row, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
        let inv = 1.0 / count as f64;
        for c in 0..4 {
            feats.set(row, c, sum[c] * inv);
        }
    }
    Ok((SparseTensor3D::new(coords, feats, 1), stats))
}

/// Project a sparse 3D tensor to BEV by summing features over the z axis at
/// identical (ix, iy). Output row order is first occurrence in input storage
/// order; stride is preserved.
pub fn height_compress(t: &SparseTensor3D) -> SparseTensor2D {
    let mut coords: Vec<[i64; 2]> = Vec::new();
    let mut index: HashMap<[i64; 2], usize> = HashMap::new();
    let channels = t.channels();
    let mut feats_rows: Vec<Vec<f64>> = Vec::new();

    for (row, &[ix, iy, _iz]) in t.coords().iter().enumerate() {
        let key = [ix, iy];
        let out_row = *index.entry(key).or_insert_with(|| {
            coords.push(key);
            feats_rows.push(vec![0.0; channels]);
            coords.len() - 1
        });
        for (acc, &v) in feats_rows[out_row].iter_mut().zip(t.feats.row(row)) {
            *acc += v;
        }
    }

    let mut feats = Mat::zeros(coords.len(), channels);
    for (row, vals) in feats_rows.iter().enumerate() {
        feats.row_mut(row).copy_from_slice(vals);
    }
    SparseTensor2D::new(coords, feats, t.stride())
}

/// Floor-divide 2D coordinates by an integer factor (scale-space transform).
pub fn rescale_coords(coords: &[[i64; 2]], factor: i64) -> Result<Vec<[i64; 2]>> {
    if factor <= 0 {
        return Err(Error::Config(format!(
            "rescale factor must be positive, got {factor}"
        )));
    }
    Ok(coords
        .iter()
        .map(|&[x, y]| [x.div_euclid(factor), y.div_euclid(factor)])
        .collect())
}

/// Gather feature rows at the requested coordinates, in request order.
/// Missing coordinates yield a zero row and a `true` flag.
pub fn gather(t: &SparseTensor2D, coords: &[[i64; 2]]) -> (Mat, Vec<bool>) {
    let mut out = Mat::zeros(coords.len(), t.channels());
    let mut missing = vec![false; coords.len()];
    for (i, &c) in coords.iter().enumerate() {
        match t.row_of(c) {
            Some(row) => out.row_mut(i).copy_from_slice(t.feats.row(row)),
            None => missing[i] = true,
        }
    }
    (out, missing)
}

/// Overwrite the rows at `coords` with the given features, leaving every
/// other row untouched. Every coordinate must be active; a miss signals an
/// index bookkeeping bug upstream.
pub fn scatter_replace(
    t: &SparseTensor2D,
    coords: &[[i64; 2]],
    feats: &Mat,
) -> Result<SparseTensor2D> {
    if coords.len() != feats.rows() || feats.cols() != t.channels() {
        return Err(Error::Shape(format!(
            "scatter_replace: {} coords vs {}x{} feats into {} channels",
            coords.len(),
            feats.rows(),
            feats.cols(),
            t.channels()
        )));
    }
    let mut out = t.feats.clone();
    for (i, &c) in coords.iter().enumerate() {
        let row = t.row_of(c).ok_or(Error::InactiveCoord((c[0], c[1])))?;
        out.row_mut(row).copy_from_slice(feats.row(i));
    }
    Ok(t.with_feats(out))
}
