//! Detection matching and metrics: rotated BEV IoU by convex polygon
//! clipping, 3D IoU as BEV intersection times vertical overlap, average
//! precision at 40 recall positions, and distance-bucketed reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One detection or ground-truth box. Serialized field names are the wire
/// schema for detection/GT JSON files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DetectionBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub cls: u32,
    pub score: f64,
}

impl DetectionBox {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.score,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("box has non-finite fields".into()));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Config(format!(
                "box sizes must be positive: l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!("score {} outside [0,1]", self.score)));
        }
        Ok(())
    }

    /// BEV corners, counter-clockwise. Length runs along the heading.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let rot = |x: f64, y: f64| [self.cx + c * x - s * y, self.cy + s * x + c * y];
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    fn degenerate(&self) -> bool {
        self.l <= 0.0 || self.w <= 0.0 || !self.l.is_finite() || !self.w.is_finite()
    }
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Clip a convex polygon against the half-plane left of edge a->b.
fn clip_edge(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let prev = poly[(i + n - 1) % n];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in != prev_in {
            // Segment crosses the edge; add the intersection point.
            let dx = cur[0] - prev[0];
            let dy = cur[1] - prev[1];
            let ex = b[0] - a[0];
            let ey = b[1] - a[1];
            let denom = ex * dy - ey * dx;
            if denom.abs() > 0.0 {
                let t = (ex * (a[1] - prev[1]) - ey * (a[0] - prev[0])) / denom;
                out.push([prev[0] + t * dx, prev[1] + t * dy]);
            }
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

/// Intersection area of two convex CCW polygons (Sutherland-Hodgman).
fn convex_intersection_area(subject: &[[f64; 2]; 4], clipper: &[[f64; 2]; 4]) -> f64 {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, clipper[i], clipper[(i + 1) % 4]);
    }
    shoelace(&poly)
}

/// Total order on boxes used to canonicalize argument order, making the IoU
/// symmetric bit-for-bit.
fn box_key(b: &DetectionBox) -> [f64; 7] {
    [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw]
}

fn bev_intersection(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (first, second) = if box_key(a) <= box_key(b) { (a, b) } else { (b, a) };
    convex_intersection_area(&first.bev_corners(), &second.bev_corners())
}

/// Rotated BEV IoU in [0, 1]; degenerate boxes yield 0.
pub fn bev_rotated_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    if a.degenerate() || b.degenerate() {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection area times z-extent overlap over the volume
/// union.
pub fn iou3d(a: &DetectionBox, b: &DetectionBox) -> f64 {
    if a.degenerate() || b.degenerate() || a.h <= 0.0 || b.h <= 0.0 {
        return 0.0;
    }
    let z_lo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let z_hi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    let z_overlap = (z_hi - z_lo).max(0.0);
    let inter = bev_intersection(a, b) * z_overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Bev,
    ThreeD,
}

pub fn iou_of(kind: IouKind, a: &DetectionBox, b: &DetectionBox) -> f64 {
    match kind {
        IouKind::Bev => bev_rotated_iou(a, b),
        IouKind::ThreeD => iou3d(a, b),
    }
}

/// Precision/recall samples (one per detection, in confidence order) and the
/// R40-interpolated average precision.
#[derive(Debug, Clone)]
pub struct PRCurve {
    /// (precision, recall) after each detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Greedy matching outcome for one detection.
#[derive(Debug, Clone, Copy)]
struct MatchedDet {
    det: usize,
    gt: Option<usize>,
}

/// Greedy confidence-descending matching: each GT is claimed at most once,
/// a detection matches the highest-IoU unclaimed GT of its own class when
/// that IoU reaches the threshold.
fn greedy_match(
    dets: &[DetectionBox],
    gts: &[DetectionBox],
    iou_thresh: f64,
    kind: IouKind,
) -> Vec<MatchedDet> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if claimed[gi] || gt.cls != det.cls {
                continue;
            }
            let iou = iou_of(kind, det, gt);
            if iou >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((gi, iou));
                }
            }
        }
        if let Some((gi, _)) = best {
            claimed[gi] = true;
            out.push(MatchedDet { det: di, gt: Some(gi) });
        } else {
            out.push(MatchedDet { det: di, gt: None });
        }
    }
    out
}

const R40_POSITIONS: usize = 40;

/// AP with precision interpolated at recall levels {1/40, …, 40/40}.
/// Returns None when there is no ground truth (metric undefined).
pub fn ap_r40(
    dets: &[DetectionBox],
    gts: &[DetectionBox],
    iou_thresh: f64,
    kind: IouKind,
) -> Option<PRCurve> {
    if gts.is_empty() {
        return None;
    }
    let matches = greedy_match(dets, gts, iou_thresh, kind);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(matches.len());
    for m in &matches {
        if m.gt.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / gts.len() as f64;
        points.push((precision, recall));
    }

    let mut ap = 0.0;
    for k in 1..=R40_POSITIONS {
        let r = k as f64 / R40_POSITIONS as f64;
        // Interpolated precision: best precision at recall >= r.
        let p = points
            .iter()
            .filter(|&&(_, rec)| rec + 1e-12 >= r)
            .map(|&(p, _)| p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap /= R40_POSITIONS as f64;
    Some(PRCurve { points, ap })
}

/// Per-class AP table plus the mean over classes that have ground truth.
pub fn per_class_ap(
    dets: &[DetectionBox],
    gts: &[DetectionBox],
    iou_thresh: f64,
    kind: IouKind,
) -> (std::collections::BTreeMap<u32, PRCurve>, Option<f64>) {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.cls).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut table = std::collections::BTreeMap::new();
    for cls in classes {
        let d: Vec<DetectionBox> = dets.iter().filter(|b| b.cls == cls).copied().collect();
        let g: Vec<DetectionBox> = gts.iter().filter(|b| b.cls == cls).copied().collect();
        if let Some(curve) = ap_r40(&d, &g, iou_thresh, kind) {
            table.insert(cls, curve);
        }
    }
    let mean = if table.is_empty() {
        None
    } else {
        Some(table.values().map(|c| c.ap).sum::<f64>() / table.len() as f64)
    };
    (table, mean)
}

/// Left-closed distance bucket [lo, hi) over BEV range from the origin.
#[derive(Debug, Clone, Copy)]
pub struct DistanceBucket {
    pub lo: f64,
    pub hi: f64,
}

pub const DEFAULT_BUCKETS: [DistanceBucket; 3] = [
    DistanceBucket { lo: 0.0, hi: 20.0 },
    DistanceBucket { lo: 20.0, hi: 40.0 },
    DistanceBucket {
        lo: 40.0,
        hi: f64::INFINITY,
    },
];

#[derive(Debug, Clone)]
pub struct BucketReport {
    pub bucket: DistanceBucket,
    pub n_gt: usize,
    pub n_det: usize,
    /// None when the bucket holds no ground truth.
    pub ap: Option<f64>,
}

fn bev_range(b: &DetectionBox) -> f64 {
    (b.cx * b.cx + b.cy * b.cy).sqrt()
}

fn bucket_of(buckets: &[DistanceBucket], range: f64) -> Option<usize> {
    buckets.iter().position(|b| range >= b.lo && range < b.hi)
}

/// Partition GT by center distance, assign detections to their matched GT's
/// bucket (unmatched ones to their own center's bucket), and report
/// per-bucket AP(R40).
pub fn distance_bucket_report(
    dets: &[DetectionBox],
    gts: &[DetectionBox],
    buckets: &[DistanceBucket],
    iou_thresh: f64,
    kind: IouKind,
) -> Vec<BucketReport> {
    let matches = greedy_match(dets, gts, iou_thresh, kind);
    let mut det_bucket: Vec<Option<usize>> = vec![None; dets.len()];
    for m in &matches {
        let range = match m.gt {
            Some(gi) => bev_range(&gts[gi]),
            None => bev_range(&dets[m.det]),
        };
        det_bucket[m.det] = bucket_of(buckets, range);
    }
    let gt_bucket: Vec<Option<usize>> = gts
        .iter()
        .map(|g| bucket_of(buckets, bev_range(g)))
        .collect();

    buckets
        .iter()
        .enumerate()
        .map(|(bi, &bucket)| {
            let d: Vec<DetectionBox> = dets
                .iter()
                .zip(&det_bucket)
                .filter(|&(_, b)| *b == Some(bi))
                .map(|(x, _)| *x)
                .collect();
            let g: Vec<DetectionBox> = gts
                .iter()
                .zip(&gt_bucket)
                .filter(|&(_, b)| *b == Some(bi))
                .map(|(x, _)| *x)
                .collect();
            let ap = ap_r40(&d, &g, iou_thresh, kind).map(|c| c.ap);
            BucketReport {
                bucket,
                n_gt: g.len(),
                n_det: d.len(),
                ap,
            }
        })
        .collect()
}

/// Class-wise greedy suppression by BEV IoU, keeping higher scores.
pub fn nms_bev(boxes: &[DetectionBox], iou_thresh: f64) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep: Vec<DetectionBox> = Vec::new();
    for &i in &order {
        let candidate = &boxes[i];
        let suppressed = keep
            .iter()
            .any(|k| k.cls == candidate.cls && bev_rotated_iou(k, candidate) >= iou_thresh);
        if !suppressed {
            keep.push(*candidate);
        }
    }
    keep
}

pub fn read_boxes_json(path: &std::path::Path) -> Result<Vec<DetectionBox>> {
    let text = std::fs::read_to_string(path)?;
    let boxes: Vec<DetectionBox> = serde_json::from_str(&text)?;
    for (i, b) in boxes.iter().enumerate() {
        b.validate()
            .map_err(|e| Error::Config(format!("box {i} in {}: {e}", path.display())))?;
    }
    Ok(boxes)
}

pub fn write_boxes_json(path: &std::path::Path, boxes: &[DetectionBox]) -> Result<()> {
    let text = serde_json::to_string_pretty(boxes)?;
    std::fs::write(path, text)?;
    Ok(())
}
