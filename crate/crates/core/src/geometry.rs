//! Planar rigid transforms, grid warping and oriented-box overlap.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{BevGrid, GridSpec};
use crate::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the open end.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// SE(2) pose: a point `p` in the local frame maps to `R(yaw) p + (x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 { x: 0.0, y: 0.0, yaw: 0.0 };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    /// `a ∘ b`: first apply `b`, then `a`.
    pub fn compose(&self, b: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(self.x + c * b.x - s * b.y, self.y + s * b.x + c * b.y, self.yaw + b.yaw)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Pose of `to` expressed in the frame of `self`; `self ∘ relative = to`.
    pub fn relative(&self, to: &Pose2) -> Pose2 {
        self.inverse().compose(to)
    }

    #[inline]
    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    pub fn approx_eq(&self, other: &Pose2, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && normalize_angle(self.yaw - other.yaw).abs() <= tol
    }
}

pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn inverse(p: &Pose2) -> Pose2 {
    p.inverse()
}

pub fn relative(from: &Pose2, to: &Pose2) -> Pose2 {
    from.relative(to)
}

pub const DEFAULT_BOX_HEIGHT: f64 = 1.56;

/// BEV rectangle; `length` runs along `yaw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub height: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        assert!(length > 0.0 && width > 0.0, "box dimensions must be positive");
        OrientedBox {
            cx,
            cy,
            length,
            width,
            yaw,
            height: DEFAULT_BOX_HEIGHT,
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let pt = |u: f64, v: f64| (self.cx + c * u - s * v, self.cy + s * u + c * v);
        // counter-clockwise
        [pt(hl, hw), pt(-hl, hw), pt(-hl, -hw), pt(hl, -hw)]
    }

    /// Same box expressed after applying `pose` to its frame.
    pub fn transformed(&self, pose: &Pose2) -> OrientedBox {
        let (x, y) = pose.apply(self.cx, self.cy);
        OrientedBox {
            cx: x,
            cy: y,
            yaw: normalize_angle(self.yaw + pose.yaw),
            ..*self
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        self.contains_inflated(px, py, 0.0)
    }

    /// Point-in-box test against the box grown by `margin` on every side.
    pub fn contains_inflated(&self, px: f64, py: f64, margin: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.length / 2.0 + margin && v.abs() <= self.width / 2.0 + margin
    }

    fn circumradius(&self) -> f64 {
        0.5 * (self.length * self.length + self.width * self.width).sqrt()
    }
}

/// A scored box in some agent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub score: f64,
    pub range_m: f64,
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc.abs()
}

/// Clips a polygon against the convex, counter-clockwise `clip` polygon.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Intersection area of two oriented boxes.
pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);
    let r = a.circumradius() + b.circumradius();
    if d2 >= r * r {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.corners(), &b.corners()))
}

/// BEV intersection-over-union of two oriented boxes.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS returning kept indices into `dets`.
///
/// Candidates are visited by descending score (ties: ascending index); a
/// candidate is dropped when its IoU with any kept box exceeds the threshold.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|&k| rotated_iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    nms_indices(dets, iou_threshold, max_keep)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Resamples `src` (living in `src_pose`'s frame) onto `dst_spec` in `dst_pose`'s frame.
pub fn warp_grid_into(src: &BevGrid, src_pose: &Pose2, dst_spec: &GridSpec, dst_pose: &Pose2) -> Result<BevGrid> {
    if (src.cell_size() - dst_spec.cell_size).abs() > 1e-12 {
        return Err(Error::CellSizeMismatch {
            src: src.cell_size(),
            dst: dst_spec.cell_size,
        });
    }
    let rel = src_pose.relative(dst_pose);
    let ch = src.channels();
    let sspec = *src.spec();
    let mut out = BevGrid::zeros(*dst_spec, ch);
    out.data_mut()
        .par_chunks_mut(dst_spec.width * ch)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..dst_spec.width {
                let (px, py) = dst_spec.cell_center(r, c);
                let (qx, qy) = rel.apply(px, py);
                let (sx, sy) = sspec.to_cell(qx, qy);
                src.sample_into(sx, sy, &mut row[c * ch..(c + 1) * ch]);
            }
        });
    Ok(out)
}

/// Warps `src` into the frame of `dst_pose`, keeping its raster geometry.
pub fn warp_grid(src: &BevGrid, src_pose: &Pose2, dst_pose: &Pose2) -> BevGrid {
    warp_grid_into(src, src_pose, src.spec(), dst_pose).expect("identical cell sizes")
}

/// Mask of destination cells whose warped center lands inside the source hull.
pub fn warp_coverage(src_spec: &GridSpec, src_pose: &Pose2, dst_spec: &GridSpec, dst_pose: &Pose2) -> Vec<bool> {
    let rel = src_pose.relative(dst_pose);
    let mut mask = Vec::with_capacity(dst_spec.cells());
    for r in 0..dst_spec.height {
        for c in 0..dst_spec.width {
            let (px, py) = dst_spec.cell_center(r, c);
            let (qx, qy) = rel.apply(px, py);
            let (sx, sy) = src_spec.to_cell(qx, qy);
            mask.push(sx >= 0.0 && sy >= 0.0 && sx <= (src_spec.width - 1) as f64 && sy <= (src_spec.height - 1) as f64);
        }
    }
    mask
}
