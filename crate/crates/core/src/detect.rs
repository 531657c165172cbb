//! Matched-filter detection head, anchor decoding and target assignment.

use std::f64::consts::{FRAC_PI_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{nms, normalize_angle, rotated_iou, Detection, OrientedBox, Pose2, DEFAULT_BOX_HEIGHT};
use crate::grid::{BevGrid, GridSpec};
use crate::nn::sigmoid64;
use crate::scene::{SignatureBank, ANCHOR_LENGTH, ANCHOR_WIDTH};
use crate::{Error, Result};

pub const SCORE_THRESHOLD: f64 = 0.10;
pub const NMS_IOU: f64 = 0.05;
pub const MAX_DETECTIONS: usize = 150;
pub const DEFAULT_BETA: f64 = 4.0;
pub const DEFAULT_BIAS: f64 = -2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub yaw_bins: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub stride: usize,
    pub dir_offset: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            yaw_bins: [0.0, FRAC_PI_2],
            length: ANCHOR_LENGTH,
            width: ANCHOR_WIDTH,
            height: DEFAULT_BOX_HEIGHT,
            stride: 2,
            dir_offset: 0.7853,
            positive_iou: 0.6,
            negative_iou: 0.45,
        }
    }
}

impl AnchorConfig {
    pub fn anchor(&self, x: f64, y: f64, bin: usize) -> OrientedBox {
        OrientedBox {
            height: self.height,
            ..OrientedBox::new(x, y, self.length, self.width, self.yaw_bins[bin])
        }
    }

    /// Anchors at every `stride`-th cell center, both yaw bins per location.
    pub fn anchors(&self, spec: &GridSpec) -> Vec<OrientedBox> {
        let mut out = Vec::new();
        for r in (0..spec.height).step_by(self.stride) {
            for c in (0..spec.width).step_by(self.stride) {
                let (x, y) = spec.cell_center(r, c);
                for bin in 0..2 {
                    out.push(self.anchor(x, y, bin));
                }
            }
        }
        out
    }

    /// Two-bin direction class of a heading.
    pub fn direction_class(&self, yaw: f64) -> usize {
        let rot = normalize_angle(yaw - self.dir_offset);
        let k = (rot + PI).div_euclid(PI) as i64;
        k.rem_euclid(2) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub beta: f64,
    /// Added to every logit.
    pub bias: f64,
    /// Weight of the objectness channel in the logit.
    pub objectness_weight: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            beta: DEFAULT_BETA,
            bias: DEFAULT_BIAS,
            objectness_weight: 0.0,
            score_threshold: SCORE_THRESHOLD,
            nms_iou: NMS_IOU,
            max_detections: MAX_DETECTIONS,
        }
    }
}

/// Per-cell scores for the two yaw bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub spec: GridSpec,
    pub scores: Vec<[f64; 2]>,
}

impl ScoreMap {
    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        self.scores[row * self.spec.width + col]
    }
}

/// Strongest template response per cell and yaw bin:
/// `σ(β·max_s⟨f, t(s, bin)⟩ + w_obj·objectness + bias)`.
///
/// Signature features occupy the first `bank.dim` channels; `objectness`
/// names an extra channel read when `objectness_weight ≠ 0`.
pub fn score_map(fused: &BevGrid, bank: &SignatureBank, head: &HeadConfig, objectness: Option<usize>) -> Result<ScoreMap> {
    let c = fused.channels();
    if c < bank.dim || objectness.is_some_and(|o| o >= c) {
        return Err(Error::shape("score_map channels", format!(">= {}", bank.dim), c));
    }
    let sigs = bank.num_signatures();
    let scores = fused
        .data()
        .par_chunks(c)
        .map(|f| {
            let obj = match objectness {
                Some(o) if head.objectness_weight != 0.0 => head.objectness_weight * f[o] as f64,
                _ => 0.0,
            };
            let mut out = [0.0; 2];
            for (bin, o) in out.iter_mut().enumerate() {
                let best = (0..sigs)
                    .map(|s| {
                        bank.template(s, bin)
                            .iter()
                            .zip(f)
                            .map(|(t, v)| *t as f64 * *v as f64)
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                *o = sigmoid64(head.beta * best + obj + head.bias);
            }
            out
        })
        .collect();
    Ok(ScoreMap {
        spec: *fused.spec(),
        scores,
    })
}

/// Thresholds, places anchor-sized boxes at cell centers, suppresses and caps.
/// Boxes are expressed through `pose` (identity keeps the grid frame).
pub fn decode(scores: &ScoreMap, anchors: &AnchorConfig, head: &HeadConfig, pose: &Pose2) -> Vec<Detection> {
    let spec = scores.spec;
    let mut cands = Vec::new();
    for r in 0..spec.height {
        for c in 0..spec.width {
            let s = scores.at(r, c);
            let bin = if s[1] > s[0] { 1 } else { 0 };
            if s[bin] > head.score_threshold {
                let (x, y) = spec.cell_center(r, c);
                let bbox = anchors.anchor(x, y, bin).transformed(pose);
                cands.push(Detection {
                    bbox,
                    score: s[bin],
                    range_m: x.hypot(y),
                });
            }
        }
    }
    nms(&cands, head.nms_iou, head.max_detections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub label: AnchorLabel,
    /// Best-IoU ground truth (recorded for every anchor with any overlap).
    pub gt: Option<usize>,
    pub iou: f64,
}

pub fn assign_targets(anchors: &[OrientedBox], gt: &[OrientedBox], config: &AnchorConfig) -> Vec<Assignment> {
    anchors
        .par_iter()
        .map(|a| {
            let mut best = (None, 0.0f64);
            for (i, g) in gt.iter().enumerate() {
                let iou = rotated_iou(a, g);
                if iou > best.1 {
                    best = (Some(i), iou);
                }
            }
            let label = if best.1 >= config.positive_iou {
                AnchorLabel::Positive
            } else if best.1 <= config.negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            };
            Assignment {
                label,
                gt: best.0,
                iou: best.1,
            }
        })
        .collect()
}
