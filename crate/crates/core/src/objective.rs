//! Forward-only loss evaluators and detection metrics.

use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_iou, Detection, OrientedBox};
use crate::{Error, Result};

pub const LAMBDA_REG: f64 = 2.0;
pub const LAMBDA_DIR: f64 = 0.2;
pub const LAMBDA_DEP: f64 = 10.0;
pub const LAMBDA_GEO: f64 = 0.1;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const RANGE_BINS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 50.0), (50.0, 100.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_dir: f64,
    pub lambda_dep: f64,
    pub lambda_geo: f64,
    pub lambda_uac: f64,
    /// Per-level weights; empty means uniform `1/L`.
    pub pyramid: Vec<f64>,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: LAMBDA_REG,
            lambda_dir: LAMBDA_DIR,
            lambda_dep: LAMBDA_DEP,
            lambda_geo: LAMBDA_GEO,
            lambda_uac: 1.0,
            pyramid: Vec::new(),
            focal_alpha: FOCAL_ALPHA,
            focal_gamma: FOCAL_GAMMA,
        }
    }
}

impl LossWeights {
    pub fn level_weight(&self, level: usize, levels: usize) -> f64 {
        if self.pyramid.is_empty() {
            1.0 / levels as f64
        } else {
            self.pyramid.get(level).copied().unwrap_or(0.0)
        }
    }
}

/// Binary focal loss; `p` must lie strictly inside (0, 1).
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain { context: "focal_loss", value: p });
    }
    Ok(focal_raw(p, positive, alpha, gamma))
}

fn focal_raw(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal loss with the probability clamped to `[δ, 1 − δ]`.
pub fn focal_clamped(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    focal_raw(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP), positive, alpha, gamma)
}

/// `1 − 2Σpq / (Σp + Σq + 1)`.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("dice_loss", pred.len(), target.len()));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, q)| p * q).sum();
    let sp: f64 = pred.iter().sum();
    let sq: f64 = target.iter().sum();
    Ok(1.0 - 2.0 * inter / (sp + sq + DICE_SMOOTH))
}

/// Mean clamped focal loss over cells plus dice.
pub fn focal_dice(pred: &[f64], target: &[f64], weights: &LossWeights) -> Result<f64> {
    if pred.is_empty() {
        return Ok(0.0);
    }
    let dice = dice_loss(pred, target)?;
    let focal = pred
        .iter()
        .zip(target)
        .map(|(p, t)| focal_clamped(*p, *t >= 0.5, weights.focal_alpha, weights.focal_gamma))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(focal + dice)
}

fn bce(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub total: f64,
}

/// Per-anchor inputs: classification probability, direction probability of
/// class 1, target direction class and assignment label.
pub fn detection_loss(
    cls_prob: &[f64],
    dir_prob: &[f64],
    dir_target: &[usize],
    labels: &[crate::detect::AnchorLabel],
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    use crate::detect::AnchorLabel;
    let n = labels.len();
    if cls_prob.len() != n || dir_prob.len() != n || dir_target.len() != n {
        return Err(Error::shape("detection_loss inputs", n, cls_prob.len().min(dir_prob.len()).min(dir_target.len())));
    }
    let (mut cls_sum, mut cls_n, mut dir_sum, mut dir_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        match labels[i] {
            AnchorLabel::Positive => {
                cls_sum += focal_clamped(cls_prob[i], true, weights.focal_alpha, weights.focal_gamma);
                cls_n += 1;
                dir_sum += bce(dir_prob[i], dir_target[i] == 1);
                dir_n += 1;
            }
            AnchorLabel::Negative => {
                cls_sum += focal_clamped(cls_prob[i], false, weights.focal_alpha, weights.focal_gamma);
                cls_n += 1;
            }
            AnchorLabel::Ignored => {}
        }
    }
    let cls = if cls_n > 0 { cls_sum / cls_n as f64 } else { 0.0 };
    let dir = if dir_n > 0 { dir_sum / dir_n as f64 } else { 0.0 };
    let reg = 0.0;
    Ok(DetectionLoss {
        cls,
        reg,
        dir,
        total: cls + weights.lambda_reg * reg + weights.lambda_dir * dir,
    })
}

/// Inputs of one pyramid level; every map is flattened row-major.
#[derive(Debug, Clone, Copy)]
pub struct UacLevelInputs<'a> {
    /// Each agent's confidence and occupancy in its own frame.
    pub local: &'a [(&'a [f64], &'a [f64])],
    /// Ego-aligned confidences, ego first, paired with demand weights.
    pub aligned: &'a [(&'a [f64], &'a [f64])],
    /// Ego-aligned consensus maps.
    pub consensus: &'a [&'a [f64]],
    pub ego_occupancy: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UacLoss {
    pub occ_s: f64,
    pub occ_c: f64,
    pub geo: f64,
    pub total: f64,
}

/// `Σ_l ω_l (L_occ-s + L_occ-c + λ_geo·L_geo)`; per-agent and per-map terms are averaged.
pub fn uac_loss(levels: &[UacLevelInputs<'_>], weights: &LossWeights) -> Result<UacLoss> {
    let mut out = UacLoss {
        occ_s: 0.0,
        occ_c: 0.0,
        geo: 0.0,
        total: 0.0,
    };
    for (l, lvl) in levels.iter().enumerate() {
        let n = lvl.ego_occupancy.len();
        let mut occ_s = 0.0;
        for (conf, occ) in lvl.local {
            occ_s += focal_dice(conf, occ, weights)?;
        }
        if !lvl.local.is_empty() {
            occ_s /= lvl.local.len() as f64;
        }
        let mut collab = vec![0.0; n];
        for (conf, demand) in lvl.aligned {
            if conf.len() != n || demand.len() != n {
                return Err(Error::shape("uac_loss aligned level", n, conf.len().min(demand.len())));
            }
            for i in 0..n {
                collab[i] += demand[i] * conf[i];
            }
        }
        let occ_c = if lvl.aligned.is_empty() { 0.0 } else { focal_dice(&collab, lvl.ego_occupancy, weights)? };
        let mut geo = 0.0;
        for g in lvl.consensus {
            geo += focal_dice(g, lvl.ego_occupancy, weights)?;
        }
        if !lvl.consensus.is_empty() {
            geo /= lvl.consensus.len() as f64;
        }
        let w = weights.level_weight(l, levels.len());
        out.occ_s += w * occ_s;
        out.occ_c += w * occ_c;
        out.geo += w * geo;
        out.total += w * (occ_s + occ_c + weights.lambda_geo * geo);
    }
    Ok(out)
}

/// Mean multi-class focal loss `−α(1 − p_t)^γ log p_t` over labelled columns
/// of softmaxed `columns × bins` logits. Zero when no column is labelled.
pub fn depth_loss(logits: &[f64], bins: usize, labels: &[Option<usize>], weights: &LossWeights) -> Result<f64> {
    if bins == 0 || logits.len() != labels.len() * bins {
        return Err(Error::shape("depth_loss logits", labels.len() * bins, logits.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, label) in labels.iter().enumerate() {
        let Some(k) = *label else { continue };
        if k >= bins {
            return Err(Error::InvalidBin { column: a, bin: k, bins });
        }
        let col = &logits[a * bins..(a + 1) * bins];
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
        let p = (col[k] - max).exp() / z;
        sum += focal_clamped(p, true, weights.focal_alpha, weights.focal_gamma);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Greedy one-to-one matching in descending score order (ties by index):
/// each prediction takes the unmatched ground truth of highest IoU, if that
/// IoU reaches `t`. Returns the matched ground truth per prediction.
pub fn match_predictions(preds: &[Detection], gt: &[OrientedBox], t: f64) -> Result<Vec<Option<usize>>> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Domain {
            context: "IoU threshold",
            value: t,
        });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = rotated_iou(&preds[i].bbox, gb);
            if iou >= t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub value: f64,
    pub matched: usize,
    pub predictions: usize,
    /// Set when there were no predictions (the value is then 0).
    pub empty: bool,
}

pub fn acc_at_t(preds: &[Detection], gt: &[OrientedBox], t: f64) -> Result<Accuracy> {
    let m = match_predictions(preds, gt, t)?;
    let matched = m.iter().filter(|x| x.is_some()).count();
    Ok(Accuracy {
        value: if preds.is_empty() { 0.0 } else { matched as f64 / preds.len() as f64 },
        matched,
        predictions: preds.len(),
        empty: preds.is_empty(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub bins: Vec<(f64, f64)>,
    pub per_bin: Vec<Counts>,
    pub overall: Counts,
}

impl Confusion {
    pub fn empty(bins: &[(f64, f64)]) -> Self {
        Confusion {
            bins: bins.to_vec(),
            per_bin: vec![Counts::default(); bins.len()],
            overall: Counts::default(),
        }
    }

    pub fn add(&mut self, other: &Confusion) {
        for (a, b) in self.per_bin.iter_mut().zip(&other.per_bin) {
            a.add(b);
        }
        self.overall.add(&other.overall);
    }

    fn bin_of(&self, range: f64) -> Option<usize> {
        self.bins.iter().position(|(lo, hi)| range >= *lo && range < *hi)
    }
}

/// TP/FP binned by prediction range, FN by ground-truth range (ground truth
/// in the ego frame, so its range is the center distance from the origin).
pub fn confusion(preds: &[Detection], gt: &[OrientedBox], t: f64, bins: &[(f64, f64)]) -> Result<Confusion> {
    let m = match_predictions(preds, gt, t)?;
    let mut table = Confusion::empty(bins);
    let mut gt_hit = vec![false; gt.len()];
    for (p, g) in preds.iter().zip(&m) {
        let slot = table.bin_of(p.range_m);
        match g {
            Some(g) => {
                gt_hit[*g] = true;
                table.overall.tp += 1;
                if let Some(b) = slot {
                    table.per_bin[b].tp += 1;
                }
            }
            None => {
                table.overall.fp += 1;
                if let Some(b) = slot {
                    table.per_bin[b].fp += 1;
                }
            }
        }
    }
    for (g, hit) in gt.iter().zip(gt_hit) {
        if !hit {
            table.overall.fn_ += 1;
            if let Some(b) = table.bin_of(g.cx.hypot(g.cy)) {
                table.per_bin[b].fn_ += 1;
            }
        }
    }
    Ok(table)
}
