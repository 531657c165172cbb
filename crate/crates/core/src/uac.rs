//! Demand-driven token selection: confidence, disagreement, demand weights,
//! budgeted top-K, residual refinement and the agent-wise summary token.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::BevGrid;
use crate::nn::{concat_channels, sigmoid, stream_rng, Conv3x3, ConvStack, Dense};
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Refinement offsets are clamped to this many cells.
pub const MAX_REFINE_OFFSET: f32 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UacLevel {
    pub phi_conf: Dense,
    pub phi_diff: Dense,
    pub phi_trust: ConvStack,
    pub refine_offset_net: Dense,
    pub refine_weights: Vec<f32>,
    pub agent_token: Vec<f32>,
    pub w_query: Dense,
    pub w_key: Dense,
    pub w_value: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UacParams {
    pub levels: Vec<UacLevel>,
    pub epsilon: f64,
    pub seed: u64,
}

impl UacLevel {
    pub fn channels(&self) -> usize {
        self.phi_conf.inputs
    }

    pub fn seeded(channels: usize, refine_points: usize, rng: &mut impl rand::Rng) -> Self {
        UacLevel {
            phi_conf: Dense::random(channels, 1, 1.0, rng),
            phi_diff: Dense::random(channels + 2, 1, 1.0, rng),
            phi_trust: ConvStack {
                layers: vec![Conv3x3::random(channels + 1, 4, 1.0, rng), Conv3x3::random(4, 1, 1.0, rng)],
            },
            refine_offset_net: Dense::random(channels, 2 * refine_points, 1.0, rng),
            refine_weights: (0..refine_points).map(|_| rng.random_range(-0.5..0.5)).collect(),
            agent_token: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w_query: Dense::random(channels, channels, 1.0, rng),
            w_key: Dense::random(channels, channels, 1.0, rng),
            w_value: Dense::random(channels, channels, 1.0, rng),
        }
    }
}

/// Hand-set coefficients for the oracle configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleUac {
    /// Confidence logit = `conf_gain · objectness + conf_bias`.
    pub conf_gain: f32,
    pub conf_bias: f32,
    /// Disagreement = `U + diff_source · C_k − 1`.
    pub diff_source: f32,
    /// Trust logit = `trust_gain · D_k + trust_bias` (center tap only).
    pub trust_gain: f32,
    pub trust_bias: f32,
}

impl Default for OracleUac {
    fn default() -> Self {
        OracleUac {
            conf_gain: 10.0,
            conf_bias: -2.0,
            diff_source: 1.5,
            trust_gain: 4.0,
            trust_bias: -2.0,
        }
    }
}

impl UacParams {
    pub fn seeded(channels: usize, levels: usize, refine_points: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x75_6163);
        UacParams {
            levels: (0..levels).map(|_| UacLevel::seeded(channels, refine_points, &mut rng)).collect(),
            epsilon: DEFAULT_EPSILON,
            seed,
        }
    }

    /// Confidence from the objectness channel, disagreement as a confidence
    /// difference, no refinement, and an agent token that averages the
    /// residual features uniformly (zero query).
    pub fn oracle(channels: usize, levels: usize, objectness: usize, coef: &OracleUac) -> Self {
        let level = || {
            let mut phi_conf = Dense::zeros(channels, 1);
            phi_conf.set(0, objectness, coef.conf_gain);
            phi_conf.bias[0] = coef.conf_bias;
            let mut phi_diff = Dense::zeros(channels + 2, 1);
            phi_diff.set(0, channels, 1.0);
            phi_diff.set(0, channels + 1, coef.diff_source);
            phi_diff.bias[0] = -1.0;
            let mut trust = Conv3x3::zeros(channels + 1, 1);
            trust.set_center(0, channels, coef.trust_gain);
            trust.bias[0] = coef.trust_bias;
            UacLevel {
                phi_conf,
                phi_diff,
                phi_trust: ConvStack { layers: vec![trust] },
                refine_offset_net: Dense::zeros(channels, 2),
                refine_weights: vec![0.0],
                agent_token: vec![0.0; channels],
                w_query: Dense::identity(channels, channels, 1.0),
                w_key: Dense::identity(channels, channels, 1.0),
                w_value: Dense::identity(channels, channels, 1.0),
            }
        };
        UacParams {
            levels: (0..levels).map(|_| level()).collect(),
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }

    pub fn level(&self, l: usize) -> Result<&UacLevel> {
        self.levels
            .get(l)
            .ok_or_else(|| Error::shape("uac level", format!("< {}", self.levels.len()), l))
    }
}

/// `σ(Φ_conf(feat))`, one channel.
pub fn confidence_map(feat: &BevGrid, level: &UacLevel) -> Result<BevGrid> {
    if feat.channels() != level.phi_conf.inputs {
        return Err(Error::shape("confidence_map channels", level.phi_conf.inputs, feat.channels()));
    }
    let mut logits = level.phi_conf.apply_grid(feat)?;
    logits.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(logits)
}

/// Per-source demand weights at one level; source 0 is the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<Vec<f64>>,
    /// Per-cell sum of sigmoid trust scores.
    pub trust_sum: Vec<f64>,
    pub epsilon: f64,
}

impl DemandMap {
    pub fn source(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn column_sum(&self, cell: usize) -> f64 {
        self.weights.iter().map(|w| w[cell]).sum()
    }

    pub fn as_grid(&self, k: usize, like: &BevGrid) -> Result<BevGrid> {
        like.with_data(1, self.weights[k].iter().map(|v| *v as f32).collect())
    }
}

/// Trust logits `Φ_trust(ego | D_k)` for every source (ego first).
pub fn trust_logits(ego_feat: &BevGrid, ego_conf: &BevGrid, neighbor_confs: &[&BevGrid], level: &UacLevel) -> Result<Vec<BevGrid>> {
    let (h, w) = (ego_feat.height(), ego_feat.width());
    for g in std::iter::once(ego_conf).chain(neighbor_confs.iter().copied()) {
        if g.height() != h || g.width() != w || g.channels() != 1 {
            return Err(Error::shape(
                "demand_weights alignment",
                format!("{h}x{w}x1"),
                format!("{}x{}x{}", g.height(), g.width(), g.channels()),
            ));
        }
    }
    let mut uncertainty = ego_conf.clone();
    uncertainty.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    let sources: Vec<&BevGrid> = std::iter::once(ego_conf).chain(neighbor_confs.iter().copied()).collect();
    sources
        .iter()
        .map(|c_k| {
            let diff_in = concat_channels(&[ego_feat, &uncertainty, c_k])?;
            let d_k = level.phi_diff.apply_grid(&diff_in)?;
            let trust_in = concat_channels(&[ego_feat, &d_k])?;
            level.phi_trust.forward(&trust_in)
        })
        .collect()
}

/// `W_k = σ(trust_k) / (Σ_m σ(trust_m) + ε)` per cell.
pub fn demand_from_logits(logits: &[BevGrid], epsilon: f64) -> DemandMap {
    let (h, w) = (logits[0].height(), logits[0].width());
    let n = h * w;
    let trust: Vec<Vec<f64>> = logits
        .iter()
        .map(|g| g.data().iter().map(|z| 1.0 / (1.0 + (-(*z as f64)).exp())).collect())
        .collect();
    let trust_sum: Vec<f64> = (0..n).map(|i| trust.iter().map(|t| t[i]).sum()).collect();
    let weights = trust
        .iter()
        .map(|t| t.iter().zip(&trust_sum).map(|(v, s)| v / (s + epsilon)).collect())
        .collect();
    DemandMap {
        height: h,
        width: w,
        weights,
        trust_sum,
        epsilon,
    }
}

pub fn demand_weights(
    ego_feat: &BevGrid,
    ego_conf: &BevGrid,
    neighbor_confs: &[&BevGrid],
    level: &UacLevel,
    epsilon: f64,
) -> Result<DemandMap> {
    let logits = trust_logits(ego_feat, ego_conf, neighbor_confs, level)?;
    Ok(demand_from_logits(&logits, epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSelection {
    pub level: usize,
    pub ratio: f64,
    pub height: usize,
    pub width: usize,
    /// `(row, col)` pairs ordered by descending weight, then ascending row-major index.
    pub indices: Vec<(usize, usize)>,
}

impl TokenSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for (r, c) in &self.indices {
            m[r * self.width + c] = true;
        }
        m
    }
}

/// `⌈ρ·n⌉`, treating products within rounding noise of an integer as that integer.
pub fn token_count(ratio: f64, cells: usize) -> usize {
    let x = ratio * cells as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (cells.max(1) as f64) { r } else { x.ceil() };
    (k.max(0.0) as usize).min(cells)
}

pub fn select_tokens(weights: &[f64], height: usize, width: usize, ratio: f64, level: usize) -> Result<TokenSelection> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Domain {
            context: "token ratio",
            value: ratio,
        });
    }
    if weights.len() != height * width {
        return Err(Error::shape("select_tokens weights", height * width, weights.len()));
    }
    let k = token_count(ratio, height * width);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let cmp = |a: &usize, b: &usize| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(TokenSelection {
        level,
        ratio,
        height,
        width,
        indices: order.into_iter().map(|i| (i / width, i % width)).collect(),
    })
}

fn check_selection(feat: &BevGrid, selection: &TokenSelection) -> Result<()> {
    for &(row, col) in &selection.indices {
        if row >= feat.height() || col >= feat.width() {
            return Err(Error::IndexOutOfBounds {
                row,
                col,
                height: feat.height(),
                width: feat.width(),
            });
        }
    }
    Ok(())
}

/// `F̄(p) = Σ_n v_n · feat(p + δ_n) + feat(p)` for every selected `p`; rows follow the selection order.
pub fn refine_tokens(feat: &BevGrid, selection: &TokenSelection, level: &UacLevel) -> Result<Vec<Vec<f32>>> {
    check_selection(feat, selection)?;
    let points = level.refine_weights.len();
    if level.refine_offset_net.outputs != 2 * points || level.refine_offset_net.inputs != feat.channels() {
        return Err(Error::shape("refine_offset_net", 2 * points, level.refine_offset_net.outputs));
    }
    Ok(selection
        .indices
        .par_iter()
        .map(|&(r, c)| {
            let x = feat.at(r, c);
            let mut out = x.to_vec();
            let offsets = level.refine_offset_net.apply(x);
            for (n, v) in level.refine_weights.iter().enumerate() {
                if *v == 0.0 {
                    continue;
                }
                let dx = offsets[2 * n].clamp(-MAX_REFINE_OFFSET, MAX_REFINE_OFFSET) as f64;
                let dy = offsets[2 * n + 1].clamp(-MAX_REFINE_OFFSET, MAX_REFINE_OFFSET) as f64;
                feat.sample_add(c as f64 + dx, r as f64 + dy, *v, &mut out);
            }
            out
        })
        .collect())
}

/// Attention weights of the agent token over unselected cells (row-major order).
pub fn agent_token_weights(feat: &BevGrid, selection: &TokenSelection, level: &UacLevel) -> Result<Vec<(usize, f64)>> {
    check_selection(feat, selection)?;
    let c = feat.channels();
    if level.agent_token.len() != c {
        return Err(Error::shape("agent token", c, level.agent_token.len()));
    }
    let mask = selection.mask();
    let query = level.w_query.apply(&level.agent_token);
    let scale = 1.0 / (c as f64).sqrt();
    let residual: Vec<usize> = (0..mask.len()).filter(|i| !mask[*i]).collect();
    let logits: Vec<f64> = residual
        .par_iter()
        .map(|&i| {
            let key = level.w_key.apply(&feat.data()[i * c..(i + 1) * c]);
            key.iter().zip(&query).map(|(k, q)| *k as f64 * *q as f64).sum::<f64>() * scale
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(residual.into_iter().zip(exps.into_iter().map(|e| e / total)).collect())
}

/// `e = Attn(a, F_res, F_res)`; the zero vector when every cell is selected.
pub fn agent_token(feat: &BevGrid, selection: &TokenSelection, level: &UacLevel) -> Result<Vec<f32>> {
    let weights = agent_token_weights(feat, selection, level)?;
    let c = feat.channels();
    let mut acc = vec![0.0f64; c];
    for (i, w) in weights {
        let v = level.w_value.apply(&feat.data()[i * c..(i + 1) * c]);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Linear anneal from 1 to `target` over `warm_epochs`, then constant.
pub fn warmup_ratio(epoch: u32, warm_epochs: u32, target: f64) -> f64 {
    if epoch >= warm_epochs {
        target
    } else {
        1.0 - (epoch as f64 / warm_epochs as f64) * (1.0 - target)
    }
}
