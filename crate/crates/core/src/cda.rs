//! Consensus-biased token assembly and demand-weighted fusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{warp_coverage, warp_grid_into, Pose2};
use crate::grid::{BevGrid, GridSpec};
use crate::nn::{sigmoid, stream_rng, Dense};
use crate::scene::{RADAR_CHANNELS, RADAR_OCCUPANCY};
use crate::uac::TokenSelection;
use crate::{Error, Result};

pub const DEFAULT_AGENT_PRIOR: f64 = 0.5;
pub const DEFAULT_LEVEL_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusParams {
    /// Radar channels → one reliability logit.
    pub map: Dense,
}

impl ConsensusParams {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x63_6461);
        ConsensusParams {
            map: Dense::random(RADAR_CHANNELS, 1, 1.0, &mut rng),
        }
    }

    /// `4 · occupancy − 2`.
    pub fn oracle() -> Self {
        let mut map = Dense::zeros(RADAR_CHANNELS, 1);
        map.set(0, RADAR_OCCUPANCY, 4.0);
        map.bias[0] = -2.0;
        ConsensusParams { map }
    }

    pub fn bias(&self) -> f32 {
        self.map.bias[0]
    }
}

/// Reliability in the radar's own frame: `σ(map(f_rad))`.
pub fn consensus_local(f_rad: &BevGrid, params: &ConsensusParams) -> Result<BevGrid> {
    let mut g = params.map.apply_grid(f_rad)?;
    g.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(g)
}

/// Warps a local reliability map into the ego frame; cells that fall
/// outside the source raster take `σ(bias)`.
pub fn align_consensus(local: &BevGrid, bias: f32, src_pose: &Pose2, ego_spec: &GridSpec, ego_pose: &Pose2) -> Result<BevGrid> {
    let mut warped = warp_grid_into(local, src_pose, ego_spec, ego_pose)?;
    let coverage = warp_coverage(local.spec(), src_pose, ego_spec, ego_pose);
    let fill = sigmoid(bias);
    for (v, inside) in warped.data_mut().iter_mut().zip(coverage) {
        if !inside {
            *v = fill;
        }
    }
    Ok(warped)
}

pub fn consensus_map(f_rad: &BevGrid, params: &ConsensusParams, src_pose: &Pose2, ego_pose: &Pose2) -> Result<BevGrid> {
    let local = consensus_local(f_rad, params)?;
    align_consensus(&local, params.bias(), src_pose, f_rad.spec(), ego_pose)
}

/// Stacked tokens (selected cells in selection order, then optionally the agent token) with priors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub channels: usize,
    /// `M × C`, row-major.
    pub rows: Vec<f32>,
    pub prior: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(channels: usize, rows: Vec<f32>, prior: Vec<f64>) -> Result<Self> {
        if channels == 0 || rows.len() != prior.len() * channels {
            return Err(Error::shape("TokenMatrix rows", prior.len() * channels, rows.len()));
        }
        if let Some(g) = prior.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(Error::Domain {
                context: "consensus prior",
                value: *g,
            });
        }
        Ok(TokenMatrix { channels, rows, prior })
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    pub fn row(&self, a: usize) -> &[f32] {
        &self.rows[a * self.channels..(a + 1) * self.channels]
    }
}

/// Builds the stacked matrix from refined tokens, their priors and an optional agent token.
pub fn stack_tokens(tokens: &[Vec<f32>], priors: &[f64], agent: Option<(&[f32], f64)>, channels: usize) -> Result<TokenMatrix> {
    let mut rows = Vec::with_capacity((tokens.len() + 1) * channels);
    for t in tokens {
        if t.len() != channels {
            return Err(Error::shape("token width", channels, t.len()));
        }
        rows.extend_from_slice(t);
    }
    let mut prior = priors.to_vec();
    if let Some((e, g)) = agent {
        rows.extend_from_slice(e);
        prior.push(g);
    }
    TokenMatrix::new(channels, rows, prior)
}

fn attention_row(tokens: &TokenMatrix, a: usize, log_prior: &[f64], scale: f64) -> Vec<f64> {
    let xa = tokens.row(a);
    let logits: Vec<f64> = (0..tokens.len())
        .map(|b| {
            let dot: f32 = xa.iter().zip(tokens.row(b)).map(|(x, y)| x * y).sum();
            dot as f64 * scale + log_prior[b]
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// `log g`, or zeros when the prior is constant (it cancels in the softmax).
fn log_prior(tokens: &TokenMatrix) -> Vec<f64> {
    let first = tokens.prior.first().copied().unwrap_or(1.0);
    if tokens.prior.iter().all(|g| *g == first) {
        vec![0.0; tokens.len()]
    } else {
        tokens.prior.iter().map(|g| g.ln()).collect()
    }
}

/// Full attention matrix `Softmax(XXᵀ/√C + log g)`; intended for small `M`.
pub fn assemble_weights(tokens: &TokenMatrix) -> Vec<Vec<f64>> {
    let scale = 1.0 / (tokens.channels as f64).sqrt();
    let log_prior = log_prior(tokens);
    (0..tokens.len())
        .into_par_iter()
        .map(|a| attention_row(tokens, a, &log_prior, scale))
        .collect()
}

/// `X̂ = Softmax(XXᵀ/√C + log g) · X`.
pub fn assemble_tokens(tokens: &TokenMatrix) -> TokenMatrix {
    let c = tokens.channels;
    let scale = 1.0 / (c as f64).sqrt();
    let log_prior = log_prior(tokens);
    let mut rows = vec![0.0f32; tokens.rows.len()];
    rows.par_chunks_mut(c).enumerate().for_each(|(a, out)| {
        let w = attention_row(tokens, a, &log_prior, scale);
        let mut acc = vec![0.0f64; c];
        for (b, wb) in w.iter().enumerate() {
            if *wb == 0.0 {
                continue;
            }
            for (s, x) in acc.iter_mut().zip(tokens.row(b)) {
                *s += wb * *x as f64;
            }
        }
        for (o, v) in out.iter_mut().zip(acc) {
            *o = v as f32;
        }
    });
    TokenMatrix {
        channels: c,
        rows,
        prior: tokens.prior.clone(),
    }
}

/// One neighbor's contribution at a level.
pub struct NeighborTokens<'a> {
    pub selection: &'a TokenSelection,
    /// Re-aggregated token rows; only the first `selection.len()` rows are placed.
    pub assembled: &'a TokenMatrix,
    pub demand: &'a [f64],
}

/// `out(p) = W_ii(p)·ego(p) + Σ_j W_ij(p)·U_j(p)`; `U_j` is zero off the selection.
pub fn unpack_and_fuse(ego_feat: &BevGrid, neighbors: &[NeighborTokens<'_>], ego_demand: &[f64]) -> Result<BevGrid> {
    let (h, w, c) = (ego_feat.height(), ego_feat.width(), ego_feat.channels());
    if ego_demand.len() != h * w {
        return Err(Error::shape("ego demand", h * w, ego_demand.len()));
    }
    let mut acc: Vec<f64> = ego_feat
        .data()
        .chunks_exact(c)
        .zip(ego_demand)
        .flat_map(|(x, wd)| x.iter().map(move |v| *v as f64 * wd))
        .collect();
    for n in neighbors {
        if n.demand.len() != h * w {
            return Err(Error::shape("neighbor demand", h * w, n.demand.len()));
        }
        if n.assembled.channels != c {
            return Err(Error::shape("neighbor token channels", c, n.assembled.channels));
        }
        if n.assembled.len() < n.selection.len() {
            return Err(Error::shape("assembled rows", n.selection.len(), n.assembled.len()));
        }
        for (t, &(row, col)) in n.selection.indices.iter().enumerate() {
            if row >= h || col >= w {
                return Err(Error::IndexOutOfBounds {
                    row,
                    col,
                    height: h,
                    width: w,
                });
            }
            let i = row * w + col;
            let wd = n.demand[i];
            for (a, x) in acc[i * c..(i + 1) * c].iter_mut().zip(n.assembled.row(t)) {
                *a += wd * *x as f64;
            }
        }
    }
    ego_feat.with_data(c, acc.into_iter().map(|v| v as f32).collect())
}

/// Nearest-neighbor upsampling of every level to level 0, then a convex combination.
pub fn fuse_pyramid(levels: &[BevGrid], weights: &[f64]) -> Result<BevGrid> {
    if levels.is_empty() || weights.len() != levels.len() {
        return Err(Error::shape("fuse_pyramid weights", levels.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Domain {
            context: "pyramid weights",
            value: total,
        });
    }
    let base = &levels[0];
    if levels.len() == 1 {
        return Ok(base.clone());
    }
    let mut acc = vec![0.0f64; base.data().len()];
    for (l, (g, w)) in levels.iter().zip(weights).enumerate() {
        let factor = 1usize << l;
        if g.height() * factor != base.height() || g.width() * factor != base.width() || g.channels() != base.channels() {
            return Err(Error::shape(
                "fuse_pyramid level",
                format!("{}x{}", base.height() / factor, base.width() / factor),
                format!("{}x{}", g.height(), g.width()),
            ));
        }
        let up = g.upsample_nearest(factor);
        let wn = w / total;
        for (a, v) in acc.iter_mut().zip(up.data()) {
            *a += wn * *v as f64;
        }
    }
    base.with_data(base.channels(), acc.into_iter().map(|v| v as f32).collect())
}

/// Default convex weights: the finest-heavy triple for three levels, uniform otherwise.
pub fn default_level_weights(levels: usize) -> Vec<f64> {
    if levels == 3 {
        DEFAULT_LEVEL_WEIGHTS.to_vec()
    } else {
        vec![1.0 / levels as f64; levels]
    }
}
