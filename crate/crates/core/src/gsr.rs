//! Radar-guided lifting of polar camera evidence into the BEV grid.
//!
//! Camera features are gathered at each cell's projection into
//! `(azimuth bin, depth bin)` space, optionally displaced by per-point
//! offsets predicted from radar-initialised queries, and the result is
//! calibrated by a gated radar branch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose2;
use crate::grid::{BevGrid, GridSpec};
use crate::nn::{sigmoid, stream_rng, Conv3x3, ConvStack, Dense};
use crate::scene::{PolarFeatureMap, RadarReturns, RADAR_CHANNELS, RADAR_OCCUPANCY};
use crate::{Error, Result};

/// Offsets are clamped to this many bins along each polar axis.
pub const MAX_OFFSET_BINS: f32 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsrParams {
    pub phi_init: Dense,
    pub offset_net: Dense,
    pub point_weights: Vec<f32>,
    pub value_proj: Dense,
    pub gate_net: ConvStack,
    pub psi: Dense,
    pub num_points: usize,
    pub seed: u64,
}

impl GsrParams {
    /// Random parameters drawn from `seed`; `phi_init` starts at zero.
    pub fn seeded(image_channels: usize, channels: usize, num_points: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x65_7372);
        let offset_net = Dense::random(channels, 2 * num_points, 1.0, &mut rng);
        let value_proj = Dense::random(image_channels, channels, 1.0, &mut rng);
        let hidden = 4;
        let gate_net = ConvStack {
            layers: vec![
                Conv3x3::random(channels, hidden, 1.0, &mut rng),
                Conv3x3::random(hidden, 1, 1.0, &mut rng),
            ],
        };
        let psi = Dense::random(RADAR_CHANNELS, channels, 1.0, &mut rng);
        GsrParams {
            phi_init: Dense::zeros(RADAR_CHANNELS, channels),
            offset_net,
            point_weights: vec![1.0 / num_points as f32; num_points],
            value_proj,
            gate_net,
            psi,
            num_points,
            seed,
        }
    }

    /// Hand-set parameters: `value_proj` copies the image signature space
    /// into the first `image_channels` BEV channels scaled by `value_gain`
    /// and writes the summed template response into `objectness`; `psi`
    /// injects radar occupancy into `objectness`; the gate is a constant
    /// logit `gate_bias`; offsets are zero with a single sampling point.
    pub fn oracle(
        image_channels: usize,
        channels: usize,
        objectness: usize,
        templates: &[Vec<f32>],
        value_gain: f32,
        psi_gain: f32,
        gate_bias: f32,
    ) -> Self {
        let mut value_proj = Dense::identity(image_channels, channels, value_gain);
        for t in templates {
            for (i, v) in t.iter().enumerate() {
                let cur = value_proj.get(objectness, i);
                value_proj.set(objectness, i, cur + value_gain * v);
            }
        }
        let mut psi = Dense::zeros(RADAR_CHANNELS, channels);
        psi.set(objectness, RADAR_OCCUPANCY, psi_gain);
        let mut gate = Conv3x3::zeros(channels, 1);
        gate.bias[0] = gate_bias;
        GsrParams {
            phi_init: Dense::zeros(RADAR_CHANNELS, channels),
            offset_net: Dense::zeros(channels, 2),
            point_weights: vec![1.0],
            value_proj,
            gate_net: ConvStack { layers: vec![gate] },
            psi,
            num_points: 1,
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.value_proj.outputs
    }

    pub fn is_finite(&self) -> bool {
        self.phi_init.is_finite()
            && self.offset_net.is_finite()
            && self.value_proj.is_finite()
            && self.psi.is_finite()
            && self.gate_net.is_finite()
            && self.point_weights.iter().all(|w| w.is_finite())
    }
}

/// `Q = F_cam + Φ_init(D(F_rad))`, pooling the radar grid down to the camera resolution.
pub fn init_queries(f_cam: &BevGrid, f_rad: &BevGrid, params: &GsrParams) -> Result<BevGrid> {
    if f_rad.channels() != params.phi_init.inputs {
        return Err(Error::shape("init_queries radar channels", params.phi_init.inputs, f_rad.channels()));
    }
    if f_cam.channels() != params.phi_init.outputs {
        return Err(Error::shape("init_queries camera channels", params.phi_init.outputs, f_cam.channels()));
    }
    let pooled;
    let rad = if f_rad.height() == f_cam.height() && f_rad.width() == f_cam.width() {
        f_rad
    } else {
        let factor = f_rad.height() / f_cam.height().max(1);
        if factor == 0 || f_rad.height() != factor * f_cam.height() || f_rad.width() != factor * f_cam.width() {
            return Err(Error::shape(
                "init_queries grid",
                format!("{}x{}", f_cam.height(), f_cam.width()),
                format!("{}x{}", f_rad.height(), f_rad.width()),
            ));
        }
        pooled = f_rad.downsample(factor)?;
        &pooled
    };
    let mut q = params.phi_init.apply_grid(rad)?;
    for (o, c) in q.data_mut().iter_mut().zip(f_cam.data()) {
        *o += c;
    }
    f_cam.with_data(q.channels(), q.into_data())
}

/// `F3D(a, d) = depth_prob(a, d) · value_proj(features(a, d))`, sampled bilinearly.
#[derive(Debug, Clone)]
pub struct F3d {
    /// Rows are azimuth bins, columns depth bins.
    pub values: BevGrid,
    pub fov_half_angle: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

pub fn build_f3d(polar: &PolarFeatureMap, params: &GsrParams) -> Result<F3d> {
    if polar.channels != params.value_proj.inputs {
        return Err(Error::shape("build_f3d image channels", params.value_proj.inputs, polar.channels));
    }
    let c = params.value_proj.outputs;
    let (na, nd) = (polar.azimuth_bins, polar.depth_bins);
    let mut data = vec![0.0f32; na * nd * c];
    data.par_chunks_mut(nd * c).enumerate().for_each(|(a, row)| {
        let mut buf = vec![0.0f32; c];
        for d in 0..nd {
            let p = polar.prob(a, d);
            if p == 0.0 {
                continue;
            }
            params.value_proj.apply_into(polar.feature(a, d), &mut buf);
            for (o, v) in row[d * c..(d + 1) * c].iter_mut().zip(&buf) {
                *o = p * v;
            }
        }
    });
    Ok(F3d {
        values: BevGrid::from_data(GridSpec::centered(na, nd, 1.0), c, data)?,
        fov_half_angle: polar.fov_half_angle,
        min_depth: polar.min_depth,
        max_depth: polar.max_depth,
    })
}

impl F3d {
    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    /// Value at continuous `(azimuth, depth)` bin coordinates; zero outside the node hull.
    pub fn sample(&self, a: f64, d: f64) -> Vec<f32> {
        self.values.bilinear_sample(d, a)
    }

    pub fn sample_add(&self, a: f64, d: f64, weight: f32, out: &mut [f32]) {
        self.values.sample_add(d, a, weight, out);
    }

    /// Continuous bin coordinate of a camera-frame point, or `None` behind
    /// the camera or outside the field of view. Range is not clipped here.
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if x <= 0.0 {
            return None;
        }
        let th = y.atan2(x);
        if th.abs() > self.fov_half_angle {
            return None;
        }
        let (na, nd) = (self.values.height() as f64, self.values.width() as f64);
        let step = 2.0 * self.fov_half_angle / na;
        let log_ratio = (self.max_depth / self.min_depth).ln() / nd;
        let r = x.hypot(y);
        let a = (th + self.fov_half_angle) / step - 0.5;
        let d = (r / self.min_depth).ln() / log_ratio - 0.5;
        Some((a, d))
    }
}

/// Deformable gather of `F3D` at every cell of `spec`.
///
/// With `queries == None` every cell samples its reference projection once
/// with unit weight (plain camera lifting).
pub fn rectify(
    queries: Option<&BevGrid>,
    spec: &GridSpec,
    f3d: &F3d,
    camera_pose: &Pose2,
    params: &GsrParams,
) -> Result<BevGrid> {
    let c = f3d.channels();
    if let Some(q) = queries {
        if q.channels() != params.offset_net.inputs {
            return Err(Error::shape("rectify query channels", params.offset_net.inputs, q.channels()));
        }
        if q.height() != spec.height || q.width() != spec.width {
            return Err(Error::shape(
                "rectify query grid",
                format!("{}x{}", spec.height, spec.width),
                format!("{}x{}", q.height(), q.width()),
            ));
        }
        if params.point_weights.len() != params.num_points || params.offset_net.outputs != 2 * params.num_points {
            return Err(Error::shape("rectify sampling points", params.num_points, params.point_weights.len()));
        }
    }
    let to_cam = camera_pose.inverse();
    let mut data = vec![0.0f32; spec.cells() * c];
    data.par_chunks_mut(spec.width * c).enumerate().for_each(|(r, row)| {
        let mut offsets = vec![0.0f32; params.offset_net.outputs];
        for col in 0..spec.width {
            let (x, y) = spec.cell_center(r, col);
            let (cx, cy) = to_cam.apply(x, y);
            let Some((a, d)) = f3d.project(cx, cy) else { continue };
            let out = &mut row[col * c..(col + 1) * c];
            match queries {
                None => f3d.sample_add(a, d, 1.0, out),
                Some(q) => {
                    params.offset_net.apply_into(q.at(r, col), &mut offsets);
                    for (n, w) in params.point_weights.iter().enumerate() {
                        let da = offsets[2 * n].clamp(-MAX_OFFSET_BINS, MAX_OFFSET_BINS) as f64;
                        let dd = offsets[2 * n + 1].clamp(-MAX_OFFSET_BINS, MAX_OFFSET_BINS) as f64;
                        f3d.sample_add(a + da, d + dd, *w, out);
                    }
                }
            }
        }
    });
    BevGrid::from_data(*spec, c, data)
}

/// `F̃ = F_rect + σ(G(F_rect)) · Ψ(F_rad)` with a scalar gate per cell.
pub fn gated_calibrate(f_rect: &BevGrid, f_rad: &BevGrid, params: &GsrParams) -> Result<BevGrid> {
    let gate = gate_logits(f_rect, params)?;
    calibrate_with_gate(f_rect, f_rad, &gate, params)
}

pub fn gate_logits(f_rect: &BevGrid, params: &GsrParams) -> Result<BevGrid> {
    if params.gate_net.outputs() != 1 {
        return Err(Error::shape("gate_net outputs", 1, params.gate_net.outputs()));
    }
    params.gate_net.forward(f_rect)
}

/// Calibration with externally supplied gate logits (one channel).
pub fn calibrate_with_gate(f_rect: &BevGrid, f_rad: &BevGrid, gate: &BevGrid, params: &GsrParams) -> Result<BevGrid> {
    if f_rad.height() != f_rect.height() || f_rad.width() != f_rect.width() {
        return Err(Error::shape(
            "gated_calibrate grid",
            format!("{}x{}", f_rect.height(), f_rect.width()),
            format!("{}x{}", f_rad.height(), f_rad.width()),
        ));
    }
    let radar = params.psi.apply_grid(f_rad)?;
    if radar.channels() != f_rect.channels() {
        return Err(Error::shape("gated_calibrate channels", f_rect.channels(), radar.channels()));
    }
    let c = f_rect.channels();
    let mut out = f_rect.clone();
    out.data_mut()
        .par_chunks_mut(c)
        .zip(radar.data().par_chunks(c))
        .zip(gate.data().par_iter())
        .for_each(|((o, r), g)| {
            let s = sigmoid(*g);
            for (ov, rv) in o.iter_mut().zip(r) {
                *ov += s * rv;
            }
        });
    Ok(out)
}

/// Longest range span (m) one object's returns can cover.
pub const MAX_CHAIN_EXTENT_M: f64 = 4.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sharpening {
    /// Width of the radar Gaussian in depth bins.
    pub sigma_bins: f64,
    /// Half-width of the azimuth window collecting returns, in columns.
    pub window_bins: f64,
    /// Largest range gap (m) between consecutive returns of one cluster.
    pub link_gap_m: f64,
}

/// Oracle depth sharpening. Returns within `window_bins` columns are sorted
/// by range and chained while gaps stay under `link_gap_m`. The chain holding
/// the return closest to the column's mode is cut at its widest gap until it
/// spans at most [`MAX_CHAIN_EXTENT_M`]; the midpoint of its extremes gives a
/// range, and the column is multiplied by a Gaussian there and renormalised.
pub fn sharpen_depth(polar: &PolarFeatureMap, radar: &RadarReturns, sh: &Sharpening) -> PolarFeatureMap {
    let (sigma_bins, cluster_radius) = (sh.sigma_bins, sh.link_gap_m);
    let mut out = polar.clone();
    let step = polar.azimuth_step();
    let log_ratio = (polar.max_depth / polar.min_depth).ln() / polar.depth_bins as f64;
    let coords: Vec<(f64, f64)> = radar
        .points
        .iter()
        .filter(|p| p.x > 0.0)
        .map(|p| {
            let th = p.y.atan2(p.x);
            ((th + polar.fov_half_angle) / step - 0.5, p.x.hypot(p.y))
        })
        .collect();
    let nd = polar.depth_bins;
    for a in 0..polar.azimuth_bins {
        let near: Vec<f64> = coords
            .iter()
            .filter(|(pa, r)| (pa - a as f64).abs() <= sh.window_bins && *r >= polar.min_depth && *r <= polar.max_depth)
            .map(|(_, r)| *r)
            .collect();
        if near.is_empty() {
            continue;
        }
        let column = polar.column_prob(a);
        let mode = column
            .iter()
            .enumerate()
            .fold((0usize, f32::MIN), |best, (k, p)| if *p > best.1 { (k, *p) } else { best })
            .0;
        let mode_range = polar.depth_center(mode);
        let anchor = near
            .iter()
            .copied()
            .fold(f64::NAN, |best, r| if best.is_nan() || (r - mode_range).abs() < (best - mode_range).abs() { r } else { best });
        let mut sorted = near.clone();
        sorted.sort_by(f64::total_cmp);
        let i = sorted.iter().position(|r| *r == anchor).unwrap_or(0);
        let mut lo = i;
        while lo > 0 && sorted[lo] - sorted[lo - 1] <= cluster_radius {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < sorted.len() && sorted[hi + 1] - sorted[hi] <= cluster_radius {
            hi += 1;
        }
        while sorted[hi] - sorted[lo] > MAX_CHAIN_EXTENT_M {
            let cut = (lo..hi).max_by(|&x, &y| (sorted[x + 1] - sorted[x]).total_cmp(&(sorted[y + 1] - sorted[y]))).unwrap();
            if cut < i {
                lo = cut + 1;
            } else {
                hi = cut;
            }
        }
        let cluster = &sorted[lo..=hi];
        let range = 0.5 * (cluster[0] + cluster[cluster.len() - 1]);
        let center = (range / polar.min_depth).ln() / log_ratio - 0.5;
        let gauss: Vec<f64> = (0..nd)
            .map(|k| (-0.5 * ((k as f64 - center) / sigma_bins).powi(2)).exp())
            .collect();
        let col = out.column_prob_mut(a);
        let mut total = 0.0f64;
        let mut prod: Vec<f64> = col.iter().zip(&gauss).map(|(p, g)| *p as f64 * g).collect();
        total += prod.iter().sum::<f64>();
        if total <= 1e-30 {
            prod = gauss.clone();
            total = prod.iter().sum();
        }
        for (c, v) in col.iter_mut().zip(&prod) {
            *c = (v / total) as f32;
        }
    }
    out
}

/// Intermediate products of one GSR pass.
#[derive(Debug, Clone)]
pub struct GsrStages {
    pub f_cam: BevGrid,
    pub queries: BevGrid,
    pub rectified: BevGrid,
    pub calibrated: BevGrid,
}

/// Full pass: plain lifting, query initialisation, deformable gather, gated calibration.
pub fn run_gsr(polar: &PolarFeatureMap, f_rad: &BevGrid, camera_pose: &Pose2, params: &GsrParams) -> Result<GsrStages> {
    let spec = *f_rad.spec();
    let f3d = build_f3d(polar, params)?;
    let f_cam = rectify(None, &spec, &f3d, camera_pose, params)?;
    let queries = init_queries(&f_cam, f_rad, params)?;
    let rectified = rectify(Some(&queries), &spec, &f3d, camera_pose, params)?;
    let calibrated = gated_calibrate(&rectified, f_rad, params)?;
    Ok(GsrStages {
        f_cam,
        queries,
        rectified,
        calibrated,
    })
}
