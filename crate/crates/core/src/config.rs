//! Scenario configuration: TOML schema, defaults and validation.
//!
//! Every section and field is optional; omitted values take the defaults
//! below. `configs/default.toml` spells out the complete schema.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::{ChannelModel, MapEncoding};
use crate::detect::HeadConfig;
use crate::grid::GridSpec;
use crate::gsr::Sharpening;
use crate::objective::LossWeights;
use crate::scene::{CameraConfig, RadarConfig, WorldConfig};
use crate::uac::OracleUac;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-GSR")]
    NoGsr,
    #[serde(rename = "no-CDA-consensus")]
    NoCdaConsensus,
    #[serde(rename = "no-agent-token")]
    NoAgentToken,
    #[serde(rename = "camera-only")]
    CameraOnly,
    #[serde(rename = "radar-only")]
    RadarOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoGsr,
        Variant::NoCdaConsensus,
        Variant::NoAgentToken,
        Variant::CameraOnly,
        Variant::RadarOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGsr => "no-GSR",
            Variant::NoCdaConsensus => "no-CDA-consensus",
            Variant::NoAgentToken => "no-agent-token",
            Variant::CameraOnly => "camera-only",
            Variant::RadarOnly => "radar-only",
        }
    }

    pub fn uses_radar(self) -> bool {
        self != Variant::CameraOnly
    }

    pub fn uses_camera(self) -> bool {
        self != Variant::RadarOnly
    }

    pub fn uses_gsr(self) -> bool {
        !matches!(self, Variant::NoGsr | Variant::CameraOnly | Variant::RadarOnly)
    }

    pub fn uses_consensus(self) -> bool {
        !matches!(self, Variant::NoCdaConsensus | Variant::CameraOnly)
    }

    pub fn uses_agent_token(self) -> bool {
        self != Variant::NoAgentToken
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::UnknownVariant(t.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Hand-set parameters with a known-good response.
    #[default]
    Oracle,
    /// Random parameters drawn from `pipeline.weight_seed`.
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            height: 96,
            width: 96,
            cell_size: 0.4,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec::centered(self.height, self.width, self.cell_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub levels: usize,
    /// Total BEV channels: signature space, one objectness channel, then positional code.
    pub channels: usize,
    pub signature_dim: usize,
    /// One ratio for every level, or one per level.
    pub token_ratios: Vec<f64>,
    pub epsilon: f64,
    pub weights: WeightMode,
    pub weight_seed: u64,
    /// Convex multi-scale weights; empty selects the default for `levels`.
    pub level_weights: Vec<f64>,
    /// Consensus prior of the agent-wise token.
    pub agent_prior: f64,
    pub frames: usize,
    pub frame_interval_ms: i64,
    /// Agents that act as ego.
    pub egos: Vec<u32>,
    pub variant: Variant,
    /// Per link and frame cap in base units; exceeding it is an error.
    pub budget_units: Option<f64>,
    pub map_encoding: MapEncoding,
    /// Sampling points in seeded mode.
    pub gsr_points: usize,
    pub refine_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            levels: 3,
            channels: 32,
            signature_dim: 8,
            token_ratios: vec![0.25],
            epsilon: crate::uac::DEFAULT_EPSILON,
            weights: WeightMode::Oracle,
            weight_seed: 1,
            level_weights: Vec::new(),
            agent_prior: crate::cda::DEFAULT_AGENT_PRIOR,
            frames: 1,
            frame_interval_ms: 100,
            egos: vec![0],
            variant: Variant::Full,
            budget_units: None,
            map_encoding: MapEncoding::F32,
            gsr_points: 4,
            refine_points: 2,
        }
    }
}

impl PipelineConfig {
    pub fn ratio(&self, level: usize) -> f64 {
        if self.token_ratios.len() == 1 {
            self.token_ratios[0]
        } else {
            self.token_ratios[level]
        }
    }

    pub fn level_weights(&self) -> Vec<f64> {
        if self.level_weights.is_empty() {
            crate::cda::default_level_weights(self.levels)
        } else {
            self.level_weights.clone()
        }
    }

    /// Channel index of the objectness channel.
    pub fn objectness(&self) -> usize {
        self.signature_dim
    }

    pub fn positional_dims(&self) -> usize {
        self.channels - self.signature_dim - 1
    }
}

/// Coefficients of the oracle weight mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub value_gain: f32,
    pub psi_gain: f32,
    pub gate_bias: f32,
    /// Width (depth bins) of the radar-anchored depth sharpening.
    pub sharpen_sigma_bins: f64,
    pub sharpen_window_bins: f64,
    pub link_gap_m: f64,
    pub positional_gain: f64,
    pub positional_length_m: f64,
    pub uac: OracleUac,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            value_gain: 100.0,
            psi_gain: 1.0,
            gate_bias: 2.0,
            sharpen_sigma_bins: 1.0,
            sharpen_window_bins: 4.0,
            link_gap_m: 2.5,
            positional_gain: 10.0,
            positional_length_m: 0.6,
            uac: OracleUac::default(),
        }
    }
}

impl OracleConfig {
    pub fn sharpening(&self) -> Sharpening {
        Sharpening {
            sigma_bins: self.sharpen_sigma_bins,
            window_bins: self.sharpen_window_bins,
            link_gap_m: self.link_gap_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub latencies: Vec<f64>,
    pub pose_noises: Vec<f64>,
    pub token_ratios: Vec<f64>,
    pub variants: Vec<Variant>,
    /// Consecutive world seeds averaged per sweep point.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            latencies: vec![0.0, 50.0, 100.0, 150.0, 200.0],
            pose_noises: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            token_ratios: vec![0.25, 0.5, 0.6, 0.75, 1.0],
            variants: Variant::ALL.to_vec(),
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Record elapsed time; off by default so reports are byte-reproducible.
    pub wall_clock: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub world: WorldConfig,
    pub radar: RadarConfig,
    pub camera: CameraConfig,
    pub grid: GridConfig,
    pub pipeline: PipelineConfig,
    pub oracle: OracleConfig,
    pub head: HeadConfig,
    pub channel: ChannelModel,
    pub losses: LossWeights,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

impl ScenarioConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(src).map_err(|e| {
            let loc = e.span().map_or("document".to_string(), |s| {
                let (l, c) = line_col(src, s.start);
                format!("line {l}, column {c}")
            });
            Error::config(loc, e.message().trim().to_string())
        })?;
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let mut loc = if path == "." { String::new() } else { path };
            if let Some(s) = inner.span() {
                let (l, c) = line_col(src, s.start);
                loc = if loc.is_empty() {
                    format!("line {l}, column {c}")
                } else {
                    format!("{loc} (line {l}, column {c})")
                };
            }
            Error::config(if loc.is_empty() { "document".to_string() } else { loc }, inner.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&src)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Checks ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, loc: &str, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(loc, msg))
            }
        }
        fn positive(v: f64, loc: &str) -> Result<()> {
            check(v.is_finite() && v > 0.0, loc, "must be a positive finite number")
        }
        fn non_negative(v: f64, loc: &str) -> Result<()> {
            check(v.is_finite() && v >= 0.0, loc, "must be a non-negative finite number")
        }

        let w = &self.world;
        positive(w.extent, "world.extent")?;
        non_negative(w.speed_min, "world.speed_min")?;
        check(w.speed_max >= w.speed_min && w.speed_max.is_finite(), "world.speed_max", "must be finite and at least world.speed_min")?;
        check(w.agent_count >= 1, "world.agent_count", "at least one agent is required")?;
        non_negative(w.agent_spread, "world.agent_spread")?;
        non_negative(w.min_agent_gap, "world.min_agent_gap")?;
        check(
            w.fov_half_angle > 0.0 && w.fov_half_angle < std::f64::consts::FRAC_PI_2,
            "world.fov_half_angle",
            "must lie in (0, π/2) radians",
        )?;

        non_negative(self.radar.sigma_range, "radar.sigma_range")?;
        non_negative(self.radar.clutter_rate, "radar.clutter_rate")?;
        positive(self.radar.sensing_radius, "radar.sensing_radius")?;

        let c = &self.camera;
        check(c.azimuth_bins >= 1, "camera.azimuth_bins", "must be at least 1")?;
        check(c.depth_bins >= 1, "camera.depth_bins", "must be at least 1")?;
        positive(c.min_depth, "camera.min_depth")?;
        check(c.max_depth > c.min_depth, "camera.max_depth", "must exceed camera.min_depth")?;
        non_negative(c.depth_sigma_ratio, "camera.depth_sigma_ratio")?;

        let g = &self.grid;
        check(g.height >= 1, "grid.height", "must be at least 1")?;
        check(g.width >= 1, "grid.width", "must be at least 1")?;
        check(g.height <= u16::MAX as usize + 1, "grid.height", "row indices must fit in 16 bits")?;
        check(g.width <= u16::MAX as usize + 1, "grid.width", "column indices must fit in 16 bits")?;
        positive(g.cell_size, "grid.cell_size")?;

        let p = &self.pipeline;
        check(p.levels >= 1 && p.levels <= 8, "pipeline.levels", "must lie in 1..=8")?;
        let f = 1usize << (p.levels - 1);
        check(
            g.height % f == 0 && g.width % f == 0,
            "grid",
            &format!("{}x{} cannot be pooled {} times by 2", g.height, g.width, p.levels - 1),
        )?;
        check(p.signature_dim >= 2 && p.signature_dim % 2 == 0, "pipeline.signature_dim", "must be an even number ≥ 2")?;
        check(
            p.channels > p.signature_dim && p.channels <= u16::MAX as usize,
            "pipeline.channels",
            "must exceed pipeline.signature_dim (one objectness channel follows it) and fit in 16 bits",
        )?;
        check(
            p.token_ratios.len() == 1 || p.token_ratios.len() == p.levels,
            "pipeline.token_ratios",
            "needs one entry or one per level",
        )?;
        for (i, r) in p.token_ratios.iter().enumerate() {
            check(*r > 0.0 && *r <= 1.0, &format!("pipeline.token_ratios[{i}]"), "must lie in (0, 1]")?;
        }
        positive(p.epsilon, "pipeline.epsilon")?;
        if !p.level_weights.is_empty() {
            check(p.level_weights.len() == p.levels, "pipeline.level_weights", "needs one entry per level")?;
            for (i, v) in p.level_weights.iter().enumerate() {
                non_negative(*v, &format!("pipeline.level_weights[{i}]"))?;
            }
            check(p.level_weights.iter().sum::<f64>() > 0.0, "pipeline.level_weights", "must not all be zero")?;
        }
        check(p.agent_prior > 0.0 && p.agent_prior < 1.0, "pipeline.agent_prior", "must lie in (0, 1)")?;
        check(p.frames >= 1, "pipeline.frames", "must be at least 1")?;
        check(p.frame_interval_ms >= 0, "pipeline.frame_interval_ms", "must be non-negative")?;
        check(!p.egos.is_empty(), "pipeline.egos", "needs at least one ego agent")?;
        for (i, e) in p.egos.iter().enumerate() {
            check((*e as usize) < w.agent_count, &format!("pipeline.egos[{i}]"), "refers to a missing agent")?;
        }
        if let Some(b) = p.budget_units {
            positive(b, "pipeline.budget_units")?;
        }
        check(p.gsr_points >= 1, "pipeline.gsr_points", "must be at least 1")?;
        check(p.refine_points >= 1, "pipeline.refine_points", "must be at least 1")?;

        let o = &self.oracle;
        positive(o.sharpen_sigma_bins, "oracle.sharpen_sigma_bins")?;
        non_negative(o.sharpen_window_bins, "oracle.sharpen_window_bins")?;
        non_negative(o.link_gap_m, "oracle.link_gap_m")?;
        non_negative(o.positional_gain, "oracle.positional_gain")?;
        positive(o.positional_length_m, "oracle.positional_length_m")?;
        for (v, loc) in [
            (o.value_gain, "oracle.value_gain"),
            (o.psi_gain, "oracle.psi_gain"),
            (o.gate_bias, "oracle.gate_bias"),
        ] {
            check(v.is_finite(), loc, "must be finite")?;
        }

        let h = &self.head;
        check(h.beta.is_finite(), "head.beta", "must be finite")?;
        check(h.score_threshold > 0.0 && h.score_threshold < 1.0, "head.score_threshold", "must lie in (0, 1)")?;
        check((0.0..=1.0).contains(&h.nms_iou), "head.nms_iou", "must lie in [0, 1]")?;

        let ch = &self.channel;
        check(ch.latency_ms >= 0, "channel.latency_ms", "must be non-negative")?;
        non_negative(ch.sigma_xy, "channel.sigma_xy")?;
        non_negative(ch.sigma_yaw, "channel.sigma_yaw")?;
        check((0.0..=1.0).contains(&ch.drop_probability), "channel.drop_probability", "must lie in [0, 1]")?;

        let l = &self.losses;
        for (v, loc) in [
            (l.lambda_reg, "losses.lambda_reg"),
            (l.lambda_dir, "losses.lambda_dir"),
            (l.lambda_dep, "losses.lambda_dep"),
            (l.lambda_geo, "losses.lambda_geo"),
            (l.lambda_uac, "losses.lambda_uac"),
            (l.focal_alpha, "losses.focal_alpha"),
            (l.focal_gamma, "losses.focal_gamma"),
        ] {
            non_negative(v, loc)?;
        }
        if !l.pyramid.is_empty() {
            check(l.pyramid.len() == p.levels, "losses.pyramid", "needs one entry per level")?;
        }

        let s = &self.sweep;
        for (i, v) in s.latencies.iter().enumerate() {
            check(v.is_finite() && *v >= 0.0 && v.fract() == 0.0, &format!("sweep.latencies[{i}]"), "must be a whole number of milliseconds ≥ 0")?;
        }
        for (i, v) in s.pose_noises.iter().enumerate() {
            non_negative(*v, &format!("sweep.pose_noises[{i}]"))?;
        }
        for (i, v) in s.token_ratios.iter().enumerate() {
            check(*v > 0.0 && *v <= 1.0, &format!("sweep.token_ratios[{i}]"), "must lie in (0, 1]")?;
        }
        check(s.seeds >= 1, "sweep.seeds", "must be at least 1")?;
        Ok(())
    }
}
