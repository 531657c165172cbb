//! Seeded synthetic worlds and the sensor proxies that observe them.
//!
//! Every random draw comes from a counter-based stream keyed by
//! `(seed, purpose, entity)`, so sensing agents in any order or in parallel
//! gives identical bytes.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{intersection_area, OrientedBox, Pose2};
use crate::grid::{BevGrid, GridSpec};
use crate::nn::stream_rng;
use crate::{Error, Result};

pub const ANCHOR_LENGTH: f64 = 3.9;
pub const ANCHOR_WIDTH: f64 = 1.6;
pub const PLACEMENT_ATTEMPTS: usize = 1000;
/// Margin used for the radar containment invariant.
pub const RADAR_CONTAINMENT_MARGIN: f64 = 0.3;

const TAG_PLACE: u64 = 0x01;
const TAG_AGENT: u64 = 0x02;
const TAG_RADAR: u64 = 0x03;
const TAG_BANK: u64 = 0x04;

/// splitmix64 finaliser folded over `parts`.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Side of the square region (meters, centered on the origin) holding objects.
    pub extent: f64,
    pub object_count: usize,
    /// Object speed range (m/s); objects move along their heading.
    pub speed_min: f64,
    pub speed_max: f64,
    pub agent_count: usize,
    /// Neighbours are placed in `[-spread, spread] × [-spread/2, spread/2]`.
    pub agent_spread: f64,
    pub min_agent_gap: f64,
    pub fov_half_angle: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            extent: 64.0,
            object_count: 24,
            speed_min: 2.0,
            speed_max: 15.0,
            agent_count: 3,
            agent_spread: 20.0,
            min_agent_gap: 8.0,
            fov_half_angle: PI / 3.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u32,
    /// Footprint at t = 0.
    pub bbox: OrientedBox,
    /// World-frame velocity (m/s).
    pub velocity: [f64; 2],
    pub signature: usize,
}

impl WorldObject {
    pub fn box_at(&self, time_ms: i64) -> OrientedBox {
        let t = time_ms as f64 / 1000.0;
        OrientedBox {
            cx: self.bbox.cx + self.velocity[0] * t,
            cy: self.bbox.cy + self.velocity[1] * t,
            ..self.bbox
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub pose: Pose2,
    pub fov_half_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub objects: Vec<WorldObject>,
    pub agents: Vec<Agent>,
    pub extent: f64,
    pub rng_seed: u64,
    pub num_signatures: usize,
}

impl World {
    /// Object footprints at `time_ms`, expressed in `frame`.
    pub fn boxes_in_frame(&self, time_ms: i64, frame: &Pose2) -> Vec<(u32, OrientedBox)> {
        let inv = frame.inverse();
        self.objects
            .iter()
            .map(|o| (o.id, o.box_at(time_ms).transformed(&inv)))
            .collect()
    }

    pub fn agent(&self, id: u32) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }
}

/// Places agents and then non-overlapping objects.
pub fn generate_world(config: &WorldConfig, num_signatures: usize) -> Result<World> {
    if config.agent_count == 0 {
        return Err(Error::config("world.agent_count", "at least one agent is required"));
    }
    let seed = config.seed;
    let mut agents = vec![Agent {
        id: 0,
        pose: Pose2::IDENTITY,
        fov_half_angle: config.fov_half_angle,
    }];
    let mut rng = stream_rng(seed, mix(&[TAG_AGENT]));
    for id in 1..config.agent_count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.random_range(-config.agent_spread..=config.agent_spread);
            let y = rng.random_range(-config.agent_spread / 2.0..=config.agent_spread / 2.0);
            let yaw = if rng.random_bool(0.5) { 0.0 } else { PI };
            let ok = agents
                .iter()
                .all(|a| ((a.pose.x - x).powi(2) + (a.pose.y - y).powi(2)).sqrt() >= config.min_agent_gap);
            if ok {
                placed = Some(Pose2::new(x, y, yaw));
                break;
            }
        }
        let pose = placed.ok_or(Error::PlacementFailure {
            index: id,
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        agents.push(Agent {
            id: id as u32,
            pose,
            fov_half_angle: config.fov_half_angle,
        });
    }

    let half = config.extent / 2.0 - ANCHOR_LENGTH / 2.0;
    let mut objects: Vec<WorldObject> = Vec::with_capacity(config.object_count);
    for index in 0..config.object_count {
        let mut rng = stream_rng(seed, mix(&[TAG_PLACE, index as u64]));
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = rng.random_range(-half..=half);
            let cy = rng.random_range(-half..=half);
            let yaw = if rng.random_bool(0.5) { 0.0 } else { FRAC_PI_2 };
            let candidate = OrientedBox::new(cx, cy, ANCHOR_LENGTH, ANCHOR_WIDTH, yaw);
            // keep a small gap so footprints never touch
            let grown = OrientedBox::new(cx, cy, ANCHOR_LENGTH + 0.4, ANCHOR_WIDTH + 0.4, yaw);
            let clear_of_objects = objects.iter().all(|o| intersection_area(&grown, &o.bbox) == 0.0);
            let clear_of_agents = agents.iter().all(|a| !candidate.contains_inflated(a.pose.x, a.pose.y, 2.5));
            if clear_of_objects && clear_of_agents {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.ok_or(Error::PlacementFailure {
            index,
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        let speed = if config.speed_max > config.speed_min {
            rng.random_range(config.speed_min..config.speed_max)
        } else {
            config.speed_min
        };
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (s, c) = bbox.yaw.sin_cos();
        let signature = if num_signatures == 0 { 0 } else { rng.random_range(0..num_signatures) };
        objects.push(WorldObject {
            id: index as u32,
            bbox,
            velocity: [dir * speed * c, dir * speed * s],
            signature,
        });
    }

    Ok(World {
        objects,
        agents,
        extent: config.extent,
        rng_seed: seed,
        num_signatures,
    })
}

/// Fixed orthonormal vectors; template `(signature, yaw_bin)` is vector `2 * signature + yaw_bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureBank {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

impl SignatureBank {
    /// Orthonormalises a seeded Gaussian `dim × dim` matrix (Gram-Schmidt QR).
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "signature space needs at least two dimensions");
        let mut rng = stream_rng(seed, mix(&[TAG_BANK]));
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            // two passes of modified Gram-Schmidt for numerical orthogonality
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        SignatureBank {
            dim,
            vectors: basis.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect(),
        }
    }

    pub fn num_signatures(&self) -> usize {
        self.dim / 2
    }

    pub fn template(&self, signature: usize, yaw_bin: usize) -> &[f32] {
        &self.vectors[2 * signature + yaw_bin]
    }
}

/// Anchor yaw bin (0 for yaw ≈ 0 mod π, 1 for yaw ≈ π/2 mod π).
pub fn yaw_bin(yaw: f64) -> usize {
    let (s, c) = yaw.sin_cos();
    if c.abs() >= s.abs() {
        0
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarConfig {
    pub sigma_range: f64,
    /// Mean clutter points per scan (Poisson).
    pub clutter_rate: f64,
    pub points_per_object: usize,
    pub sensing_radius: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            sigma_range: 0.1,
            clutter_rate: 4.0,
            points_per_object: 10,
            sensing_radius: 36.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub doppler: f64,
    pub rcs: f64,
    /// Object that produced the return; `None` for clutter.
    pub object: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RadarReturns {
    pub points: Vec<RadarPoint>,
}

fn in_sector(x: f64, y: f64, radius: f64, fov: f64) -> bool {
    let r = (x * x + y * y).sqrt();
    r <= radius && y.atan2(x).abs() <= fov
}

/// Radar scan of `agent` at `time_ms`; points are in the agent frame.
pub fn sense_radar(world: &World, agent: &Agent, time_ms: i64, cfg: &RadarConfig) -> RadarReturns {
    let inv = agent.pose.inverse();
    let mut points = Vec::new();
    let stream = |parts: &[u64]| stream_rng(world.rng_seed, mix(parts));
    for obj in &world.objects {
        let world_box = obj.box_at(time_ms);
        let local = world_box.transformed(&inv);
        if !in_sector(local.cx, local.cy, cfg.sensing_radius, agent.fov_half_angle) {
            continue;
        }
        // velocity in the agent frame (agents are static)
        let (s, c) = (-agent.pose.yaw).sin_cos();
        let v = (c * obj.velocity[0] - s * obj.velocity[1], s * obj.velocity[0] + c * obj.velocity[1]);
        let mut rng = stream(&[TAG_RADAR, agent.id as u64, time_ms as u64, obj.id as u64]);
        let noise = Normal::new(0.0, cfg.sigma_range.max(0.0)).unwrap();
        let perimeter = 2.0 * (local.length + local.width);
        let corners = local.corners();
        for _ in 0..cfg.points_per_object {
            let mut t = rng.random_range(0.0..perimeter);
            let mut p = corners[0];
            for e in 0..4 {
                let a = corners[e];
                let b = corners[(e + 1) % 4];
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                if t <= len || e == 3 {
                    let f = (t / len).min(1.0);
                    p = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
                    break;
                }
                t -= len;
            }
            let n = if cfg.sigma_range > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let rcs = rng.random_range(5.0..15.0);
            let r = (p.0 * p.0 + p.1 * p.1).sqrt();
            if r < 1e-9 {
                continue;
            }
            let (ux, uy) = (p.0 / r, p.1 / r);
            let doppler = v.0 * ux + v.1 * uy;
            let (x, y) = (ux * (r + n), uy * (r + n));
            if (x * x + y * y).sqrt() > cfg.sensing_radius {
                continue;
            }
            points.push(RadarPoint {
                x,
                y,
                doppler,
                rcs,
                object: Some(obj.id),
            });
        }
    }
    let mut rng = stream(&[TAG_RADAR, agent.id as u64, time_ms as u64, u64::MAX]);
    let clutter = if cfg.clutter_rate > 0.0 {
        Poisson::new(cfg.clutter_rate).unwrap().sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..clutter {
        let r = cfg.sensing_radius * rng.random::<f64>().sqrt();
        let th = rng.random_range(-agent.fov_half_angle..=agent.fov_half_angle);
        points.push(RadarPoint {
            x: r * th.cos(),
            y: r * th.sin(),
            doppler: 0.0,
            rcs: rng.random_range(0.0..0.5),
            object: None,
        });
    }
    RadarReturns { points }
}

pub const RADAR_CHANNELS: usize = 4;
pub const RADAR_OCCUPANCY: usize = 3;

/// Channels: `[hit count, mean rcs, mean doppler, occupancy]`.
pub fn rasterize_radar(returns: &RadarReturns, spec: &GridSpec) -> BevGrid {
    let mut g = BevGrid::zeros(*spec, RADAR_CHANNELS);
    for p in &returns.points {
        if let Some((r, c)) = spec.locate(p.x, p.y) {
            let cell = g.at_mut(r, c);
            cell[0] += 1.0;
            cell[1] += p.rcs as f32;
            cell[2] += p.doppler as f32;
        }
    }
    for cell in g.data_mut().chunks_exact_mut(RADAR_CHANNELS) {
        if cell[0] > 0.0 {
            cell[1] /= cell[0];
            cell[2] /= cell[0];
            cell[3] = 1.0;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub azimuth_bins: usize,
    pub depth_bins: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub depth_sigma_ratio: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            azimuth_bins: 64,
            depth_bins: 160,
            min_depth: 2.0,
            max_depth: 48.0,
            depth_sigma_ratio: 0.3,
        }
    }
}

/// Polar camera evidence: `A` azimuth columns × `D` log-spaced depth bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarFeatureMap {
    pub azimuth_bins: usize,
    pub depth_bins: usize,
    pub channels: usize,
    pub fov_half_angle: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// `A × D × C`, row-major.
    pub features: Vec<f32>,
    /// `A × D`; each column sums to one.
    pub depth_prob: Vec<f32>,
    /// Bin of the dominant (least attenuated, nearest) object per column.
    pub depth_labels: Vec<Option<usize>>,
}

impl PolarFeatureMap {
    pub fn empty(azimuth_bins: usize, depth_bins: usize, channels: usize, fov: f64, min_depth: f64, max_depth: f64) -> Self {
        PolarFeatureMap {
            azimuth_bins,
            depth_bins,
            channels,
            fov_half_angle: fov,
            min_depth,
            max_depth,
            features: vec![0.0; azimuth_bins * depth_bins * channels],
            depth_prob: vec![1.0 / depth_bins as f32; azimuth_bins * depth_bins],
            depth_labels: vec![None; azimuth_bins],
        }
    }

    #[inline]
    pub fn feature(&self, a: usize, d: usize) -> &[f32] {
        let i = (a * self.depth_bins + d) * self.channels;
        &self.features[i..i + self.channels]
    }

    #[inline]
    pub fn prob(&self, a: usize, d: usize) -> f32 {
        self.depth_prob[a * self.depth_bins + d]
    }

    pub fn column_prob(&self, a: usize) -> &[f32] {
        &self.depth_prob[a * self.depth_bins..(a + 1) * self.depth_bins]
    }

    pub fn column_prob_mut(&mut self, a: usize) -> &mut [f32] {
        let d = self.depth_bins;
        &mut self.depth_prob[a * d..(a + 1) * d]
    }

    fn log_ratio(&self) -> f64 {
        (self.max_depth / self.min_depth).ln() / self.depth_bins as f64
    }

    pub fn azimuth_step(&self) -> f64 {
        2.0 * self.fov_half_angle / self.azimuth_bins as f64
    }

    /// Depth (m) of the lower edge of bin `k`; `k == D` gives `max_depth`.
    pub fn depth_edge(&self, k: usize) -> f64 {
        self.min_depth * (self.log_ratio() * k as f64).exp()
    }

    pub fn depth_center(&self, k: usize) -> f64 {
        self.min_depth * (self.log_ratio() * (k as f64 + 0.5)).exp()
    }

    pub fn azimuth_center(&self, a: usize) -> f64 {
        -self.fov_half_angle + (a as f64 + 0.5) * self.azimuth_step()
    }

    /// Continuous `(azimuth, depth)` bin coordinate of a local point, with
    /// bin centers at integers. `None` behind the camera or outside the FoV.
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if x <= 0.0 {
            return None;
        }
        let th = y.atan2(x);
        if th.abs() > self.fov_half_angle {
            return None;
        }
        let r = (x * x + y * y).sqrt();
        if r < self.min_depth || r > self.max_depth {
            return None;
        }
        let a = (th + self.fov_half_angle) / self.azimuth_step() - 0.5;
        let d = (r / self.min_depth).ln() / self.log_ratio() - 0.5;
        Some((a, d))
    }

    pub fn azimuth_bin(&self, theta: f64) -> Option<usize> {
        if theta.abs() > self.fov_half_angle {
            return None;
        }
        let a = ((theta + self.fov_half_angle) / self.azimuth_step()).floor() as isize;
        Some(a.clamp(0, self.azimuth_bins as isize - 1) as usize)
    }

    pub fn depth_bin(&self, depth: f64) -> Option<usize> {
        if depth < self.min_depth || depth > self.max_depth {
            return None;
        }
        let k = ((depth / self.min_depth).ln() / self.log_ratio()).floor() as isize;
        Some(k.clamp(0, self.depth_bins as isize - 1) as usize)
    }

    /// Per-bin mass of a Gaussian depth profile, truncated to the bin range
    /// and renormalised. `sigma == 0` puts all mass in the bin holding `depth`.
    pub fn depth_profile(&self, depth: f64, sigma: f64) -> Vec<f64> {
        let n = self.depth_bins;
        let mut w = vec![0.0; n];
        if sigma <= 1e-9 {
            if let Some(k) = self.depth_bin(depth) {
                w[k] = 1.0;
            }
            return w;
        }
        let cdf = |x: f64| 0.5 * (1.0 + libm::erf((x - depth) / (sigma * std::f64::consts::SQRT_2)));
        let mut lo = cdf(self.depth_edge(0));
        for (k, wk) in w.iter_mut().enumerate() {
            let hi = cdf(self.depth_edge(k + 1));
            *wk = (hi - lo).max(0.0);
            lo = hi;
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        } else if let Some(k) = self.depth_bin(depth) {
            w[k] = 1.0;
        }
        w
    }
}

/// Segment from the sensor origin to `(x, y)` intersects `b`.
fn ray_hits_box(x: f64, y: f64, b: &OrientedBox) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let to_local = |px: f64, py: f64| {
        let (dx, dy) = (px - b.cx, py - b.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    };
    let p0 = to_local(0.0, 0.0);
    let p1 = to_local(x, y);
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (o, d, h) in [(p0.0, p1.0 - p0.0, hl), (p0.1, p1.1 - p0.1, hw)] {
        if d.abs() < 1e-12 {
            if o.abs() > h {
                return false;
            }
        } else {
            let (mut a, mut bb) = ((-h - o) / d, (h - o) / d);
            if a > bb {
                std::mem::swap(&mut a, &mut bb);
            }
            t0 = t0.max(a);
            t1 = t1.min(bb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// One visible object as seen by the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraHit {
    pub object: u32,
    /// Continuous azimuth coordinate (bin centers at integers).
    pub azimuth: f64,
    pub depth: f64,
    pub attenuation: f64,
}

impl CameraHit {
    /// The two columns receiving the deposit and their linear weights.
    pub fn column_weights(&self, azimuth_bins: usize) -> [(usize, f64); 2] {
        let last = azimuth_bins as f64 - 1.0;
        let a = self.azimuth.clamp(0.0, last);
        let lo = a.floor();
        let f = a - lo;
        let lo = lo as usize;
        [(lo, 1.0 - f), ((lo + 1).min(azimuth_bins - 1), f)]
    }
}

/// Objects whose centers fall inside the camera frustum, with occlusion attenuation.
pub fn visible_objects(world: &World, agent: &Agent, time_ms: i64, cam: &CameraConfig) -> Vec<CameraHit> {
    let probe = PolarFeatureMap::empty(cam.azimuth_bins, 1, 1, agent.fov_half_angle, cam.min_depth, cam.max_depth);
    let local = world.boxes_in_frame(time_ms, &agent.pose);
    let mut hits = Vec::new();
    for (id, b) in &local {
        let depth = b.cx.hypot(b.cy);
        let theta = b.cy.atan2(b.cx);
        if b.cx <= 0.0 || depth < cam.min_depth || depth > cam.max_depth || theta.abs() > agent.fov_half_angle {
            continue;
        }
        let azimuth = (theta + probe.fov_half_angle) / probe.azimuth_step() - 0.5;
        let occluders = local
            .iter()
            .filter(|(oid, ob)| oid != id && ob.cx.hypot(ob.cy) < depth && ray_hits_box(b.cx, b.cy, ob))
            .count();
        hits.push(CameraHit {
            object: *id,
            azimuth,
            depth,
            attenuation: 0.5f64.powi(occluders as i32),
        });
    }
    hits
}

/// Depth-ambiguous polar camera proxy for `agent` at `time_ms`.
///
/// Each object's deposit is split linearly between the two azimuth columns
/// bracketing its bearing.
pub fn sense_camera(world: &World, agent: &Agent, time_ms: i64, cam: &CameraConfig, bank: &SignatureBank) -> PolarFeatureMap {
    let mut map = PolarFeatureMap::empty(
        cam.azimuth_bins,
        cam.depth_bins,
        bank.dim,
        agent.fov_half_angle,
        cam.min_depth,
        cam.max_depth,
    );
    let hits = visible_objects(world, agent, time_ms, cam);
    let local: Vec<(u32, OrientedBox)> = world.boxes_in_frame(time_ms, &agent.pose);
    let d = map.depth_bins;
    let mut mixture = vec![0.0f64; map.azimuth_bins * d];
    let mut column_mass = vec![0.0f64; map.azimuth_bins];
    let mut best: Vec<Option<(f64, f64, usize)>> = vec![None; map.azimuth_bins];
    for hit in &hits {
        let obj = &world.objects[hit.object as usize];
        let lb = local[hit.object as usize].1;
        let template = bank.template(obj.signature, yaw_bin(lb.yaw));
        let profile = map.depth_profile(hit.depth, cam.depth_sigma_ratio * hit.depth);
        let label = map.depth_bin(hit.depth).unwrap_or(0);
        for (col, cw) in hit.column_weights(map.azimuth_bins) {
            if cw == 0.0 {
                continue;
            }
            let weight = hit.attenuation * cw;
            for (k, w) in profile.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let base = (col * d + k) * map.channels;
                let amp = (weight * w) as f32;
                for (f, t) in map.features[base..base + map.channels].iter_mut().zip(template) {
                    *f += amp * t;
                }
                mixture[col * d + k] += weight * w;
            }
            column_mass[col] += weight;
            let better = match best[col] {
                None => true,
                Some((bw, dep, _)) => weight > bw || (weight == bw && hit.depth < dep),
            };
            if better {
                best[col] = Some((weight, hit.depth, label));
            }
        }
    }
    for a in 0..map.azimuth_bins {
        if column_mass[a] > 0.0 {
            let m = column_mass[a];
            for k in 0..d {
                map.depth_prob[a * d + k] = (mixture[a * d + k] / m) as f32;
            }
        }
        map.depth_labels[a] = best[a].map(|(_, _, l)| l);
    }
    map
}

/// Cell-center containment raster of `boxes` (1 channel, values in {0, 1}).
pub fn occupancy_grid(boxes: &[OrientedBox], spec: &GridSpec) -> BevGrid {
    let mut g = BevGrid::zeros(*spec, 1);
    let (h, w) = (spec.height as f64, spec.width as f64);
    for b in boxes {
        let reach = 0.5 * b.length.hypot(b.width);
        let (c0, r0) = spec.to_cell(b.cx - reach, b.cy - reach);
        let (c1, r1) = spec.to_cell(b.cx + reach, b.cy + reach);
        if r1 < 0.0 || c1 < 0.0 || r0 > h - 1.0 || c0 > w - 1.0 {
            continue;
        }
        let rows = (r0.floor().max(0.0) as usize)..=(r1.ceil().min(h - 1.0) as usize);
        let cols = (c0.floor().max(0.0) as usize)..=(c1.ceil().min(w - 1.0) as usize);
        for r in rows {
            for c in cols.clone() {
                let (x, y) = spec.cell_center(r, c);
                if b.contains(x, y) {
                    g.at_mut(r, c)[0] = 1.0;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object_world(x: f64, y: f64, velocity: [f64; 2]) -> World {
        World {
            objects: vec![WorldObject {
                id: 0,
                bbox: OrientedBox::new(x, y, ANCHOR_LENGTH, ANCHOR_WIDTH, 0.0),
                velocity,
                signature: 1,
            }],
            agents: vec![Agent {
                id: 0,
                pose: Pose2::IDENTITY,
                fov_half_angle: PI / 3.0,
            }],
            extent: 100.0,
            rng_seed: 3,
            num_signatures: 4,
        }
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig { seed: 7, ..Default::default() };
        assert_eq!(generate_world(&cfg, 4).unwrap(), generate_world(&cfg, 4).unwrap());
        let other = WorldConfig { seed: 8, ..Default::default() };
        assert_ne!(generate_world(&cfg, 4).unwrap(), generate_world(&other, 4).unwrap());
    }

    #[test]
    fn empty_world_is_valid() {
        let cfg = WorldConfig {
            object_count: 0,
            ..Default::default()
        };
        let w = generate_world(&cfg, 4).unwrap();
        assert!(w.objects.is_empty());
        assert_eq!(w.agents.len(), 3);
    }

    #[test]
    fn overcrowded_world_fails_placement() {
        let cfg = WorldConfig {
            extent: 8.0,
            object_count: 40,
            ..Default::default()
        };
        assert!(matches!(generate_world(&cfg, 4), Err(Error::PlacementFailure { .. })));
    }

    #[test]
    fn bank_is_orthonormal() {
        let bank = SignatureBank::new(9, 11);
        for i in 0..9 {
            for j in 0..9 {
                let d: f32 = bank.vectors[i].iter().zip(&bank.vectors[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-5, "{i},{j}: {d}");
            }
        }
    }

    #[test]
    fn noiseless_radar_lies_on_boundary() {
        let w = one_object_world(15.0, 2.0, [3.0, 0.0]);
        let cfg = RadarConfig {
            sigma_range: 0.0,
            clutter_rate: 0.0,
            ..Default::default()
        };
        let ret = sense_radar(&w, &w.agents[0], 0, &cfg);
        assert_eq!(ret.points.len(), cfg.points_per_object);
        let b = w.objects[0].bbox;
        for p in &ret.points {
            assert!(b.contains_inflated(p.x, p.y, 1e-9));
            assert!(!b.contains_inflated(p.x, p.y, -1e-6), "point strictly inside");
        }
    }

    #[test]
    fn empty_world_no_returns() {
        let mut w = one_object_world(15.0, 0.0, [0.0, 0.0]);
        w.objects.clear();
        let cfg = RadarConfig {
            clutter_rate: 0.0,
            ..Default::default()
        };
        assert!(sense_radar(&w, &w.agents[0], 0, &cfg).points.is_empty());
    }

    #[test]
    fn doppler_matches_radial_velocity() {
        let w = one_object_world(12.0, -5.0, [4.0, -2.5]);
        let cfg = RadarConfig {
            sigma_range: 0.0,
            clutter_rate: 0.0,
            ..Default::default()
        };
        for p in sense_radar(&w, &w.agents[0], 0, &cfg).points {
            let r = p.x.hypot(p.y);
            let expect = (4.0 * p.x - 2.5 * p.y) / r;
            assert!((p.doppler - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn rasterize_examples() {
        let spec = GridSpec::centered(8, 8, 1.0);
        assert!(rasterize_radar(&RadarReturns::default(), &spec).data().iter().all(|v| *v == 0.0));
        let p = |x, rcs| RadarPoint {
            x,
            y: 0.2,
            doppler: 1.0,
            rcs,
            object: None,
        };
        let g = rasterize_radar(&RadarReturns { points: vec![p(0.6, 1.0)] }, &spec);
        let nonzero: Vec<_> = g.data().chunks(4).filter(|c| c.iter().any(|v| *v != 0.0)).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0][3], 1.0);
        let g = rasterize_radar(&RadarReturns { points: vec![p(0.6, 1.0), p(0.4, 3.0)] }, &spec);
        let cell: Vec<_> = g.data().chunks(4).filter(|c| c[0] > 0.0).collect();
        assert_eq!(cell.len(), 1);
        assert_eq!(cell[0][0], 2.0);
        assert_eq!(cell[0][1], 2.0);
    }

    #[test]
    fn camera_delta_limit_and_fov() {
        let w = one_object_world(20.0, 0.0, [0.0, 0.0]);
        let bank = SignatureBank::new(8, 1);
        let cam = CameraConfig {
            depth_sigma_ratio: 0.0,
            ..Default::default()
        };
        let m = sense_camera(&w, &w.agents[0], 0, &cam, &bank);
        // bearing 0 sits on the boundary between the two middle columns
        let bin = m.depth_bin(20.0).unwrap();
        let (left, right) = (cam.azimuth_bins / 2 - 1, cam.azimuth_bins / 2);
        assert_eq!(m.prob(left, bin), 1.0);
        assert_eq!(m.prob(right, bin), 1.0);
        let t = bank.template(1, 0);
        for ((l, r), t) in m.feature(left, bin).iter().zip(m.feature(right, bin)).zip(t) {
            assert!((l + r - t).abs() < 1e-6);
        }

        let behind = one_object_world(-20.0, 0.0, [0.0, 0.0]);
        let m = sense_camera(&behind, &behind.agents[0], 0, &cam, &bank);
        assert!(m.features.iter().all(|v| *v == 0.0));
        assert!(m.depth_prob.iter().all(|p| (p - 1.0 / cam.depth_bins as f32).abs() < 1e-9));
    }

    #[test]
    fn depth_prob_columns_sum_to_one() {
        let cfg = WorldConfig::default();
        let w = generate_world(&cfg, 4).unwrap();
        let bank = SignatureBank::new(8, 1);
        let m = sense_camera(&w, &w.agents[0], 0, &CameraConfig::default(), &bank);
        for a in 0..m.azimuth_bins {
            let s: f32 = m.column_prob(a).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(m.column_prob(a).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn occlusion_halves_far_object() {
        let mut w = one_object_world(10.0, 0.0, [0.0, 0.0]);
        let mut far = w.objects[0];
        far.id = 1;
        far.bbox.cx = 25.0;
        w.objects.push(far);
        let hits = visible_objects(&w, &w.agents[0], 0, &CameraConfig::default());
        let att: Vec<_> = hits.iter().map(|h| (h.object, h.attenuation)).collect();
        assert_eq!(att, vec![(0, 1.0), (1, 0.5)]);
    }

    #[test]
    fn occupancy_rasterizes_by_center_containment() {
        let spec = GridSpec::centered(20, 20, 0.5);
        let b = OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.0);
        let g = occupancy_grid(&[b], &spec);
        let count = g.data().iter().filter(|v| **v > 0.0).count();
        // centers at ±0.25, ±0.75 along x and ±0.25 along y
        assert_eq!(count, 8);
    }
}
