//! End-to-end runner: sensing, rectification, budgeted token exchange,
//! consensus assembly, fusion, detection and scoring, plus sweeps and
//! ablations over it.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cda::{align_consensus, assemble_tokens, consensus_local, fuse_pyramid, stack_tokens, unpack_and_fuse, ConsensusParams, NeighborTokens};
use crate::comm::{bytes_to_units, BudgetLedger, DemandRequest, TokenMessage};
use crate::config::{ScenarioConfig, Variant, WeightMode};
use crate::detect::{assign_targets, decode, score_map, AnchorConfig, ScoreMap};
use crate::geometry::{warp_grid_into, Detection, OrientedBox, Pose2};
use crate::grid::{BevGrid, FeaturePyramid, GridSpec};
use crate::gsr::{build_f3d, gated_calibrate, rectify, run_gsr, sharpen_depth, GsrParams};
use crate::nn::PositionalCode;
use crate::objective::{
    acc_at_t, confusion, depth_loss, detection_loss, uac_loss, Confusion, DetectionLoss, UacLevelInputs, UacLoss, RANGE_BINS,
};
use crate::scene::{
    generate_world, occupancy_grid, rasterize_radar, sense_camera, sense_radar, visible_objects, yaw_bin, Agent, PolarFeatureMap,
    RadarReturns, SignatureBank, World,
};
use crate::uac::{agent_token, demand_weights, refine_tokens, select_tokens, TokenSelection, UacParams};
use crate::{Error, Result};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "BEVCOLLAB_THREADS";
/// Radius (m) of the window used for activation centroids.
pub const CENTROID_RADIUS_M: f64 = 4.0;

/// Parses [`THREADS_ENV`]; `None` when unset or empty.
pub fn thread_override() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`"))),
        _ => Ok(None),
    }
}

/// Parameter set shared by every agent of a run.
#[derive(Debug, Clone)]
pub struct Models {
    pub bank: SignatureBank,
    pub gsr: GsrParams,
    pub uac: UacParams,
    pub consensus: ConsensusParams,
    pub code: Option<PositionalCode>,
    pub anchors: AnchorConfig,
}

impl Models {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let p = &cfg.pipeline;
        let o = &cfg.oracle;
        let bank = SignatureBank::new(p.signature_dim, p.weight_seed);
        let (gsr, mut uac, consensus) = match p.weights {
            WeightMode::Oracle => {
                let templates: Vec<Vec<f32>> = (0..bank.num_signatures())
                    .flat_map(|s| (0..2).map(move |b| (s, b)))
                    .map(|(s, b)| bank.template(s, b).to_vec())
                    .collect();
                (
                    GsrParams::oracle(p.signature_dim, p.channels, p.objectness(), &templates, o.value_gain, o.psi_gain, o.gate_bias),
                    UacParams::oracle(p.channels, p.levels, p.objectness(), &o.uac),
                    ConsensusParams::oracle(),
                )
            }
            WeightMode::Seeded => (
                GsrParams::seeded(p.signature_dim, p.channels, p.gsr_points, p.weight_seed),
                UacParams::seeded(p.channels, p.levels, p.refine_points, p.weight_seed),
                ConsensusParams::seeded(p.weight_seed),
            ),
        };
        uac.epsilon = p.epsilon;
        let dims = p.positional_dims();
        let code = (dims > 0 && o.positional_gain > 0.0)
            .then(|| PositionalCode::new(dims, o.positional_length_m, o.positional_gain, p.weight_seed));
        Ok(Models {
            bank,
            gsr,
            uac,
            consensus,
            code,
            anchors: AnchorConfig::default(),
        })
    }
}

/// One agent's derived state at one sensing time, in its own frame.
#[derive(Debug, Clone)]
pub struct AgentView {
    pub agent: Agent,
    pub time_ms: i64,
    pub radar: RadarReturns,
    /// Camera map that was lifted (depth-sharpened when rectification is on).
    pub polar: PolarFeatureMap,
    pub features: Vec<BevGrid>,
    pub confidence: Vec<BevGrid>,
    pub consensus: Vec<BevGrid>,
}

/// Sensing and single-agent processing up to the per-level confidence maps.
pub fn sense_agent(world: &World, agent: &Agent, time_ms: i64, cfg: &ScenarioConfig, models: &Models, variant: Variant) -> Result<AgentView> {
    let p = &cfg.pipeline;
    let spec = cfg.grid.spec();
    let radar = if variant.uses_radar() {
        sense_radar(world, agent, time_ms, &cfg.radar)
    } else {
        RadarReturns::default()
    };
    let f_rad = rasterize_radar(&radar, &spec);
    let raw = if variant.uses_camera() {
        sense_camera(world, agent, time_ms, &cfg.camera, &models.bank)
    } else {
        PolarFeatureMap::empty(
            cfg.camera.azimuth_bins,
            cfg.camera.depth_bins,
            p.signature_dim,
            agent.fov_half_angle,
            cfg.camera.min_depth,
            cfg.camera.max_depth,
        )
    };
    let (polar, bev) = if variant.uses_gsr() {
        let polar = match p.weights {
            WeightMode::Oracle => sharpen_depth(&raw, &radar, &cfg.oracle.sharpening()),
            WeightMode::Seeded => raw,
        };
        let stages = run_gsr(&polar, &f_rad, &Pose2::IDENTITY, &models.gsr)?;
        (polar, stages.calibrated)
    } else if variant == Variant::RadarOnly {
        let zero = BevGrid::zeros(spec, p.channels);
        (raw, gated_calibrate(&zero, &f_rad, &models.gsr)?)
    } else {
        let f3d = build_f3d(&raw, &models.gsr)?;
        let lifted = rectify(None, &spec, &f3d, &Pose2::IDENTITY, &models.gsr)?;
        (raw, lifted)
    };
    let mut features = FeaturePyramid::build(&bev, p.levels)?.levels;
    if let Some(code) = &models.code {
        for f in &mut features {
            code.add_to(f, p.objectness() + 1)?;
        }
    }
    let confidence = features
        .iter()
        .enumerate()
        .map(|(l, f)| crate::uac::confidence_map(f, models.uac.level(l)?))
        .collect::<Result<Vec<_>>>()?;
    let consensus = FeaturePyramid::build(&f_rad, p.levels)?
        .levels
        .iter()
        .map(|r| consensus_local(r, &models.consensus))
        .collect::<Result<Vec<_>>>()?;
    Ok(AgentView {
        agent: *agent,
        time_ms,
        radar,
        polar,
        features,
        confidence,
        consensus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub detection: DetectionLoss,
    pub depth: f64,
    pub uac: UacLoss,
    /// `L_det + λ_dep·L_dep + λ_uac·L_uac`.
    pub total: f64,
}

impl LossReport {
    fn scaled_add(&mut self, o: &LossReport, s: f64) {
        self.detection.cls += s * o.detection.cls;
        self.detection.reg += s * o.detection.reg;
        self.detection.dir += s * o.detection.dir;
        self.detection.total += s * o.detection.total;
        self.depth += s * o.depth;
        self.uac.occ_s += s * o.uac.occ_s;
        self.uac.occ_c += s * o.uac.occ_c;
        self.uac.geo += s * o.uac.geo;
        self.uac.total += s * o.uac.total;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "acc@0.5")]
    pub acc_05: f64,
    #[serde(rename = "acc@0.7")]
    pub acc_07: f64,
    /// No predictions were made; both accuracies are then 0.
    pub empty_predictions: bool,
    pub predictions: usize,
    pub ground_truth: usize,
    pub matched_05: usize,
    pub matched_07: usize,
    /// TP/FP/FN at IoU 0.7.
    pub confusion: Confusion,
    pub comm_units: f64,
}

impl MetricsReport {
    fn from_counts(predictions: usize, ground_truth: usize, matched_05: usize, matched_07: usize, confusion: Confusion, comm_units: f64) -> Self {
        let ratio = |m: usize| if predictions == 0 { 0.0 } else { m as f64 / predictions as f64 };
        MetricsReport {
            acc_05: ratio(matched_05),
            acc_07: ratio(matched_07),
            empty_predictions: predictions == 0,
            predictions,
            ground_truth,
            matched_05,
            matched_07,
            confusion,
            comm_units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_ms: i64,
    pub ego: u32,
    pub metrics: MetricsReport,
    pub losses: LossReport,
    /// Mean distance (m) between each visible object and the centroid of its
    /// template response in the ego's own rectified features.
    pub centroid_error_m: Option<f64>,
    /// Neighbors whose link was lost this frame.
    pub dropped: Vec<u32>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkUsage {
    pub frame_ms: i64,
    pub sender: u32,
    pub receiver: u32,
    pub bytes: u64,
    pub units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub total_bytes: u64,
    pub units: f64,
    pub links: Vec<LinkUsage>,
}

impl LedgerReport {
    pub fn from_ledger(ledger: &BudgetLedger) -> Self {
        LedgerReport {
            total_bytes: ledger.total_bytes(),
            units: ledger.units(),
            links: ledger
                .link_bytes()
                .map(|(k, b)| LinkUsage {
                    frame_ms: k.frame_ms,
                    sender: k.sender,
                    receiver: k.receiver,
                    bytes: *b,
                    units: bytes_to_units(*b),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub losses: LossReport,
    pub centroid_error_m: Option<f64>,
    pub ledger: LedgerReport,
    pub frames: Vec<FrameReport>,
    pub wall_ms: u64,
}

impl ScenarioReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct EgoOutcome {
    report: FrameReport,
    ledger: BudgetLedger,
}

struct Link {
    id: u32,
    features: Vec<BevGrid>,
    confidence: Vec<BevGrid>,
    consensus: Vec<BevGrid>,
    view_index: usize,
}

/// Flattened loss inputs of one level.
struct LevelTargets {
    local: Vec<(Vec<f64>, Vec<f64>)>,
    aligned: Vec<(Vec<f64>, Vec<f64>)>,
    consensus: Vec<Vec<f64>>,
    ego_occupancy: Vec<f64>,
}

fn pairs(v: &[(Vec<f64>, Vec<f64>)]) -> Vec<(&[f64], &[f64])> {
    v.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect()
}

fn to_f64(g: &BevGrid) -> Vec<f64> {
    g.data().iter().map(|v| *v as f64).collect()
}

/// Ground-truth boxes in the ego frame whose centers lie on the ego grid.
pub fn ground_truth(world: &World, time_ms: i64, ego: &Agent, spec: &GridSpec) -> Vec<OrientedBox> {
    let (hx, hy) = spec.half_extent();
    world
        .boxes_in_frame(time_ms, &ego.pose)
        .into_iter()
        .map(|(_, b)| b)
        .filter(|b| b.cx.abs() <= hx && b.cy.abs() <= hy)
        .collect()
}

/// Mean distance between visible objects and the centroid of their own
/// template response within [`CENTROID_RADIUS_M`].
pub fn centroid_error(world: &World, view: &AgentView, cfg: &ScenarioConfig, bank: &SignatureBank) -> Option<f64> {
    let feat = &view.features[0];
    let spec = *feat.spec();
    let dim = bank.dim;
    let local = world.boxes_in_frame(view.time_ms, &view.agent.pose);
    let mut errors = Vec::new();
    for hit in visible_objects(world, &view.agent, view.time_ms, &cfg.camera) {
        let b = local[hit.object as usize].1;
        let template = bank.template(world.objects[hit.object as usize].signature, yaw_bin(b.yaw));
        let reach = (CENTROID_RADIUS_M / spec.cell_size).ceil() as i64;
        let (c0, r0) = spec.to_cell(b.cx, b.cy);
        let (c0, r0) = (c0.round() as i64, r0.round() as i64);
        let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(spec.height as i64 - 1) {
            for c in (c0 - reach).max(0)..=(c0 + reach).min(spec.width as i64 - 1) {
                let (x, y) = spec.cell_center(r as usize, c as usize);
                if (x - b.cx).hypot(y - b.cy) > CENTROID_RADIUS_M {
                    continue;
                }
                let f = &feat.at(r as usize, c as usize)[..dim];
                let resp: f64 = f.iter().zip(template).map(|(a, t)| *a as f64 * *t as f64).sum();
                if resp > 0.0 {
                    mass += resp;
                    sx += resp * x;
                    sy += resp * y;
                }
            }
        }
        if mass > 0.0 {
            errors.push((sx / mass - b.cx).hypot(sy / mass - b.cy));
        }
    }
    (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64)
}

struct Context<'a> {
    cfg: &'a ScenarioConfig,
    models: &'a Models,
    world: &'a World,
    variant: Variant,
    anchors: Vec<OrientedBox>,
}

impl Context<'_> {
    /// Per-anchor score of its own yaw bin, in `anchors` order.
    fn anchor_scores(&self, scores: &ScoreMap) -> Vec<f64> {
        let spec = scores.spec;
        let stride = self.models.anchors.stride;
        let mut out = Vec::with_capacity(self.anchors.len());
        for r in (0..spec.height).step_by(stride) {
            for c in (0..spec.width).step_by(stride) {
                let s = scores.at(r, c);
                out.push(s[0]);
                out.push(s[1]);
            }
        }
        out
    }

    fn process_ego(&self, frame_ms: i64, ego: &AgentView, neighbors: &[(u32, &AgentView)]) -> Result<EgoOutcome> {
        let cfg = self.cfg;
        let p = &cfg.pipeline;
        let models = self.models;
        let ego_id = ego.agent.id;
        let ego_pose = ego.agent.pose;
        let send_ms = frame_ms - cfg.channel.latency_ms;
        let mut ledger = BudgetLedger::new();
        let mut dropped = Vec::new();

        // neighbor state as perceived by the ego: stale sensing time, noisy pose
        let mut links: Vec<Link> = Vec::new();
        for (index, (id, view)) in neighbors.iter().enumerate() {
            let draw = cfg.channel.sample_link(send_ms, *id, ego_id);
            if draw.dropped {
                dropped.push(*id);
                continue;
            }
            let truth = view.agent.pose;
            let believed = Pose2::new(truth.x + draw.dx, truth.y + draw.dy, truth.yaw + draw.dyaw);
            let mut link = Link {
                id: *id,
                features: Vec::new(),
                confidence: Vec::new(),
                consensus: Vec::new(),
                view_index: index,
            };
            for l in 0..p.levels {
                let spec = *ego.features[l].spec();
                link.features.push(warp_grid_into(&view.features[l], &believed, &spec, &ego_pose)?);
                link.confidence.push(warp_grid_into(&view.confidence[l], &believed, &spec, &ego_pose)?);
                link.consensus.push(align_consensus(&view.consensus[l], models.consensus.bias(), &believed, &spec, &ego_pose)?);
            }
            links.push(link);
        }

        let mut fused_levels = Vec::with_capacity(p.levels);
        let mut demands = Vec::with_capacity(p.levels);
        for l in 0..p.levels {
            let ego_feat = &ego.features[l];
            let level = models.uac.level(l)?;
            if links.is_empty() {
                fused_levels.push(ego_feat.clone());
                demands.push(None);
                continue;
            }
            let confs: Vec<&BevGrid> = links.iter().map(|k| &k.confidence[l]).collect();
            let demand = demand_weights(ego_feat, &ego.confidence[l], &confs, level, models.uac.epsilon)?;
            let (h, w) = (ego_feat.height(), ego_feat.width());
            let mut received: Vec<(TokenSelection, crate::cda::TokenMatrix)> = Vec::with_capacity(links.len());
            for (k, link) in links.iter().enumerate() {
                let sel = select_tokens(demand.source(k + 1), h, w, p.ratio(l), l)?;
                let indices: Vec<(u16, u16)> = sel.indices.iter().map(|&(r, c)| (r as u16, c as u16)).collect();
                let request = DemandRequest {
                    sender: ego_id,
                    receiver: link.id,
                    level: l as u8,
                    indices: indices.clone(),
                };
                ledger.account(frame_ms, ego_id, link.id, request.serialize()?.len());

                let feat = &link.features[l];
                let refined = refine_tokens(feat, &sel, level)?;
                let summary = agent_token(feat, &sel, level)?;
                let msg = TokenMessage {
                    sender: link.id,
                    receiver: ego_id,
                    level: l as u8,
                    timestamp_ms: send_ms,
                    channels: p.channels as u16,
                    indices,
                    tokens: refined.concat(),
                    agent_token: summary,
                    confidence: link.confidence[l].data().to_vec(),
                    consensus: link.consensus[l].data().to_vec(),
                    encoding: p.map_encoding,
                };
                let bytes = msg.serialize()?;
                ledger.account(frame_ms, link.id, ego_id, bytes.len());
                let got = TokenMessage::deserialize(&bytes)?;

                let selection = TokenSelection {
                    indices: got.indices.iter().map(|&(r, c)| (r as usize, c as usize)).collect(),
                    ..sel
                };
                let priors: Vec<f64> = selection
                    .indices
                    .iter()
                    .map(|&(r, c)| {
                        if self.variant.uses_consensus() {
                            (got.consensus[r * w + c] as f64).clamp(1e-6, 1.0)
                        } else {
                            crate::cda::DEFAULT_AGENT_PRIOR
                        }
                    })
                    .collect();
                let rows: Vec<Vec<f32>> = got.tokens.chunks(p.channels).map(|t| t.to_vec()).collect();
                let agent = self.variant.uses_agent_token().then_some((got.agent_token.as_slice(), p.agent_prior));
                let stacked = stack_tokens(&rows, &priors, agent, p.channels)?;
                received.push((selection, assemble_tokens(&stacked)));
            }
            let parts: Vec<NeighborTokens<'_>> = received
                .iter()
                .enumerate()
                .map(|(k, (selection, assembled))| NeighborTokens {
                    selection,
                    assembled,
                    demand: demand.source(k + 1),
                })
                .collect();
            fused_levels.push(unpack_and_fuse(ego_feat, &parts, demand.source(0))?);
            demands.push(Some(demand));
        }

        let fused = fuse_pyramid(&fused_levels, &p.level_weights())?;
        let scores = score_map(&fused, &models.bank, &cfg.head, Some(p.objectness()))?;
        let detections = decode(&scores, &models.anchors, &cfg.head, &Pose2::IDENTITY);
        let gt = ground_truth(self.world, frame_ms, &ego.agent, fused.spec());

        let a05 = acc_at_t(&detections, &gt, 0.5)?;
        let a07 = acc_at_t(&detections, &gt, 0.7)?;
        let table = confusion(&detections, &gt, 0.7, &RANGE_BINS)?;

        // losses
        let weights = &cfg.losses;
        let assignment = assign_targets(&self.anchors, &gt, &models.anchors);
        let labels: Vec<_> = assignment.iter().map(|a| a.label).collect();
        let dir_target: Vec<usize> = assignment
            .iter()
            .map(|a| a.gt.map_or(0, |g| models.anchors.direction_class(gt[g].yaw)))
            .collect();
        let cls = self.anchor_scores(&scores);
        let det = detection_loss(&cls, &vec![0.5; cls.len()], &dir_target, &labels, weights)?;

        let polar = &ego.polar;
        let logits: Vec<f64> = polar.depth_prob.iter().map(|q| (*q as f64).max(1e-12).ln()).collect();
        let dep = depth_loss(&logits, polar.depth_bins, &polar.depth_labels, weights)?;

        let mut level_data: Vec<LevelTargets> = Vec::with_capacity(p.levels);
        for l in 0..p.levels {
            let spec = *ego.features[l].spec();
            let occupancy = |view: &AgentView| {
                let boxes: Vec<OrientedBox> = self.world.boxes_in_frame(view.time_ms, &view.agent.pose).into_iter().map(|(_, b)| b).collect();
                to_f64(&occupancy_grid(&boxes, &spec))
            };
            let ego_conf = to_f64(&ego.confidence[l]);
            let ego_occupancy = occupancy(ego);
            let mut t = LevelTargets {
                local: vec![(ego_conf.clone(), ego_occupancy.clone())],
                aligned: Vec::new(),
                consensus: Vec::new(),
                ego_occupancy,
            };
            if let Some(d) = &demands[l] {
                t.aligned.push((ego_conf, d.source(0).to_vec()));
                for (k, link) in links.iter().enumerate() {
                    let view = neighbors[link.view_index].1;
                    t.local.push((to_f64(&view.confidence[l]), occupancy(view)));
                    t.aligned.push((to_f64(&link.confidence[l]), d.source(k + 1).to_vec()));
                    t.consensus.push(to_f64(&link.consensus[l]));
                }
            }
            level_data.push(t);
        }
        let borrowed: Vec<_> = level_data
            .iter()
            .map(|t| (pairs(&t.local), pairs(&t.aligned), t.consensus.iter().map(|c| c.as_slice()).collect::<Vec<_>>()))
            .collect();
        let inputs: Vec<UacLevelInputs<'_>> = borrowed
            .iter()
            .zip(&level_data)
            .map(|((local, aligned, consensus), t)| UacLevelInputs {
                local,
                aligned,
                consensus,
                ego_occupancy: &t.ego_occupancy,
            })
            .collect();
        let uac = uac_loss(&inputs, weights)?;
        let losses = LossReport {
            detection: det,
            depth: dep,
            uac,
            total: det.total + weights.lambda_dep * dep + weights.lambda_uac * uac.total,
        };

        let comm_units = ledger.units();
        let report = FrameReport {
            frame_ms,
            ego: ego_id,
            metrics: MetricsReport::from_counts(detections.len(), gt.len(), a05.matched, a07.matched, table, comm_units),
            losses,
            centroid_error_m: centroid_error(self.world, ego, cfg, &models.bank),
            dropped,
            detections,
        };
        Ok(EgoOutcome { report, ledger })
    }
}

/// Runs every configured frame and ego; `cfg.world.seed` selects the world.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let models = Models::build(cfg)?;
    run_with_models(cfg, &models)
}

/// [`run_scenario`] with prebuilt parameters.
pub fn run_with_models(cfg: &ScenarioConfig, models: &Models) -> Result<ScenarioReport> {
    let start = Instant::now();
    let p = &cfg.pipeline;
    let variant = p.variant;
    let world = generate_world(&cfg.world, models.bank.num_signatures())?;
    let ctx = Context {
        cfg,
        models,
        world: &world,
        variant,
        anchors: models.anchors.anchors(&cfg.grid.spec()),
    };

    // every (agent, sensing time) pair needed, in a fixed order
    let mut needed: BTreeMap<(u32, i64), ()> = BTreeMap::new();
    let frames: Vec<i64> = (0..p.frames).map(|f| f as i64 * p.frame_interval_ms).collect();
    for &t in &frames {
        for &e in &p.egos {
            needed.insert((e, t), ());
            for a in &world.agents {
                if a.id != e {
                    needed.insert((a.id, t - cfg.channel.latency_ms), ());
                }
            }
        }
    }
    let keys: Vec<(u32, i64)> = needed.into_keys().collect();
    let views: Vec<AgentView> = keys
        .par_iter()
        .map(|&(id, t)| {
            let agent = world.agent(id).expect("agent ids come from the world");
            sense_agent(&world, agent, t, cfg, models, variant).map_err(|e| Error::Frame {
                frame_ms: t,
                ego: id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let cache: BTreeMap<(u32, i64), &AgentView> = keys.iter().copied().zip(views.iter()).collect();

    let jobs: Vec<(i64, u32)> = frames.iter().flat_map(|&t| p.egos.iter().map(move |&e| (t, e))).collect();
    let outcomes: Vec<EgoOutcome> = jobs
        .par_iter()
        .map(|&(t, e)| {
            let ego = cache[&(e, t)];
            let neighbors: Vec<(u32, &AgentView)> = world
                .agents
                .iter()
                .filter(|a| a.id != e)
                .map(|a| (a.id, cache[&(a.id, t - cfg.channel.latency_ms)]))
                .collect();
            ctx.process_ego(t, ego, &neighbors).map_err(|err| Error::Frame {
                frame_ms: t,
                ego: e,
                source: Box::new(err),
            })
        })
        .collect::<Result<_>>()?;

    let mut ledger = BudgetLedger::new();
    for o in &outcomes {
        ledger.merge(&o.ledger);
    }
    if let Some(cap) = p.budget_units {
        ledger.check_cap(cap)?;
    }
    let frames: Vec<FrameReport> = outcomes.into_iter().map(|o| o.report).collect();
    let mut table = Confusion::empty(&RANGE_BINS);
    let (mut preds, mut gts, mut m05, mut m07) = (0, 0, 0, 0);
    let mut losses = LossReport::default();
    let mut centroids = Vec::new();
    for f in &frames {
        table.add(&f.metrics.confusion);
        preds += f.metrics.predictions;
        gts += f.metrics.ground_truth;
        m05 += f.metrics.matched_05;
        m07 += f.metrics.matched_07;
        losses.scaled_add(&f.losses, 1.0 / frames.len() as f64);
        if let Some(c) = f.centroid_error_m {
            centroids.push(c);
        }
    }
    let wall_ms = if cfg.output.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
    Ok(ScenarioReport {
        variant,
        seed: cfg.world.seed,
        metrics: MetricsReport::from_counts(preds, gts, m05, m07, table, ledger.units()),
        losses,
        centroid_error_m: (!centroids.is_empty()).then(|| centroids.iter().sum::<f64>() / centroids.len() as f64),
        ledger: LedgerReport::from_ledger(&ledger),
        frames,
        wall_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Latency,
    Pose,
    Ratio,
}

impl SweepAxis {
    pub fn column(self) -> &'static str {
        match self {
            SweepAxis::Latency => "latency_ms",
            SweepAxis::Pose => "pose_sigma",
            SweepAxis::Ratio => "token_ratio",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ScenarioConfig, value: f64) -> ScenarioConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Latency => c.channel.latency_ms = value.round() as i64,
            SweepAxis::Pose => {
                c.channel.sigma_xy = value;
                c.channel.sigma_yaw = value;
            }
            SweepAxis::Ratio => c.pipeline.token_ratios = vec![value],
        }
        c
    }

    pub fn default_values(self, cfg: &ScenarioConfig) -> Vec<f64> {
        match self {
            SweepAxis::Latency => cfg.sweep.latencies.clone(),
            SweepAxis::Pose => cfg.sweep.pose_noises.clone(),
            SweepAxis::Ratio => cfg.sweep.token_ratios.clone(),
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "latency" => Ok(SweepAxis::Latency),
            "pose" => Ok(SweepAxis::Pose),
            "ratio" => Ok(SweepAxis::Ratio),
            other => Err(Error::config("sweep axis", format!("expected latency, pose or ratio, got `{other}`"))),
        }
    }
}

/// Seed-averaged results of one sweep point or ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    #[serde(rename = "acc@0.5")]
    pub acc_05: f64,
    #[serde(rename = "acc@0.7")]
    pub acc_07: f64,
    /// Summed over seeds.
    pub confusion: Confusion,
    /// Mean per run.
    pub comm_units: f64,
    pub centroid_error_m: Option<f64>,
    pub wall_ms: u64,
    pub reports: Vec<ScenarioReport>,
}

impl TableRow {
    fn from_reports(label: String, reports: Vec<ScenarioReport>) -> Self {
        let n = reports.len() as f64;
        let mut confusion = Confusion::empty(&RANGE_BINS);
        for r in &reports {
            confusion.add(&r.metrics.confusion);
        }
        let centroids: Vec<f64> = reports.iter().filter_map(|r| r.centroid_error_m).collect();
        TableRow {
            label,
            acc_05: reports.iter().map(|r| r.metrics.acc_05).sum::<f64>() / n,
            acc_07: reports.iter().map(|r| r.metrics.acc_07).sum::<f64>() / n,
            confusion,
            comm_units: reports.iter().map(|r| r.metrics.comm_units).sum::<f64>() / n,
            centroid_error_m: (!centroids.is_empty()).then(|| centroids.iter().sum::<f64>() / centroids.len() as f64),
            wall_ms: reports.iter().map(|r| r.wall_ms).sum(),
            reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    /// Name of the first CSV column.
    pub key: String,
    pub rows: Vec<TableRow>,
}

fn bin_label(lo: f64, hi: f64) -> String {
    format!("{lo}_{hi}")
}

impl Table {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec![self.key.clone(), "acc@0.5".into(), "acc@0.7".into()];
        for (lo, hi) in RANGE_BINS {
            let b = bin_label(lo, hi);
            h.push(format!("tp_{b}"));
            h.push(format!("fp_{b}"));
            h.push(format!("fn_{b}"));
        }
        h.push("comm_units".into());
        h.push("wall_ms".into());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), format!("{:.6}", r.acc_05), format!("{:.6}", r.acc_07)];
            for c in &r.confusion.per_bin {
                rec.push(c.tp.to_string());
                rec.push(c.fp.to_string());
                rec.push(c.fn_.to_string());
            }
            rec.push(format!("{:.9}", r.comm_units));
            rec.push(r.wall_ms.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Runs `cfg` for `cfg.sweep.seeds` consecutive world seeds, in parallel, in seed order.
pub fn run_seeds(cfg: &ScenarioConfig, models: &Models) -> Result<Vec<ScenarioReport>> {
    (0..cfg.sweep.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.world.seed = cfg.world.seed.wrapping_add(i);
            run_with_models(&c, models)
        })
        .collect()
}

fn format_value(axis: SweepAxis, v: f64) -> String {
    match axis {
        SweepAxis::Latency => format!("{}", v.round() as i64),
        _ => format!("{v}"),
    }
}

/// One row per value of `axis`, every other setting and the world seeds shared.
pub fn run_sweep(cfg: &ScenarioConfig, axis: SweepAxis, values: &[f64]) -> Result<Table> {
    if values.is_empty() {
        return Err(Error::config(format!("sweep.{}", axis.column()), "sweep list is empty"));
    }
    let configs: Vec<ScenarioConfig> = values.iter().map(|v| axis.apply(cfg, *v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let models = Models::build(cfg)?;
    let rows = configs
        .iter()
        .zip(values)
        .map(|(c, v)| Ok(TableRow::from_reports(format_value(axis, *v), run_seeds(c, &models)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        key: axis.column().to_string(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub variant: Variant,
    #[serde(rename = "delta_acc@0.5")]
    pub delta_acc_05: f64,
    #[serde(rename = "delta_acc@0.7")]
    pub delta_acc_07: f64,
    pub delta_comm_units: f64,
    pub delta_centroid_error_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub table: Table,
    /// Differences against the full pipeline over the same seeds.
    pub deltas: Vec<AblationDelta>,
}

impl Ablation {
    pub fn deltas_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "delta_acc@0.5", "delta_acc@0.7", "delta_comm_units", "delta_centroid_error_m"])?;
        for d in &self.deltas {
            w.write_record([
                d.variant.as_str().to_string(),
                format!("{:.6}", d.delta_acc_05),
                format!("{:.6}", d.delta_acc_07),
                format!("{:.9}", d.delta_comm_units),
                d.delta_centroid_error_m.map_or(String::new(), |v| format!("{v:.6}")),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// One row per variant over identical seeds, plus deltas against `full`.
pub fn run_ablation(cfg: &ScenarioConfig, variants: &[Variant]) -> Result<Ablation> {
    if variants.is_empty() {
        return Err(Error::config("sweep.variants", "variant list is empty"));
    }
    let models = Models::build(cfg)?;
    let run = |v: Variant| {
        let mut c = cfg.clone();
        c.pipeline.variant = v;
        run_seeds(&c, &models).map(|r| TableRow::from_reports(v.as_str().to_string(), r))
    };
    let rows = variants.iter().map(|v| run(*v)).collect::<Result<Vec<_>>>()?;
    let full = match variants.iter().position(|v| *v == Variant::Full) {
        Some(i) => rows[i].clone(),
        None => run(Variant::Full)?,
    };
    let deltas = variants
        .iter()
        .zip(&rows)
        .map(|(v, r)| AblationDelta {
            variant: *v,
            delta_acc_05: r.acc_05 - full.acc_05,
            delta_acc_07: r.acc_07 - full.acc_07,
            delta_comm_units: r.comm_units - full.comm_units,
            delta_centroid_error_m: r.centroid_error_m.zip(full.centroid_error_m).map(|(a, b)| a - b),
        })
        .collect();
    Ok(Ablation {
        table: Table {
            key: "variant".to_string(),
            rows,
        },
        deltas,
    })
}
