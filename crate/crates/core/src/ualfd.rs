//! Learning from demonstration on the highway simulator, with an uncertainty-gated fallback
//! to the lane-keeping controller.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{TargetScaling, TrainingSet};
use crate::error::{Error, Result};
use crate::mdn::{MapPrediction, MdnConfig, MdnNetwork};
use crate::model::{Model, RegNet};
use crate::nn::{MlpConfig, RandomState};
use crate::sim::{
    feedback_heading_controller, kmh_to_mps, mps_to_kmh, safe_controller, wrap_deg, CarState,
    FeatureVector, Perception, Scene, Track, TrafficSpec, CENTER, LEFT, RIGHT, W_MAX,
};
use crate::train::{LossTrace, TrainSchedule};
use crate::uncertainty::UncertaintyReport;

/// Desired heading relative to the lane direction, stored as `(cos θ, sin θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadingTarget {
    pub cos_component: f64,
    pub sin_component: f64,
}

impl HeadingTarget {
    pub fn from_degrees(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        HeadingTarget {
            cos_component: c,
            sin_component: s,
        }
    }

    /// Components need not lie on the unit circle.
    pub fn from_components(c: &[f64]) -> Result<Self> {
        match c {
            [cos, sin] => Ok(HeadingTarget {
                cos_component: *cos,
                sin_component: *sin,
            }),
            _ => Err(Error::Dimension {
                expected: 2,
                got: c.len(),
            }),
        }
    }

    pub fn degrees(&self) -> f64 {
        wrap_deg(self.sin_component.atan2(self.cos_component).to_degrees())
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.cos_component, self.sin_component]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PolicyKind {
    Ualfd,
    Ualfd2,
    MdnK10,
    MdnK1,
    Regnet,
    SafeMode,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Ualfd,
        PolicyKind::Ualfd2,
        PolicyKind::MdnK10,
        PolicyKind::MdnK1,
        PolicyKind::Regnet,
        PolicyKind::SafeMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Ualfd => "ualfd",
            PolicyKind::Ualfd2 => "ualfd2",
            PolicyKind::MdnK10 => "mdn_k10",
            PolicyKind::MdnK1 => "mdn_k1",
            PolicyKind::Regnet => "regnet",
            PolicyKind::SafeMode => "safe_mode",
        }
    }

    pub fn uncertainty_channel(self) -> Option<UncertaintyChannel> {
        match self {
            PolicyKind::Ualfd => Some(UncertaintyChannel::Explained),
            PolicyKind::Ualfd2 => Some(UncertaintyChannel::Unexplained),
            _ => None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UncertaintyChannel {
    Explained,
    Unexplained,
}

impl UncertaintyChannel {
    /// Sum of the channel over output dimensions.
    pub fn scalar(self, r: &UncertaintyReport) -> f64 {
        match self {
            UncertaintyChannel::Explained => r.explained_sum(),
            UncertaintyChannel::Unexplained => r.unexplained_sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchConfig {
    pub log_explained_threshold: f64,
    pub immediate_switch_distance_ualfd: f64,
    pub immediate_switch_distance_others: f64,
    /// Extra ticks to stay in safe mode after the trigger clears (0 = none).
    pub safe_hold_ticks: usize,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig {
            log_explained_threshold: -2.0,
            immediate_switch_distance_ualfd: 1.5,
            immediate_switch_distance_others: 2.5,
            safe_hold_ticks: 0,
        }
    }
}

/// Switching rule resolved for one policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub channel: Option<UncertaintyChannel>,
    pub log_threshold: f64,
    pub switch_distance: f64,
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.immediate_switch_distance_ualfd > 0.0
            && self.immediate_switch_distance_others > 0.0)
        {
            return Err(Error::Config("switch distances must be positive".into()));
        }
        if self.log_explained_threshold.is_nan() {
            return Err(Error::Config("log threshold must be a number".into()));
        }
        Ok(())
    }

    pub fn gate(&self, kind: PolicyKind) -> Gate {
        let switch_distance = match kind {
            PolicyKind::Ualfd => self.immediate_switch_distance_ualfd,
            _ => self.immediate_switch_distance_others,
        };
        Gate {
            channel: kind.uncertainty_channel(),
            log_threshold: self.log_explained_threshold,
            switch_distance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Learned,
    Safe,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Learned => "learned",
            Mode::Safe => "safe",
        }
    }
}

/// Scripted demonstrator.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    /// Only consider leaving the lane when the frontal gap is below this.
    pub lookahead: f64,
    /// Required frontal-gap advantage of the target lane.
    pub lane_change_margin: f64,
    pub min_front_gap: f64,
    pub min_rear_gap: f64,
    /// Heading per metre of lateral offset near the lane centre.
    pub gain_deg_per_m: f64,
    pub max_heading_deg: f64,
    /// Below this frontal gap the expert adopts the lane-keeping speed law.
    pub follow_gap: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            lookahead: 50.0,
            lane_change_margin: 5.0,
            min_front_gap: 10.0,
            min_rear_gap: 6.0,
            gain_deg_per_m: 5.0,
            max_heading_deg: 20.0,
            follow_gap: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneChoice {
    Left,
    Keep,
    Right,
}

pub fn expert_lane_choice(f: &FeatureVector, cfg: &ExpertConfig) -> LaneChoice {
    let here = f.front[CENTER];
    if here >= cfg.lookahead {
        return LaneChoice::Keep;
    }
    let open = |side: usize| {
        f.front[side] >= cfg.min_front_gap
            && f.rear[side] >= cfg.min_rear_gap
            && f.front[side] >= here + cfg.lane_change_margin
    };
    match (open(LEFT), open(RIGHT)) {
        (true, true) if f.front[RIGHT] > f.front[LEFT] => LaneChoice::Right,
        (true, _) => LaneChoice::Left,
        (false, true) => LaneChoice::Right,
        (false, false) => LaneChoice::Keep,
    }
}

/// Heading toward the chosen lane centre: `θ_max·tanh(gain·offset/θ_max)`.
pub fn expert_policy(f: &FeatureVector, lane_width: f64, cfg: &ExpertConfig) -> HeadingTarget {
    let offset = match expert_lane_choice(f, cfg) {
        LaneChoice::Left => f.d_dev + lane_width,
        LaneChoice::Keep => f.d_dev,
        LaneChoice::Right => f.d_dev - lane_width,
    };
    let deg = cfg.max_heading_deg * (cfg.gain_deg_per_m * offset / cfg.max_heading_deg).tanh();
    HeadingTarget::from_degrees(deg)
}

pub fn expert_speed_mps(p: &Perception, cfg: &ExpertConfig, cruise_mps: f64) -> f64 {
    if p.features.front[CENTER] < cfg.follow_gap {
        safe_controller(
            &p.features,
            p.front_speed_mps,
            p.rear_speed_mps,
            0.0,
            cruise_mps,
        )
        .speed_mps
    } else {
        cruise_mps
    }
}

/// Randomized scene generation shared by demonstrations and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub track: Track,
    /// `density` and `seed` are overridden per episode.
    pub traffic: TrafficSpec,
    pub density: f64,
    pub cruise_kmh: f64,
    pub timeout_s: f64,
    /// Initial lateral offset is drawn from `±max_start_offset`.
    pub max_start_offset: f64,
    pub switch: SwitchConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            track: Track::default(),
            traffic: TrafficSpec::default(),
            density: 1.0,
            cruise_kmh: 90.0,
            timeout_s: 60.0,
            max_start_offset: 0.0,
            switch: SwitchConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.track.validate()?;
        self.switch.validate()?;
        if !(self.cruise_kmh > 0.0 && self.timeout_s > 0.0) {
            return Err(Error::Config(
                "cruise speed and timeout must be positive".into(),
            ));
        }
        if !(self.max_start_offset >= 0.0 && self.max_start_offset < self.track.lane_width / 2.0) {
            return Err(Error::Config(
                "start offset must stay inside the lane".into(),
            ));
        }
        Ok(())
    }

    fn max_ticks(&self) -> usize {
        (self.timeout_s / crate::sim::CONTROL_DT).round() as usize
    }

    /// Scene for one seed: start lane, lateral offset and traffic are drawn from it.
    pub fn scene(&self, seed: u64, density: f64) -> Result<Scene> {
        let mut rng = RandomState::seed_from_u64(seed);
        let lane = rng.random_range(0..self.track.num_lanes);
        let offset = if self.max_start_offset > 0.0 {
            rng.random_range(-self.max_start_offset..=self.max_start_offset)
        } else {
            0.0
        };
        let spec = TrafficSpec {
            density,
            seed: rng.random(),
            ..self.traffic.clone()
        };
        let mut scene = Scene::spawn(self.track.clone(), &spec, lane, self.cruise_kmh)?;
        scene.state.ego.y += offset;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub num_episodes: usize,
    pub density_range: (f64, f64),
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub expert: ExpertConfig,
    /// Standard deviation of the position track the heading labels are read from (m).
    pub position_noise: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            num_episodes: 200,
            density_range: (0.5, 1.2),
            seed: 0,
            position_noise: 0.05,
            episode: EpisodeConfig {
                max_start_offset: 1.0,
                ..EpisodeConfig::default()
            },
            expert: ExpertConfig::default(),
        }
    }
}

/// Heading read off a position track with per-fix noise `σ_p`: the difference of two fixes one
/// tick apart has lateral error `√2·σ_p` over a baseline of `v·dt`.
pub fn heading_label_noise_deg(position_noise: f64, speed_mps: f64, dt: f64) -> f64 {
    if position_noise == 0.0 {
        return 0.0;
    }
    (std::f64::consts::SQRT_2 * position_noise)
        .atan2(speed_mps * dt)
        .to_degrees()
}

/// One demonstration episode: network inputs and noisy expert targets per tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub collided: bool,
}

pub fn demonstrate(cfg: &DemoConfig, seed: u64, density: f64) -> Result<Demonstration> {
    let ep = &cfg.episode;
    let mut scene = ep.scene(seed, density)?;
    let cruise = kmh_to_mps(ep.cruise_kmh);
    let mut noise_rng = RandomState::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..ep.max_ticks() {
        if scene.reached_goal() {
            break;
        }
        let Ok(p) = scene.perceive() else {
            return Ok(Demonstration {
                inputs: xs,
                targets: ys,
                collided: true,
            });
        };
        let target = expert_policy(&p.features, ep.track.lane_width, &cfg.expert);
        let speed = expert_speed_mps(&p, &cfg.expert, cruise);
        let sd = heading_label_noise_deg(cfg.position_noise, speed, scene.state.dt);
        let noise: f64 = noise_rng.sample(StandardNormal);
        xs.push(p.features.to_input(ep.track.lane_width));
        ys.push(HeadingTarget::from_degrees(target.degrees() + sd * noise).to_vec());
        let w = feedback_heading_controller(scene.state.ego.heading_deg, target.degrees(), W_MAX);
        scene.step(mps_to_kmh(speed), w);
        if scene.collided() {
            return Ok(Demonstration {
                inputs: xs,
                targets: ys,
                collided: true,
            });
        }
    }
    Ok(Demonstration {
        inputs: xs,
        targets: ys,
        collided: false,
    })
}

/// Demonstrations at 10 Hz from randomized scenes; collided episodes are dropped whole.
pub fn collect_demonstrations(cfg: &DemoConfig) -> Result<TrainingSet> {
    cfg.episode.validate()?;
    let (lo, hi) = cfg.density_range;
    if !(lo >= 0.0 && lo <= hi) {
        return Err(Error::Config(
            "density range must be nonnegative and ordered".into(),
        ));
    }
    if !(cfg.position_noise >= 0.0) {
        return Err(Error::Config("position noise must be nonnegative".into()));
    }
    let mut rng = RandomState::seed_from_u64(cfg.seed);
    let draws: Vec<(u64, f64)> = (0..cfg.num_episodes)
        .map(|_| {
            (
                rng.random(),
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    lo
                },
            )
        })
        .collect();
    let episodes: Vec<_> = draws
        .par_iter()
        .map(|&(s, d)| demonstrate(cfg, s, d))
        .collect::<Result<_>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for ep in episodes
        .into_iter()
        .filter(|ep: &Demonstration| !ep.collided)
    {
        xs.extend(ep.inputs);
        ys.extend(ep.targets);
    }
    if xs.is_empty() {
        return Err(Error::Collection(format!(
            "no collision-free samples from {} episodes",
            cfg.num_episodes
        )));
    }
    TrainingSet::from_rows(&xs, &ys)
}

/// A network that maps features to a heading target.
#[derive(Debug, Clone, Copy)]
pub enum PolicyNet<'a> {
    Mdn(&'a MdnNetwork),
    Reg(&'a RegNet),
}

impl<'a> From<&'a Model> for PolicyNet<'a> {
    fn from(m: &'a Model) -> Self {
        match m {
            Model::Mdn(n) => PolicyNet::Mdn(n),
            Model::Reg(n) => PolicyNet::Reg(n),
        }
    }
}

/// MAP mean of the mixture, or the regressor output, decoded as a heading.
pub fn learned_policy(net: PolicyNet<'_>, input: &[f64]) -> Result<HeadingTarget> {
    match net {
        PolicyNet::Mdn(n) => HeadingTarget::from_components(&n.predict_map(input)?.mean),
        PolicyNet::Reg(n) => HeadingTarget::from_components(&n.predict(input)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchDecision {
    pub mode: Mode,
    pub target: HeadingTarget,
    /// Gate channel value, when the policy has one.
    pub uncertainty: Option<f64>,
}

/// Safe mode when `ln u > threshold` or the frontal gap is below the switch distance.
pub fn switching_policy(
    net: PolicyNet<'_>,
    features: &FeatureVector,
    lane_width: f64,
    gate: &Gate,
) -> Result<SwitchDecision> {
    let input = features.to_input(lane_width);
    let (target, uncertainty) = match (net, gate.channel) {
        (PolicyNet::Mdn(n), channel) => {
            let g = n.gmm(&input)?;
            let target = HeadingTarget::from_components(&MapPrediction::from_gmm(&g).mean)?;
            (
                target,
                channel.map(|c| c.scalar(&UncertaintyReport::from_gmm(&g))),
            )
        }
        (PolicyNet::Reg(n), None) => (HeadingTarget::from_components(&n.predict(&input)?)?, None),
        (PolicyNet::Reg(_), Some(_)) => {
            return Err(Error::Config(
                "a regressor has no variance channels to gate on".into(),
            ));
        }
    };
    let uncertain = uncertainty.is_some_and(|u| u.ln() > gate.log_threshold);
    let close = features.front[CENTER] < gate.switch_distance;
    let mode = if uncertain || close {
        Mode::Safe
    } else {
        Mode::Learned
    };
    Ok(SwitchDecision {
        mode,
        target,
        uncertainty,
    })
}

/// Trained networks for the learned policies.
#[derive(Debug, Clone, Default)]
pub struct DrivingModels {
    pub mdn_k10: Option<MdnNetwork>,
    pub mdn_k1: Option<MdnNetwork>,
    pub regnet: Option<RegNet>,
}

impl DrivingModels {
    pub fn net_for(&self, kind: PolicyKind) -> Result<Option<PolicyNet<'_>>> {
        let (net, name) = match kind {
            PolicyKind::SafeMode => return Ok(None),
            PolicyKind::Ualfd | PolicyKind::Ualfd2 | PolicyKind::MdnK10 => {
                (self.mdn_k10.as_ref().map(PolicyNet::Mdn), "mdn_k10")
            }
            PolicyKind::MdnK1 => (self.mdn_k1.as_ref().map(PolicyNet::Mdn), "mdn_k1"),
            PolicyKind::Regnet => (self.regnet.as_ref().map(PolicyNet::Reg), "regnet"),
        };
        net.map(Some)
            .ok_or_else(|| Error::Config(format!("policy {kind} needs the {name} model")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrainConfig {
    pub hidden_dims: Vec<usize>,
    pub schedule: TrainSchedule,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            hidden_dims: vec![256, 256],
            schedule: TrainSchedule::default().with_epochs(60),
            seed: 0,
        }
    }
}

/// Trains on standardized targets, then folds the scaling back so the returned network
/// predicts in heading units. The loss trace is in standardized units.
pub fn train_mdn_policy(
    data: &TrainingSet,
    k: usize,
    cfg: &PolicyTrainConfig,
) -> Result<(MdnNetwork, LossTrace)> {
    let scaling = TargetScaling::fit(data);
    let mlp = MlpConfig::new(data.input_dim(), cfg.hidden_dims.clone(), 0).with_seed(cfg.seed);
    let mut net = MdnNetwork::new(mlp, MdnConfig::new(k, data.target_dim()))?;
    let trace = net.train(&scaling.apply(data)?, &cfg.schedule)?;
    net.fold_target_scaling(&scaling)?;
    Ok((net, trace))
}

pub fn train_regnet_policy(
    data: &TrainingSet,
    cfg: &PolicyTrainConfig,
) -> Result<(RegNet, LossTrace)> {
    let scaling = TargetScaling::fit(data);
    let mlp = MlpConfig::new(data.input_dim(), cfg.hidden_dims.clone(), data.target_dim())
        .with_seed(cfg.seed);
    let mut net = RegNet::new(mlp)?;
    let trace = net.train(&scaling.apply(data)?, &cfg.schedule)?;
    net.fold_target_scaling(&scaling)?;
    Ok((net, trace))
}

/// MDN K=10, MDN K=1 and the regressor on the same demonstrations.
pub fn train_driving_models(data: &TrainingSet, cfg: &PolicyTrainConfig) -> Result<DrivingModels> {
    let (k10, k1, reg) = (
        train_mdn_policy(data, 10, cfg)?.0,
        train_mdn_policy(data, 1, cfg)?.0,
        train_regnet_policy(data, cfg)?.0,
    );
    Ok(DrivingModels {
        mdn_k10: Some(k10),
        mdn_k1: Some(k1),
        regnet: Some(reg),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub collision: bool,
    pub reached_goal: bool,
    pub min_dist_to_cars: f64,
    pub lane_dev_dist_mean: f64,
    pub lane_dev_deg_mean: f64,
    pub elapsed_time: f64,
    pub num_lane_changes: usize,
    pub mode_switch_count: usize,
    pub safe_ticks: usize,
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRecord {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
    pub speed_kmh: f64,
    pub mode: &'static str,
    pub uncertainty: Option<f64>,
    pub d_front_left: f64,
    pub d_front_center: f64,
    pub d_front_right: f64,
    pub d_rear_left: f64,
    pub d_rear_center: f64,
    pub d_rear_right: f64,
    pub d_dev: f64,
}

impl ReplayRecord {
    fn new(
        ego: &CarState,
        time: f64,
        mode: Mode,
        uncertainty: Option<f64>,
        f: &FeatureVector,
    ) -> Self {
        ReplayRecord {
            time,
            x: ego.x,
            y: ego.y,
            heading_deg: ego.heading_deg,
            speed_kmh: ego.speed_kmh,
            mode: mode.name(),
            uncertainty,
            d_front_left: f.front[LEFT],
            d_front_center: f.front[CENTER],
            d_front_right: f.front[RIGHT],
            d_rear_left: f.rear[LEFT],
            d_rear_center: f.rear[CENTER],
            d_rear_right: f.rear[RIGHT],
            d_dev: f.d_dev,
        }
    }
}

pub fn write_replay<W: Write>(log: &[ReplayRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in log {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub metrics: EpisodeMetrics,
    pub log: Vec<ReplayRecord>,
}

/// Counts a lane change once a new nearest lane has held for `hold` ticks.
struct LaneChangeCounter {
    committed: usize,
    candidate: usize,
    streak: usize,
    hold: usize,
    count: usize,
}

impl LaneChangeCounter {
    fn observe(&mut self, lane: usize) {
        if lane == self.committed {
            self.streak = 0;
            return;
        }
        if lane == self.candidate {
            self.streak += 1;
        } else {
            self.candidate = lane;
            self.streak = 1;
        }
        if self.streak >= self.hold {
            self.committed = lane;
            self.count += 1;
            self.streak = 0;
        }
    }
}

pub fn run_episode(
    kind: PolicyKind,
    models: &DrivingModels,
    cfg: &EpisodeConfig,
    scene_seed: u64,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    let net = models.net_for(kind)?;
    let gate = cfg.switch.gate(kind);
    let mut scene = cfg.scene(scene_seed, cfg.density)?;
    let track = scene.track.clone();
    let cruise = kmh_to_mps(cfg.cruise_kmh);
    let hold = (1.0 / scene.state.dt).round() as usize;
    let start_lane = track.lane_of(scene.state.ego.y);
    let mut lanes = LaneChangeCounter {
        committed: start_lane,
        candidate: start_lane,
        streak: 0,
        hold,
        count: 0,
    };
    let mut log = Vec::new();
    let (mut dev_m, mut dev_deg) = (0.0, 0.0);
    let (mut safe_ticks, mut switches, mut since_safe) = (0, 0, usize::MAX);
    let mut prev_mode = None;
    let mut collision = false;
    let mut min_gap = scene.min_gap();
    for _ in 0..cfg.max_ticks() {
        if scene.reached_goal() {
            break;
        }
        let Ok(p) = scene.perceive() else {
            collision = true;
            break;
        };
        let heading = wrap_deg(scene.state.ego.heading_deg);
        let (mut mode, target, uncertainty) = match net {
            None => (Mode::Safe, None, None),
            Some(net) => {
                let d = switching_policy(net, &p.features, track.lane_width, &gate)?;
                (d.mode, Some(d.target), d.uncertainty)
            }
        };
        if mode == Mode::Safe {
            since_safe = 0;
        } else if since_safe < cfg.switch.safe_hold_ticks {
            mode = Mode::Safe;
        }
        since_safe = since_safe.saturating_add(1);
        let (speed_kmh, w) = match (mode, target) {
            (Mode::Learned, Some(t)) => (
                cfg.cruise_kmh,
                feedback_heading_controller(heading, t.degrees(), W_MAX),
            ),
            _ => {
                let c = safe_controller(
                    &p.features,
                    p.front_speed_mps,
                    p.rear_speed_mps,
                    heading,
                    cruise,
                );
                (mps_to_kmh(c.speed_mps), c.yaw_rate_deg)
            }
        };
        if mode == Mode::Safe {
            safe_ticks += 1;
        }
        if prev_mode.is_some_and(|m| m != mode) {
            switches += 1;
        }
        prev_mode = Some(mode);
        log.push(ReplayRecord::new(
            &scene.state.ego,
            scene.state.time,
            mode,
            uncertainty,
            &p.features,
        ));
        dev_m += p.features.d_dev.abs();
        dev_deg += heading.abs();
        scene.step(speed_kmh, w);
        lanes.observe(track.lane_of(scene.state.ego.y));
        min_gap = min_gap.min(scene.min_gap());
        if scene.collided() {
            collision = true;
            break;
        }
    }
    let ticks = log.len();
    let n = ticks.max(1) as f64;
    let metrics = EpisodeMetrics {
        collision,
        reached_goal: !collision && scene.reached_goal(),
        min_dist_to_cars: min_gap,
        lane_dev_dist_mean: 1000.0 * dev_m / n,
        lane_dev_deg_mean: dev_deg / n,
        elapsed_time: scene.state.time,
        num_lane_changes: lanes.count,
        mode_switch_count: switches,
        safe_ticks,
        ticks,
    };
    Ok(EpisodeOutcome { metrics, log })
}

/// Per-policy, per-density means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub policy: PolicyKind,
    pub density: f64,
    pub episodes: usize,
    pub collision_ratio_pct: f64,
    pub min_dist_m: f64,
    pub lane_dev_mm: f64,
    pub lane_dev_deg: f64,
    pub elapsed_s: f64,
    pub lane_changes: f64,
    pub switch_count: f64,
    /// Safe-mode ticks over all ticks, pooled across episodes.
    pub safe_fraction: f64,
}

impl SuiteRow {
    pub fn aggregate(policy: PolicyKind, density: f64, episodes: &[EpisodeMetrics]) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        let ticks: usize = episodes.iter().map(|m| m.ticks).sum();
        let safe: usize = episodes.iter().map(|m| m.safe_ticks).sum();
        SuiteRow {
            policy,
            density,
            episodes: episodes.len(),
            collision_ratio_pct: 100.0 * mean(|m| f64::from(u8::from(m.collision))),
            min_dist_m: mean(|m| m.min_dist_to_cars),
            lane_dev_mm: mean(|m| m.lane_dev_dist_mean),
            lane_dev_deg: mean(|m| m.lane_dev_deg_mean),
            elapsed_s: mean(|m| m.elapsed_time),
            lane_changes: mean(|m| m.num_lane_changes as f64),
            switch_count: mean(|m| m.mode_switch_count as f64),
            safe_fraction: if ticks == 0 {
                0.0
            } else {
                safe as f64 / ticks as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub policy: PolicyKind,
    pub density: f64,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub rows: Vec<SuiteRow>,
    pub episodes: Vec<EpisodeResult>,
}

impl SuiteResult {
    pub fn row(&self, policy: PolicyKind, density: f64) -> Option<&SuiteRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.density == density)
    }
}

/// Every policy on every seed at every density. Episodes run in parallel on the current
/// rayon pool; results are ordered by (density, policy, seed).
pub fn evaluate_suite(
    policies: &[PolicyKind],
    models: &DrivingModels,
    cfg: &EpisodeConfig,
    seeds: &[u64],
    densities: &[f64],
) -> Result<SuiteResult> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    for &k in policies {
        models.net_for(k)?;
    }
    let jobs: Vec<(f64, PolicyKind, u64)> = densities
        .iter()
        .flat_map(|&d| {
            policies
                .iter()
                .flat_map(move |&k| seeds.iter().map(move |&s| (d, k, s)))
        })
        .collect();
    let episodes: Vec<EpisodeResult> = jobs
        .par_iter()
        .map(|&(density, policy, seed)| {
            let ep = EpisodeConfig {
                density,
                ..cfg.clone()
            };
            let metrics = run_episode(policy, models, &ep, seed)?.metrics;
            Ok(EpisodeResult {
                policy,
                density,
                seed,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let rows = episodes
        .chunks(seeds.len())
        .map(|c| {
            let ms: Vec<EpisodeMetrics> = c.iter().map(|e| e.metrics.clone()).collect();
            SuiteRow::aggregate(c[0].policy, c[0].density, &ms)
        })
        .collect();
    Ok(SuiteResult { rows, episodes })
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "policy",
    "density",
    "collision_ratio_pct",
    "min_dist_m",
    "lane_dev_mm",
    "lane_dev_deg",
    "elapsed_s",
    "lane_changes",
    "switch_count",
];

pub fn write_metrics_csv<W: Write>(rows: &[SuiteRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.policy.name().to_string(),
            r.density.to_string(),
            r.collision_ratio_pct.to_string(),
            r.min_dist_m.to_string(),
            r.lane_dev_mm.to_string(),
            r.lane_dev_deg.to_string(),
            r.elapsed_s.to_string(),
            r.lane_changes.to_string(),
            r.switch_count.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn format_table(rows: &[SuiteRow]) -> String {
    let mut s = format!(
        "{:<10} {:>7} {:>10} {:>9} {:>9} {:>8} {:>9} {:>8} {:>8} {:>6}\n",
        "policy",
        "density",
        "collide%",
        "min_dist",
        "dev_mm",
        "dev_deg",
        "elapsed",
        "lanes",
        "switch",
        "safe%"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>7.2} {:>10.2} {:>9.2} {:>9.1} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>6.1}\n",
            r.policy.name(),
            r.density,
            r.collision_ratio_pct,
            r.min_dist_m,
            r.lane_dev_mm,
            r.lane_dev_deg,
            r.elapsed_s,
            r.lane_changes,
            r.switch_count,
            100.0 * r.safe_fraction
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::D_MAX;
    use proptest::prelude::*;
    use rand::Rng;

    fn open_road() -> FeatureVector {
        FeatureVector {
            front: [D_MAX; 3],
            rear: [D_MAX; 3],
            d_dev: 0.0,
        }
    }

    /// Input-independent two-component MDN over `(cos, sin)` with component means
    /// `(1 ± a, 0)`, equal weights and raw variance entries `r`.
    fn constant_mdn(a: f64, r: f64) -> MdnNetwork {
        let mut net = MdnNetwork::new(
            MlpConfig::new(7, vec![3], 0).with_seed(1),
            MdnConfig::new(2, 2),
        )
        .unwrap();
        let last = net.mlp.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        let b = &mut last.biases;
        b.fill(0.0);
        // layout: [logits; means (k, c); raw variances (k, c)]
        b[2] = 1.0 + a;
        b[4] = 1.0 - a;
        for i in 6..10 {
            b[i] = r;
        }
        net
    }

    fn gate(kind: PolicyKind) -> Gate {
        SwitchConfig::default().gate(kind)
    }

    #[test]
    fn decodes_atan2() {
        let t = HeadingTarget::from_components(&[0.6, 0.8]).unwrap();
        assert!((t.degrees() - 53.130_102_354_155_99).abs() < 1e-12);
        assert!(HeadingTarget::from_components(&[1.0]).is_err());
        assert!(HeadingTarget::from_components(&[1.0, 0.0, 0.0]).is_err());
        assert_eq!(HeadingTarget::from_degrees(0.0).to_vec(), vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn heading_round_trip(deg in -179.9f64..179.9, scale in 0.1f64..10.0) {
            let t = HeadingTarget::from_degrees(deg);
            prop_assert!((t.degrees() - deg).abs() < 1e-9);
            let scaled = HeadingTarget::from_components(&[scale * t.cos_component, scale * t.sin_component]).unwrap();
            prop_assert!((scaled.degrees() - deg).abs() < 1e-9);
        }

        #[test]
        fn higher_threshold_never_adds_safe_ticks(a in 0.0f64..1.0, t1 in -8f64..2.0, dt in 0f64..4.0, gap in 0f64..50.0) {
            let net = constant_mdn(a, 0.0);
            let f = FeatureVector { front: [D_MAX, gap, D_MAX], ..open_road() };
            let mut lo = gate(PolicyKind::Ualfd);
            lo.log_threshold = t1;
            let hi = Gate { log_threshold: t1 + dt, ..lo };
            let d_lo = switching_policy(PolicyNet::Mdn(&net), &f, 3.7, &lo).unwrap();
            let d_hi = switching_policy(PolicyNet::Mdn(&net), &f, 3.7, &hi).unwrap();
            prop_assert!(d_hi.mode == Mode::Learned || d_lo.mode == Mode::Safe);
        }
    }

    #[test]
    fn explained_threshold_cases() {
        // two equal-weight means a apart from their centre: explained variance a²
        let below = constant_mdn((-1.5f64).exp(), -20.0);
        let above = constant_mdn((-0.5f64).exp(), -20.0);
        let g = gate(PolicyKind::Ualfd);
        let d = switching_policy(PolicyNet::Mdn(&below), &open_road(), 3.7, &g).unwrap();
        assert_eq!(d.mode, Mode::Learned);
        assert!((d.uncertainty.unwrap().ln() + 3.0).abs() < 1e-9);
        let d = switching_policy(PolicyNet::Mdn(&above), &open_road(), 3.7, &g).unwrap();
        assert_eq!(d.mode, Mode::Safe);
        assert!((d.uncertainty.unwrap().ln() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn close_front_car_forces_safe_mode() {
        let calm = constant_mdn(0.0, -20.0);
        let f = FeatureVector {
            front: [D_MAX, 1.0, D_MAX],
            ..open_road()
        };
        for kind in [PolicyKind::Ualfd, PolicyKind::Ualfd2, PolicyKind::MdnK10] {
            assert_eq!(
                switching_policy(PolicyNet::Mdn(&calm), &f, 3.7, &gate(kind))
                    .unwrap()
                    .mode,
                Mode::Safe
            );
        }
        let f = FeatureVector {
            front: [D_MAX, 2.0, D_MAX],
            ..open_road()
        };
        assert_eq!(
            switching_policy(PolicyNet::Mdn(&calm), &f, 3.7, &gate(PolicyKind::Ualfd))
                .unwrap()
                .mode,
            Mode::Learned
        );
        assert_eq!(
            switching_policy(PolicyNet::Mdn(&calm), &f, 3.7, &gate(PolicyKind::MdnK10))
                .unwrap()
                .mode,
            Mode::Safe
        );
    }

    #[test]
    fn unexplained_channel_gates_ualfd2() {
        // σ_max·sigmoid(0) = 2.5 per entry, 5 summed over both outputs
        let noisy = constant_mdn(0.0, 0.0);
        let d = switching_policy(
            PolicyNet::Mdn(&noisy),
            &open_road(),
            3.7,
            &gate(PolicyKind::Ualfd2),
        )
        .unwrap();
        assert_eq!(d.mode, Mode::Safe);
        assert!((d.uncertainty.unwrap() - 5.0).abs() < 1e-12);
        let d = switching_policy(
            PolicyNet::Mdn(&noisy),
            &open_road(),
            3.7,
            &gate(PolicyKind::Ualfd),
        )
        .unwrap();
        assert_eq!(d.mode, Mode::Learned);
        assert_eq!(d.uncertainty, Some(0.0));
    }

    #[test]
    fn single_component_never_switches_on_explained() {
        let net = MdnNetwork::new(
            MlpConfig::new(7, vec![16], 0).with_seed(3),
            MdnConfig::new(1, 2),
        )
        .unwrap();
        let g = Gate {
            log_threshold: -700.0,
            ..gate(PolicyKind::Ualfd)
        };
        let mut rng = RandomState::seed_from_u64(4);
        for _ in 0..200 {
            let f = FeatureVector {
                front: [
                    rng.random_range(0.0..D_MAX),
                    rng.random_range(2.0..D_MAX),
                    rng.random_range(0.0..D_MAX),
                ],
                rear: [
                    rng.random_range(0.0..D_MAX),
                    rng.random_range(0.0..D_MAX),
                    rng.random_range(0.0..D_MAX),
                ],
                d_dev: rng.random_range(-1.85..1.85),
            };
            let d = switching_policy(PolicyNet::Mdn(&net), &f, 3.7, &g).unwrap();
            assert_eq!(d.uncertainty, Some(0.0));
            assert_eq!(d.mode, Mode::Learned);
        }
    }

    #[test]
    fn regressor_cannot_gate_on_variance() {
        let reg = RegNet::new(MlpConfig::new(7, vec![4], 2).with_seed(1)).unwrap();
        let err = switching_policy(
            PolicyNet::Reg(&reg),
            &open_road(),
            3.7,
            &gate(PolicyKind::Ualfd),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let d = switching_policy(
            PolicyNet::Reg(&reg),
            &open_road(),
            3.7,
            &gate(PolicyKind::Regnet),
        )
        .unwrap();
        assert_eq!(d.uncertainty, None);
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("autopilot".parse::<PolicyKind>().is_err());
        assert_eq!(
            PolicyKind::Ualfd.uncertainty_channel(),
            Some(UncertaintyChannel::Explained)
        );
        assert_eq!(
            PolicyKind::Ualfd2.uncertainty_channel(),
            Some(UncertaintyChannel::Unexplained)
        );
        assert_eq!(PolicyKind::MdnK10.uncertainty_channel(), None);
    }

    #[test]
    fn expert_goes_straight_on_open_road() {
        let t = expert_policy(&open_road(), 3.7, &ExpertConfig::default());
        assert_eq!((t.cos_component, t.sin_component), (1.0, 0.0));
    }

    #[test]
    fn expert_steers_toward_larger_open_gap() {
        let cfg = ExpertConfig::default();
        let blocked = FeatureVector {
            front: [45.0, 12.0, 30.0],
            ..open_road()
        };
        assert_eq!(expert_lane_choice(&blocked, &cfg), LaneChoice::Left);
        let t = expert_policy(&blocked, 3.7, &cfg);
        assert!(t.sin_component > 0.0);
        // 20·tanh(5·3.7/20)
        assert!((t.degrees() - 14.565_084_119_636_229).abs() < 1e-9);
        let right = FeatureVector {
            front: [20.0, 12.0, 45.0],
            ..open_road()
        };
        assert_eq!(expert_lane_choice(&right, &cfg), LaneChoice::Right);
        assert!(expert_policy(&right, 3.7, &cfg).sin_component < 0.0);
        let rear_blocked = FeatureVector {
            rear: [2.0, D_MAX, D_MAX],
            ..blocked
        };
        assert_eq!(expert_lane_choice(&rear_blocked, &cfg), LaneChoice::Right);
    }

    #[test]
    fn label_noise_from_position_noise() {
        assert_eq!(heading_label_noise_deg(0.0, 25.0, 0.1), 0.0);
        // atan(√2·0.05 / 2.5)
        assert!((heading_label_noise_deg(0.05, 25.0, 0.1) - 1.620_137_424_565_455_8).abs() < 1e-12);
    }

    #[test]
    fn expert_is_collision_free_over_random_scenes() {
        let cfg = DemoConfig {
            position_noise: 0.0,
            ..DemoConfig::default()
        };
        let mut rng = RandomState::seed_from_u64(11);
        let collided: Vec<(u64, f64)> = (0..500)
            .map(|_| (rng.random::<u64>(), rng.random_range(0.5..1.2)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .filter(|&(s, d)| demonstrate(&cfg, s, d).unwrap().collided)
            .collect();
        assert!(collided.is_empty(), "{collided:?}");
    }

    #[test]
    fn demonstrations_are_seeded() {
        let cfg = DemoConfig {
            num_episodes: 4,
            seed: 9,
            ..DemoConfig::default()
        };
        let a = collect_demonstrations(&cfg).unwrap();
        assert_eq!(a, collect_demonstrations(&cfg).unwrap());
        assert_eq!((a.input_dim(), a.target_dim()), (7, 2));
        assert!(a
            .inputs()
            .iter()
            .chain(a.targets().iter())
            .all(|v| v.is_finite()));
        let other = collect_demonstrations(&DemoConfig {
            seed: 10,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(a, other);
        let none = collect_demonstrations(&DemoConfig {
            num_episodes: 0,
            ..cfg
        })
        .unwrap_err();
        assert!(matches!(none, Error::Collection(_)));
    }

    #[test]
    fn straight_demonstrations_learn_straight_heading() {
        let episode = EpisodeConfig {
            max_start_offset: 0.0,
            ..DemoConfig::default().episode
        };
        let demo = DemoConfig {
            num_episodes: 3,
            density_range: (0.0, 0.0),
            episode,
            ..DemoConfig::default()
        };
        let data = collect_demonstrations(&demo).unwrap();
        let cfg = PolicyTrainConfig {
            hidden_dims: vec![16],
            schedule: TrainSchedule::default()
                .with_epochs(20)
                .with_learning_rate(1e-2),
            seed: 1,
        };
        let input = open_road().to_input(3.7);
        let (mdn, _) = train_mdn_policy(&data, 3, &cfg).unwrap();
        let (reg, _) = train_regnet_policy(&data, &cfg).unwrap();
        for net in [PolicyNet::Mdn(&mdn), PolicyNet::Reg(&reg)] {
            let deg = learned_policy(net, &input).unwrap().degrees();
            assert!(deg.abs() < 2.0, "{deg}");
        }
    }

    #[test]
    fn safe_mode_on_empty_road() {
        let cfg = EpisodeConfig {
            density: 0.0,
            ..EpisodeConfig::default()
        };
        let m = run_episode(PolicyKind::SafeMode, &DrivingModels::default(), &cfg, 3)
            .unwrap()
            .metrics;
        assert!(!m.collision && m.reached_goal);
        assert_eq!(m.num_lane_changes, 0);
        assert_eq!(m.safe_ticks, m.ticks);
        assert_eq!(m.mode_switch_count, 0);
        assert!(m.elapsed_time <= cfg.timeout_s);
    }

    #[test]
    fn missing_model_is_config_error() {
        let err = run_episode(
            PolicyKind::Ualfd,
            &DrivingModels::default(),
            &EpisodeConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn tiny_models() -> DrivingModels {
        let mdn = |k| {
            MdnNetwork::new(
                MlpConfig::new(7, vec![8], 0).with_seed(k as u64),
                MdnConfig::new(k, 2),
            )
            .unwrap()
        };
        DrivingModels {
            mdn_k10: Some(mdn(10)),
            mdn_k1: Some(mdn(1)),
            regnet: Some(RegNet::new(MlpConfig::new(7, vec![8], 2).with_seed(2)).unwrap()),
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let models = tiny_models();
        for kind in PolicyKind::ALL {
            let a = run_episode(kind, &models, &EpisodeConfig::default(), 21).unwrap();
            let b = run_episode(kind, &models, &EpisodeConfig::default(), 21).unwrap();
            assert_eq!(a.metrics, b.metrics, "{kind}");
            assert_eq!(a.log.len(), b.log.len());
            assert!(a.metrics.min_dist_to_cars >= 0.0);
        }
    }

    #[test]
    fn one_seed_suite_is_that_episode() {
        let models = tiny_models();
        let cfg = EpisodeConfig::default();
        let suite = evaluate_suite(&[PolicyKind::MdnK10], &models, &cfg, &[5], &[1.0]).unwrap();
        let m = run_episode(PolicyKind::MdnK10, &models, &cfg, 5)
            .unwrap()
            .metrics;
        let row = suite.row(PolicyKind::MdnK10, 1.0).unwrap();
        assert_eq!(
            row.collision_ratio_pct,
            if m.collision { 100.0 } else { 0.0 }
        );
        assert_eq!(row.min_dist_m, m.min_dist_to_cars);
        assert_eq!(row.elapsed_s, m.elapsed_time);
        assert_eq!(row.lane_changes, m.num_lane_changes as f64);
        assert_eq!(row.switch_count, m.mode_switch_count as f64);
        assert_eq!(suite.episodes[0].metrics, m);
        assert!(evaluate_suite(&[PolicyKind::MdnK10], &models, &cfg, &[], &[1.0]).is_err());
    }

    #[test]
    fn metrics_csv_columns() {
        let row = SuiteRow::aggregate(PolicyKind::SafeMode, 1.0, &[]);
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "policy,density,collision_ratio_pct,min_dist_m,lane_dev_mm,lane_dev_deg,elapsed_s,lane_changes,switch_count"
        );
        assert!(lines.next().unwrap().starts_with("safe_mode,1,"));
    }

    #[test]
    fn switch_config_rejects_bad_distances() {
        let bad = SwitchConfig {
            immediate_switch_distance_ualfd: 0.0,
            ..SwitchConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SwitchConfig::default().validate().is_ok());
    }
}
