//! Flat `key = value` experiment configuration.
//!
//! Keys carry a section prefix (`train.epochs`, `drive.seeds`); blank lines and `#` comments are
//! ignored. Values are applied in order: defaults, then the config file, then `--set` pairs,
//! then dedicated command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mdn_core::synthetic::{ScenarioKind, ScenarioSpec};
use mdn_core::ualfd::{DemoConfig, EpisodeConfig, PolicyKind, PolicyTrainConfig, SwitchConfig};
use mdn_core::TrainSchedule;

/// What `train` fits: one synthetic scenario, or the three driving networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    Scenario(ScenarioKind),
    Driving,
}

impl TrainTask {
    pub fn name(self) -> &'static str {
        match self {
            TrainTask::Scenario(k) => k.name(),
            TrainTask::Driving => "driving",
        }
    }
}

impl FromStr for TrainTask {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "driving" {
            return Ok(TrainTask::Driving);
        }
        s.parse().map(TrainTask::Scenario).map_err(|_| {
            anyhow!("unknown task `{s}` (expected heavy_noise, absence_of_data, composition or driving)")
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub run_name: String,
    pub jobs: usize,

    pub train_task: TrainTask,
    pub train_mixtures: usize,
    pub train_hidden: Vec<usize>,
    pub train_keep_prob: f64,
    pub train_weight_decay: f64,
    pub train_epochs: usize,
    pub train_learning_rate: f64,
    pub train_batch_size: usize,
    pub train_points: usize,
    pub train_noise_low: f64,
    pub train_noise_high: f64,

    pub demo_episodes: usize,
    pub demo_density_min: f64,
    pub demo_density_max: f64,
    pub demo_position_noise: f64,
    pub demo_train_epochs: usize,

    pub grid_model: PathBuf,
    pub grid_resolution: usize,

    pub drive_models: PathBuf,
    pub drive_policies: Vec<PolicyKind>,
    pub drive_seeds: usize,
    pub drive_first_seed: u64,
    pub drive_densities: Vec<f64>,
    pub drive_cruise_kmh: f64,
    pub drive_timeout_s: f64,
    pub drive_log_threshold: f64,
    pub drive_switch_distance_ualfd: f64,
    pub drive_switch_distance_others: f64,
    pub drive_safe_hold_ticks: usize,
    pub drive_replay: bool,

    pub bench_model: PathBuf,
    pub bench_samples: usize,
    pub bench_calls: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let demo = DemoConfig::default();
        let switch = SwitchConfig::default();
        let episode = EpisodeConfig::default();
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            run_name: String::new(),
            jobs: 0,
            train_task: TrainTask::Scenario(ScenarioKind::Composition),
            train_mixtures: 10,
            train_hidden: vec![256, 256],
            train_keep_prob: 1.0,
            train_weight_decay: 0.0,
            train_epochs: 300,
            train_learning_rate: 1e-3,
            train_batch_size: 64,
            train_points: 4000,
            train_noise_low: -2.0,
            train_noise_high: 2.0,
            demo_episodes: demo.num_episodes,
            demo_density_min: demo.density_range.0,
            demo_density_max: demo.density_range.1,
            demo_position_noise: demo.position_noise,
            demo_train_epochs: PolicyTrainConfig::default().schedule.epochs,
            grid_model: PathBuf::new(),
            grid_resolution: 40,
            drive_models: PathBuf::new(),
            drive_policies: PolicyKind::ALL.to_vec(),
            drive_seeds: 50,
            drive_first_seed: 1000,
            drive_densities: vec![1.0],
            drive_cruise_kmh: episode.cruise_kmh,
            drive_timeout_s: episode.timeout_s,
            drive_log_threshold: switch.log_explained_threshold,
            drive_switch_distance_ualfd: switch.immediate_switch_distance_ualfd,
            drive_switch_distance_others: switch.immediate_switch_distance_others,
            drive_safe_hold_ticks: switch.safe_hold_ticks,
            drive_replay: true,
            bench_model: PathBuf::new(),
            bench_samples: 50,
            bench_calls: 1000,
        }
    }
}

/// Every accepted key with a one-line description, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "seed",
        "global seed for data, initialization, shuffling and dropout",
    ),
    ("output_dir", "parent of the run directories"),
    (
        "run_name",
        "run directory name; empty means <command>-<unix seconds>",
    ),
    ("jobs", "worker threads; 0 uses every core"),
    (
        "train.task",
        "heavy_noise, absence_of_data, composition or driving",
    ),
    ("train.mixtures", "mixture count K for synthetic tasks"),
    ("train.hidden", "comma-separated hidden layer widths"),
    (
        "train.keep_prob",
        "dropout keep probability; 1 disables dropout",
    ),
    ("train.weight_decay", "L2 coefficient on weights"),
    ("train.epochs", "passes over the training set"),
    ("train.learning_rate", "Adam step size"),
    ("train.batch_size", "minibatch size"),
    ("train.points", "samples drawn for synthetic tasks"),
    (
        "train.noise_low",
        "lower bound of the heavy-noise perturbation",
    ),
    (
        "train.noise_high",
        "upper bound of the heavy-noise perturbation",
    ),
    (
        "demo.episodes",
        "expert episodes collected for driving training",
    ),
    (
        "demo.density_min",
        "lowest traffic density in demonstrations",
    ),
    (
        "demo.density_max",
        "highest traffic density in demonstrations",
    ),
    (
        "demo.position_noise",
        "position-track noise behind the heading labels (m)",
    ),
    ("demo.train_epochs", "epochs for the driving networks"),
    ("grid.model", "model file evaluated by grid"),
    ("grid.resolution", "cells per axis"),
    (
        "drive.models",
        "directory holding mdn_k10.model, mdn_k1.model and regnet.model",
    ),
    (
        "drive.policies",
        "comma-separated policies: ualfd, ualfd2, mdn_k10, mdn_k1, regnet, safe_mode",
    ),
    ("drive.seeds", "episodes per policy and density"),
    ("drive.first_seed", "scene seed of the first episode"),
    ("drive.densities", "comma-separated traffic densities"),
    ("drive.cruise_kmh", "learned-mode speed"),
    ("drive.timeout_s", "episode time limit"),
    (
        "drive.log_threshold",
        "log-uncertainty level above which the gate engages the safe controller",
    ),
    (
        "drive.switch_distance_ualfd",
        "front gap forcing the safe controller for ualfd (m)",
    ),
    (
        "drive.switch_distance_others",
        "front gap forcing the safe controller for the other policies (m)",
    ),
    (
        "drive.safe_hold_ticks",
        "ticks the safe controller stays engaged after a trigger",
    ),
    (
        "drive.replay",
        "write per-episode replay logs (true or false)",
    ),
    (
        "bench.model",
        "MDN model file with dropout; empty builds an untrained 2-256-256 K=10 network",
    ),
    ("bench.samples", "Monte Carlo dropout passes T"),
    ("bench.calls", "timed calls per estimator"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "run_name" => self.run_name = v.to_string(),
            "jobs" => self.jobs = parse(key, v)?,
            "train.task" => self.train_task = v.parse()?,
            "train.mixtures" => self.train_mixtures = parse(key, v)?,
            "train.hidden" => self.train_hidden = parse_list(key, v)?,
            "train.keep_prob" => self.train_keep_prob = parse(key, v)?,
            "train.weight_decay" => self.train_weight_decay = parse(key, v)?,
            "train.epochs" => self.train_epochs = parse(key, v)?,
            "train.learning_rate" => self.train_learning_rate = parse(key, v)?,
            "train.batch_size" => self.train_batch_size = parse(key, v)?,
            "train.points" => self.train_points = parse(key, v)?,
            "train.noise_low" => self.train_noise_low = parse(key, v)?,
            "train.noise_high" => self.train_noise_high = parse(key, v)?,
            "demo.episodes" => self.demo_episodes = parse(key, v)?,
            "demo.density_min" => self.demo_density_min = parse(key, v)?,
            "demo.density_max" => self.demo_density_max = parse(key, v)?,
            "demo.position_noise" => self.demo_position_noise = parse(key, v)?,
            "demo.train_epochs" => self.demo_train_epochs = parse(key, v)?,
            "grid.model" => self.grid_model = PathBuf::from(v),
            "grid.resolution" => self.grid_resolution = parse(key, v)?,
            "drive.models" => self.drive_models = PathBuf::from(v),
            "drive.policies" => self.drive_policies = parse_list(key, v)?,
            "drive.seeds" => self.drive_seeds = parse(key, v)?,
            "drive.first_seed" => self.drive_first_seed = parse(key, v)?,
            "drive.densities" => self.drive_densities = parse_list(key, v)?,
            "drive.cruise_kmh" => self.drive_cruise_kmh = parse(key, v)?,
            "drive.timeout_s" => self.drive_timeout_s = parse(key, v)?,
            "drive.log_threshold" => self.drive_log_threshold = parse(key, v)?,
            "drive.switch_distance_ualfd" => self.drive_switch_distance_ualfd = parse(key, v)?,
            "drive.switch_distance_others" => self.drive_switch_distance_others = parse(key, v)?,
            "drive.safe_hold_ticks" => self.drive_safe_hold_ticks = parse(key, v)?,
            "drive.replay" => self.drive_replay = parse(key, v)?,
            "bench.model" => self.bench_model = PathBuf::from(v),
            "bench.samples" => self.bench_samples = parse(key, v)?,
            "bench.calls" => self.bench_calls = parse(key, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies a `key=value` pair as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got `{pair}`"))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got `{line}`", i + 1))?;
            self.set(k.trim(), v)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "run_name" => self.run_name.clone(),
            "jobs" => self.jobs.to_string(),
            "train.task" => self.train_task.name().to_string(),
            "train.mixtures" => self.train_mixtures.to_string(),
            "train.hidden" => join(&self.train_hidden),
            "train.keep_prob" => self.train_keep_prob.to_string(),
            "train.weight_decay" => self.train_weight_decay.to_string(),
            "train.epochs" => self.train_epochs.to_string(),
            "train.learning_rate" => self.train_learning_rate.to_string(),
            "train.batch_size" => self.train_batch_size.to_string(),
            "train.points" => self.train_points.to_string(),
            "train.noise_low" => self.train_noise_low.to_string(),
            "train.noise_high" => self.train_noise_high.to_string(),
            "demo.episodes" => self.demo_episodes.to_string(),
            "demo.density_min" => self.demo_density_min.to_string(),
            "demo.density_max" => self.demo_density_max.to_string(),
            "demo.position_noise" => self.demo_position_noise.to_string(),
            "demo.train_epochs" => self.demo_train_epochs.to_string(),
            "grid.model" => self.grid_model.display().to_string(),
            "grid.resolution" => self.grid_resolution.to_string(),
            "drive.models" => self.drive_models.display().to_string(),
            "drive.policies" => join(&self.drive_policies),
            "drive.seeds" => self.drive_seeds.to_string(),
            "drive.first_seed" => self.drive_first_seed.to_string(),
            "drive.densities" => join(&self.drive_densities),
            "drive.cruise_kmh" => self.drive_cruise_kmh.to_string(),
            "drive.timeout_s" => self.drive_timeout_s.to_string(),
            "drive.log_threshold" => self.drive_log_threshold.to_string(),
            "drive.switch_distance_ualfd" => self.drive_switch_distance_ualfd.to_string(),
            "drive.switch_distance_others" => self.drive_switch_distance_others.to_string(),
            "drive.safe_hold_ticks" => self.drive_safe_hold_ticks.to_string(),
            "drive.replay" => self.drive_replay.to_string(),
            "bench.model" => self.bench_model.display().to_string(),
            "bench.samples" => self.bench_samples.to_string(),
            "bench.calls" => self.bench_calls.to_string(),
            _ => unreachable!("key table and accessor disagree on `{key}`"),
        }
    }

    /// The resolved configuration in the same format `apply_text` reads.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        s
    }

    pub fn scenario(&self, kind: ScenarioKind) -> ScenarioSpec {
        ScenarioSpec {
            kind,
            num_points: self.train_points,
            noise_low: self.train_noise_low,
            noise_high: self.train_noise_high,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule::default()
            .with_epochs(self.train_epochs)
            .with_learning_rate(self.train_learning_rate)
            .with_batch_size(self.train_batch_size)
            .with_seed(self.seed.wrapping_add(2))
    }

    pub fn demo(&self) -> DemoConfig {
        let mut demo = DemoConfig {
            num_episodes: self.demo_episodes,
            density_range: (self.demo_density_min, self.demo_density_max),
            seed: self.seed,
            position_noise: self.demo_position_noise,
            ..DemoConfig::default()
        };
        demo.episode.cruise_kmh = self.drive_cruise_kmh;
        demo.episode.timeout_s = self.drive_timeout_s;
        demo
    }

    pub fn policy_training(&self) -> PolicyTrainConfig {
        PolicyTrainConfig {
            hidden_dims: self.train_hidden.clone(),
            schedule: TrainSchedule {
                epochs: self.demo_train_epochs,
                ..self.schedule()
            },
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            cruise_kmh: self.drive_cruise_kmh,
            timeout_s: self.drive_timeout_s,
            switch: SwitchConfig {
                log_explained_threshold: self.drive_log_threshold,
                immediate_switch_distance_ualfd: self.drive_switch_distance_ualfd,
                immediate_switch_distance_others: self.drive_switch_distance_others,
                safe_hold_ticks: self.drive_safe_hold_ticks,
            },
            ..EpisodeConfig::default()
        }
    }

    pub fn drive_seed_list(&self) -> Vec<u64> {
        (0..self.drive_seeds as u64)
            .map(|i| self.drive_first_seed + i)
            .collect()
    }
}
