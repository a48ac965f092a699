use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use mdn_core::nn::{MlpConfig, RandomState};
use mdn_core::synthetic::{
    composition_stats, evaluate_grid, generate, quadrant_stats, GridEval, QuadrantStats,
    ScenarioKind,
};
use mdn_core::ualfd::{
    collect_demonstrations, format_table, run_episode, train_mdn_policy, train_regnet_policy,
    write_metrics_csv, write_replay, DrivingModels, EpisodeMetrics, EpisodeResult, PolicyKind,
    SuiteResult, SuiteRow,
};
use mdn_core::uncertainty::{time_estimators, TimingReport};
use mdn_core::{LossTrace, MdnConfig, MdnNetwork, Model};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, TrainTask};

pub const MDN_K10_FILE: &str = "mdn_k10.model";
pub const MDN_K1_FILE: &str = "mdn_k1.model";
pub const REGNET_FILE: &str = "regnet.model";

/// Creates the run directory and echoes the resolved config into it.
pub fn run_dir(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let name = if cfg.run_name.is_empty() {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        format!("{command}-{secs}")
    } else {
        cfg.run_name.clone()
    };
    let dir = cfg.output_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_loss(path: &Path, trace: &LossTrace) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "epoch,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w, "{},{l:e}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

fn save_model(path: &Path, model: &Model) -> Result<()> {
    model
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    if path.as_os_str().is_empty() {
        bail!("no model file given");
    }
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_mdn(path: &Path) -> Result<MdnNetwork> {
    match load_model(path)? {
        Model::Mdn(net) => Ok(net),
        Model::Reg(_) => bail!("{} holds a regressor; an MDN is required", path.display()),
    }
}

fn train_scenario(
    cfg: &ExperimentConfig,
    kind: ScenarioKind,
    k: usize,
) -> Result<(MdnNetwork, LossTrace)> {
    let data = generate(&cfg.scenario(kind))?;
    let mlp = MlpConfig::new(2, cfg.train_hidden.clone(), 0)
        .with_seed(cfg.seed.wrapping_add(1))
        .with_keep_prob(cfg.train_keep_prob)
        .with_weight_decay(cfg.train_weight_decay);
    let mut net = MdnNetwork::new(mlp, MdnConfig::new(k, 1))?;
    let start = net.mean_nll(&data)?;
    let trace = net
        .train(&data, &cfg.schedule())
        .with_context(|| format!("training {}", kind.name()))?;
    let end = net.mean_nll(&data)?;
    println!(
        "{} K={k}: {} samples, NLL {start:.4} -> {end:.4} over {} epochs",
        kind.name(),
        data.len(),
        trace.len()
    );
    Ok((net, trace))
}

fn train_driving(cfg: &ExperimentConfig, dir: &Path) -> Result<DrivingModels> {
    let t = Instant::now();
    let data = collect_demonstrations(&cfg.demo())?;
    println!(
        "collected {} demonstration samples in {:.1?}",
        data.len(),
        t.elapsed()
    );
    let pcfg = cfg.policy_training();
    let (k10, trace) = train_mdn_policy(&data, 10, &pcfg).context("training mdn_k10")?;
    save_model(&dir.join(MDN_K10_FILE), &Model::Mdn(k10.clone()))?;
    write_loss(&dir.join("loss_mdn_k10.csv"), &trace)?;
    let (k1, trace) = train_mdn_policy(&data, 1, &pcfg).context("training mdn_k1")?;
    save_model(&dir.join(MDN_K1_FILE), &Model::Mdn(k1.clone()))?;
    write_loss(&dir.join("loss_mdn_k1.csv"), &trace)?;
    let (reg, trace) = train_regnet_policy(&data, &pcfg).context("training regnet")?;
    save_model(&dir.join(REGNET_FILE), &Model::Reg(reg.clone()))?;
    write_loss(&dir.join("loss_regnet.csv"), &trace)?;
    println!("trained driving models in {:.1?}", t.elapsed());
    Ok(DrivingModels {
        mdn_k10: Some(k10),
        mdn_k1: Some(k1),
        regnet: Some(reg),
    })
}

pub fn train(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match cfg.train_task {
        TrainTask::Scenario(kind) => {
            let (net, trace) = train_scenario(cfg, kind, cfg.train_mixtures)?;
            let path = dir.join(format!("{}.model", kind.name()));
            save_model(&path, &Model::Mdn(net))?;
            write_loss(&dir.join("loss.csv"), &trace)?;
            println!("wrote {}", path.display());
        }
        TrainTask::Driving => {
            train_driving(cfg, dir)?;
        }
    }
    Ok(())
}

fn write_quadrants(path: &Path, q: &QuadrantStats) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "quadrant,cells,total,explained,unexplained")?;
    for (i, m) in q.quadrants.iter().enumerate() {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e}",
            i + 1,
            m.cells,
            m.total,
            m.explained,
            m.unexplained
        )?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate_and_write_grid(
    net: &MdnNetwork,
    resolution: usize,
    dir: &Path,
    stem: &str,
) -> Result<GridEval> {
    let grid = evaluate_grid(net, resolution)?;
    grid.write_csv(create(&dir.join(format!("{stem}.csv")))?)?;
    write_quadrants(
        &dir.join(format!("{stem}_quadrants.csv")),
        &quadrant_stats(&grid),
    )?;
    Ok(grid)
}

fn print_grid_summary(grid: &GridEval) {
    let q = quadrant_stats(grid);
    for (i, m) in q.quadrants.iter().enumerate() {
        println!(
            "Q{}: total {:.4e}  explained {:.4e}  unexplained {:.4e}",
            i + 1,
            m.total,
            m.explained,
            m.unexplained
        );
    }
    let o = q.others();
    println!(
        "first quadrant over the rest: explained x{:.2}, unexplained x{:.2}",
        q.quadrants[0].explained / o.explained,
        q.quadrants[0].unexplained / o.unexplained
    );
    let c = composition_stats(grid);
    println!(
        "medians: explained {:.4e}, unexplained {:.4e}; corr(explained, (2f)^2) {:.3}",
        c.median_explained, c.median_unexplained, c.gap_correlation
    );
}

pub fn grid(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let net = load_mdn(&cfg.grid_model)?;
    let grid = evaluate_and_write_grid(&net, cfg.grid_resolution, dir, "grid")?;
    print_grid_summary(&grid);
    Ok(())
}

fn load_driving_models(cfg: &ExperimentConfig) -> Result<DrivingModels> {
    let mut models = DrivingModels::default();
    let needs = |kinds: &[PolicyKind]| cfg.drive_policies.iter().any(|p| kinds.contains(p));
    if needs(&[PolicyKind::Ualfd, PolicyKind::Ualfd2, PolicyKind::MdnK10]) {
        models.mdn_k10 = Some(load_mdn(&cfg.drive_models.join(MDN_K10_FILE))?);
    }
    if needs(&[PolicyKind::MdnK1]) {
        models.mdn_k1 = Some(load_mdn(&cfg.drive_models.join(MDN_K1_FILE))?);
    }
    if needs(&[PolicyKind::Regnet]) {
        let path = cfg.drive_models.join(REGNET_FILE);
        match load_model(&path)? {
            Model::Reg(r) => models.regnet = Some(r),
            Model::Mdn(_) => bail!("{} holds an MDN; a regressor is required", path.display()),
        }
    }
    Ok(models)
}

fn write_episodes(path: &Path, episodes: &[EpisodeResult]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "policy,density,seed,collision,reached_goal,min_dist_m,lane_dev_mm,lane_dev_deg,elapsed_s,lane_changes,switch_count,safe_ticks,ticks"
    )?;
    for e in episodes {
        let m = &e.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.policy,
            e.density,
            e.seed,
            m.collision,
            m.reached_goal,
            m.min_dist_to_cars,
            m.lane_dev_dist_mean,
            m.lane_dev_deg_mean,
            m.elapsed_time,
            m.num_lane_changes,
            m.mode_switch_count,
            m.safe_ticks,
            m.ticks
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (density, seed) with each policy's outcome side by side.
fn write_paired(path: &Path, policies: &[PolicyKind], episodes: &[EpisodeResult]) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "density,seed")?;
    for p in policies {
        write!(
            w,
            ",{p}_collision,{p}_elapsed_s,{p}_lane_changes,{p}_safe_ticks"
        )?;
    }
    writeln!(w)?;
    let mut keys: Vec<(f64, u64)> = episodes.iter().map(|e| (e.density, e.seed)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.dedup();
    for (density, seed) in keys {
        write!(w, "{density},{seed}")?;
        for p in policies {
            match episodes
                .iter()
                .find(|e| e.policy == *p && e.density == density && e.seed == seed)
            {
                Some(e) => write!(
                    w,
                    ",{},{},{},{}",
                    e.metrics.collision,
                    e.metrics.elapsed_time,
                    e.metrics.num_lane_changes,
                    e.metrics.safe_ticks
                )?,
                None => write!(w, ",,,,")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn run_drive(cfg: &ExperimentConfig, models: &DrivingModels, dir: &Path) -> Result<SuiteResult> {
    let seeds = cfg.drive_seed_list();
    if seeds.is_empty() {
        bail!("drive.seeds must be positive");
    }
    if cfg.drive_policies.is_empty() || cfg.drive_densities.is_empty() {
        bail!("at least one policy and one density are required");
    }
    let episode = cfg.episode();
    let replay_dir = dir.join("replay");
    if cfg.drive_replay {
        fs::create_dir_all(&replay_dir)?;
    }
    let mut jobs = Vec::new();
    for &d in &cfg.drive_densities {
        for &k in &cfg.drive_policies {
            jobs.extend(seeds.iter().map(|&s| (d, k, s)));
        }
    }
    let t = Instant::now();
    let episodes: Vec<EpisodeResult> = jobs
        .par_iter()
        .map(|&(density, policy, seed)| -> Result<EpisodeResult> {
            let ep = mdn_core::ualfd::EpisodeConfig {
                density,
                ..episode.clone()
            };
            let out = run_episode(policy, models, &ep, seed)?;
            if cfg.drive_replay {
                let path = replay_dir.join(format!("{policy}_d{density}_s{seed}.csv"));
                write_replay(&out.log, create(&path)?)?;
            }
            Ok(EpisodeResult {
                policy,
                density,
                seed,
                metrics: out.metrics,
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SuiteRow> = episodes
        .chunks(seeds.len())
        .map(|c| {
            let ms: Vec<EpisodeMetrics> = c.iter().map(|e| e.metrics.clone()).collect();
            SuiteRow::aggregate(c[0].policy, c[0].density, &ms)
        })
        .collect();
    write_metrics_csv(&rows, create(&dir.join("metrics.csv"))?)?;
    write_episodes(&dir.join("episodes.csv"), &episodes)?;
    if cfg.drive_policies.len() > 1 {
        write_paired(&dir.join("paired.csv"), &cfg.drive_policies, &episodes)?;
    }
    let table = format_table(&rows);
    fs::write(dir.join("table.txt"), &table)?;
    println!(
        "{} episodes in {:.1?}\n{table}",
        episodes.len(),
        t.elapsed()
    );
    Ok(SuiteResult { rows, episodes })
}

pub fn drive(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let models = load_driving_models(cfg)?;
    run_drive(cfg, &models, dir)?;
    Ok(())
}

fn bench_network(cfg: &ExperimentConfig) -> Result<MdnNetwork> {
    if cfg.bench_model.as_os_str().is_empty() {
        let mlp = MlpConfig::new(2, vec![256, 256], 0)
            .with_seed(cfg.seed)
            .with_keep_prob(0.9);
        return Ok(MdnNetwork::new(mlp, MdnConfig::new(10, 1))?);
    }
    let net = load_mdn(&cfg.bench_model)?;
    if !net.mlp.config().dropout_enabled() {
        bail!(
            "{} has no dropout; Monte Carlo dropout needs keep_prob < 1",
            cfg.bench_model.display()
        );
    }
    Ok(net)
}

fn run_bench(cfg: &ExperimentConfig, dir: &Path) -> Result<TimingReport> {
    let net = bench_network(cfg)?;
    let mut rng = RandomState::seed_from_u64(cfg.seed);
    let inputs: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            (0..net.input_dim())
                .map(|_| rng.random_range(-6.0..6.0))
                .collect()
        })
        .collect();
    let report = time_estimators(&net, &inputs, cfg.bench_samples, cfg.bench_calls, &mut rng)?;
    let mut w = create(&dir.join("bench.csv"))?;
    writeln!(w, "samples,calls,single_pass_ms,mc_dropout_ms,speedup")?;
    writeln!(
        w,
        "{},{},{},{},{}",
        report.samples,
        report.calls,
        report.single_pass_ms,
        report.mc_dropout_ms,
        report.speedup()
    )?;
    w.flush()?;
    println!(
        "single pass {:.4} ms, Monte Carlo dropout (T={}) {:.4} ms per call over {} calls: {:.1}x faster",
        report.single_pass_ms,
        report.samples,
        report.mc_dropout_ms,
        report.calls,
        report.speedup()
    );
    Ok(report)
}

pub fn bench(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    run_bench(cfg, dir)?;
    Ok(())
}

struct Verdict {
    id: u8,
    label: &'static str,
    passed: bool,
    detail: String,
}

impl Verdict {
    fn line(&self) -> String {
        format!(
            "[{}] {} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.label,
            self.detail
        )
    }
}

fn first_quadrant_ratios(grid: &GridEval) -> (f64, f64) {
    let q = quadrant_stats(grid);
    let o = q.others();
    (
        q.quadrants[0].explained / o.explained,
        q.quadrants[0].unexplained / o.unexplained,
    )
}

fn driving_verdicts(res: &SuiteResult, density: f64) -> Result<Vec<Verdict>> {
    let row = |k: PolicyKind| {
        res.row(k, density)
            .with_context(|| format!("no {k} row at density {density}"))
    };
    let (ualfd, ualfd2, k10, reg, safe) = (
        row(PolicyKind::Ualfd)?,
        row(PolicyKind::Ualfd2)?,
        row(PolicyKind::MdnK10)?,
        row(PolicyKind::Regnet)?,
        row(PolicyKind::SafeMode)?,
    );
    let a = safe.collision_ratio_pct == 0.0 && ualfd.collision_ratio_pct == 0.0;
    let b = ualfd.collision_ratio_pct <= k10.collision_ratio_pct
        && k10.collision_ratio_pct <= reg.collision_ratio_pct;
    let c = ualfd.elapsed_s <= safe.elapsed_s;
    let ratio = ualfd2.safe_fraction / ualfd.safe_fraction;
    Ok(vec![
        Verdict {
            id: 9,
            label: "driving safety ordering",
            passed: a && b && c,
            detail: format!(
                "collisions % safe_mode {:.1}, ualfd {:.1}, mdn_k10 {:.1}, regnet {:.1}; elapsed ualfd {:.2} s vs safe_mode {:.2} s",
                safe.collision_ratio_pct,
                ualfd.collision_ratio_pct,
                k10.collision_ratio_pct,
                reg.collision_ratio_pct,
                ualfd.elapsed_s,
                safe.elapsed_s
            ),
        },
        Verdict {
            id: 10,
            label: "channel comparison",
            passed: ratio >= 2.0 && ualfd2.lane_changes <= ualfd.lane_changes,
            detail: format!(
                "safe fraction ualfd2 {:.3} vs ualfd {:.3} (x{ratio:.2}, need >= 2); lane changes {:.2} vs {:.2}",
                ualfd2.safe_fraction, ualfd.safe_fraction, ualfd2.lane_changes, ualfd.lane_changes
            ),
        },
    ])
}

/// Trains and evaluates everything behind the experiment-level criteria and writes one
/// verdict line per criterion to `summary.txt`.
pub fn suite(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut verdicts = Vec::new();
    let res = cfg.grid_resolution;

    let (heavy, trace) = train_scenario(cfg, ScenarioKind::HeavyNoise, 10)?;
    write_loss(&dir.join("loss_heavy_noise.csv"), &trace)?;
    let grid = evaluate_and_write_grid(&heavy, res, dir, "grid_heavy_noise")?;
    let (_, r) = first_quadrant_ratios(&grid);
    verdicts.push(Verdict {
        id: 4,
        label: "heavy-noise signature",
        passed: r >= 3.0,
        detail: format!("first-quadrant unexplained x{r:.2} the other quadrants (need >= 3)"),
    });

    let (absence, trace) = train_scenario(cfg, ScenarioKind::AbsenceOfData, 10)?;
    write_loss(&dir.join("loss_absence_of_data.csv"), &trace)?;
    let grid = evaluate_and_write_grid(&absence, res, dir, "grid_absence_of_data")?;
    let (r, _) = first_quadrant_ratios(&grid);
    verdicts.push(Verdict {
        id: 5,
        label: "absence-of-data signature",
        passed: r >= 2.0,
        detail: format!("first-quadrant explained x{r:.2} the other quadrants (need >= 2)"),
    });

    let (comp, trace) = train_scenario(cfg, ScenarioKind::Composition, 10)?;
    write_loss(&dir.join("loss_composition.csv"), &trace)?;
    let grid = evaluate_and_write_grid(&comp, res, dir, "grid_composition")?;
    let c = composition_stats(&grid);
    verdicts.push(Verdict {
        id: 6,
        label: "composition signature",
        passed: c.median_unexplained <= 0.2 * c.median_explained && c.gap_correlation >= 0.5,
        detail: format!(
            "median unexplained {:.4e} vs explained {:.4e}; correlation {:.3} (need <= 0.2x and >= 0.5)",
            c.median_unexplained, c.median_explained, c.gap_correlation
        ),
    });

    let (k1, trace) = train_scenario(cfg, ScenarioKind::Composition, 1)?;
    write_loss(&dir.join("loss_composition_k1.csv"), &trace)?;
    let grid = evaluate_and_write_grid(&k1, res, dir, "grid_composition_k1")?;
    let nonzero = grid
        .cells
        .iter()
        .filter(|c| c.report.explained.iter().any(|&v| v != 0.0))
        .count();
    verdicts.push(Verdict {
        id: 7,
        label: "single-component degeneracy",
        passed: nonzero == 0,
        detail: format!(
            "{nonzero} of {} cells with nonzero explained variance",
            grid.cells.len()
        ),
    });

    let timing = run_bench(cfg, dir)?;
    verdicts.push(Verdict {
        id: 8,
        label: "timing",
        passed: timing.speedup() >= 10.0 && timing.calls >= 1000,
        detail: format!(
            "{:.4} ms vs {:.4} ms per call over {} calls, x{:.1} (need >= 10)",
            timing.single_pass_ms,
            timing.mc_dropout_ms,
            timing.calls,
            timing.speedup()
        ),
    });

    let models = train_driving(cfg, dir)?;
    let mut drive_cfg = cfg.clone();
    drive_cfg.drive_policies = PolicyKind::ALL.to_vec();
    if !drive_cfg.drive_densities.contains(&1.0) {
        drive_cfg.drive_densities.insert(0, 1.0);
    }
    let result = run_drive(&drive_cfg, &models, dir)?;
    verdicts.extend(driving_verdicts(&result, 1.0)?);

    let mut summary = String::new();
    for v in &verdicts {
        println!("{}", v.line());
        summary.push_str(&v.line());
        summary.push('\n');
    }
    let passed = verdicts.iter().filter(|v| v.passed).count();
    let tail = format!(
        "{passed} of {} experiment-level criteria passed\n",
        verdicts.len()
    );
    print!("{tail}");
    summary.push_str(&tail);
    fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}
