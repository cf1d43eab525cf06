use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use nmfd_dpc::baselines::{MpcConfig, MpcController};
use nmfd_dpc::evaluation::{
    evaluate, robustness_sweep, scaling_benchmark, Controller, EvalConfig, EvalResult, NoControl,
    PlantKind, RobustnessConfig, ScalingConfig,
};
use nmfd_dpc::policy::{ControlMode, Policy, PolicyConfig};
use nmfd_dpc::scenario::{benchmark7, random_complete, Scenario, ScenarioFile};
use nmfd_dpc::trainer::{self, InitialCondition, Schedule, TrainConfig, TrainOutcome};
use nmfd_dpc::Error;
use serde::Serialize;

use crate::report::{self, Summary, SummaryRow, Timing, TimingRow};
use crate::{
    BenchArgs, ControllerArg, EvalArgs, MpcFlags, RobustnessArgs, ScalingArgs, ScenarioGenArgs,
    ScenarioName, TrainArgs, TrainFlags,
};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let file = ScenarioFile::from_toml(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(file.load()?)
}

fn load_policy(path: &Path, scenario: &Scenario) -> Result<Policy> {
    Policy::from_json(&read(path)?, &scenario.graph)
        .with_context(|| format!("loading weights {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

pub fn scenario_gen(a: &ScenarioGenArgs) -> Result<()> {
    let file = match a.name {
        ScenarioName::Benchmark7 => benchmark7(),
        ScenarioName::Random => random_complete(a.regions, a.steps, a.seed)?,
    };
    file.load()?;
    let text = file.to_toml()?;
    match &a.out {
        Some(path) => report::write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train_config(flags: &TrainFlags, scenario: &Scenario, seed: u64) -> TrainConfig {
    TrainConfig {
        horizon: flags.horizon.unwrap_or(scenario.steps),
        batch_size: flags.batch_size,
        epochs: flags.epochs,
        learning_rate: flags.lr,
        weight_decay: flags.weight_decay,
        state_noise_std: flags.train_noise,
        schedule: if flags.joint {
            Schedule::Joint
        } else {
            Schedule::Alternating {
                every: flags.alternate_every,
            }
        },
        seed,
        dt: scenario.dt,
        integrator: scenario.integrator,
        initial: match flags.initial_cap {
            Some(cap) => InitialCondition::Uniform { cap },
            None => InitialCondition::Empty,
        },
        grad_clip: (flags.grad_clip > 0.0).then_some(flags.grad_clip),
        plateau_window: flags.plateau_window,
        chunk_size: flags.chunk_size,
        ..TrainConfig::default()
    }
}

#[derive(Serialize)]
struct TrainSummary {
    schema: &'static str,
    scenario: String,
    mode: String,
    seed: u64,
    parameters: usize,
    epochs_run: usize,
    stop: String,
    first_loss: f64,
    final_loss: f64,
    config: TrainConfig,
}

/// Trains one policy and writes weights, log and summary into `dir`.
fn run_training(
    scenario: &Scenario,
    mode: ControlMode,
    flags: &TrainFlags,
    seed: u64,
    dir: &Path,
    weights_name: &str,
) -> Result<(TrainOutcome, f64)> {
    let cfg = train_config(flags, scenario, seed);
    let policy = Policy::new(
        &scenario.graph,
        &PolicyConfig {
            width: flags.width,
            mode,
            bounds: scenario.bounds,
            obs_scale: flags.obs_scale,
            seed,
            ..PolicyConfig::default()
        },
    )?;
    let t0 = Instant::now();
    let outcome = trainer::train(&cfg, &scenario.graph, &scenario.spawn, policy)?;
    let elapsed = t0.elapsed().as_secs_f64();

    let stem = weights_name.trim_end_matches(".json");
    report::write(&dir.join(weights_name), &outcome.policy.to_json()?)?;
    report::write(
        &dir.join(format!("{stem}_train_log.jsonl")),
        &outcome.log_jsonl(true),
    )?;
    let summary = TrainSummary {
        schema: report::TRAIN_SUMMARY_SCHEMA,
        scenario: scenario.name.clone(),
        mode: mode.to_string(),
        seed,
        parameters: outcome.policy.parameter_count(),
        epochs_run: outcome.log.len(),
        stop: format!("{:?}", outcome.stop).to_lowercase(),
        first_loss: outcome.log.first().map_or(0.0, |r| r.loss),
        final_loss: outcome.final_loss().unwrap_or(0.0),
        config: cfg,
    };
    report::write_toml(&dir.join(format!("{stem}_train_summary.toml")), &summary)?;
    Ok((outcome, elapsed))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let dir = out_dir(&a.out_dir)?;
    let mode = a.mode.into();
    let (outcome, elapsed) =
        run_training(&scenario, mode, &a.train, a.seed, &dir, &a.weights_name)?;
    println!(
        "trained {mode} policy for {} epochs in {elapsed:.1} s, final loss {:.6e}",
        outcome.log.len(),
        outcome.final_loss().unwrap_or(0.0)
    );
    Ok(())
}

fn mpc_config(f: &MpcFlags) -> MpcConfig {
    MpcConfig {
        horizon: f.mpc_horizon,
        max_iterations: f.mpc_iterations,
        tolerance: f.mpc_tolerance,
        warm_start: !f.no_warm_start,
        ..MpcConfig::default()
    }
}

fn mpc(scenario: &Scenario, mode: ControlMode, flags: &MpcFlags) -> Result<MpcController> {
    Ok(MpcController::new(
        scenario.graph.clone(),
        mode,
        scenario.bounds,
        mpc_config(flags),
        scenario.dt,
        scenario.integrator,
        scenario.spawn.clone(),
    )?)
}

fn run(ctrl: &mut dyn Controller, scenario: &Scenario, cfg: &EvalConfig) -> Result<EvalResult> {
    let res = evaluate(
        ctrl,
        &scenario.graph,
        &scenario.spawn,
        &scenario.initial,
        cfg,
    )?;
    log::info!(
        "{}: total {:.4e} veh s",
        res.controller,
        res.total_accumulation
    );
    Ok(res)
}

fn timing_row(res: &EvalResult) -> TimingRow {
    TimingRow {
        name: format!("eval {}", res.controller),
        total_time_s: res.controller_time_total(),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let dir = out_dir(&a.out_dir)?;
    let mut cfg = EvalConfig::from_scenario(&scenario, a.seed);
    cfg.plant = a.plant.into();
    cfg.renormalize = !a.no_theta_renorm;
    if let Some(s) = a.obs_noise {
        cfg.obs_noise_std = s;
    }

    let mut baseline_ctrl = NoControl::new(&scenario.graph, scenario.bounds)?;
    let baseline = run(&mut baseline_ctrl, &scenario, &cfg)?;
    let res = match a.controller {
        ControllerArg::NoControl => baseline.clone(),
        ControllerArg::Dpc => {
            let path = a.weights.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--weights is required for the dpc controller".into())
            })?;
            let policy = load_policy(path, &scenario)?;
            run(&mut &policy, &scenario, &cfg)?
        }
        ControllerArg::Mpc => run(&mut mpc(&scenario, a.mode.into(), &a.mpc)?, &scenario, &cfg)?,
    };

    report::trajectory(
        &dir.join(format!("trajectory_{}.tsv", res.controller)),
        &res,
        scenario.dt,
    )?;
    let summary = Summary {
        schema: report::SUMMARY_SCHEMA,
        scenario: scenario.name.clone(),
        plant: plant_name(cfg.plant),
        seed: a.seed,
        rows: vec![SummaryRow::new(&res, baseline.total_accumulation)],
    };
    report::write_toml(&dir.join("summary.toml"), &summary)?;
    report::write_toml(
        &dir.join("timing.toml"),
        &Timing {
            schema: report::TIMING_SCHEMA,
            rows: vec![timing_row(&res)],
        },
    )?;
    print!("{}", report::table(&summary));
    Ok(())
}

fn plant_name(p: PlantKind) -> String {
    match p {
        PlantKind::Anmfd => "anmfd".into(),
        PlantKind::Nmfd => "nmfd".into(),
    }
}

pub fn robustness(a: &RobustnessArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let policy = load_policy(&a.weights, &scenario)?;
    let dir = out_dir(&a.out_dir)?;
    let eval = EvalConfig::from_scenario(&scenario, a.seed);
    let cfg = RobustnessConfig {
        sigmas: a.sigmas.clone(),
        samples: a.trials,
        seed: a.seed,
    };
    if cfg.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig("noise levels must be finite and >= 0".into()).into());
    }
    let mut make = || Ok(Box::new(policy.clone()) as Box<dyn Controller>);
    let points = robustness_sweep(
        &mut make,
        &scenario.graph,
        &scenario.spawn,
        &scenario.initial,
        scenario.bounds,
        &eval,
        &cfg,
    )?;

    let header = [
        "sigma_veh_per_s",
        "samples",
        "failed_samples",
        "mean_improvement_veh_s",
        "ci95_low",
        "ci95_high",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.sigma.to_string(),
                p.improvements.len().to_string(),
                p.failures.to_string(),
                p.mean.to_string(),
                p.ci_low.to_string(),
                p.ci_high.to_string(),
            ]
        })
        .collect();
    report::write_tsv(
        &dir.join("robustness.tsv"),
        report::ROBUSTNESS_SCHEMA,
        &header,
        &rows,
    )?;
    let header = ["sigma_veh_per_s", "sample", "improvement_veh_s"].map(String::from);
    let rows: Vec<Vec<String>> = points
        .iter()
        .flat_map(|p| {
            p.improvements
                .iter()
                .enumerate()
                .map(move |(k, v)| vec![p.sigma.to_string(), k.to_string(), v.to_string()])
        })
        .collect();
    report::write_tsv(
        &dir.join("robustness_samples.tsv"),
        report::ROBUSTNESS_SCHEMA,
        &header,
        &rows,
    )?;
    for p in &points {
        println!(
            "sigma {:>5}: mean improvement {:.4e} veh s ({} failed samples)",
            p.sigma, p.mean, p.failures
        );
    }
    Ok(())
}

fn method_name(m: nmfd_dpc::evaluation::ScalingMethod) -> String {
    m.to_string().to_lowercase().replace(' ', "-")
}

pub fn scaling(a: &ScalingArgs) -> Result<()> {
    let dir = out_dir(&a.out_dir)?;
    let cfg = ScalingConfig {
        regions: a.regions.clone(),
        trials: a.trials,
        steps: a.steps,
        seed: a.seed,
        width: a.width,
        mpc: mpc_config(&a.mpc),
        mpc_pc_max_regions: a.mpc_pc_max_regions,
        mpc_pcrg_max_regions: a.mpc_pcrg_max_regions,
        timeout_s: a.timeout_s,
        ..ScalingConfig::default()
    };
    let rows = scaling_benchmark(&cfg)?;

    let header = [
        "regions",
        "method",
        "status",
        "timed_steps",
        "forward_passes",
    ]
    .map(String::from);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.regions.to_string(),
                method_name(r.method),
                if r.median_step_s.is_some() {
                    "ok"
                } else {
                    "dnf"
                }
                .into(),
                r.timed_steps.to_string(),
                r.forward_passes.map_or("-".into(), |n| n.to_string()),
            ]
        })
        .collect();
    report::write_tsv(
        &dir.join("scaling.tsv"),
        report::SCALING_SCHEMA,
        &header,
        &table,
    )?;
    let header = ["regions", "method", "median_step_s"].map(String::from);
    let timing: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.regions.to_string(),
                method_name(r.method),
                r.median_step_s.map_or("dnf".into(), |t| t.to_string()),
            ]
        })
        .collect();
    report::write_tsv(
        &dir.join("scaling_timing.tsv"),
        report::SCALING_SCHEMA,
        &header,
        &timing,
    )?;
    for r in &rows {
        match r.median_step_s {
            Some(t) => println!(
                "R = {:>3} {:<10} {:>12.3e} s/step",
                r.regions,
                r.method.to_string(),
                t
            ),
            None => println!(
                "R = {:>3} {:<10} {:>12}",
                r.regions,
                r.method.to_string(),
                "DNF"
            ),
        }
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let dir = out_dir(&a.out_dir)?;
    let file = benchmark7();
    report::write(&dir.join("scenario.toml"), &file.to_toml()?)?;
    let scenario = file.load()?;
    let flags = TrainFlags {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: 1e-6,
        horizon: None,
        train_noise: 0.25,
        alternate_every: a.alternate_every,
        joint: false,
        width: a.width,
        obs_scale: Some(a.obs_scale),
        initial_cap: None,
        grad_clip: 10.0,
        chunk_size: 8,
        plateau_window: 20,
    };
    let cfg = EvalConfig::from_scenario(&scenario, a.seed);
    let mut timing = Vec::new();
    let mut results = Vec::new();

    let mut nc = NoControl::new(&scenario.graph, scenario.bounds)?;
    results.push(run(&mut nc, &scenario, &cfg)?);
    if !a.skip_mpc {
        for mode in [ControlMode::Pc, ControlMode::Pcrg] {
            results.push(run(&mut mpc(&scenario, mode, &a.mpc)?, &scenario, &cfg)?);
        }
    }
    for mode in [ControlMode::Pc, ControlMode::Pcrg] {
        let name = format!("weights_{}.json", mode.to_string().to_lowercase());
        let (outcome, elapsed) = run_training(&scenario, mode, &flags, a.seed, &dir, &name)?;
        timing.push(TimingRow {
            name: format!("train dpc-{}", mode.to_string().to_lowercase()),
            total_time_s: elapsed,
        });
        results.push(run(&mut &outcome.policy, &scenario, &cfg)?);
    }

    let baseline = results[0].total_accumulation;
    for res in &results {
        report::trajectory(
            &dir.join(format!("trajectory_{}.tsv", res.controller)),
            res,
            scenario.dt,
        )?;
        timing.push(timing_row(res));
    }
    let summary = Summary {
        schema: report::SUMMARY_SCHEMA,
        scenario: scenario.name.clone(),
        plant: plant_name(cfg.plant),
        seed: a.seed,
        rows: results
            .iter()
            .map(|r| SummaryRow::new(r, baseline))
            .collect(),
    };
    report::write_toml(&dir.join("summary.toml"), &summary)?;
    report::write_toml(
        &dir.join("timing.toml"),
        &Timing {
            schema: report::TIMING_SCHEMA,
            rows: timing,
        },
    )?;
    print!("{}", report::table(&summary));
    Ok(())
}
