use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{MpcConfig, MpcController};
use crate::model::{self, Accumulation, Integrator, RegionGraph, SpawnSchedule};
use crate::policy::{ControlMode, Policy, PolicyConfig};
use crate::scenario::random_complete;
use crate::{Error, Result};

use super::Controller;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalingMethod {
    Dpc(ControlMode),
    Mpc(ControlMode),
}

impl fmt::Display for ScalingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalingMethod::Dpc(m) => write!(f, "DPC {m}"),
            ScalingMethod::Mpc(m) => write!(f, "MPC {m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub regions: Vec<usize>,
    pub methods: Vec<ScalingMethod>,
    /// Random networks per region count.
    pub trials: usize,
    /// Timed steps per trial.
    pub steps: usize,
    pub seed: u64,
    /// Policy width for the DPC entries.
    pub width: usize,
    pub mpc: MpcConfig,
    /// Largest region count attempted by perimeter-only MPC.
    pub mpc_pc_max_regions: usize,
    /// Largest region count attempted by MPC with routing.
    pub mpc_pcrg_max_regions: usize,
    /// A step slower than this marks the method as not finished.
    pub timeout_s: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            regions: vec![2, 4, 8, 16, 32, 64],
            methods: vec![
                ScalingMethod::Dpc(ControlMode::Pc),
                ScalingMethod::Dpc(ControlMode::Pcrg),
                ScalingMethod::Mpc(ControlMode::Pc),
                ScalingMethod::Mpc(ControlMode::Pcrg),
            ],
            trials: 1,
            steps: 10,
            seed: 0,
            width: 128,
            mpc: MpcConfig::default(),
            mpc_pc_max_regions: 16,
            mpc_pcrg_max_regions: 8,
            timeout_s: 300.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub regions: usize,
    pub method: ScalingMethod,
    /// Median controller time per step; `None` when the method did not finish.
    pub median_step_s: Option<f64>,
    /// Timed controller calls.
    pub timed_steps: usize,
    /// Policy forward passes during the timed calls, DPC only.
    pub forward_passes: Option<u64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

const DT: f64 = 30.0;

/// Times `steps` controller calls after one untimed warm-up call, advancing
/// the state with the control model in between. Returns `None` on timeout.
fn time_steps(
    ctrl: &mut dyn Controller,
    graph: &RegionGraph,
    x0: &Accumulation,
    steps: usize,
    timeout_s: f64,
    times: &mut Vec<f64>,
) -> Result<Option<()>> {
    let demand = ndarray::Array2::zeros(x0.raw_dim());
    let warm = Instant::now();
    ctrl.control(0, x0)?;
    if warm.elapsed().as_secs_f64() > timeout_s {
        return Ok(None);
    }
    let mut x = x0.clone();
    for k in 0..steps {
        let t0 = Instant::now();
        let u = ctrl.control(k, &x)?;
        let dt = t0.elapsed().as_secs_f64();
        if dt > timeout_s {
            return Ok(None);
        }
        times.push(dt);
        x = model::step(graph, &x, &u, &demand, DT, Integrator::Euler)?.state;
    }
    Ok(Some(()))
}

/// Per-step controller wall time on random fully connected networks.
///
/// Controller construction and the first call are excluded from timing.
/// MPC beyond its configured region limits, or after a timeout at a smaller
/// region count, is reported as not finished.
pub fn scaling_benchmark(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    if cfg.trials == 0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig(
            "scaling benchmark needs trials and steps".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut gave_up = Vec::new();
    for &r in &cfg.regions {
        for &method in &cfg.methods {
            let limit = match method {
                ScalingMethod::Dpc(_) => usize::MAX,
                ScalingMethod::Mpc(ControlMode::Pc) => cfg.mpc_pc_max_regions,
                ScalingMethod::Mpc(ControlMode::Pcrg) => cfg.mpc_pcrg_max_regions,
            };
            let dnf = ScalingRow {
                regions: r,
                method,
                median_step_s: None,
                timed_steps: 0,
                forward_passes: None,
            };
            if r > limit || gave_up.contains(&method) {
                rows.push(dnf);
                continue;
            }
            let mut times = Vec::new();
            let mut passes = 0;
            let mut finished = true;
            for trial in 0..cfg.trials {
                let seed = cfg.seed.wrapping_add(1000 * r as u64 + trial as u64);
                let sc = random_complete(r, cfg.steps + 1, seed)?.load()?;
                let ok = match method {
                    ScalingMethod::Dpc(mode) => {
                        let policy = Policy::new(
                            &sc.graph,
                            &PolicyConfig {
                                width: cfg.width,
                                mode,
                                seed,
                                ..PolicyConfig::default()
                            },
                        )?;
                        let mut p = &policy;
                        let before = policy.forward_passes() + 1;
                        let ok = time_steps(
                            &mut p,
                            &sc.graph,
                            &sc.initial,
                            cfg.steps,
                            cfg.timeout_s,
                            &mut times,
                        )?;
                        passes += policy.forward_passes() - before;
                        ok
                    }
                    ScalingMethod::Mpc(mode) => {
                        let forecast = SpawnSchedule::zeros(cfg.steps + cfg.mpc.horizon + 1, r);
                        let mut mpc = MpcController::new(
                            sc.graph.clone(),
                            mode,
                            sc.bounds,
                            cfg.mpc.clone(),
                            DT,
                            Integrator::Euler,
                            forecast,
                        )?;
                        time_steps(
                            &mut mpc,
                            &sc.graph,
                            &sc.initial,
                            cfg.steps,
                            cfg.timeout_s,
                            &mut times,
                        )?
                    }
                };
                if ok.is_none() {
                    finished = false;
                    break;
                }
            }
            if !finished {
                log::warn!("{method} did not finish at {r} regions");
                gave_up.push(method);
                rows.push(dnf);
                continue;
            }
            let timed_steps = times.len();
            rows.push(ScalingRow {
                regions: r,
                method,
                median_step_s: Some(median(&mut times)),
                timed_steps,
                forward_passes: matches!(method, ScalingMethod::Dpc(_)).then_some(passes),
            });
        }
    }
    Ok(rows)
}
