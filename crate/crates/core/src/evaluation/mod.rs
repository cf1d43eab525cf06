//! Closed-loop evaluation of controllers on the plant, the spawn-noise
//! robustness sweep, the region-count scaling benchmark and MFD operating
//! bands.

mod band;
mod robustness;
mod scaling;
mod stats;

pub use band::{optimal_band, OperatingBand};
pub use robustness::{
    perturb_spawn, robustness_sweep, RobustnessConfig, SweepPoint, DEFAULT_SIGMAS,
};
pub use scaling::{scaling_benchmark, ScalingConfig, ScalingMethod, ScalingRow};
pub use stats::{mean_ci95, student_t975};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{no_control, MpcController};
use crate::model::{self, Accumulation, ControlInput, Integrator, RegionGraph, SpawnSchedule};
use crate::plant::AnmfdPlant;
use crate::policy::{ControlBounds, Policy};
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Anything that maps an observed accumulation to a control input.
pub trait Controller {
    fn name(&self) -> String;

    /// Control for time index `step` given the (noisy) observation.
    fn control(&mut self, step: usize, obs: &Accumulation) -> Result<ControlInput>;
}

/// Constant control: perimeter ratios at the upper bound, shortest-path routing.
#[derive(Clone, Debug)]
pub struct NoControl {
    input: ControlInput,
}

impl NoControl {
    pub fn new(graph: &RegionGraph, bounds: ControlBounds) -> Result<Self> {
        Ok(Self {
            input: no_control(graph, bounds)?,
        })
    }
}

impl Controller for NoControl {
    fn name(&self) -> String {
        "no-control".into()
    }

    fn control(&mut self, _step: usize, _obs: &Accumulation) -> Result<ControlInput> {
        Ok(self.input.clone())
    }
}

impl Controller for Policy {
    fn name(&self) -> String {
        format!("dpc-{}", self.mode()).to_lowercase()
    }

    fn control(&mut self, _step: usize, obs: &Accumulation) -> Result<ControlInput> {
        self.act(obs)
    }
}

impl Controller for &Policy {
    fn name(&self) -> String {
        (**self).name()
    }

    fn control(&mut self, _step: usize, obs: &Accumulation) -> Result<ControlInput> {
        self.act(obs)
    }
}

impl Controller for MpcController {
    fn name(&self) -> String {
        format!("mpc-{}", self.mode()).to_lowercase()
    }

    fn control(&mut self, step: usize, obs: &Accumulation) -> Result<ControlInput> {
        let mut sol = self.solve(obs, step)?;
        Ok(sol.controls.swap_remove(0))
    }
}

/// Which model plays the role of the real network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    /// Acyclic plant with origin and previous-region tracking.
    #[default]
    Anmfd,
    /// The control model itself.
    Nmfd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub steps: usize,
    pub dt: f64,
    pub obs_noise_std: f64,
    pub seed: u64,
    pub plant: PlantKind,
    pub integrator: Integrator,
    /// Renormalise routing shares over the plant's admissible next regions.
    pub renormalize: bool,
}

impl EvalConfig {
    pub fn from_scenario(s: &Scenario, seed: u64) -> Self {
        Self {
            steps: s.steps,
            dt: s.dt,
            obs_noise_std: s.obs_noise_std,
            seed,
            plant: PlantKind::Anmfd,
            integrator: s.integrator,
            renormalize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub controller: String,
    /// Network total after each step, veh.
    pub total_series: Vec<f64>,
    /// `region_series[k][i]`: vehicles in region `i` after step `k`.
    pub region_series: Vec<Vec<f64>>,
    /// `dt * sum(total_series)`, veh s.
    pub total_accumulation: f64,
    /// Last entry of `total_series`, veh.
    pub final_accumulation: f64,
    /// Wall time spent inside the controller per step, s.
    pub controller_time_s: Vec<f64>,
    pub clamp_events: usize,
    pub renorm_events: usize,
    pub dead_end_events: usize,
}

impl EvalResult {
    pub fn controller_time_total(&self) -> f64 {
        self.controller_time_s.iter().sum()
    }
}

enum Plant {
    Acyclic(AnmfdPlant),
    Model {
        graph: RegionGraph,
        state: Accumulation,
    },
}

impl Plant {
    fn observe(&self) -> Accumulation {
        match self {
            Plant::Acyclic(p) => p.observe(),
            Plant::Model { state, .. } => state.clone(),
        }
    }

    fn region_totals(&self) -> Vec<f64> {
        match self {
            Plant::Acyclic(p) => p.region_totals(),
            Plant::Model { state, .. } => model::region_totals(state).to_vec(),
        }
    }
}

/// Runs `controller` in closed loop for `cfg.steps` steps.
///
/// Each step the controller sees the plant state (projected to the
/// origin-destination form) plus unclipped Gaussian noise; the plant itself
/// evolves noise-free.
pub fn evaluate(
    controller: &mut dyn Controller,
    graph: &RegionGraph,
    spawn: &SpawnSchedule,
    initial: &Accumulation,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let r = graph.regions();
    if spawn.regions() != r || initial.dim() != (r, r) {
        return Err(Error::InvalidConfig(
            "spawn or initial state does not match the graph".into(),
        ));
    }
    if !(cfg.obs_noise_std >= 0.0 && cfg.obs_noise_std.is_finite()) {
        return Err(Error::InvalidConfig(
            "observation noise must be >= 0".into(),
        ));
    }
    let mut plant = match cfg.plant {
        PlantKind::Anmfd => Plant::Acyclic(AnmfdPlant::new(
            graph.clone(),
            initial,
            cfg.dt,
            cfg.integrator,
            cfg.renormalize,
        )?),
        PlantKind::Nmfd => Plant::Model {
            graph: graph.clone(),
            state: initial.clone(),
        },
    };
    let noise =
        (cfg.obs_noise_std > 0.0).then(|| Normal::new(0.0, cfg.obs_noise_std).expect("valid std"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = EvalResult {
        controller: controller.name(),
        ..EvalResult::default()
    };

    for k in 0..cfg.steps {
        let mut obs = plant.observe();
        if let Some(n) = &noise {
            obs.mapv_inplace(|v| v + n.sample(&mut rng));
        }
        let t0 = Instant::now();
        let control = controller.control(k, &obs)?;
        out.controller_time_s.push(t0.elapsed().as_secs_f64());
        let demand = spawn.at(k);
        match &mut plant {
            Plant::Acyclic(p) => {
                let rep = p.advance(&control, &demand).map_err(|e| at_step(e, k))?;
                out.clamp_events += rep.clamped;
                out.renorm_events += rep.renormalized;
                out.dead_end_events += rep.dead_ends;
            }
            Plant::Model { graph, state } => {
                let s = model::step(graph, state, &control, &demand, cfg.dt, cfg.integrator)
                    .map_err(|e| at_step(e, k))?;
                out.clamp_events += s.clamped;
                *state = s.state;
            }
        }
        let regions = plant.region_totals();
        out.total_series.push(regions.iter().sum());
        out.region_series.push(regions);
    }
    out.total_accumulation = cfg.dt * out.total_series.iter().sum::<f64>();
    out.final_accumulation = out.total_series.last().copied().unwrap_or(0.0);
    Ok(out)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFiniteState { .. } => Error::NonFiniteState { step },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{Array2, Array3};

    use super::*;
    use crate::model::Mfd;

    fn path3() -> RegionGraph {
        RegionGraph::new(3, &[(0, 1), (1, 2)], vec![Mfd::BENCHMARK; 3]).unwrap()
    }

    #[test]
    fn empty_network_stays_empty() {
        let g = path3();
        let cfg = EvalConfig {
            steps: 12,
            dt: 30.0,
            obs_noise_std: 0.25,
            seed: 1,
            plant: PlantKind::Anmfd,
            integrator: Integrator::Euler,
            renormalize: true,
        };
        let mut c = NoControl::new(&g, ControlBounds::default()).unwrap();
        let res = evaluate(
            &mut c,
            &g,
            &SpawnSchedule::zeros(12, 3),
            &Array2::zeros((3, 3)),
            &cfg,
        )
        .unwrap();
        assert_eq!(res.total_accumulation, 0.0);
        assert_eq!(res.total_series.len(), 12);
    }

    #[test]
    fn metric_identity_and_plant_choice() {
        let g = path3();
        let mut rates = Array3::zeros((30, 3, 3));
        for k in 0..20 {
            rates[[k, 0, 2]] = 3.0;
        }
        let spawn = SpawnSchedule::new(rates).unwrap();
        for plant in [PlantKind::Anmfd, PlantKind::Nmfd] {
            let cfg = EvalConfig {
                steps: 30,
                dt: 30.0,
                obs_noise_std: 0.0,
                seed: 0,
                plant,
                integrator: Integrator::Euler,
                renormalize: true,
            };
            let mut c = NoControl::new(&g, ControlBounds::default()).unwrap();
            let res = evaluate(&mut c, &g, &spawn, &Array2::zeros((3, 3)), &cfg).unwrap();
            let sum: f64 = res.total_series.iter().sum();
            assert!((res.total_accumulation - 30.0 * sum).abs() <= 1e-6 * res.total_accumulation);
            assert!(res.final_accumulation >= 0.0);
            assert_eq!(res.region_series.len(), 30);
        }
    }
}
