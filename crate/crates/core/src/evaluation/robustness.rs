use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{Accumulation, RegionGraph, SpawnSchedule};
use crate::policy::ControlBounds;
use crate::{Error, Result};

use super::{evaluate, mean_ci95, Controller, EvalConfig, NoControl};

/// Spawn-noise levels of the robustness experiment, veh/s.
pub const DEFAULT_SIGMAS: [f64; 9] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub sigmas: Vec<f64>,
    /// Perturbed schedules per noise level; a zero level uses one.
    pub samples: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            sigmas: DEFAULT_SIGMAS.to_vec(),
            samples: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    /// No-control minus controller total accumulation per sample, veh s.
    pub improvements: Vec<f64>,
    /// Samples where the controller hit a numerical failure (for example a
    /// policy activation leaving its domain); they are not in `improvements`.
    pub failures: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Adds `N(0, sigma)` noise to the rate of every origin-destination pair
/// that is active somewhere in `nominal`, at every step, then clips at zero.
/// Pairs without demand stay empty.
pub fn perturb_spawn(
    nominal: &SpawnSchedule,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<SpawnSchedule> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "spawn noise must be >= 0, got {sigma}"
        )));
    }
    let rates = nominal.rates();
    if sigma == 0.0 {
        return Ok(nominal.clone());
    }
    let (steps, r, _) = rates.dim();
    let normal = Normal::new(0.0, sigma).expect("valid std");
    let mut out = rates.clone();
    for i in 0..r {
        for j in 0..r {
            if (0..steps).all(|k| rates[[k, i, j]] == 0.0) {
                continue;
            }
            for k in 0..steps {
                out[[k, i, j]] = (rates[[k, i, j]] + normal.sample(rng)).max(0.0);
            }
        }
    }
    SpawnSchedule::new(out)
}

/// Improvement of a controller over no control under perturbed demand.
///
/// For every noise level and sample, the same perturbed schedule is run with
/// a fresh controller from `make` and with no control; the improvement is
/// the difference of their total accumulations. Each level draws its
/// perturbations from its own generator seeded with `cfg.seed` and the level
/// index. A sample whose controlled run fails numerically is counted in
/// `failures` and left out of the statistics; input errors still abort.
pub fn robustness_sweep(
    make: &mut dyn FnMut() -> Result<Box<dyn Controller>>,
    graph: &RegionGraph,
    nominal: &SpawnSchedule,
    initial: &Accumulation,
    bounds: ControlBounds,
    eval: &EvalConfig,
    cfg: &RobustnessConfig,
) -> Result<Vec<SweepPoint>> {
    if cfg.samples == 0 {
        return Err(Error::InvalidConfig(
            "robustness sweep needs at least one sample".into(),
        ));
    }
    let mut points = Vec::with_capacity(cfg.sigmas.len());
    for (level, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((level as u64 + 1) << 32));
        let samples = if sigma == 0.0 { 1 } else { cfg.samples };
        let mut improvements = Vec::with_capacity(samples);
        let mut failures = 0;
        for sample in 0..samples {
            let spawn = perturb_spawn(nominal, sigma, &mut rng)?;
            let mut ctrl = make()?;
            let controlled = match evaluate(ctrl.as_mut(), graph, &spawn, initial, eval) {
                Ok(res) => res,
                Err(e) if !e.is_validation() => {
                    log::warn!("spawn noise {sigma}, sample {sample}: controller failed: {e}");
                    failures += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut base = NoControl::new(graph, bounds)?;
            let baseline = evaluate(&mut base, graph, &spawn, initial, eval)?;
            improvements.push(baseline.total_accumulation - controlled.total_accumulation);
        }
        let (mean, ci_low, ci_high) = mean_ci95(&improvements);
        log::info!("spawn noise {sigma}: mean improvement {mean:.4e} veh s");
        points.push(SweepPoint {
            sigma,
            improvements,
            failures,
            mean,
            ci_low,
            ci_high,
        });
    }
    Ok(points)
}
