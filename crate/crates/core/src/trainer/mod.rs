//! Offline policy training through differentiable closed-loop rollouts.

mod adam;

pub use adam::AdamW;

use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{Integrator, ModelConstants, RegionGraph, SpawnSchedule};
use crate::policy::{BoundPolicy, ParamGroup, Policy};
use crate::{Error, Result};

/// Distribution of rollout start states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Every rollout starts from an empty network.
    Empty,
    /// Each entry drawn uniformly from `[0, cap)` vehicles.
    Uniform { cap: f64 },
}

/// How the two decoders share epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Perimeter decoder for `every` epochs with routing frozen, then the
    /// reverse, and so on. The backbone always trains.
    Alternating { every: usize },
    /// Everything trains every epoch.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rollout length `N`; the loss sums states `1..N-1`.
    pub horizon: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Standard deviation of Gaussian noise added to every state, in vehicles.
    pub state_noise_std: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub dt: f64,
    pub integrator: Integrator,
    pub initial: InitialCondition,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop once the loss changed by less than `plateau_tolerance` (relative)
    /// over `plateau_window` epochs.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Batch members recorded on one tape.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 240,
            batch_size: 256,
            epochs: 300,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            state_noise_std: 0.25,
            schedule: Schedule::Alternating { every: 1 },
            seed: 0,
            dt: 30.0,
            integrator: Integrator::Euler,
            initial: InitialCondition::Empty,
            grad_clip: Some(10.0),
            plateau_window: 20,
            plateau_tolerance: 1e-4,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch and chunk sizes must be at least 1".into());
        }
        if !(self.state_noise_std >= 0.0 && self.state_noise_std.is_finite()) {
            return bad(format!(
                "noise std must be >= 0, got {}",
                self.state_noise_std
            ));
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if let Schedule::Alternating { every: 0 } = self.schedule {
            return bad("alternation period must be at least 1 epoch".into());
        }
        if let InitialCondition::Uniform { cap } = self.initial {
            if !(cap > 0.0 && cap.is_finite()) {
                return bad(format!("initial-state cap must be positive, got {cap}"));
            }
        }
        Ok(())
    }

    /// Whether `group` is updated in `epoch`.
    pub fn trains(&self, group: ParamGroup, epoch: usize) -> bool {
        match (self.schedule, group) {
            (_, ParamGroup::Backbone) | (Schedule::Joint, _) => true,
            (Schedule::Alternating { every }, g) => {
                let perimeter_phase = (epoch / every).is_multiple_of(2);
                (g == ParamGroup::Perimeter) == perimeter_phase
            }
        }
    }
}

/// Records the closed-loop rollout of `policy` from each start state in
/// `x0` (`[B, R, R]`) and returns the summed L1 loss over steps `1..N-1`.
///
/// With `noise_std > 0` every state receives fresh Gaussian noise before it
/// is clamped at zero.
#[allow(clippy::too_many_arguments)]
pub fn rollout_loss(
    tape: &mut Tape,
    policy: &Policy,
    bound: &BoundPolicy,
    graph: &RegionGraph,
    x0: &Array3<f64>,
    spawn: &SpawnSchedule,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (b, r, r2) = x0.dim();
    if r != graph.regions() || r2 != r || policy.regions() != r {
        return Err(Error::InvalidConfig(
            "start states do not match the graph".into(),
        ));
    }
    if spawn.regions() != r {
        return Err(Error::InvalidConfig(
            "spawn schedule does not match the graph".into(),
        ));
    }
    if spawn.steps() + 1 < cfg.horizon {
        return Err(Error::InvalidConfig(format!(
            "spawn schedule covers {} steps, horizon needs {}",
            spawn.steps(),
            cfg.horizon - 1
        )));
    }
    let consts = ModelConstants::new(tape, graph);
    let default_theta = if policy.mode().routes() {
        None
    } else {
        let t = Tensor::new(
            vec![1, r, r, r],
            policy.default_theta().iter().copied().collect(),
        )?;
        Some(tape.constant(t))
    };
    let noise = if cfg.state_noise_std > 0.0 {
        Some(
            Normal::new(0.0, cfg.state_noise_std)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };
    let mut x = tape.constant(Tensor::new(vec![b, r, r], x0.iter().copied().collect())?);
    let mut loss = tape.constant(Tensor::scalar(0.0));
    for k in 0..cfg.horizon.saturating_sub(1) {
        let wrap = |source: crate::autodiff::AdError| Error::NonFiniteLoss { step: k, source };
        let step_err = |e: Error| match e {
            Error::Autodiff(source) => Error::NonFiniteLoss { step: k, source },
            other => other,
        };
        let obs = tape.reshape(x, &[b, r * r]).map_err(wrap)?;
        let out = policy.forward(tape, bound, obs).map_err(step_err)?;
        let theta = default_theta
            .or(out.theta)
            .expect("routing output or default");
        let d = Tensor::new(vec![1, r, r], spawn.at(k).into_iter().collect())?;
        let d = tape.constant(d);
        x = consts
            .step(tape, x, out.u, theta, d, cfg.dt, cfg.integrator)
            .map_err(step_err)?
            .state;
        if let Some(dist) = &noise {
            let eps: Vec<f64> = (0..b * r * r).map(|_| dist.sample(rng)).collect();
            let eps = tape.constant(Tensor::new(vec![b, r, r], eps)?);
            let noisy = tape.add(x, eps).map_err(wrap)?;
            x = tape.max_scalar(noisy, 0.0).map_err(wrap)?;
        }
        let n = tape.l1_norm(x).map_err(wrap)?;
        loss = tape.add(loss, n).map_err(wrap)?;
    }
    Ok(loss)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Decoder groups updated this epoch.
    pub trained: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub log: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }

    /// The log as JSON lines. Wall times are zeroed unless `with_time`.
    pub fn log_jsonl(&self, with_time: bool) -> String {
        let mut out = String::new();
        for rec in &self.log {
            let mut rec = rec.clone();
            if !with_time {
                rec.wall_time_s = 0.0;
            }
            out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            out.push('\n');
        }
        out
    }
}

fn sample_starts(cfg: &TrainConfig, count: usize, r: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    match cfg.initial {
        InitialCondition::Empty => Array3::zeros((count, r, r)),
        InitialCondition::Uniform { cap } => {
            Array3::from_shape_fn((count, r, r), |_| rng.random_range(0.0..cap))
        }
    }
}

/// Loss and summed gradients of one batch, one tape per chunk, reduced in
/// chunk order.
fn batch_gradients(
    policy: &Policy,
    graph: &RegionGraph,
    spawn: &SpawnSchedule,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let r = graph.regions();
    let shapes: Vec<Vec<usize>> = policy
        .parameters()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut total = vec![None::<Tensor>; shapes.len()];
    let mut loss = 0.0;
    let mut remaining = cfg.batch_size;
    while remaining > 0 {
        let n = remaining.min(cfg.chunk_size);
        remaining -= n;
        let x0 = sample_starts(cfg, n, r, rng);
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape, |g| cfg.trains(g, epoch));
        let l = rollout_loss(&mut tape, policy, &bound, graph, &x0, spawn, cfg, rng)?;
        loss += tape.value(l).item();
        if bound.vars().iter().all(|&(g, _)| !cfg.trains(g, epoch)) {
            continue;
        }
        let grads = tape
            .backward(l)
            .map_err(|source| Error::NonFiniteLoss { step: 0, source })?;
        for (k, &(group, var)) in bound.vars().iter().enumerate() {
            if !cfg.trains(group, epoch) {
                continue;
            }
            let g = grads.get_or_zeros(var, &shapes[k]);
            match &mut total[k] {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }
    Ok((loss, total))
}

/// Trains `policy` on `spawn` and returns it together with the epoch log.
///
/// Aborts with [`Error::Diverged`] once the loss has exceeded ten times the
/// first epoch's loss for ten consecutive epochs.
pub fn train(
    cfg: &TrainConfig,
    graph: &RegionGraph,
    spawn: &SpawnSchedule,
    mut policy: Policy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    policy.ensure_topology(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut log: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut initial = None;
    let mut over = 0;
    let mut stop = StopReason::Completed;

    for epoch in 0..cfg.epochs {
        let (loss, mut grads) = batch_gradients(&policy, graph, spawn, cfg, epoch, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss,
                initial: initial.unwrap_or(f64::NAN),
            });
        }
        let grad_norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                for g in grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        for (slot, ((_, param), grad)) in
            policy.parameters_mut().into_iter().zip(&grads).enumerate()
        {
            if let Some(g) = grad {
                opt.step(slot, param, g)?;
            }
        }

        let trained = [ParamGroup::Perimeter, ParamGroup::Routing]
            .into_iter()
            .filter(|&g| {
                cfg.trains(g, epoch) && (g != ParamGroup::Routing || policy.mode().routes())
            })
            .map(|g| format!("{g:?}").to_lowercase())
            .collect();
        log.push(EpochRecord {
            epoch,
            loss,
            grad_norm,
            trained,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: loss {loss:.6e}, grad norm {grad_norm:.3e}");

        let first = *initial.get_or_insert(loss);
        if loss > 10.0 * first {
            over += 1;
            if over >= 10 {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    initial: first,
                });
            }
        } else {
            over = 0;
        }

        let w = cfg.plateau_window;
        if w > 0 && epoch >= w {
            let before = log[epoch - w].loss;
            let rel = (loss - before).abs() / before.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.plateau_tolerance {
                stop = StopReason::Plateau;
                break;
            }
        }
    }

    Ok(TrainOutcome { policy, log, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mfd;
    use crate::policy::{ControlMode, PolicyConfig};

    #[test]
    fn alternation_phases() {
        let cfg = TrainConfig {
            schedule: Schedule::Alternating { every: 2 },
            ..TrainConfig::default()
        };
        let per: Vec<bool> = (0..6)
            .map(|e| cfg.trains(ParamGroup::Perimeter, e))
            .collect();
        assert_eq!(per, [true, true, false, false, true, true]);
        assert!((0..6)
            .all(|e| cfg.trains(ParamGroup::Perimeter, e) != cfg.trains(ParamGroup::Routing, e)));
        assert!((0..6).all(|e| cfg.trains(ParamGroup::Backbone, e)));
    }

    #[test]
    fn single_step_horizon_has_zero_loss() {
        let g = RegionGraph::new(2, &[(0, 1)], vec![Mfd::BENCHMARK; 2]).unwrap();
        let p = Policy::new(
            &g,
            &PolicyConfig {
                width: 4,
                mode: ControlMode::Pc,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            horizon: 1,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |_| true);
        let x0 = Array3::from_elem((2, 2, 2), 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = rollout_loss(
            &mut tape,
            &p,
            &bound,
            &g,
            &x0,
            &SpawnSchedule::zeros(1, 2),
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn divergence_config_errors() {
        let cfg = TrainConfig {
            schedule: Schedule::Alternating { every: 0 },
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
