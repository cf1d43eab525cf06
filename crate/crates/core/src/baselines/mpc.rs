use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{
    Accumulation, ControlInput, Integrator, ModelConstants, RegionGraph, SpawnSchedule,
};
use crate::policy::{ControlBounds, ControlMode, DecoderLayout};
use crate::{Error, Result};

use super::dijkstra_theta;

/// Initial perimeter logit of a cold start, close to the upper bound.
const COLD_U_LOGIT: f64 = 3.0;
/// Initial routing logit of the shortest-path hop on a cold start.
const COLD_ROUTE_LOGIT: f64 = 3.0;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Planning horizon in steps.
    pub horizon: usize,
    /// Gradient evaluations per solve.
    pub max_iterations: usize,
    /// Relative decrease of the objective below which a solve has converged.
    pub tolerance: f64,
    /// Largest logit change of the first trial step.
    pub initial_step: f64,
    pub warm_start: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            max_iterations: 40,
            tolerance: 1e-5,
            initial_step: 1.0,
            warm_start: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "MPC needs a horizon and at least one iteration".into(),
            ));
        }
        if !(self.tolerance >= 0.0 && self.initial_step > 0.0) {
            return Err(Error::InvalidConfig(
                "MPC tolerance and step must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one receding-horizon solve.
#[derive(Clone, Debug)]
pub struct MpcSolution {
    /// Planned controls, first one to be applied.
    pub controls: Vec<ControlInput>,
    /// `sum_k |x_k|_1` over the horizon at the returned plan.
    pub objective: f64,
    pub iterations: usize,
    /// False when the iteration limit was hit; the best iterate is returned.
    pub converged: bool,
}

/// Direct-shooting MPC on the differentiable model.
///
/// Decisions are unconstrained logits mapped through the policy decoders, so
/// every iterate is feasible. Each solve runs backtracking gradient descent.
#[derive(Clone, Debug)]
pub struct MpcController {
    graph: RegionGraph,
    layout: DecoderLayout,
    mode: ControlMode,
    bounds: ControlBounds,
    config: MpcConfig,
    dt: f64,
    integrator: Integrator,
    forecast: SpawnSchedule,
    default_theta: Array3<f64>,
    plan: Option<Plan>,
    warnings: usize,
    last_iterations: usize,
}

#[derive(Clone, Debug)]
struct Plan {
    u: Vec<Tensor>,
    theta: Vec<Tensor>,
}

impl Plan {
    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.u.iter().chain(&self.theta)
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.u.iter_mut().chain(self.theta.iter_mut())
    }

    fn shifted(&self) -> Plan {
        let shift = |v: &Vec<Tensor>| {
            let mut out: Vec<Tensor> = v.iter().skip(1).cloned().collect();
            if let Some(last) = v.last() {
                out.push(last.clone());
            }
            out
        };
        Plan {
            u: shift(&self.u),
            theta: shift(&self.theta),
        }
    }
}

impl MpcController {
    pub fn new(
        graph: RegionGraph,
        mode: ControlMode,
        bounds: ControlBounds,
        config: MpcConfig,
        dt: f64,
        integrator: Integrator,
        forecast: SpawnSchedule,
    ) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        if forecast.regions() != graph.regions() {
            return Err(Error::InvalidConfig(
                "forecast does not match the graph".into(),
            ));
        }
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dt must be positive, got {dt}"
            )));
        }
        Ok(Self {
            layout: DecoderLayout::new(&graph),
            default_theta: dijkstra_theta(&graph)?,
            graph,
            mode,
            bounds,
            config,
            dt,
            integrator,
            forecast,
            plan: None,
            warnings: 0,
            last_iterations: 0,
        })
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    /// Solves that stopped at the iteration limit.
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    pub fn last_iterations(&self) -> usize {
        self.last_iterations
    }

    /// Forgets the warm-start plan.
    pub fn reset(&mut self) {
        self.plan = None;
    }

    fn cold_plan(&self) -> Plan {
        let r = self.graph.regions();
        let h = self.config.horizon;
        let u = vec![Tensor::full(&[1, self.layout.pair_count()], COLD_U_LOGIT); h];
        let theta = if self.mode.routes() {
            let data = self
                .default_theta
                .iter()
                .map(|&t| t * COLD_ROUTE_LOGIT)
                .collect();
            vec![Tensor::new(vec![1, r * r * r], data).expect("shape"); h]
        } else {
            Vec::new()
        };
        Plan { u, theta }
    }

    /// Records the horizon rollout for `plan` and returns the objective and
    /// the parameter handles in plan order.
    fn rollout(
        &self,
        tape: &mut Tape,
        plan: &Plan,
        x0: &Accumulation,
        step: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let r = self.graph.regions();
        let consts = ModelConstants::new(tape, &self.graph);
        let params: Vec<Var> = plan.tensors().map(|t| tape.param(t.clone())).collect();
        let h = self.config.horizon;
        let default_theta = if self.mode.routes() {
            None
        } else {
            Some(tape.constant(Tensor::new(
                vec![1, r, r, r],
                self.default_theta.iter().copied().collect(),
            )?))
        };
        let mut x = tape.constant(Tensor::new(vec![1, r, r], x0.iter().copied().collect())?);
        let mut objective = tape.constant(Tensor::scalar(0.0));
        for t in 0..h {
            let u = self.layout.decode_u(tape, params[t], self.bounds)?;
            let theta = match default_theta {
                Some(th) => th,
                None => self.layout.decode_theta(tape, params[h + t])?,
            };
            let d = tape.constant(Tensor::new(
                vec![1, r, r],
                self.forecast.at(step + t).into_iter().collect(),
            )?);
            x = consts
                .step(tape, x, u, theta, d, self.dt, self.integrator)?
                .state;
            let n = tape.l1_norm(x)?;
            objective = tape.add(objective, n)?;
        }
        Ok((objective, params))
    }

    fn decode(&self, plan: &Plan) -> Result<Vec<ControlInput>> {
        let r = self.graph.regions();
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(plan.u.len());
        for t in 0..plan.u.len() {
            let logits = tape.constant(plan.u[t].clone());
            let u = self.layout.decode_u(&mut tape, logits, self.bounds)?;
            let u = Array2::from_shape_vec((r, r), tape.value(u).data().to_vec()).expect("shape");
            let theta = match plan.theta.get(t) {
                Some(l) => {
                    let logits = tape.constant(l.clone());
                    let th = self.layout.decode_theta(&mut tape, logits)?;
                    Array3::from_shape_vec((r, r, r), tape.value(th).data().to_vec())
                        .expect("shape")
                }
                None => self.default_theta.clone(),
            };
            out.push(ControlInput { u, theta });
        }
        Ok(out)
    }

    /// Plans `horizon` steps from `x0`, the state at time index `step`.
    pub fn solve(&mut self, x0: &Accumulation, step: usize) -> Result<MpcSolution> {
        let r = self.graph.regions();
        if x0.dim() != (r, r) {
            return Err(Error::InvalidConfig(format!(
                "state is {:?}, expected {r}x{r}",
                x0.dim()
            )));
        }
        let mut plan = match (&self.plan, self.config.warm_start) {
            (Some(p), true) => p.shifted(),
            _ => self.cold_plan(),
        };

        let mut tape = Tape::new();
        let (obj, params) = self.rollout(&mut tape, &plan, x0, step)?;
        let mut f = tape.value(obj).item();
        let mut grads = collect_grads(&tape, obj, &params, &plan)?;
        let mut eta: Option<f64> = None;
        let mut iterations = 1;
        let mut converged = false;

        loop {
            let g2: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
            if g2 == 0.0 {
                converged = true;
                break;
            }
            if iterations >= self.config.max_iterations {
                break;
            }
            let step_len = eta.unwrap_or_else(|| {
                let gmax = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                self.config.initial_step / gmax
            });
            let mut trial_eta = step_len;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let mut trial = plan.clone();
                for (t, g) in trial.tensors_mut().zip(&grads) {
                    for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *p -= trial_eta * gv;
                    }
                }
                let mut tape = Tape::new();
                // non-finite trial states count as a failed step
                if let Ok((obj, params)) = self.rollout(&mut tape, &trial, x0, step) {
                    let ft = tape.value(obj).item();
                    if ft <= f - ARMIJO * trial_eta * g2 {
                        accepted = Some((trial, tape, obj, params, ft));
                        break;
                    }
                }
                trial_eta *= 0.5;
            }
            let Some((trial, tape, obj, params, ft)) = accepted else {
                converged = true;
                break;
            };
            let decrease = f - ft;
            plan = trial;
            f = ft;
            grads = collect_grads(&tape, obj, &params, &plan)?;
            iterations += 1;
            eta = Some(trial_eta * 2.0);
            if decrease <= self.config.tolerance * f.abs().max(1e-12) {
                converged = true;
                break;
            }
        }

        if !converged {
            self.warnings += 1;
            log::debug!("MPC solve at step {step} hit the iteration limit (objective {f})");
        }
        self.last_iterations = iterations;
        let controls = self.decode(&plan)?;
        self.plan = Some(plan);
        Ok(MpcSolution {
            controls,
            objective: f,
            iterations,
            converged,
        })
    }
}

fn collect_grads(tape: &Tape, obj: Var, params: &[Var], plan: &Plan) -> Result<Vec<Tensor>> {
    let grads = tape.backward(obj)?;
    Ok(params
        .iter()
        .zip(plan.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mfd;

    fn line2() -> RegionGraph {
        RegionGraph::new(2, &[(0, 1)], vec![Mfd::BENCHMARK; 2]).unwrap()
    }

    #[test]
    fn empty_network_returns_cold_plan() {
        let g = line2();
        let mut mpc = MpcController::new(
            g.clone(),
            ControlMode::Pcrg,
            ControlBounds::default(),
            MpcConfig::default(),
            30.0,
            Integrator::Euler,
            SpawnSchedule::zeros(10, 2),
        )
        .unwrap();
        let sol = mpc.solve(&Array2::zeros((2, 2)), 0).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.iterations, 1);
        assert!(sol.controls[0].is_feasible(&g, 0.1, 0.9, 0.0));
    }

    #[test]
    fn objective_never_increases_over_cold_start() {
        let g = RegionGraph::new(3, &[(0, 1), (1, 2)], vec![Mfd::BENCHMARK; 3]).unwrap();
        let mut rates = Array3::zeros((20, 3, 3));
        for k in 0..20 {
            rates[[k, 0, 2]] = 4.0;
            rates[[k, 2, 0]] = 3.0;
        }
        let forecast = SpawnSchedule::new(rates).unwrap();
        let mut x0 = Array2::zeros((3, 3));
        x0[[0, 2]] = 2500.0;
        x0[[1, 1]] = 4000.0;
        x0[[1, 0]] = 1500.0;
        let mut mpc = MpcController::new(
            g,
            ControlMode::Pc,
            ControlBounds::default(),
            MpcConfig::default(),
            30.0,
            Integrator::Euler,
            forecast,
        )
        .unwrap();
        let cold = {
            let plan = mpc.cold_plan();
            let mut tape = Tape::new();
            let (obj, _) = mpc.rollout(&mut tape, &plan, &x0, 0).unwrap();
            tape.value(obj).item()
        };
        let sol = mpc.solve(&x0, 0).unwrap();
        assert!(sol.objective <= cold);
        assert!(sol.iterations > 1);
    }
}
