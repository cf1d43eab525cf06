//! Acyclic NMFD plant used for closed-loop evaluation.
//!
//! Vehicles are tracked by origin `o`, previous region `g`, current region `i`
//! and destination `j`, which lets the routing forbid moving straight back to
//! the previous region (or to the origin). States are `Array4` indexed
//! `[o, g, i, j]`; expanded routing tensors are `Array5` indexed `[o, g, i, h, j]`.

use ndarray::{Array2, Array3, Array4, Array5};

use crate::autodiff::DIV_GUARD;
use crate::model::{Accumulation, ControlInput, Integrator, RegionGraph};
use crate::{Error, Result};

pub type PlantState = Array4<f64>;

/// Routing expanded to the plant's vehicle classes.
#[derive(Clone, Debug)]
pub struct ExpandedTheta {
    pub theta: Array5<f64>,
    /// Transit classes `(o, g, i, j)` whose admissible shares did not sum to
    /// one and were renormalised.
    pub renormalized: Vec<[usize; 4]>,
    /// Transit classes with no admissible next hop; their vehicles stay put.
    pub dead_ends: Vec<[usize; 4]>,
}

/// Expands `theta[i, h, j]` to `theta[o, g, i, h, j]`.
///
/// Fresh traffic (`o = g = i`) keeps the model routing, arrived traffic
/// completes with ratio 1, and transit traffic may not move to its origin or
/// its previous region. With `renormalize`, the remaining admissible shares
/// are rescaled to sum to one (uniform if they are all zero).
pub fn expand_theta(graph: &RegionGraph, theta: &Array3<f64>, renormalize: bool) -> ExpandedTheta {
    let r = graph.regions();
    let mut out = Array5::zeros((r, r, r, r, r));
    let mut renormalized = Vec::new();
    let mut dead_ends = Vec::new();
    for i in 0..r {
        out[[i, i, i, i, i]] = 1.0;
        for j in (0..r).filter(|&j| j != i) {
            for &h in graph.neighbors(i) {
                out[[i, i, i, h, j]] = theta[[i, h, j]];
            }
        }
        for o in (0..r).filter(|&o| o != i) {
            for &g in graph.neighbors(i) {
                out[[o, g, i, i, i]] = 1.0;
                for j in 0..r {
                    if j == i || j == o || j == g {
                        continue;
                    }
                    let admissible: Vec<usize> = graph
                        .neighbors(i)
                        .iter()
                        .copied()
                        .filter(|&h| h != o && h != g)
                        .collect();
                    if admissible.is_empty() {
                        dead_ends.push([o, g, i, j]);
                        continue;
                    }
                    let total: f64 = admissible.iter().map(|&h| theta[[i, h, j]]).sum();
                    let needs_fix = (total - 1.0).abs() > 1e-12;
                    if renormalize && needs_fix {
                        renormalized.push([o, g, i, j]);
                    }
                    for &h in &admissible {
                        out[[o, g, i, h, j]] = if !renormalize || !needs_fix {
                            theta[[i, h, j]]
                        } else if total > 0.0 {
                            theta[[i, h, j]] / total
                        } else {
                            1.0 / admissible.len() as f64
                        };
                    }
                }
            }
        }
    }
    ExpandedTheta {
        theta: out,
        renormalized,
        dead_ends,
    }
}

/// Vehicles in each region, summed over origin, previous region and destination.
pub fn plant_region_totals(x: &PlantState) -> Vec<f64> {
    let r = x.shape()[0];
    let mut totals = vec![0.0; r];
    for ((_, _, i, _), v) in x.indexed_iter() {
        totals[i] += v;
    }
    totals
}

/// Exit rate of every class, `x_ogij / x_i * g_i(x_i)`.
fn class_exit_rates(graph: &RegionGraph, x: &PlantState) -> Array4<f64> {
    let totals = plant_region_totals(x);
    let flow: Vec<f64> = totals
        .iter()
        .enumerate()
        .map(|(i, &t)| graph.mfd(i).flow(t))
        .collect();
    let mut rates = Array4::zeros(x.raw_dim());
    for ((o, g, i, j), v) in x.indexed_iter() {
        if totals[i] >= DIV_GUARD {
            rates[[o, g, i, j]] = v / totals[i] * flow[i];
        }
    }
    rates
}

/// State derivative of the acyclic plant.
///
/// Outbound transfers of transit classes are scaled by `u[i, h]` like those of
/// fresh traffic, so that every vehicle leaving a region arrives in the next.
pub fn plant_dynamics(
    graph: &RegionGraph,
    x: &PlantState,
    u: &Array2<f64>,
    theta: &Array5<f64>,
    demand: &Array2<f64>,
) -> PlantState {
    let r = graph.regions();
    let rate = class_exit_rates(graph, x);
    let m = |o: usize, g: usize, i: usize, h: usize, j: usize| {
        theta[[o, g, i, h, j]] * rate[[o, g, i, j]]
    };
    // neighbours of g plus g itself
    let star = |g: usize| graph.neighbors(g).iter().copied().chain(std::iter::once(g));
    let mut dx = Array4::zeros(x.raw_dim());

    for i in 0..r {
        dx[[i, i, i, i]] = demand[[i, i]] - m(i, i, i, i, i);
        for j in (0..r).filter(|&j| j != i) {
            let out: f64 = graph
                .neighbors(i)
                .iter()
                .map(|&h| u[[i, h]] * m(i, i, i, h, j))
                .sum();
            dx[[i, i, i, j]] = demand[[i, j]] - out;
        }
        for o in (0..r).filter(|&o| o != i) {
            for &g in graph.neighbors(i) {
                let inbound: f64 = star(g)
                    .filter(|&f| f != i)
                    .map(|f| u[[g, i]] * m(o, f, g, i, i))
                    .sum();
                dx[[o, g, i, i]] = inbound - m(o, g, i, i, i);

                for j in 0..r {
                    if j == i || j == o || j == g {
                        continue;
                    }
                    let inbound: f64 = star(g)
                        .filter(|&f| f != i && f != j)
                        .map(|f| u[[g, i]] * m(o, f, g, i, j))
                        .sum();
                    let outbound: f64 = graph
                        .neighbors(i)
                        .iter()
                        .filter(|&&h| h != o && h != g)
                        .map(|&h| u[[i, h]] * m(o, g, i, h, j))
                        .sum();
                    dx[[o, g, i, j]] = inbound - outbound;
                }
            }
        }
    }
    dx
}

/// Trip completions per unit time, `sum m_ogiii`.
pub fn plant_trip_rate(graph: &RegionGraph, x: &PlantState, theta: &Array5<f64>) -> f64 {
    let r = graph.regions();
    let rate = class_exit_rates(graph, x);
    let mut total = 0.0;
    for o in 0..r {
        for g in 0..r {
            for i in 0..r {
                total += theta[[o, g, i, i, i]] * rate[[o, g, i, i]];
            }
        }
    }
    total
}

/// Collapses the plant state onto the model's `x_ij`, summing over
/// `o != j` and `g != j`.
pub fn project_state(x: &PlantState) -> Accumulation {
    let r = x.shape()[0];
    let mut out = Array2::zeros((r, r));
    for ((o, g, i, j), v) in x.indexed_iter() {
        if o != j && g != j {
            out[[i, j]] += v;
        }
    }
    out
}

/// Places a model state into the plant as fresh traffic at its origin.
pub fn lift_state(x: &Accumulation) -> PlantState {
    let r = x.shape()[0];
    let mut out = Array4::zeros((r, r, r, r));
    for ((i, j), v) in x.indexed_iter() {
        out[[i, i, i, j]] = *v;
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlantStepReport {
    pub clamped: usize,
    /// Populated classes whose routing was renormalised this step.
    pub renormalized: usize,
    /// Populated classes held in place for lack of a next hop.
    pub dead_ends: usize,
}

/// Stateful acyclic plant.
#[derive(Clone, Debug)]
pub struct AnmfdPlant {
    graph: RegionGraph,
    state: PlantState,
    dt: f64,
    method: Integrator,
    renormalize: bool,
}

impl AnmfdPlant {
    pub fn new(
        graph: RegionGraph,
        initial: &Accumulation,
        dt: f64,
        method: Integrator,
        renormalize: bool,
    ) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if initial.shape() != [graph.regions(), graph.regions()] {
            return Err(Error::InvalidConfig(
                "initial state does not match region count".into(),
            ));
        }
        Ok(Self {
            state: lift_state(initial),
            graph,
            dt,
            method,
            renormalize,
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn graph(&self) -> &RegionGraph {
        &self.graph
    }

    pub fn observe(&self) -> Accumulation {
        project_state(&self.state)
    }

    pub fn total(&self) -> f64 {
        self.state.sum()
    }

    pub fn region_totals(&self) -> Vec<f64> {
        plant_region_totals(&self.state)
    }

    pub fn advance(
        &mut self,
        control: &ControlInput,
        demand: &Array2<f64>,
    ) -> Result<PlantStepReport> {
        let expanded = expand_theta(&self.graph, &control.theta, self.renormalize);
        let populated =
            |classes: &[[usize; 4]]| classes.iter().filter(|c| self.state[**c] > 0.0).count();
        let mut report = PlantStepReport {
            renormalized: populated(&expanded.renormalized),
            dead_ends: populated(&expanded.dead_ends),
            ..Default::default()
        };
        let f =
            |s: &PlantState| plant_dynamics(&self.graph, s, &control.u, &expanded.theta, demand);
        let x = &self.state;
        let dt = self.dt;
        let mut next = match self.method {
            Integrator::Euler => x + &(f(x) * dt),
            Integrator::Rk4 => {
                let k1 = f(x);
                let k2 = f(&(x + &(&k1 * (0.5 * dt))));
                let k3 = f(&(x + &(&k2 * (0.5 * dt))));
                let k4 = f(&(x + &(&k3 * dt)));
                x + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: 0 });
        }
        next.mapv_inplace(|v| {
            if v < 0.0 {
                report.clamped += 1;
                0.0
            } else {
                v
            }
        });
        self.state = next;
        Ok(report)
    }
}
