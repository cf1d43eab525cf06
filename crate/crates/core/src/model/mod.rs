//! NMFD control model: route flows, continuous dynamics and one-step
//! integration, in a plain `ndarray` form and a differentiable tape form.

mod differentiable;
mod graph;

pub use differentiable::{ModelConstants, TapeStep};
pub use graph::{Mfd, RegionGraph};

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `x[[i, j]]`: vehicles in region `i` heading to destination `j`.
pub type Accumulation = Array2<f64>;

/// Perimeter-control ratios and routing ratios applied for one step.
///
/// `u[[i, h]]` multiplies transfers from `i` into neighbour `h`.
/// `theta[[i, h, j]]` is the share of region `i`'s traffic for `j` sent to `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlInput {
    pub u: Array2<f64>,
    pub theta: Array3<f64>,
}

impl ControlInput {
    /// Checks the perimeter bounds on adjacent pairs and the simplex
    /// constraints on the routing tensor, up to `tol`.
    pub fn is_feasible(&self, graph: &RegionGraph, u_lo: f64, u_hi: f64, tol: f64) -> bool {
        let r = graph.regions();
        for i in 0..r {
            for &h in graph.neighbors(i) {
                let v = self.u[[i, h]];
                if v < u_lo - tol || v > u_hi + tol {
                    return false;
                }
            }
            for j in 0..r {
                let mut sum = 0.0;
                for h in 0..r {
                    let t = self.theta[[i, h, j]];
                    if !graph.adjacent(i, h) && t != 0.0 {
                        return false;
                    }
                    if !(-tol..=1.0 + tol).contains(&t) {
                        return false;
                    }
                    sum += t;
                }
                if i != j && r > 1 && (sum - 1.0).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Exogenous demand `d[[k, i, j]]` in veh/s for each step `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpawnSchedule {
    rates: Array3<f64>,
}

impl SpawnSchedule {
    pub fn new(rates: Array3<f64>) -> Result<Self> {
        if rates.shape()[1] != rates.shape()[2] {
            return Err(Error::InvalidConfig("spawn rates must be T x R x R".into()));
        }
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "spawn rates must be finite and non-negative".into(),
            ));
        }
        Ok(Self { rates })
    }

    pub fn zeros(steps: usize, regions: usize) -> Self {
        Self {
            rates: Array3::zeros((steps, regions, regions)),
        }
    }

    pub fn steps(&self) -> usize {
        self.rates.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.rates.shape()[1]
    }

    pub fn rates(&self) -> &Array3<f64> {
        &self.rates
    }

    /// Demand at step `k`; zero past the end of the schedule.
    pub fn at(&self, k: usize) -> Array2<f64> {
        if k < self.steps() {
            self.rates.index_axis(ndarray::Axis(0), k).to_owned()
        } else {
            Array2::zeros((self.regions(), self.regions()))
        }
    }

    pub fn view(&self, k: usize) -> Option<ArrayView2<'_, f64>> {
        (k < self.steps()).then(|| self.rates.index_axis(ndarray::Axis(0), k))
    }

    /// Largest rate anywhere in the schedule.
    pub fn peak(&self) -> f64 {
        self.rates.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// Flows leaving each region during one evaluation of the dynamics.
#[derive(Clone, Debug)]
pub struct RouteFlows {
    /// `m[[i, h, j]]` for `j != i`: traffic in `i` for `j` moving to `h`.
    pub transfer: Array3<f64>,
    /// `m_ii`: trips completing inside region `i`.
    pub trip: Array1<f64>,
}

/// Vehicles in each region, `x_i = sum_j x_ij`.
pub fn region_totals(x: &Accumulation) -> Array1<f64> {
    x.sum_axis(ndarray::Axis(1))
}

/// Route flows `m_ihj` and trip completions `m_ii` for state `x`.
pub fn route_flows(graph: &RegionGraph, x: &Accumulation, theta: &Array3<f64>) -> RouteFlows {
    let r = graph.regions();
    let totals = region_totals(x);
    let mut transfer = Array3::zeros((r, r, r));
    let mut trip = Array1::zeros(r);
    for i in 0..r {
        let xi = totals[i];
        if xi < crate::autodiff::DIV_GUARD {
            continue;
        }
        let g = graph.mfd(i).flow(xi);
        trip[i] = x[[i, i]] / xi * g;
        for j in (0..r).filter(|&j| j != i) {
            let share = x[[i, j]] / xi * g;
            for &h in graph.neighbors(i) {
                transfer[[i, h, j]] = theta[[i, h, j]] * share;
            }
        }
    }
    RouteFlows { transfer, trip }
}

/// State derivative (veh/s) of the NMFD model.
pub fn dynamics(
    graph: &RegionGraph,
    x: &Accumulation,
    control: &ControlInput,
    demand: &Array2<f64>,
) -> Accumulation {
    let r = graph.regions();
    let flows = route_flows(graph, x, &control.theta);
    let m = &flows.transfer;
    let u = &control.u;
    let mut dx = demand.clone();
    for i in 0..r {
        for j in 0..r {
            let mut v = 0.0;
            if i == j {
                v -= flows.trip[i];
                for &h in graph.neighbors(i) {
                    v += u[[h, i]] * m[[h, i, i]];
                }
            } else {
                for &h in graph.neighbors(i) {
                    v -= u[[i, h]] * m[[i, h, j]];
                    if h != j {
                        v += u[[h, i]] * m[[h, i, j]];
                    }
                }
            }
            dx[[i, j]] += v;
        }
    }
    dx
}

/// Result of one integration step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: Accumulation,
    /// Entries that went negative and were clamped to zero.
    pub clamped: usize,
}

/// Integrates the dynamics over `dt` seconds and clamps the result at zero.
pub fn step(
    graph: &RegionGraph,
    x: &Accumulation,
    control: &ControlInput,
    demand: &Array2<f64>,
    dt: f64,
    method: Integrator,
) -> Result<StepOutcome> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let f = |s: &Accumulation| dynamics(graph, s, control, demand);
    let mut next = match method {
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
    let mut clamped = 0;
    next.mapv_inplace(|v| {
        if v < 0.0 {
            clamped += 1;
            0.0
        } else {
            v
        }
    });
    Ok(StepOutcome {
        state: next,
        clamped,
    })
}
