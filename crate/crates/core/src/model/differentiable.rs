use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

use super::{Integrator, RegionGraph};

/// Graph-dependent constants recorded once on a tape.
///
/// States are `[B, R, R]` (batch, region, destination), perimeter controls
/// `[B, R, R]`, routing tensors `[B, R, R, R]` indexed `(i, h, j)`, and demand
/// `[1, R, R]` or `[B, R, R]`. A batch of 1 broadcasts against any batch.
#[derive(Clone, Debug)]
pub struct ModelConstants {
    regions: usize,
    a: Var,
    b: Var,
    c: Var,
    tail: Var,
    trip_mask: Var,
    route_mask: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeStep {
    pub state: Var,
    pub clamped: usize,
}

impl ModelConstants {
    pub fn new(tape: &mut Tape, graph: &RegionGraph) -> Self {
        let r = graph.regions();
        let coeff = |tape: &mut Tape, f: &dyn Fn(usize) -> f64| {
            let data = (0..r).map(f).collect();
            tape.constant(Tensor::new(vec![1, r, 1], data).expect("shape"))
        };
        let a = coeff(tape, &|i| graph.mfd(i).a);
        let b = coeff(tape, &|i| graph.mfd(i).b);
        let c = coeff(tape, &|i| graph.mfd(i).c);
        let tail = coeff(tape, &|i| graph.mfd(i).tail_start().unwrap_or(f64::MAX));
        let eye = (0..r * r)
            .map(|k| if k / r == k % r { 1.0 } else { 0.0 })
            .collect();
        let trip_mask = tape.constant(Tensor::new(vec![1, r, r], eye).expect("shape"));
        // theta[i, h, j] is unused when i == j
        let off = (0..r * r)
            .map(|k| if k / r == k % r { 0.0 } else { 1.0 })
            .collect();
        let route_mask = tape.constant(Tensor::new(vec![1, r, 1, r], off).expect("shape"));
        Self {
            regions: r,
            a,
            b,
            c,
            tail,
            trip_mask,
            route_mask,
        }
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// MFD outflow for region totals shaped `[B, R, 1]`.
    pub fn flow(&self, tape: &mut Tape, totals: Var) -> Result<Var> {
        let x = tape.minimum(totals, self.tail)?;
        let p = tape.mul(self.a, x)?;
        let p = tape.add(p, self.b)?;
        let p = tape.mul(p, x)?;
        let p = tape.add(p, self.c)?;
        let p = tape.mul(p, x)?;
        Ok(tape.max_scalar(p, 0.0)?)
    }

    /// State derivative in veh/s, shaped like `x`.
    pub fn dynamics(
        &self,
        tape: &mut Tape,
        x: Var,
        u: Var,
        theta: Var,
        demand: Var,
    ) -> Result<Var> {
        let r = self.regions;
        let batch = tape.shape(x)[0];
        let totals = tape.sum_axis(x, 2)?;
        let g = self.flow(tape, totals)?;
        let share = tape.div_guarded(x, totals)?;
        // w[b, i, j]: flow leaving i that belongs to destination j
        let w = tape.mul(share, g)?;
        let trip = tape.mul(w, self.trip_mask)?;

        let u4 = tape.reshape(u, &[batch, r, r, 1])?;
        let theta = tape.mul(theta, self.route_mask)?;
        // p[b, i, h, j] = u_ih * theta_ihj
        let p = tape.mul(u4, theta)?;
        let out_ratio = tape.sum_axis(p, 2)?;
        let out_ratio = tape.reshape(out_ratio, &[batch, r, r])?;
        let outflow = tape.mul(w, out_ratio)?;

        // inflow[b, i, j] = sum_h u_hi theta_hij w_hj
        let w4 = tape.reshape(w, &[batch, r, 1, r])?;
        let moved = tape.mul(p, w4)?;
        let inflow = tape.sum_axis(moved, 1)?;
        let inflow = tape.reshape(inflow, &[batch, r, r])?;

        let dx = tape.add(demand, inflow)?;
        let dx = tape.sub(dx, outflow)?;
        Ok(tape.sub(dx, trip)?)
    }

    /// One integration step followed by clamping at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        x: Var,
        u: Var,
        theta: Var,
        demand: Var,
        dt: f64,
        method: Integrator,
    ) -> Result<TapeStep> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dt must be positive, got {dt}"
            )));
        }
        let raw = match method {
            Integrator::Euler => {
                let dx = self.dynamics(tape, x, u, theta, demand)?;
                let inc = tape.scale(dx, dt)?;
                tape.add(x, inc)?
            }
            Integrator::Rk4 => {
                let k1 = self.dynamics(tape, x, u, theta, demand)?;
                let s = tape.scale(k1, 0.5 * dt)?;
                let x2 = tape.add(x, s)?;
                let k2 = self.dynamics(tape, x2, u, theta, demand)?;
                let s = tape.scale(k2, 0.5 * dt)?;
                let x3 = tape.add(x, s)?;
                let k3 = self.dynamics(tape, x3, u, theta, demand)?;
                let s = tape.scale(k3, dt)?;
                let x4 = tape.add(x, s)?;
                let k4 = self.dynamics(tape, x4, u, theta, demand)?;
                let k23 = tape.add(k2, k3)?;
                let k23 = tape.scale(k23, 2.0)?;
                let sum = tape.add(k1, k23)?;
                let sum = tape.add(sum, k4)?;
                let inc = tape.scale(sum, dt / 6.0)?;
                tape.add(x, inc)?
            }
        };
        let clamped = tape.value(raw).data().iter().filter(|&&v| v < 0.0).count();
        let state = tape.max_scalar(raw, 0.0)?;
        Ok(TapeStep { state, clamped })
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{dynamics, ControlInput, Mfd};

    fn to_tensor(shape: &[usize], it: impl IntoIterator<Item = f64>) -> Tensor {
        Tensor::new(shape.to_vec(), it.into_iter().collect()).unwrap()
    }

    #[test]
    fn tape_dynamics_agree_with_loop_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = 4;
        let graph = RegionGraph::new(
            r,
            &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)],
            vec![Mfd::BENCHMARK; r],
        )
        .unwrap();
        for _ in 0..20 {
            let x = Array2::from_shape_fn((r, r), |_| rng.random_range(0.0..3000.0));
            let d = Array2::from_shape_fn((r, r), |_| rng.random_range(0.0..5.0));
            let u = Array2::from_shape_fn((r, r), |_| rng.random_range(0.1..0.9));
            let mut theta = Array3::zeros((r, r, r));
            for i in 0..r {
                for j in 0..r {
                    let w: Vec<f64> = graph
                        .neighbors(i)
                        .iter()
                        .map(|_| rng.random_range(0.01..1.0))
                        .collect();
                    let s: f64 = w.iter().sum();
                    for (k, &h) in graph.neighbors(i).iter().enumerate() {
                        theta[[i, h, j]] = w[k] / s;
                    }
                }
            }
            let control = ControlInput {
                u: u.clone(),
                theta: theta.clone(),
            };
            let expected = dynamics(&graph, &x, &control, &d);

            let mut tape = Tape::new();
            let consts = ModelConstants::new(&mut tape, &graph);
            let xv = tape.constant(to_tensor(&[1, r, r], x.iter().copied()));
            let uv = tape.constant(to_tensor(&[1, r, r], u.iter().copied()));
            let tv = tape.constant(to_tensor(&[1, r, r, r], theta.iter().copied()));
            let dv = tape.constant(to_tensor(&[1, r, r], d.iter().copied()));
            let dx = consts.dynamics(&mut tape, xv, uv, tv, dv).unwrap();
            for (a, b) in tape.value(dx).data().iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}
