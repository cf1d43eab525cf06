//! Reference controllers: no control, shortest-path routing and
//! receding-horizon MPC.

mod mpc;
mod routing;

pub use mpc::{MpcConfig, MpcController, MpcSolution};
pub use routing::{dijkstra_theta, first_hop, shortest_distances};

use ndarray::Array2;

use crate::model::{ControlInput, RegionGraph};
use crate::policy::ControlBounds;
use crate::Result;

/// All perimeter ratios at `u_hi`, routing along shortest paths.
/// Non-adjacent entries of `u` are zero and unused.
pub fn no_control(graph: &RegionGraph, bounds: ControlBounds) -> Result<ControlInput> {
    let r = graph.regions();
    let u = Array2::from_shape_fn((r, r), |(i, h)| {
        if graph.adjacent(i, h) {
            bounds.u_hi
        } else {
            0.0
        }
    });
    Ok(ControlInput {
        u,
        theta: dijkstra_theta(graph)?,
    })
}
