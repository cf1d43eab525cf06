use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array3;

use crate::model::RegionGraph;
use crate::{Error, Result};

/// Hop counts `dist[s][t]` between every pair of regions (unit edge weights),
/// `usize::MAX` when unreachable.
pub fn shortest_distances(graph: &RegionGraph) -> Vec<Vec<usize>> {
    let r = graph.regions();
    (0..r)
        .map(|source| {
            let mut dist = vec![usize::MAX; r];
            let mut heap = BinaryHeap::new();
            dist[source] = 0;
            heap.push(Reverse((0usize, source)));
            while let Some(Reverse((d, i))) = heap.pop() {
                if d > dist[i] {
                    continue;
                }
                for &h in graph.neighbors(i) {
                    let nd = d + 1;
                    if nd < dist[h] {
                        dist[h] = nd;
                        heap.push(Reverse((nd, h)));
                    }
                }
            }
            dist
        })
        .collect()
}

/// First hop on a shortest path from `i` to `j != i`; ties go to the
/// smallest neighbour index.
pub fn first_hop(graph: &RegionGraph, dist: &[Vec<usize>], i: usize, j: usize) -> Option<usize> {
    let d = dist[i][j];
    if d == usize::MAX || d == 0 {
        return None;
    }
    graph
        .neighbors(i)
        .iter()
        .copied()
        .find(|&h| dist[h][j] == d - 1)
}

/// Shortest-path routing: `theta[i, h, j] = 1` for the first hop `h` from `i`
/// towards `j`. For `i == j` (unused by the dynamics) the whole share goes to
/// the lowest-index neighbour so every slice still sums to one.
pub fn dijkstra_theta(graph: &RegionGraph) -> Result<Array3<f64>> {
    let r = graph.regions();
    let dist = shortest_distances(graph);
    let mut theta = Array3::zeros((r, r, r));
    for i in 0..r {
        for j in 0..r {
            let hop = if i == j {
                graph.neighbors(i).first().copied()
            } else {
                Some(first_hop(graph, &dist, i, j).ok_or(Error::Disconnected { from: i, to: j })?)
            };
            if let Some(h) = hop {
                theta[[i, h, j]] = 1.0;
            }
        }
    }
    Ok(theta)
}
