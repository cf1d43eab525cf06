use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Cubic macroscopic fundamental diagram `g(x) = a x^3 + b x^2 + c x`
/// mapping a region's accumulation (veh) to its exit rate (veh/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mfd {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Mfd {
    /// Coefficients used by the seven-region benchmark scenario.
    pub const BENCHMARK: Mfd = Mfd {
        a: 4.133e-11,
        b: -8.282e-7,
        c: 0.0042,
    };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// The raw polynomial, without flooring.
    pub fn polynomial(&self, x: f64) -> f64 {
        ((self.a * x + self.b) * x + self.c) * x
    }

    /// Outflow at accumulation `x`.
    ///
    /// Negative polynomial values are floored at 0. When the cubic has a local
    /// minimum on its falling branch (`a > 0`), the flow is held at that
    /// minimum for larger accumulations so that a jammed region never speeds up.
    pub fn flow(&self, x: f64) -> f64 {
        let x = match self.tail_start() {
            Some(t) => x.min(t),
            None => x,
        };
        self.polynomial(x).max(0.0)
    }

    /// Roots of `g'(x) = 3a x^2 + 2b x + c`, as (local max, local min).
    fn critical_points(&self) -> (Option<f64>, Option<f64>) {
        let (a, b, c) = (self.a, self.b, self.c);
        if a == 0.0 {
            return if b < 0.0 {
                (Some(-c / (2.0 * b)), None)
            } else {
                (None, None)
            };
        }
        let disc = 4.0 * b * b - 12.0 * a * c;
        if disc < 0.0 {
            return (None, None);
        }
        let sq = disc.sqrt();
        // numerically stable pair of roots
        let q = -0.5 * (2.0 * b + b.signum() * sq);
        let (r1, r2) = if q == 0.0 {
            (0.0, 0.0)
        } else {
            (q / (3.0 * a), c / q)
        };
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        if a > 0.0 {
            (Some(lo), Some(hi))
        } else {
            (Some(hi), Some(lo))
        }
    }

    /// Accumulation maximising the flow, if the cubic has an interior maximum
    /// at positive accumulation.
    pub fn critical_accumulation(&self) -> Option<f64> {
        self.critical_points().0.filter(|&x| x > 0.0)
    }

    /// Start of the held tail, i.e. the local minimum right of the maximum.
    pub fn tail_start(&self) -> Option<f64> {
        let (max, min) = self.critical_points();
        match (max, min) {
            (Some(mx), Some(mn)) if self.a > 0.0 && mn > mx && mn > 0.0 => Some(mn),
            _ => None,
        }
    }

    /// Largest flow the diagram produces.
    pub fn max_flow(&self) -> f64 {
        match self.critical_accumulation() {
            Some(x) => self.flow(x),
            None => self.flow(1.0),
        }
    }

    /// Same shape stretched by `accumulation` on the x axis and `flow` on the
    /// y axis: `g'(x) = flow * g(x / accumulation)`.
    pub fn scaled(&self, accumulation: f64, flow: f64) -> Self {
        Self {
            a: flow * self.a / accumulation.powi(3),
            b: flow * self.b / accumulation.powi(2),
            c: flow * self.c / accumulation,
        }
    }
}

/// Regions, their adjacency, and one MFD per region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGraph {
    regions: usize,
    adjacency: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    mfd: Vec<Mfd>,
}

impl RegionGraph {
    /// Builds a graph from an undirected edge list.
    pub fn new(regions: usize, edges: &[(usize, usize)], mfd: Vec<Mfd>) -> Result<Self> {
        if regions == 0 {
            return Err(Error::InvalidGraph("graph has no regions".into()));
        }
        let mut adjacency = vec![false; regions * regions];
        for &(i, h) in edges {
            if i >= regions || h >= regions {
                return Err(Error::InvalidGraph(format!("edge ({i}, {h}) out of range")));
            }
            if i == h {
                return Err(Error::InvalidGraph(format!("self loop at region {i}")));
            }
            adjacency[i * regions + h] = true;
            adjacency[h * regions + i] = true;
        }
        Self::from_adjacency(regions, adjacency, mfd)
    }

    /// Builds a graph from a row-major `regions x regions` adjacency matrix.
    pub fn from_adjacency(regions: usize, adjacency: Vec<bool>, mfd: Vec<Mfd>) -> Result<Self> {
        if adjacency.len() != regions * regions {
            return Err(Error::InvalidGraph("adjacency is not square".into()));
        }
        if mfd.len() != regions {
            return Err(Error::InvalidGraph(format!(
                "{} MFDs for {regions} regions",
                mfd.len()
            )));
        }
        for i in 0..regions {
            if adjacency[i * regions + i] {
                return Err(Error::InvalidGraph(format!(
                    "region {i} is adjacent to itself"
                )));
            }
            for h in 0..regions {
                if adjacency[i * regions + h] != adjacency[h * regions + i] {
                    return Err(Error::InvalidGraph(format!(
                        "adjacency not symmetric at ({i}, {h})"
                    )));
                }
            }
        }
        for (i, m) in mfd.iter().enumerate() {
            if ![m.a, m.b, m.c].iter().all(|v| v.is_finite()) || m.max_flow() <= 0.0 {
                return Err(Error::InvalidGraph(format!(
                    "MFD of region {i} has no positive flow"
                )));
            }
        }
        let neighbors: Vec<Vec<usize>> = (0..regions)
            .map(|i| {
                (0..regions)
                    .filter(|&h| adjacency[i * regions + h])
                    .collect()
            })
            .collect();
        if regions > 1 {
            if let Some(i) = neighbors.iter().position(Vec::is_empty) {
                return Err(Error::InvalidGraph(format!("region {i} has no neighbours")));
            }
        }
        let graph = Self {
            regions,
            adjacency,
            neighbors,
            mfd,
        };
        if !graph.is_connected() {
            log::warn!("region graph with {regions} regions is not connected");
        }
        Ok(graph)
    }

    /// Fully connected graph.
    pub fn complete(mfd: Vec<Mfd>) -> Result<Self> {
        let r = mfd.len();
        let adjacency = (0..r * r).map(|k| k / r != k % r).collect();
        Self::from_adjacency(r, adjacency, mfd)
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn adjacent(&self, i: usize, h: usize) -> bool {
        self.adjacency[i * self.regions + h]
    }

    /// Row-major adjacency matrix.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    /// Neighbours of `i` in increasing index order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn mfd(&self, i: usize) -> &Mfd {
        &self.mfd[i]
    }

    pub fn mfds(&self) -> &[Mfd] {
        &self.mfd
    }

    /// Undirected edges `(i, h)` with `i < h`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.regions)
            .flat_map(|i| {
                self.neighbors[i]
                    .iter()
                    .filter(move |&&h| h > i)
                    .map(move |&h| (i, h))
            })
            .collect()
    }

    /// Ordered adjacent pairs `(i, h)` in row-major order.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.regions)
            .flat_map(|i| self.neighbors[i].iter().map(move |&h| (i, h)))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.regions];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &h in &self.neighbors[i] {
                if !seen[h] {
                    seen[h] = true;
                    stack.push(h);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Stable hash of region count and edge set; MFDs are not included.
    pub fn topology_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("regions={};", self.regions).as_bytes());
        for (i, h) in self.edges() {
            hasher.update(format!("{i}-{h};").as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
