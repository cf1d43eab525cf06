//! Reference implementations written independently of the library code,
//! shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{Array2, Array3, Array4};
use nmfd_dpc::model::{Mfd, RegionGraph};
use rand::Rng;

/// Every labelled graph on `n` nodes, as edge lists, connected or not.
pub fn all_graphs(n: usize) -> impl Iterator<Item = Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let count = 1u64 << pairs.len();
    (0..count).map(move |mask| {
        pairs
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, &p)| p)
            .collect()
    })
}

pub fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut label: Vec<usize> = (0..n).collect();
    fn root(l: &mut [usize], mut a: usize) -> usize {
        while l[a] != a {
            a = l[a];
        }
        a
    }
    for &(a, b) in edges {
        let (ra, rb) = (root(&mut label, a), root(&mut label, b));
        label[ra] = rb;
    }
    let r0 = root(&mut label, 0);
    (0..n).all(|v| root(&mut label, v) == r0)
}

/// Smallest-index first hop over all minimum-length simple paths from `s`
/// to `t`, found by enumerating every simple path.
pub fn brute_first_hop(n: usize, edges: &[(usize, usize)], s: usize, t: usize) -> Option<usize> {
    let mut adj = vec![vec![false; n]; n];
    for &(a, b) in edges {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    let mut best: Option<(usize, usize)> = None;
    let mut path = vec![s];
    let mut seen = vec![false; n];
    seen[s] = true;
    fn walk(
        adj: &[Vec<bool>],
        t: usize,
        path: &mut Vec<usize>,
        seen: &mut [bool],
        best: &mut Option<(usize, usize)>,
    ) {
        let at = *path.last().unwrap();
        if at == t {
            let cand = (path.len() - 1, path[1]);
            if best.is_none_or(|b| cand < b) {
                *best = Some(cand);
            }
            return;
        }
        for next in 0..adj.len() {
            if adj[at][next] && !seen[next] {
                seen[next] = true;
                path.push(next);
                walk(adj, t, path, seen, best);
                path.pop();
                seen[next] = false;
            }
        }
    }
    walk(&adj, t, &mut path, &mut seen, &mut best);
    best.map(|(_, hop)| hop)
}

/// Connected random graph: a random spanning tree plus extra edges.
pub fn random_connected(rng: &mut impl Rng, n: usize, extra: f64) -> RegionGraph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(extra) {
                edges.push((a, b));
            }
        }
    }
    let mfd = (0..n)
        .map(|_| Mfd::BENCHMARK.scaled(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)))
        .collect();
    RegionGraph::new(n, &edges, mfd).unwrap()
}

/// Routing with random shares over the neighbours of every region.
pub fn random_theta(rng: &mut impl Rng, g: &RegionGraph) -> Array3<f64> {
    let r = g.regions();
    let mut theta = Array3::zeros((r, r, r));
    for i in 0..r {
        for j in 0..r {
            let w: Vec<f64> = g
                .neighbors(i)
                .iter()
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let s: f64 = w.iter().sum::<f64>().max(1e-12);
            for (k, &h) in g.neighbors(i).iter().enumerate() {
                theta[[i, h, j]] = w[k] / s;
            }
        }
    }
    theta
}

/// Whether a plant class `[o, g, i, j]` can hold vehicles.
pub fn reachable(g: &RegionGraph, o: usize, p: usize, i: usize, j: usize) -> bool {
    if o == i && p == i {
        return true;
    }
    o != i && g.adjacent(p, i) && (j == i || (j != o && j != p))
}

pub fn random_plant_state(rng: &mut impl Rng, g: &RegionGraph, scale: f64) -> Array4<f64> {
    let r = g.regions();
    Array4::from_shape_fn((r, r, r, r), |(o, p, i, j)| {
        if reachable(g, o, p, i, j) && rng.random_bool(0.7) {
            rng.random_range(0.0..scale)
        } else {
            0.0
        }
    })
}

/// Plant derivative computed by scattering each class's outflow to the
/// class it lands in. Transit traffic may not return to its origin or
/// previous region; its shares over the remaining neighbours are rescaled
/// (uniform when all zero) if `renormalize`, and it stays put without any.
pub fn plant_scatter(
    g: &RegionGraph,
    x: &Array4<f64>,
    u: &Array2<f64>,
    theta: &Array3<f64>,
    d: &Array2<f64>,
    renormalize: bool,
) -> (Array4<f64>, f64) {
    let r = g.regions();
    let mut totals = vec![0.0; r];
    for ((_, _, i, _), v) in x.indexed_iter() {
        totals[i] += v;
    }
    let mut dx = Array4::zeros(x.raw_dim());
    let mut trips = 0.0;
    for ((o, p, i, j), &v) in x.indexed_iter() {
        if v == 0.0 || totals[i] < 1e-9 {
            continue;
        }
        let exit = v / totals[i] * g.mfd(i).flow(totals[i]);
        if i == j {
            dx[[o, p, i, j]] -= exit;
            trips += exit;
            continue;
        }
        let fresh = o == i && p == i;
        let next: Vec<usize> = g
            .neighbors(i)
            .iter()
            .copied()
            .filter(|&h| fresh || (h != o && h != p))
            .collect();
        let raw: Vec<f64> = next.iter().map(|&h| theta[[i, h, j]]).collect();
        let sum: f64 = raw.iter().sum();
        let shares: Vec<f64> = if fresh || !renormalize || (sum - 1.0).abs() <= 1e-12 {
            raw
        } else if sum > 0.0 {
            raw.iter().map(|s| s / sum).collect()
        } else {
            vec![1.0 / next.len() as f64; next.len()]
        };
        for (&h, s) in next.iter().zip(shares) {
            let f = u[[i, h]] * s * exit;
            dx[[o, p, i, j]] -= f;
            dx[[o, i, h, j]] += f;
        }
    }
    for i in 0..r {
        for j in 0..r {
            dx[[i, i, i, j]] += d[[i, j]];
        }
    }
    (dx, trips)
}

/// Autodiff gradient and central finite difference of the rollout loss for
/// every policy weight, in canonical order.
pub fn rollout_gradient_pairs(
    policy: &nmfd_dpc::policy::Policy,
    graph: &RegionGraph,
    x0: &Array3<f64>,
    spawn: &nmfd_dpc::model::SpawnSchedule,
    cfg: &nmfd_dpc::trainer::TrainConfig,
    h: f64,
) -> Vec<(f64, f64)> {
    use nmfd_dpc::autodiff::Tape;
    use rand::SeedableRng;
    let loss = |p: &nmfd_dpc::policy::Policy| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |_| true);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let l =
            nmfd_dpc::trainer::rollout_loss(&mut tape, p, &bound, graph, x0, spawn, cfg, &mut rng)
                .unwrap();
        (tape, bound, l)
    };
    let (tape, bound, l) = loss(policy);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<f64> = bound
        .vars()
        .iter()
        .zip(policy.parameters())
        .flat_map(|(&(_, v), (_, t))| grads.get_or_zeros(v, t.shape()).into_vec())
        .collect();

    let mut probe = policy.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let slots = probe.parameters().len();
    for slot in 0..slots {
        let len = probe.parameters()[slot].1.len();
        for k in 0..len {
            let base = probe.parameters()[slot].1.data()[k];
            let eval = |v: f64, p: &mut nmfd_dpc::policy::Policy| {
                p.parameters_mut()[slot].1.data_mut()[k] = v;
                let (tape, _, l) = loss(p);
                tape.value(l).item()
            };
            let up = eval(base + h, &mut probe);
            let down = eval(base - h, &mut probe);
            probe.parameters_mut()[slot].1.data_mut()[k] = base;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    analytic.into_iter().zip(numeric).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
