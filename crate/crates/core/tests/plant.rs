mod oracles;

use ndarray::Array2;
use nmfd_dpc::model::{dynamics, route_flows, ControlInput};
use nmfd_dpc::plant::{expand_theta, plant_dynamics, plant_trip_rate};
use oracles::{plant_scatter, random_connected, random_plant_state, random_theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gather_form_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = rng.random_range(2..=6);
        let g = random_connected(&mut rng, n, 0.4);
        let x = random_plant_state(&mut rng, &g, 800.0);
        let u = Array2::from_shape_fn((n, n), |_| rng.random_range(0.1..0.9));
        let d = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..4.0));
        let mut theta = random_theta(&mut rng, &g);
        // some slices summing to less than one exercise the renormalisation
        if case % 3 == 0 {
            theta.mapv_inplace(|v| v * 0.6);
        }
        for renormalize in [true, false] {
            let expanded = expand_theta(&g, &theta, renormalize);
            let got = plant_dynamics(&g, &x, &u, &expanded.theta, &d);
            let (want, trips) = plant_scatter(&g, &x, &u, &theta, &d, renormalize);
            for ((idx, a), b) in got.indexed_iter().zip(want.iter()) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "case {case} class {idx:?}: {a} vs {b}"
                );
            }
            let t = plant_trip_rate(&g, &x, &expanded.theta);
            assert!((t - trips).abs() < 1e-9);
        }
    }
}

#[test]
fn both_models_conserve_vehicles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let g = random_connected(&mut rng, n, 0.5);
        let u = Array2::from_elem((n, n), 1.0);
        let d = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..5.0));
        let theta = random_theta(&mut rng, &g);

        let x = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..4000.0));
        let control = ControlInput {
            u: u.clone(),
            theta: theta.clone(),
        };
        let dx = dynamics(&g, &x, &control, &d);
        let trips = route_flows(&g, &x, &theta).trip.sum();
        assert!((dx.sum() - (d.sum() - trips)).abs() < 1e-9);

        let xp = random_plant_state(&mut rng, &g, 1000.0);
        let expanded = expand_theta(&g, &theta, true);
        let dxp = plant_dynamics(&g, &xp, &u, &expanded.theta, &d);
        let trips = plant_trip_rate(&g, &xp, &expanded.theta);
        assert!((dxp.sum() - (d.sum() - trips)).abs() < 1e-9);
    }
}
