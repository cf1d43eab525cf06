mod oracles;

use ndarray::Array3;
use nmfd_dpc::model::SpawnSchedule;
use nmfd_dpc::policy::{ControlMode, Policy, PolicyConfig};
use nmfd_dpc::trainer::TrainConfig;
use oracles::{random_connected, relative_error, rollout_gradient_pairs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(
    seed: u64,
    mode: ControlMode,
    alpha: bool,
) -> (
    nmfd_dpc::model::RegionGraph,
    Policy,
    Array3<f64>,
    SpawnSchedule,
    TrainConfig,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_connected(&mut rng, 3, 0.5);
    let cfg = PolicyConfig {
        width: 8,
        mode,
        obs_scale: Some(1000.0),
        seed,
        ..PolicyConfig::default()
    };
    let mut policy = Policy::new(&g, &cfg).unwrap();
    if alpha {
        for (_, t) in policy.parameters_mut() {
            if t.len() == 1 {
                t.data_mut()[0] = rng.random_range(-0.05..0.05);
            }
        }
    }
    // positive states well below the jam branch keep the rollout smooth
    let x0 = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(100.0..600.0));
    let rates = Array3::from_shape_fn((4, 3, 3), |_| rng.random_range(0.5..2.0));
    let spawn = SpawnSchedule::new(rates).unwrap();
    let train = TrainConfig {
        horizon: 5,
        state_noise_std: 0.0,
        ..TrainConfig::default()
    };
    (g, policy, x0, spawn, train)
}

#[test]
fn rollout_gradients_match_central_differences() {
    for (seed, alpha) in [(1, false), (2, true), (3, true)] {
        let (g, policy, x0, spawn, cfg) = setup(seed, ControlMode::Pcrg, alpha);
        let pairs = rollout_gradient_pairs(&policy, &g, &x0, &spawn, &cfg, 1e-5);
        assert_eq!(pairs.len(), policy.parameter_count());
        let worst = pairs
            .iter()
            .map(|&(a, f)| relative_error(a, f, 1e-2))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn perimeter_only_gradients_match_too() {
    let (g, policy, x0, spawn, cfg) = setup(4, ControlMode::Pc, true);
    for (a, f) in rollout_gradient_pairs(&policy, &g, &x0, &spawn, &cfg, 1e-5) {
        assert!(relative_error(a, f, 1e-2) < 1e-4, "{a} vs {f}");
    }
}
