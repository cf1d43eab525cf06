//! Scenario files: topology, MFDs, timing, bounds and spawn schedule in a
//! human-editable TOML document.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Accumulation, Integrator, Mfd, RegionGraph, SpawnSchedule};
use crate::policy::ControlBounds;
use crate::{Error, Result};

pub const SCENARIO_SCHEMA: &str = "nmfd-dpc-scenario/1";

/// One origin-destination demand pulse: linear ramp up, flat plateau,
/// linear ramp down. Rates are sampled at step midpoints, so the pulse
/// spawns `peak * (ramp_up / 2 + plateau + ramp_down / 2) * dt` vehicles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trapezoid {
    pub origin: usize,
    pub destination: usize,
    pub start_step: usize,
    pub ramp_up_steps: usize,
    pub plateau_steps: usize,
    pub ramp_down_steps: usize,
    pub peak_veh_per_s: f64,
}

impl Trapezoid {
    pub fn rate(&self, k: usize) -> f64 {
        if k < self.start_step {
            return 0.0;
        }
        let t = (k - self.start_step) as f64;
        let (up, flat, down) = (
            self.ramp_up_steps as f64,
            self.plateau_steps as f64,
            self.ramp_down_steps as f64,
        );
        if t < up {
            self.peak_veh_per_s * (t + 0.5) / up
        } else if t < up + flat {
            self.peak_veh_per_s
        } else if t < up + flat + down {
            self.peak_veh_per_s * (up + flat + down - t - 0.5) / down
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpawnSpec {
    Trapezoid {
        profiles: Vec<Trapezoid>,
    },
    /// `rates_veh_per_s[k][i][j]`
    Table {
        rates_veh_per_s: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfdSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// On-disk scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema: String,
    pub name: String,
    pub regions: usize,
    pub steps: usize,
    pub dt_s: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    pub obs_noise_std_veh: f64,
    pub integrator: Integrator,
    /// Undirected edges.
    pub edges: Vec<[usize; 2]>,
    /// `initial_state_veh[i][j]`; an empty network when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state_veh: Option<Vec<Vec<f64>>>,
    pub mfd: Vec<MfdSpec>,
    pub spawn: SpawnSpec,
}

/// Validated, ready-to-run scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub graph: RegionGraph,
    pub spawn: SpawnSchedule,
    pub steps: usize,
    pub dt: f64,
    pub bounds: ControlBounds,
    pub obs_noise_std: f64,
    pub integrator: Integrator,
    pub initial: Accumulation,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.schema != SCENARIO_SCHEMA {
            return Err(Error::Parse(format!(
                "unsupported scenario schema {:?}",
                file.schema
            )));
        }
        Ok(file)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(&self) -> Result<Scenario> {
        let r = self.regions;
        let bad = |m: String| Error::InvalidConfig(m);
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err(bad(format!("dt_s must be positive, got {}", self.dt_s)));
        }
        if self.steps == 0 {
            return Err(bad("scenario needs at least one step".into()));
        }
        if !(self.obs_noise_std_veh >= 0.0 && self.obs_noise_std_veh.is_finite()) {
            return Err(bad("observation noise must be >= 0".into()));
        }
        let bounds = ControlBounds::new(self.u_lo, self.u_hi)?;
        let mfd = self.mfd.iter().map(|m| Mfd::new(m.a, m.b, m.c)).collect();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = RegionGraph::new(r, &edges, mfd)?;

        let rates = match &self.spawn {
            SpawnSpec::Trapezoid { profiles } => {
                let mut rates = Array3::zeros((self.steps, r, r));
                for p in profiles {
                    if p.origin >= r || p.destination >= r {
                        return Err(bad(format!(
                            "profile {}->{} out of range",
                            p.origin, p.destination
                        )));
                    }
                    if (p.ramp_up_steps == 0 || p.ramp_down_steps == 0) && p.plateau_steps == 0 {
                        return Err(bad(format!(
                            "profile {}->{} is empty",
                            p.origin, p.destination
                        )));
                    }
                    for k in 0..self.steps {
                        rates[[k, p.origin, p.destination]] += p.rate(k);
                    }
                }
                rates
            }
            SpawnSpec::Table { rates_veh_per_s } => {
                if rates_veh_per_s.len() != self.steps {
                    return Err(bad(format!(
                        "spawn table has {} steps, scenario has {}",
                        rates_veh_per_s.len(),
                        self.steps
                    )));
                }
                let flat = flatten3(rates_veh_per_s, r)
                    .ok_or_else(|| bad("spawn table rows must be R x R".into()))?;
                Array3::from_shape_vec((self.steps, r, r), flat).expect("checked shape")
            }
        };
        let spawn = SpawnSchedule::new(rates)?;

        let initial = match &self.initial_state_veh {
            None => Array2::zeros((r, r)),
            Some(rows) => {
                let flat =
                    flatten2(rows, r).ok_or_else(|| bad("initial state must be R x R".into()))?;
                if flat.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(bad("initial state must be finite and non-negative".into()));
                }
                Array2::from_shape_vec((r, r), flat).expect("checked shape")
            }
        };

        Ok(Scenario {
            name: self.name.clone(),
            graph,
            spawn,
            steps: self.steps,
            dt: self.dt_s,
            bounds,
            obs_noise_std: self.obs_noise_std_veh,
            integrator: self.integrator,
            initial,
        })
    }
}

fn flatten2(rows: &[Vec<f64>], r: usize) -> Option<Vec<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != r) {
        return None;
    }
    Some(rows.iter().flatten().copied().collect())
}

fn flatten3(table: &[Vec<Vec<f64>>], r: usize) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(table.len() * r * r);
    for m in table {
        out.extend(flatten2(m, r)?);
    }
    Some(out)
}

/// Ring order of the six outer regions of the benchmark network.
pub const BENCHMARK_RING: [usize; 6] = [0, 1, 4, 6, 5, 2];
pub const BENCHMARK_CENTER: usize = 3;

/// Seven-region benchmark: region 3 in the middle, adjacent to every other
/// region, the rest on a ring. Demand flows between 0 and 6, between 5 and 1,
/// and from 4 to 2, each pair lying on opposite sides of the ring.
pub fn benchmark7() -> ScenarioFile {
    let mut edges: Vec<[usize; 2]> = Vec::new();
    for k in 0..6 {
        let (a, b) = (BENCHMARK_RING[k], BENCHMARK_RING[(k + 1) % 6]);
        edges.push([a.min(b), a.max(b)]);
    }
    for &i in &BENCHMARK_RING {
        edges.push([i.min(BENCHMARK_CENTER), i.max(BENCHMARK_CENTER)]);
    }
    edges.sort_unstable();

    let pulse = |origin,
                 destination,
                 start_step,
                 ramp_up_steps,
                 plateau_steps,
                 ramp_down_steps,
                 peak_veh_per_s| Trapezoid {
        origin,
        destination,
        start_step,
        ramp_up_steps,
        plateau_steps,
        ramp_down_steps,
        peak_veh_per_s,
    };
    // The hub can pass about 6.3 veh/s. Together these pulses exceed that
    // for a long stretch while each origin stays near its own capacity,
    // apart from a short 16 veh/s burst out of region 0.
    let profiles = vec![
        pulse(0, 6, 0, 10, 5, 10, 16.0),
        pulse(6, 0, 5, 10, 40, 10, 5.0),
        pulse(5, 1, 10, 10, 40, 10, 5.0),
        pulse(1, 5, 20, 10, 40, 10, 4.0),
        pulse(4, 2, 30, 10, 40, 10, 5.0),
    ];
    let m = Mfd::BENCHMARK;
    ScenarioFile {
        schema: SCENARIO_SCHEMA.into(),
        name: "benchmark7".into(),
        regions: 7,
        steps: 240,
        dt_s: 30.0,
        u_lo: 0.1,
        u_hi: 0.9,
        obs_noise_std_veh: 0.25,
        integrator: Integrator::Euler,
        edges,
        initial_state_veh: None,
        mfd: vec![
            MfdSpec {
                a: m.a,
                b: m.b,
                c: m.c
            };
            7
        ],
        spawn: SpawnSpec::Trapezoid { profiles },
    }
}

/// Fully connected network with per-region MFDs stretched by random factors
/// in `[0.5, 1.5)` on both axes, a random start state in `[0, 100)` per
/// entry and no demand.
pub fn random_complete(regions: usize, steps: usize, seed: u64) -> Result<ScenarioFile> {
    if regions < 2 {
        return Err(Error::InvalidConfig(
            "random scenarios need at least 2 regions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mfd = (0..regions)
        .map(|_| {
            let m = Mfd::BENCHMARK.scaled(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
            MfdSpec {
                a: m.a,
                b: m.b,
                c: m.c,
            }
        })
        .collect();
    let initial = (0..regions)
        .map(|_| (0..regions).map(|_| rng.random_range(0.0..100.0)).collect())
        .collect();
    let edges = (0..regions)
        .flat_map(|i| (i + 1..regions).map(move |h| [i, h]))
        .collect();
    Ok(ScenarioFile {
        schema: SCENARIO_SCHEMA.into(),
        name: format!("random{regions}"),
        regions,
        steps,
        dt_s: 30.0,
        u_lo: 0.1,
        u_hi: 0.9,
        obs_noise_std_veh: 0.25,
        integrator: Integrator::Euler,
        edges,
        initial_state_veh: Some(initial),
        mfd,
        spawn: SpawnSpec::Table {
            rates_veh_per_s: vec![vec![vec![0.0; regions]; regions]; steps],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_to_its_area() {
        let p = Trapezoid {
            origin: 0,
            destination: 1,
            start_step: 3,
            ramp_up_steps: 4,
            plateau_steps: 5,
            ramp_down_steps: 6,
            peak_veh_per_s: 2.0,
        };
        let total: f64 = (0..40).map(|k| p.rate(k)).sum();
        assert!((total - 2.0 * (2.0 + 5.0 + 3.0)).abs() < 1e-12);
        assert_eq!(p.rate(2), 0.0);
        assert_eq!(p.rate(7), 2.0);
    }

    #[test]
    fn benchmark_round_trips() {
        let file = benchmark7();
        let text = file.to_toml().unwrap();
        let back = ScenarioFile::from_toml(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_toml().unwrap(), text);
        let s = back.load().unwrap();
        assert_eq!(s.graph.regions(), 7);
        assert_eq!(s.graph.neighbors(BENCHMARK_CENTER).len(), 6);
        assert!(s.spawn.peak() <= 16.5);
    }

    #[test]
    fn random_round_trips() {
        let file = random_complete(4, 10, 9).unwrap();
        let text = file.to_toml().unwrap();
        assert_eq!(
            ScenarioFile::from_toml(&text).unwrap().to_toml().unwrap(),
            text
        );
        let s = file.load().unwrap();
        assert!(s.initial.iter().all(|&v| (0.0..100.0).contains(&v)));
        assert_eq!(s.graph.edges().len(), 6);
    }

    #[test]
    fn rejects_bad_tables() {
        let mut file = random_complete(3, 4, 1).unwrap();
        file.spawn = SpawnSpec::Table {
            rates_veh_per_s: vec![vec![vec![0.0; 3]; 3]; 3],
        };
        assert!(file.load().is_err());
        let mut file = benchmark7();
        file.schema = "other".into();
        assert!(ScenarioFile::from_toml(&file.to_toml().unwrap()).is_err());
    }
}
