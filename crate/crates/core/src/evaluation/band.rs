use serde::{Deserialize, Serialize};

use crate::model::{Mfd, RegionGraph};

/// Efficient operating range of one region's MFD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingBand {
    pub region: usize,
    /// Accumulation of peak outflow, veh.
    pub critical_veh: f64,
    pub max_flow_veh_per_s: f64,
    /// Edges of the interval where the flow is at least 90% of its peak.
    pub lower_veh: f64,
    pub upper_veh: f64,
    /// Accumulation on the falling branch where the outflow drops to 1 veh/s,
    /// if it ever does.
    pub jam_veh: Option<f64>,
}

/// Root of `f` on `[lo, hi]` where `f(lo)` and `f(hi)` differ in sign.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let rising = f(lo) < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Right end of the falling branch: the held tail if there is one, otherwise
/// the first accumulation past the peak where the flow is at most `level`.
fn falling_end(m: &Mfd, peak: f64, level: f64) -> Option<f64> {
    if let Some(t) = m.tail_start() {
        return (m.flow(t) <= level).then_some(t);
    }
    let mut x = peak.max(1.0) * 2.0;
    for _ in 0..64 {
        if m.flow(x) <= level {
            return Some(x);
        }
        x *= 2.0;
    }
    None
}

pub fn region_band(region: usize, m: &Mfd) -> OperatingBand {
    let peak = m.critical_accumulation().unwrap_or(0.0);
    let gmax = m.max_flow();
    let level = 0.9 * gmax;
    let lower_veh = bisect(|x| m.flow(x) - level, 0.0, peak);
    let upper_veh = match falling_end(m, peak, level) {
        Some(end) => bisect(|x| m.flow(x) - level, peak, end),
        None => f64::INFINITY,
    };
    let jam_veh = if gmax > 1.0 {
        falling_end(m, peak, 1.0).map(|end| bisect(|x| m.flow(x) - 1.0, peak, end))
    } else {
        None
    };
    OperatingBand {
        region,
        critical_veh: peak,
        max_flow_veh_per_s: gmax,
        lower_veh,
        upper_veh,
        jam_veh,
    }
}

/// Operating band of every region.
pub fn optimal_band(graph: &RegionGraph) -> Vec<OperatingBand> {
    graph
        .mfds()
        .iter()
        .enumerate()
        .map(|(i, m)| region_band(i, m))
        .collect()
}
