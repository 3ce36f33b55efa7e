//! Bundled feeders for tests, benchmarks and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{Branch, Bus, Network, PccLimits};
use crate::opf::ScenarioData;

pub const TWO_BUS_JSON: &str = r#"{
  "base_kva": 1000,
  "base_kv": 4.16,
  "s_tran": 5,
  "pcc": {"p_min": -5, "p_max": 5, "q_min": -5, "q_max": 5},
  "buses": [
    {"id": 1, "name": "pcc", "slack": true},
    {"id": 2, "name": "load", "load_p_kw": 100, "load_q_kvar": 30, "houses": 20}
  ],
  "branches": [
    {"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.02, "s_max_pu": 1}
  ]
}"#;

pub const FEEDER_4_JSON: &str = include_str!("../data/feeder4.json");
pub const FEEDER_123_JSON: &str = include_str!("../data/feeder123.json");

fn pcc(limit: f64) -> PccLimits {
    PccLimits {
        p_min: -limit,
        p_max: limit,
        q_min: -limit,
        q_max: limit,
    }
}

fn bus(id: i64, load_kw: f64, houses: u32, slack: bool) -> Bus {
    Bus {
        id,
        name: format!("b{id}"),
        nominal_load_p: load_kw,
        nominal_load_q: 0.3 * load_kw,
        vm_min: 0.95,
        vm_max: 1.05,
        houses,
        is_slack: slack,
        p_bounds: None,
        q_bounds: None,
    }
}

pub fn two_bus() -> Network {
    Network::from_json_str(TWO_BUS_JSON).expect("bundled two-bus feeder")
}

/// Two-bus feeder with the given line impedance (pu) and bus-2 load (kW).
pub fn two_bus_with(r: f64, x: f64, load_kw: f64, load_kvar: f64) -> Network {
    let mut b2 = bus(2, load_kw, 20, false);
    b2.nominal_load_q = load_kvar;
    Network::new(
        vec![bus(1, 0.0, 0, true), b2],
        vec![Branch {
            from: 0,
            to: 1,
            r,
            x,
            s_max: 10.0,
        }],
        1000.0,
        4.16,
        10.0,
        pcc(10.0),
        1.0,
    )
    .expect("valid two-bus feeder")
}

/// Four-bus teaching feeder: PCC, a trunk bus and two laterals.
pub fn feeder_4() -> Network {
    Network::from_json_str(FEEDER_4_JSON).expect("bundled four-bus feeder")
}

/// Synthetic 123-bus radial feeder with 984 homes.
pub fn feeder_123() -> Network {
    Network::from_json_str(FEEDER_123_JSON).expect("bundled 123-bus feeder")
}

/// Buses `1..=n` in a line, 50 kW at every non-slack bus.
pub fn chain(n: usize) -> Network {
    let buses = (0..n).map(|k| bus(k as i64 + 1, if k == 0 { 0.0 } else { 50.0 }, 10, k == 0)).collect();
    let branches = (1..n)
        .map(|k| Branch {
            from: k - 1,
            to: k,
            r: 0.01,
            x: 0.02,
            s_max: 2.0,
        })
        .collect();
    Network::new(buses, branches, 1000.0, 4.16, 5.0, pcc(5.0), 1.0).expect("valid chain")
}

/// Slack bus feeding `leaves` load buses directly.
pub fn star(leaves: usize) -> Network {
    let buses = (0..=leaves).map(|k| bus(k as i64 + 1, if k == 0 { 0.0 } else { 50.0 }, 10, k == 0)).collect();
    let branches = (1..=leaves)
        .map(|k| Branch {
            from: 0,
            to: k,
            r: 0.01,
            x: 0.02,
            s_max: 2.0,
        })
        .collect();
    Network::new(buses, branches, 1000.0, 4.16, 5.0, pcc(5.0), 1.0).expect("valid star")
}

/// Random radial feeder with `n` buses; bus 0 is the slack.
pub fn random_tree(n: usize, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buses = (0..n)
        .map(|k| {
            if k == 0 {
                bus(1, 0.0, 0, true)
            } else {
                bus(k as i64 + 1, rng.gen_range(10.0..60.0), rng.gen_range(1..12), false)
            }
        })
        .collect();
    let branches = (1..n)
        .map(|k| Branch {
            from: rng.gen_range(0..k),
            to: k,
            r: rng.gen_range(0.002..0.01),
            x: rng.gen_range(0.002..0.02),
            s_max: 3.0,
        })
        .collect();
    Network::new(buses, branches, 1000.0, 4.16, 5.0, pcc(5.0), 1.0).expect("valid random tree")
}

/// PV availability at hour `h` of the day.
pub fn pv_shape(h: f64) -> f64 {
    if (6.0..18.0).contains(&h) {
        (std::f64::consts::PI * (h - 6.0) / 12.0).sin().max(0.0)
    } else {
        0.0
    }
}

/// Outdoor temperature (°C) at hour `h`: 18 °C at 3am, 30 °C at 3pm.
pub fn temperature_shape(h: f64) -> f64 {
    24.0 + 6.0 * (2.0 * std::f64::consts::PI * (h - 9.0) / 24.0).sin()
}

/// Price ($/kWh) at hour `h` with morning and evening peaks.
pub fn price_shape(h: f64) -> f64 {
    0.08 + 0.06 * (-((h - 19.0) / 2.5).powi(2)).exp() + 0.02 * (-((h - 8.0) / 2.0).powi(2)).exp()
}

/// Load as a fraction of nominal at hour `h` (peak near 1 at 7pm).
pub fn load_shape(h: f64) -> f64 {
    0.45 + 0.2 * (-((h - 8.0) / 2.0).powi(2)).exp() + 0.55 * (-((h - 19.0) / 3.0).powi(2)).exp()
}

/// Deterministic 24-hour scenario with nominal loads scaled by
/// [`load_shape`]. Device baselines are left at their defaults.
pub fn baseline_day(net: &Network, dt: f64) -> ScenarioData {
    let h = (24.0 / dt).round() as usize;
    let hours: Vec<f64> = (0..h).map(|t| t as f64 * dt).collect();
    let shape: Vec<f64> = hours.iter().map(|&x| load_shape(x)).collect();
    ScenarioData {
        dt,
        t0: 0,
        alpha_pv: hours.iter().map(|&x| pv_shape(x)).collect(),
        t_out: hours.iter().map(|&x| temperature_shape(x)).collect(),
        lmp: hours.iter().map(|&x| price_shape(x)).collect(),
        load_p: net.buses.iter().map(|b| shape.iter().map(|s| s * b.nominal_load_p).collect()).collect(),
        load_q: net.buses.iter().map(|b| shape.iter().map(|s| s * b.nominal_load_q).collect()).collect(),
        baseline_bs: None,
        baseline_ev: None,
        baseline_hp: None,
        probability: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_feeders_load() {
        assert_eq!(feeder_4().n_buses(), 4);
        assert_eq!(feeder_123().n_buses(), 123);
        assert_eq!(chain(5).n_branches(), 4);
        assert_eq!(star(4).n_branches(), 4);
    }

    #[test]
    fn random_tree_is_reproducible() {
        assert_eq!(random_tree(12, 7), random_tree(12, 7));
        assert_ne!(random_tree(12, 7), random_tree(12, 8));
    }
}
