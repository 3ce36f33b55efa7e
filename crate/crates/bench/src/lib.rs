//! Workloads shared by the solver benchmarks.

use std::collections::BTreeMap;

use hostcap::fixtures::{baseline_day, feeder_123, feeder_4};
use hostcap::hca::{build_fleet, AllocationPolicy, DeviceTemplates};
use hostcap::opf::ScenarioData;
use hostcap::scenarios::{generate_scenarios, NoiseLevels, ScenarioSet};
use hostcap::{DerFleet, DerKind, Network};

/// A feeder with its fleet and a day of data at step `dt`.
pub struct Workload {
    pub net: Network,
    pub fleet: DerFleet,
    pub scen: ScenarioData,
}

fn workload(net: Network, dt: f64, pv: f64, bs: f64, hp: f64) -> Workload {
    let scen = baseline_day(&net, dt);
    let levels: BTreeMap<DerKind, f64> = [(DerKind::Pv, pv), (DerKind::Bs, bs), (DerKind::Hp, hp)].into_iter().collect();
    let templates = DeviceTemplates::default().for_step(dt);
    let peak = net.total_nominal_load();
    let fleet = build_fleet(&net, &levels, &templates, AllocationPolicy::Proportional, 0, peak).expect("fleet");
    Workload { net, fleet, scen }
}

/// 123-bus feeder, hourly day, PV only.
pub fn large_static() -> Workload {
    workload(feeder_123(), 1.0, 60.0, 0.0, 0.0)
}

/// Four-bus feeder over `steps` hours with batteries and heat pumps.
pub fn small_dynamic(steps: usize) -> Workload {
    let mut w = workload(feeder_4(), 1.0, 80.0, 20.0, 20.0);
    w.scen = w.scen.window(10, steps).expect("window");
    w
}

/// `n` noisy copies of the four-bus hourly day.
pub fn scenario_cloud(n: usize) -> ScenarioSet {
    let net = feeder_4();
    generate_scenarios(&baseline_day(&net, 1.0), &NoiseLevels::default(), n, 7).expect("scenarios")
}
