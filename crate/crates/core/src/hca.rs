//! Deterministic iterative hosting-capacity search.
//!
//! The target DER's penetration is raised in fixed steps; at each level
//! the fleet is rebuilt from nested allocations and checked for static
//! feasibility or dynamic dispatch feasibility. The search stops at the
//! first infeasible level.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::SolverSettings;
use crate::der::{BatteryParams, BusDers, DerFleet, DerKind, EVParams, EvUnit, HPParams, HpUnit, ObjectiveWeights, PVParams};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::opf::{solve_opf, static_injections, DispatchOutcome, OpfOptions, ScenarioData};
use crate::powerflow::{flow_metrics, static_feasible, FlowMetrics, StaticOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HcaMode {
    Static,
    Dynamic,
}

impl FromStr for HcaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(HcaMode::Static),
            "dynamic" => Ok(HcaMode::Dynamic),
            _ => Err(Error::Parameter(format!("unknown mode '{s}' (expected static or dynamic)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationPolicy {
    /// PV/BS capacity split in proportion to nominal nodal load.
    Proportional,
    /// PV/BS capacity split evenly over non-slack buses.
    Uniform,
}

impl FromStr for AllocationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proportional" => Ok(AllocationPolicy::Proportional),
            "uniform" => Ok(AllocationPolicy::Uniform),
            _ => Err(Error::Parameter(format!("unknown allocation policy '{s}'"))),
        }
    }
}

/// Device templates scaled by the allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceTemplates {
    pub pv: PVParams,
    /// Battery parameters; energy capacity scales with the power ratio.
    pub battery: BatteryParams,
    pub ev: EVParams,
    /// Step length (h) the EV away window and target time are expressed in.
    pub ev_step_hours: f64,
    pub hp: HPParams,
}

impl Default for DeviceTemplates {
    fn default() -> Self {
        DeviceTemplates {
            pv: PVParams { p_max: 1.0, pf_min: 0.9 },
            battery: BatteryParams::with_power(1.0),
            ev: EVParams::default(),
            ev_step_hours: 0.25,
            hp: HPParams::default(),
        }
    }
}

impl DeviceTemplates {
    /// Re-expresses the EV time indices for steps of `dt` hours.
    pub fn for_step(&self, dt: f64) -> DeviceTemplates {
        let mut out = self.clone();
        if dt > 0.0 && (dt - self.ev_step_hours).abs() > 1e-12 {
            let r = self.ev_step_hours / dt;
            let map = |k: usize| (k as f64 * r).round() as usize;
            out.ev.away_start = map(self.ev.away_start);
            out.ev.away_end = map(self.ev.away_end).max(out.ev.away_start);
            out.ev.target_time = map(self.ev.target_time);
            out.ev_step_hours = dt;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HcaConfig {
    pub target: DerKind,
    pub mode: HcaMode,
    /// Penetration increment (percentage points).
    pub step: f64,
    pub start: f64,
    /// Highest level probed; defaults to 1000% (PV) or 100% (HP/EV).
    pub max_level: Option<f64>,
    /// Penetrations of the non-target DER types (%).
    pub pv_pct: f64,
    pub bs_pct: f64,
    pub ev_pct: f64,
    pub hp_pct: f64,
    pub policy: AllocationPolicy,
    pub seed: u64,
    /// Optional `(first step, length)` restricting the simulated period.
    pub time_window: Option<(usize, usize)>,
    /// Feeder peak load (kW) that PV/BS percentages refer to; defaults to
    /// the sum of nominal bus loads.
    pub peak_kw: Option<f64>,
    pub templates: DeviceTemplates,
    pub opf: OpfOptions,
    pub static_opts: StaticOptions,
}

impl Default for HcaConfig {
    fn default() -> Self {
        HcaConfig {
            target: DerKind::Pv,
            mode: HcaMode::Static,
            step: 1.0,
            start: 0.0,
            max_level: None,
            pv_pct: 0.0,
            bs_pct: 0.0,
            ev_pct: 0.0,
            hp_pct: 0.0,
            policy: AllocationPolicy::Proportional,
            seed: 0,
            time_window: None,
            peak_kw: None,
            templates: DeviceTemplates::default(),
            opf: OpfOptions {
                allow_curtailment: false,
                settings: SolverSettings {
                    gap_tol: 1e-2,
                    node_limit: 2000,
                    ..SolverSettings::default()
                },
                ..OpfOptions::default()
            },
            static_opts: StaticOptions::default(),
        }
    }
}

impl HcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target == DerKind::Bs {
            return Err(Error::Parameter("batteries are not a hosting-capacity target".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Parameter(format!("step must be positive, got {}", self.step)));
        }
        if !(self.start >= 0.0 && self.start.is_finite()) {
            return Err(Error::Parameter(format!("start must be non-negative, got {}", self.start)));
        }
        for (name, v, cap) in [
            ("pv", self.pv_pct, f64::INFINITY),
            ("bs", self.bs_pct, f64::INFINITY),
            ("ev", self.ev_pct, 100.0),
            ("hp", self.hp_pct, 100.0),
        ] {
            if !(v >= 0.0 && v <= cap) {
                return Err(Error::Parameter(format!("{name} penetration {v}% outside [0, {cap}]")));
            }
        }
        if self.max_level() < self.start {
            return Err(Error::Parameter("max_level is below start".into()));
        }
        Ok(())
    }

    pub fn max_level(&self) -> f64 {
        self.max_level.unwrap_or(match self.target {
            DerKind::Hp | DerKind::Ev => 100.0,
            _ => 1000.0,
        })
    }

    pub fn peak(&self, net: &Network) -> f64 {
        self.peak_kw.unwrap_or_else(|| net.total_nominal_load())
    }

    fn pct(&self, kind: DerKind) -> f64 {
        match kind {
            DerKind::Pv => self.pv_pct,
            DerKind::Bs => self.bs_pct,
            DerKind::Ev => self.ev_pct,
            DerKind::Hp => self.hp_pct,
        }
    }
}

fn kind_stream(kind: DerKind) -> u64 {
    match kind {
        DerKind::Pv => 0x5056,
        DerKind::Bs => 0x4253,
        DerKind::Ev => 0x4556,
        DerKind::Hp => 0x4850,
    }
}

/// Bus of every home in a seeded order. Taking a prefix samples homes
/// without replacement, weighted by houses per bus, and nests across levels.
pub fn home_order(net: &Network, kind: DerKind, seed: u64) -> Vec<usize> {
    let mut homes: Vec<usize> = net
        .buses
        .iter()
        .enumerate()
        .flat_map(|(i, b)| std::iter::repeat(i).take(b.houses as usize))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind_stream(kind).rotate_left(32));
    homes.shuffle(&mut rng);
    homes
}

/// Nodal allocation of one DER type at a penetration level: kW for PV/BS,
/// electrified homes for HP/EV.
pub fn allocate_capacity(
    net: &Network,
    kind: DerKind,
    penetration: f64,
    policy: AllocationPolicy,
    seed: u64,
    peak_kw: f64,
) -> Result<Vec<f64>> {
    if !(penetration >= 0.0 && penetration.is_finite()) {
        return Err(Error::Parameter(format!("penetration must be non-negative, got {penetration}")));
    }
    let n = net.n_buses();
    match kind {
        DerKind::Pv | DerKind::Bs => {
            let total = penetration / 100.0 * peak_kw;
            let eligible: Vec<usize> = (0..n).filter(|&i| !net.buses[i].is_slack).collect();
            let load: f64 = eligible.iter().map(|&i| net.buses[i].nominal_load_p.max(0.0)).sum();
            let mut out = vec![0.0; n];
            for &i in &eligible {
                let share = match policy {
                    AllocationPolicy::Proportional if load > 0.0 => net.buses[i].nominal_load_p.max(0.0) / load,
                    _ => 1.0 / eligible.len() as f64,
                };
                out[i] = total * share;
            }
            Ok(out)
        }
        DerKind::Hp | DerKind::Ev => {
            if penetration > 100.0 + 1e-9 {
                return Err(Error::Parameter(format!(
                    "{kind} penetration {penetration}% exceeds 100% of homes"
                )));
            }
            let order = home_order(net, kind, seed);
            let count = (penetration / 100.0 * order.len() as f64).round() as usize;
            let mut out = vec![0.0; n];
            for &bus in &order[..count.min(order.len())] {
                out[bus] += 1.0;
            }
            Ok(out)
        }
    }
}

/// Builds the fleet for the given per-type penetrations.
pub fn build_fleet(
    net: &Network,
    levels: &BTreeMap<DerKind, f64>,
    templates: &DeviceTemplates,
    policy: AllocationPolicy,
    seed: u64,
    peak_kw: f64,
) -> Result<DerFleet> {
    let mut fleet = DerFleet {
        buses: vec![BusDers::default(); net.n_buses()],
    };
    let e_ratio = templates.battery.e_max / templates.battery.p_max;
    for (&kind, &pct) in levels {
        if pct <= 0.0 {
            continue;
        }
        let alloc = allocate_capacity(net, kind, pct, policy, seed, peak_kw)?;
        for (b, &a) in fleet.buses.iter_mut().zip(&alloc) {
            if a <= 0.0 {
                continue;
            }
            match kind {
                DerKind::Pv => {
                    b.pv = Some(PVParams {
                        p_max: a,
                        ..templates.pv
                    })
                }
                DerKind::Bs => {
                    b.battery = Some(BatteryParams {
                        p_max: a,
                        e_max: a * e_ratio,
                        ..templates.battery
                    })
                }
                DerKind::Ev => {
                    b.ev = Some(EvUnit {
                        params: templates.ev,
                        count: a,
                    })
                }
                DerKind::Hp => {
                    b.hp = Some(HpUnit {
                        params: templates.hp,
                        count: a,
                    })
                }
            }
        }
    }
    Ok(fleet.normalized())
}

/// Penetration of every DER type (%), with PV/BS relative to the sum of
/// nominal bus loads.
pub fn penetration_of(fleet: &DerFleet, net: &Network) -> BTreeMap<DerKind, f64> {
    penetration_with_peak(fleet, net, net.total_nominal_load())
}

pub fn penetration_with_peak(fleet: &DerFleet, net: &Network, peak_kw: f64) -> BTreeMap<DerKind, f64> {
    let homes = f64::from(net.total_houses());
    DerKind::ALL
        .iter()
        .map(|&k| {
            let v = match k {
                DerKind::Pv | DerKind::Bs if peak_kw > 0.0 => 100.0 * fleet.total_capacity(k) / peak_kw,
                DerKind::Hp | DerKind::Ev if homes > 0.0 => 100.0 * fleet.homes(k).iter().sum::<f64>() / homes,
                _ => 0.0,
            };
            (k, v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcaLevel {
    pub level_pct: f64,
    pub feasible: bool,
    pub reason: Option<String>,
    pub metrics: Option<FlowMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcaTrace {
    pub target: DerKind,
    pub mode: HcaMode,
    pub levels: Vec<HcaLevel>,
    /// Last feasible level; `None` when the first probe already fails.
    pub final_hc: Option<f64>,
    /// Set when an indeterminate solver outcome stopped the search.
    pub aborted: Option<String>,
}

pub const TRACE_CSV_HEADER: &str = "level_pct,feasible,vmin,vmax,vmean,vmedian,imax_pct,imean_pct";

impl HcaTrace {
    /// Final hosting capacity with "no feasible level" counted as 0%.
    pub fn hc_or_zero(&self) -> f64 {
        self.final_hc.unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        s.push('\n');
        for l in &self.levels {
            let _ = write!(s, "{},{}", l.level_pct, l.feasible);
            match &l.metrics {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        ",{},{},{},{},{},{}",
                        m.vmin, m.vmax, m.vmean, m.vmedian, m.imax_pct, m.imean_pct
                    );
                }
                None => s.push_str(",,,,,,\n"),
            }
        }
        s
    }
}

/// Checks one fleet in the configured mode; `Err` carries indeterminate
/// solver outcomes.
pub fn check_level(
    net: &Network,
    fleet: &DerFleet,
    scen: &ScenarioData,
    mode: HcaMode,
    opf: &OpfOptions,
    static_opts: &StaticOptions,
) -> Result<(bool, Option<String>, Option<FlowMetrics>)> {
    match mode {
        HcaMode::Static => {
            let inj = static_injections(net, fleet, scen)?;
            let c = static_feasible(net, &inj, static_opts)?;
            Ok((c.feasible, c.reason, c.metrics))
        }
        HcaMode::Dynamic => match solve_opf(net, fleet, scen, opf)? {
            DispatchOutcome::Solved(r) => Ok((true, None, Some(flow_metrics(&r.flow, net)))),
            DispatchOutcome::Infeasible { reason } => Ok((false, Some(reason), None)),
        },
    }
}

pub fn run_deterministic_hca(
    net: &Network,
    cfg: &HcaConfig,
    scen: &ScenarioData,
    weights: &ObjectiveWeights,
) -> Result<HcaTrace> {
    cfg.validate()?;
    scen.validate(net)?;
    let scen = match cfg.time_window {
        Some((start, len)) => scen.window(start, len)?,
        None => scen.clone(),
    };
    let opf = OpfOptions {
        weights: weights.clone(),
        ..cfg.opf.clone()
    };
    let peak = cfg.peak(net);
    let templates = cfg.templates.for_step(scen.dt);
    let mut levels: BTreeMap<DerKind, f64> = DerKind::ALL.iter().map(|&k| (k, cfg.pct(k))).collect();
    let mut trace = HcaTrace {
        target: cfg.target,
        mode: cfg.mode,
        levels: Vec::new(),
        final_hc: None,
        aborted: None,
    };
    let max = cfg.max_level();
    for k in 0.. {
        let level = cfg.start + k as f64 * cfg.step;
        if level > max + 1e-9 {
            break;
        }
        levels.insert(cfg.target, level);
        let fleet = build_fleet(net, &levels, &templates, cfg.policy, cfg.seed, peak)?;
        let (feasible, reason, metrics) = match check_level(net, &fleet, &scen, cfg.mode, &opf, &cfg.static_opts) {
            Ok(r) => r,
            Err(e @ Error::Indeterminate(_)) => {
                log::warn!("hosting-capacity search aborted at {level}%: {e}");
                trace.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        log::debug!("{} {:?} level {level}% feasible={feasible}", cfg.target, cfg.mode);
        trace.levels.push(HcaLevel {
            level_pct: level,
            feasible,
            reason,
            metrics,
        });
        if !feasible {
            break;
        }
        trace.final_hc = Some(level);
    }
    Ok(trace)
}
