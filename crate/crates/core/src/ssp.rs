//! Two-stage stochastic siting and sizing.
//!
//! First-stage penetrations `x` per bus and DER type are shared by every
//! scenario; each scenario carries its own branch-flow block and, in
//! dynamic mode, device blocks whose capacities are affine in `x`. The
//! whole problem is assembled as one deterministic-equivalent MISOCP.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{
    solve_continuous, solve_misocp, ConicProgram, LinExpr, Solution, SolveStats, SolveStatus, SolverSettings, VarId,
    WarmStart,
};
use crate::der::{ev_available, BatteryParams, BusDers, DerFleet, DerKind, EvUnit, HpUnit, ObjectiveWeights, PVParams};
use crate::error::{Error, Result};
use crate::hca::{DeviceTemplates, HcaMode};
use crate::network::Network;
use crate::opf::{
    add_devices, baseline_fraction, binary_hints, hp_baseline_per_home, solve_opf, static_injections, BusDeviceVars,
    BusSpec, DispatchOutcome, DispatchResult, OpfOptions, ScenarioData, Sizing,
};
use crate::powerflow::{add_branch_flow, static_feasible, FlowSolution, FlowVars, StaticOptions};
use crate::scenarios::{kmeans_reduce, ScenarioSet};

/// Standardized unit sizes linking penetrations to device capacities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingParams {
    /// Heat-pump rating per home (kW).
    pub p_r_hp: f64,
    /// EV charger rating per home (kW).
    pub p_r_ev: f64,
    /// EV battery per home (kWh).
    pub e_r_ev: f64,
    /// Battery energy-to-power ratio (h).
    pub bs_duration_h: f64,
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams {
            p_r_hp: 5.6,
            p_r_ev: 9.6,
            e_r_ev: 70.0,
            bs_duration_h: 3.0,
        }
    }
}

impl CouplingParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p_r_hp, self.p_r_ev, self.e_r_ev, self.bs_duration_h];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Parameter("coupling parameters must be positive".into()))
        }
    }
}

/// One value per DER type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerWeights {
    pub pv: f64,
    pub bs: f64,
    pub ev: f64,
    pub hp: f64,
}

impl DerWeights {
    pub fn uniform(v: f64) -> Self {
        DerWeights {
            pv: v,
            bs: v,
            ev: v,
            hp: v,
        }
    }

    pub fn get(&self, kind: DerKind) -> f64 {
        match kind {
            DerKind::Pv => self.pv,
            DerKind::Bs => self.bs,
            DerKind::Ev => self.ev,
            DerKind::Hp => self.hp,
        }
    }
}

/// First-stage penetrations per bus: PV and battery relative to the
/// nodal nominal load, EV and HP as the electrified share of homes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageVars {
    pub x_pv: Vec<f64>,
    pub x_bs: Vec<f64>,
    pub x_ev: Vec<f64>,
    pub x_hp: Vec<f64>,
}

impl FirstStageVars {
    pub fn zeros(n_buses: usize) -> Self {
        FirstStageVars {
            x_pv: vec![0.0; n_buses],
            x_bs: vec![0.0; n_buses],
            x_ev: vec![0.0; n_buses],
            x_hp: vec![0.0; n_buses],
        }
    }

    pub fn get(&self, kind: DerKind) -> &[f64] {
        match kind {
            DerKind::Pv => &self.x_pv,
            DerKind::Bs => &self.x_bs,
            DerKind::Ev => &self.x_ev,
            DerKind::Hp => &self.x_hp,
        }
    }

    pub fn get_mut(&mut self, kind: DerKind) -> &mut Vec<f64> {
        match kind {
            DerKind::Pv => &mut self.x_pv,
            DerKind::Bs => &mut self.x_bs,
            DerKind::Ev => &mut self.x_ev,
            DerKind::Hp => &mut self.x_hp,
        }
    }

    pub fn sum(&self, kind: DerKind) -> f64 {
        self.get(kind).iter().sum()
    }

    /// Σ over buses and DER types.
    pub fn total(&self) -> f64 {
        DerKind::ALL.iter().map(|&k| self.sum(k)).sum()
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        for k in DerKind::ALL {
            let v = self.get(k);
            if v.len() != net.n_buses() {
                return Err(Error::Dimension(format!("x_{k} has {} buses, network has {}", v.len(), net.n_buses())));
            }
            let hi = if matches!(k, DerKind::Ev | DerKind::Hp) { 1.0 } else { f64::INFINITY };
            if v.iter().any(|x| !(0.0..=hi).contains(x)) {
                return Err(Error::Parameter(format!("x_{k} outside its domain")));
            }
        }
        Ok(())
    }
}

/// Device capacities implied by the first-stage penetrations.
pub fn derive_capacities(
    x: &FirstStageVars,
    net: &Network,
    coupling: &CouplingParams,
    templates: &DeviceTemplates,
) -> Result<DerFleet> {
    x.validate(net)?;
    coupling.validate()?;
    let mut fleet = DerFleet::empty(net.n_buses());
    for (i, bus) in net.buses.iter().enumerate() {
        let pl = bus.nominal_load_p;
        let n = bus.houses as f64;
        let b: &mut BusDers = &mut fleet.buses[i];
        b.pv = Some(PVParams {
            p_max: x.x_pv[i] * pl,
            ..templates.pv
        });
        let p_bs = x.x_bs[i] * pl;
        b.battery = Some(BatteryParams {
            p_max: p_bs,
            e_max: p_bs * coupling.bs_duration_h,
            ..templates.battery
        });
        b.ev = Some(EvUnit {
            params: crate::der::EVParams {
                charger_kw: coupling.p_r_ev,
                e_max: coupling.e_r_ev,
                ..templates.ev
            },
            count: x.x_ev[i] * n,
        });
        b.hp = Some(HpUnit {
            params: crate::der::HPParams {
                p_rated: coupling.p_r_hp,
                ..templates.hp
            },
            count: x.x_hp[i] * n,
        });
    }
    Ok(fleet.normalized())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SspConfig {
    pub mode: HcaMode,
    /// Total battery power as a fraction of the feeder nominal load.
    pub bs_budget: f64,
    pub coupling: CouplingParams,
    pub templates: DeviceTemplates,
    /// Reward per unit penetration in the first-stage sum.
    pub der_weights: DerWeights,
    /// Linear cost per unit penetration.
    pub der_costs: DerWeights,
    /// Lower bound on a present DER's penetration.
    pub eps: f64,
    /// Upper bound on nodal PV penetration (finite so gated rows have a
    /// finite big-M).
    pub x_pv_max: f64,
    /// Loss weight of the static second stage; selects physical flows
    /// among equivalent ones.
    pub static_loss_weight: f64,
    /// Solver settings of the deterministic equivalent.
    pub settings: SolverSettings,
    /// Dispatch options of the dynamic second stage (weights, settings).
    pub opf: OpfOptions,
    pub static_opts: StaticOptions,
    /// Relative precision of the exactness repair.
    pub repair_tol: f64,
}

impl Default for SspConfig {
    fn default() -> Self {
        SspConfig {
            mode: HcaMode::Dynamic,
            bs_budget: 0.0,
            coupling: CouplingParams::default(),
            templates: DeviceTemplates::default(),
            der_weights: DerWeights::uniform(1.0),
            der_costs: DerWeights::uniform(0.0),
            eps: 1e-6,
            x_pv_max: 20.0,
            static_loss_weight: 1e-4,
            settings: SolverSettings {
                node_limit: 1000,
                ..SolverSettings::default()
            },
            opf: OpfOptions {
                allow_curtailment: false,
                settings: SolverSettings {
                    gap_tol: 1e-3,
                    node_limit: 50,
                    ..SolverSettings::default()
                },
                ..OpfOptions::default()
            },
            static_opts: StaticOptions::default(),
            repair_tol: 1e-4,
        }
    }
}

impl SspConfig {
    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        if !(self.bs_budget >= 0.0 && self.bs_budget.is_finite()) {
            return Err(Error::Parameter(format!("battery budget must be ≥ 0, got {}", self.bs_budget)));
        }
        if !(self.eps > 0.0 && self.eps < 1e-2) {
            return Err(Error::Parameter("eps must lie in (0, 0.01)".into()));
        }
        if !(self.x_pv_max > 0.0) {
            return Err(Error::Parameter("x_pv_max must be positive".into()));
        }
        if !self.x_pv_max.is_finite() {
            return Err(Error::AutoMOverflow("presence_upper (pv)".into()));
        }
        if !(self.repair_tol > 0.0 && self.repair_tol < 1.0) {
            return Err(Error::Parameter("repair_tol must lie in (0, 1)".into()));
        }
        self.opf.weights.validate()
    }

    pub fn weights(&self) -> &ObjectiveWeights {
        &self.opf.weights
    }
}

/// Penetration variable, presence binary and penetration upper bound of
/// one (bus, DER) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Presence {
    pub x: VarId,
    pub z: VarId,
    pub ub: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBlock {
    pub flow: FlowVars,
    /// Device variables (dynamic mode only).
    pub devices: Vec<BusDeviceVars>,
}

#[derive(Debug, Clone)]
pub struct SspModel {
    pub prog: ConicProgram,
    pub mode: HcaMode,
    /// `[kind][bus]`, `None` where the DER cannot be placed.
    pub first: BTreeMap<DerKind, Vec<Option<Presence>>>,
    pub blocks: Vec<ScenarioBlock>,
    pub probabilities: Vec<f64>,
}

impl SspModel {
    pub fn first_stage_values(&self, x: &[f64]) -> FirstStageVars {
        let nb = self.first[&DerKind::Pv].len();
        let mut out = FirstStageVars::zeros(nb);
        for (&k, vars) in &self.first {
            for (i, p) in vars.iter().enumerate() {
                if let Some(p) = p {
                    out.get_mut(k)[i] = x[p.x.0].max(0.0);
                }
            }
        }
        out
    }
}

/// Upper bound on the penetration of `kind` at `bus`, or `None` when the
/// DER cannot be placed there.
fn penetration_bound(net: &Network, bus: usize, kind: DerKind, cfg: &SspConfig) -> Option<f64> {
    let b = &net.buses[bus];
    if b.is_slack {
        return None;
    }
    match kind {
        DerKind::Pv => (b.nominal_load_p > 0.0).then_some(cfg.x_pv_max),
        DerKind::Bs => {
            let total = net.total_nominal_load();
            (b.nominal_load_p > 0.0 && cfg.bs_budget > 0.0).then(|| cfg.bs_budget * total / b.nominal_load_p)
        }
        DerKind::Ev | DerKind::Hp => (b.houses > 0).then_some(1.0),
    }
}

fn check_set(net: &Network, set: &ScenarioSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Parameter("scenario set is empty".into()));
    }
    set.validate()?;
    let dt = set.scenarios[0].dt;
    for s in &set.scenarios {
        s.validate(net)?;
        if (s.dt - dt).abs() > 1e-12 || s.horizon() != set.scenarios[0].horizon() {
            return Err(Error::Dimension("scenarios must share step length and horizon".into()));
        }
    }
    Ok(dt)
}

/// Assembles the deterministic equivalent over all scenarios of `set`.
pub fn build_deterministic_equivalent(net: &Network, set: &ScenarioSet, cfg: &SspConfig) -> Result<SspModel> {
    cfg.validate()?;
    let dt = check_set(net, set)?;
    let templates = cfg.templates.for_step(dt);
    let topo = net.topology();
    let mut prog = ConicProgram::new();
    prog.set_block(0);

    // first stage
    let mut first = BTreeMap::new();
    let mut reward = LinExpr::new();
    let mut budget = LinExpr::new();
    for kind in DerKind::ALL {
        let mut col = Vec::with_capacity(net.n_buses());
        for (i, bus) in net.buses.iter().enumerate() {
            let Some(ub) = penetration_bound(net, i, kind, cfg) else {
                col.push(None);
                continue;
            };
            let x = prog.add_var(format!("x_{kind}[{}]", bus.id), 0.0, ub);
            let z = prog.add_binary(format!("z_{kind}[{}]", bus.id));
            prog.add_le("presence_upper", LinExpr::from(x) - LinExpr::term(z, ub), 0.0);
            prog.add_ge("presence_lower", LinExpr::from(x) - LinExpr::term(z, cfg.eps), 0.0);
            reward.add_term(x, cfg.der_costs.get(kind) - cfg.der_weights.get(kind));
            if kind == DerKind::Bs {
                budget.add_term(x, bus.nominal_load_p);
            }
            col.push(Some(Presence { x, z, ub }));
        }
        first.insert(kind, col);
    }
    if !budget.terms.is_empty() {
        prog.add_le("bs_budget", budget, cfg.bs_budget * net.total_nominal_load());
    }
    prog.add_linear_objective("first_stage", reward);

    let mut blocks = Vec::with_capacity(set.len());
    for (k, scen) in set.scenarios.iter().enumerate() {
        prog.set_block(k as u32 + 1);
        let prefix = format!("s{k}_");
        let flow = add_branch_flow(&mut prog, net, &topo, scen.horizon(), &prefix);
        let devices = match cfg.mode {
            HcaMode::Static => {
                add_static_recourse(&mut prog, net, scen, &first, &flow, cfg, &templates);
                if cfg.static_loss_weight > 0.0 {
                    prog.add_linear_objective("losses", flow.losses(net) * (scen.probability * cfg.static_loss_weight));
                }
                Vec::new()
            }
            HcaMode::Dynamic => {
                let specs = dynamic_specs(net, &first, cfg, &templates);
                add_devices(&mut prog, net, scen, &specs, &flow, &cfg.opf, scen.probability, &prefix)?
            }
        };
        blocks.push(ScenarioBlock { flow, devices });
    }
    Ok(SspModel {
        prog,
        mode: cfg.mode,
        first,
        blocks,
        probabilities: set.probabilities(),
    })
}

/// Static recourse: injections are the baseline profiles scaled by the
/// first-stage capacities; reactive injections are loads only.
fn add_static_recourse(
    prog: &mut ConicProgram,
    net: &Network,
    scen: &ScenarioData,
    first: &BTreeMap<DerKind, Vec<Option<Presence>>>,
    flow: &FlowVars,
    cfg: &SspConfig,
    templates: &DeviceTemplates,
) {
    let pu = |kw: f64| net.kw_to_pu(kw);
    let hp_params = crate::der::HPParams {
        p_rated: cfg.coupling.p_r_hp,
        ..templates.hp
    };
    for (i, bus) in net.buses.iter().enumerate() {
        let pl = pu(bus.nominal_load_p);
        let n = bus.houses as f64;
        for t in 0..scen.horizon() {
            let mut p = LinExpr::constant(-pu(scen.load_p[i][t]));
            if let Some(v) = first[&DerKind::Pv][i] {
                p.add_term(v.x, scen.alpha_pv[t] * pl);
            }
            if let Some(v) = first[&DerKind::Bs][i] {
                let f = baseline_fraction(&scen.baseline_bs, i, t);
                if f != 0.0 {
                    p.add_term(v.x, f * pl);
                }
            }
            if let Some(v) = first[&DerKind::Ev][i] {
                let f = baseline_fraction(&scen.baseline_ev, i, t);
                if f != 0.0 && ev_available(&templates.ev, scen.t0 + t) {
                    p.add_term(v.x, f * n * pu(cfg.coupling.p_r_ev));
                }
            }
            if let Some(v) = first[&DerKind::Hp][i] {
                let per_home = hp_baseline_per_home(scen, i, t, &hp_params);
                if per_home != 0.0 {
                    p.add_term(v.x, n * pu(per_home));
                }
            }
            prog.add_eq("injection_p", LinExpr::from(flow.p_inj[t][i]) - p, 0.0);
            prog.add_eq("injection_q", LinExpr::from(flow.q_inj[t][i]), -pu(scen.load_q[i][t]));
        }
    }
}

/// Device sizing of the dynamic recourse: capacities affine in `x`, gated
/// by the presence binaries.
fn dynamic_specs(
    net: &Network,
    first: &BTreeMap<DerKind, Vec<Option<Presence>>>,
    cfg: &SspConfig,
    templates: &DeviceTemplates,
) -> Vec<BusSpec> {
    let pu = |kw: f64| net.kw_to_pu(kw);
    let c = &cfg.coupling;
    let sizing = |v: Presence, p: f64, e: f64, units: f64| Sizing {
        p: LinExpr::term(v.x, p),
        e: LinExpr::term(v.x, e),
        units: LinExpr::term(v.x, units),
        p_ub: v.ub * p,
        e_ub: v.ub * e,
        units_ub: v.ub * units,
        e_norm: v.ub * e,
        gate: Some(v.z),
    };
    net.buses
        .iter()
        .enumerate()
        .map(|(i, bus)| {
            let pl = pu(bus.nominal_load_p);
            let n = bus.houses as f64;
            BusSpec {
                pv: first[&DerKind::Pv][i].map(|v| (sizing(v, pl, 0.0, 0.0), templates.pv)),
                bs: first[&DerKind::Bs][i].map(|v| (sizing(v, pl, pl * c.bs_duration_h, 0.0), templates.battery)),
                ev: first[&DerKind::Ev][i].map(|v| {
                    let params = crate::der::EVParams {
                        charger_kw: c.p_r_ev,
                        e_max: c.e_r_ev,
                        ..templates.ev
                    };
                    (sizing(v, n * pu(c.p_r_ev), n * pu(c.e_r_ev), n), params)
                }),
                hp: first[&DerKind::Hp][i].map(|v| {
                    let params = crate::der::HPParams {
                        p_rated: c.p_r_hp,
                        ..templates.hp
                    };
                    (sizing(v, n * pu(c.p_r_hp), 0.0, n), params)
                }),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation of fixed first-stage decisions

/// Second-stage solution of one scenario with the first stage fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Recourse {
    Static { flow: FlowSolution, losses: f64 },
    Dynamic { dispatch: Box<DispatchResult> },
}

impl Recourse {
    pub fn flow(&self) -> &FlowSolution {
        match self {
            Recourse::Static { flow, .. } => flow,
            Recourse::Dynamic { dispatch } => &dispatch.flow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub feasible: bool,
    pub reason: Option<String>,
    /// Second-stage objective f^II (unscaled by probability).
    pub objective: f64,
    pub recourse: Option<Recourse>,
}

fn evaluate_one(net: &Network, fleet: &DerFleet, scen: &ScenarioData, cfg: &SspConfig) -> ScenarioEval {
    let outcome = match cfg.mode {
        HcaMode::Static => static_injections(net, fleet, scen)
            .and_then(|inj| static_feasible(net, &inj, &cfg.static_opts))
            .map(|c| match c.flow {
                Some(flow) if c.feasible => ScenarioEval {
                    feasible: true,
                    reason: None,
                    objective: cfg.static_loss_weight * c.losses,
                    recourse: Some(Recourse::Static { flow, losses: c.losses }),
                },
                _ => ScenarioEval::infeasible(c.reason.unwrap_or_default()),
            }),
        HcaMode::Dynamic => solve_opf(net, fleet, scen, &cfg.opf).map(|o| match o {
            DispatchOutcome::Solved(d) => ScenarioEval {
                feasible: true,
                reason: None,
                objective: d.objective,
                recourse: Some(Recourse::Dynamic { dispatch: d }),
            },
            DispatchOutcome::Infeasible { reason } => ScenarioEval::infeasible(reason),
        }),
    };
    outcome.unwrap_or_else(|e| {
        log::warn!("scenario evaluation failed: {e}");
        ScenarioEval::infeasible(e.to_string())
    })
}

impl ScenarioEval {
    fn infeasible(reason: impl Into<String>) -> Self {
        ScenarioEval {
            feasible: false,
            reason: Some(reason.into()),
            objective: f64::NAN,
            recourse: None,
        }
    }
}

/// Fixes the first stage and solves every scenario's second stage alone
/// (in parallel, results in scenario order).
pub fn evaluate_first_stage(
    x: &FirstStageVars,
    set: &ScenarioSet,
    net: &Network,
    cfg: &SspConfig,
) -> Result<Vec<ScenarioEval>> {
    let dt = check_set(net, set)?;
    let fleet = derive_capacities(x, net, &cfg.coupling, &cfg.templates.for_step(dt))?;
    Ok(set.scenarios.par_iter().map(|s| evaluate_one(net, &fleet, s, cfg)).collect())
}

/// Percentage of scenarios whose second stage is feasible for `x`, and
/// the per-scenario flags.
pub fn feasibility_rate(x: &FirstStageVars, set: &ScenarioSet, net: &Network, cfg: &SspConfig) -> Result<(f64, Vec<bool>)> {
    let flags: Vec<bool> = evaluate_first_stage(x, set, net, cfg)?.iter().map(|e| e.feasible).collect();
    let rate = 100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    Ok((rate, flags))
}

// ---------------------------------------------------------------------------
// Solve

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PresenceFlags {
    pub pv: Vec<bool>,
    pub bs: Vec<bool>,
    pub ev: Vec<bool>,
    pub hp: Vec<bool>,
}

impl PresenceFlags {
    pub fn get(&self, kind: DerKind) -> &[bool] {
        match kind {
            DerKind::Pv => &self.pv,
            DerKind::Bs => &self.bs,
            DerKind::Ev => &self.ev,
            DerKind::Hp => &self.hp,
        }
    }

    fn from_x(x: &FirstStageVars, eps: f64) -> Self {
        let flag = |v: &[f64]| v.iter().map(|&a| a >= eps * (1.0 - 1e-6)).collect();
        PresenceFlags {
            pv: flag(&x.x_pv),
            bs: flag(&x.x_bs),
            ev: flag(&x.x_ev),
            hp: flag(&x.x_hp),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSplit {
    /// f^I in minimization form: −Σ w·x + Σ c·x.
    pub first_stage: f64,
    /// Σ_k p_k · f^II_k.
    pub second_stage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SspResult {
    /// "direct", "reduced" or "full+warm".
    pub tag: String,
    pub mode: HcaMode,
    pub status: SolveStatus,
    pub feasible: bool,
    pub x: FirstStageVars,
    pub z: PresenceFlags,
    /// Nodal capacities (kW) per DER type.
    pub capacities: BTreeMap<DerKind, Vec<f64>>,
    pub fleet: DerFleet,
    /// Objective of the deterministic equivalent as solved.
    pub objective: f64,
    /// Objective split re-evaluated at the returned first stage.
    pub split: ObjectiveSplit,
    /// Whether the branch-flow cones were tight at the solver's point.
    pub exact: bool,
    /// PV scale applied to restore physical feasibility, if any.
    pub repair_scale: Option<f64>,
    pub scenario_feasible: Vec<bool>,
    /// Feasibility rate (%) against a fuller scenario set, when evaluated.
    pub feasibility_rate: Option<f64>,
    pub recourse: Vec<Option<Recourse>>,
    #[serde(skip)]
    pub stats: SolveStats,
}

impl SspResult {
    fn infeasible(model: &SspModel, status: SolveStatus, stats: SolveStats) -> Self {
        let nb = model.first[&DerKind::Pv].len();
        SspResult {
            tag: "direct".into(),
            mode: model.mode,
            status,
            feasible: false,
            x: FirstStageVars::zeros(nb),
            z: PresenceFlags::default(),
            capacities: BTreeMap::new(),
            fleet: DerFleet::empty(nb),
            objective: f64::NAN,
            split: ObjectiveSplit::default(),
            exact: false,
            repair_scale: None,
            scenario_feasible: Vec::new(),
            feasibility_rate: None,
            recourse: Vec::new(),
            stats,
        }
    }

    /// Σx over buses for one DER type.
    pub fn total(&self, kind: DerKind) -> f64 {
        self.x.sum(kind)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn first_stage_objective(x: &FirstStageVars, cfg: &SspConfig) -> f64 {
    DerKind::ALL
        .iter()
        .map(|&k| (cfg.der_costs.get(k) - cfg.der_weights.get(k)) * x.sum(k))
        .sum()
}

/// Hints for every binary: presence from the relaxed penetrations, device
/// modes from the relaxed powers.
fn relaxation_hints(model: &SspModel, x: &[f64], eps: f64) -> WarmStart {
    let mut warm = WarmStart::new();
    for col in model.first.values() {
        for p in col.iter().flatten() {
            warm.set(p.z, if x[p.x.0] >= eps { 1.0 } else { 0.0 });
        }
    }
    for b in &model.blocks {
        binary_hints(&b.devices, x, &mut warm);
    }
    warm
}

fn solve_model(model: &SspModel, settings: &SolverSettings, eps: f64, warm: Option<&WarmStart>) -> Result<Solution> {
    let relax = solve_continuous(&model.prog, settings);
    match relax.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Ok(relax),
        s => return Err(Error::Indeterminate(format!("2-SSP relaxation stopped with {s:?}"))),
    }
    let mut hints = relaxation_hints(model, &relax.values, eps);
    if let Some(w) = warm {
        hints.values.extend(w.values.iter().copied());
    }
    Ok(solve_misocp(&model.prog, settings, Some(&hints)))
}

/// Scales PV penetrations by `s`, dropping entries that fall below `eps`.
fn scale_pv(x: &FirstStageVars, s: f64, eps: f64) -> FirstStageVars {
    let mut out = x.clone();
    for v in &mut out.x_pv {
        *v *= s;
        if *v < eps {
            *v = 0.0;
        }
    }
    out
}

/// Largest PV scale in [0, 1] whose fixed first stage is feasible in every
/// scenario, by bisection; falls back to scaling all penetrations when
/// removing PV is not enough.
fn repair(
    x: &FirstStageVars,
    set: &ScenarioSet,
    net: &Network,
    cfg: &SspConfig,
) -> Result<Option<(f64, FirstStageVars, Vec<ScenarioEval>)>> {
    let all_ok = |e: &[ScenarioEval]| e.iter().all(|s| s.feasible);
    let candidate = |x: &FirstStageVars| -> Result<Option<Vec<ScenarioEval>>> {
        let e = evaluate_first_stage(x, set, net, cfg)?;
        Ok(all_ok(&e).then_some(e))
    };
    let base = scale_pv(x, 0.0, cfg.eps);
    let (scaled, mut best): (Box<dyn Fn(f64) -> FirstStageVars>, _) = match candidate(&base)? {
        Some(e) => (Box::new(|s| scale_pv(x, s, cfg.eps)), (0.0, base, e)),
        None => {
            let zero = FirstStageVars::zeros(net.n_buses());
            match candidate(&zero)? {
                Some(e) => (Box::new(|s| scale_all(x, s, cfg.eps)), (0.0, zero, e)),
                None => return Ok(None),
            }
        }
    };
    // bracket from above first: the repaired scale is usually close to 1
    let (mut lo, mut hi) = (0.0, 1.0);
    for step in [0.01, 0.05, 0.2, 0.5] {
        let s = 1.0 - step;
        if s <= lo {
            break;
        }
        let xs = scaled(s);
        match candidate(&xs)? {
            Some(e) => {
                lo = s;
                best = (s, xs, e);
                break;
            }
            None => hi = s,
        }
    }
    while hi - lo > cfg.repair_tol {
        let mid = 0.5 * (lo + hi);
        let xm = scaled(mid);
        match candidate(&xm)? {
            Some(e) => {
                lo = mid;
                best = (mid, xm, e);
            }
            None => hi = mid,
        }
    }
    Ok(Some(best))
}

fn scale_all(x: &FirstStageVars, s: f64, eps: f64) -> FirstStageVars {
    let mut out = x.clone();
    for k in DerKind::ALL {
        for v in out.get_mut(k) {
            *v *= s;
            if *v < eps {
                *v = 0.0;
            }
        }
    }
    out
}

/// Solves an assembled deterministic equivalent and verifies the first
/// stage scenario by scenario. When the relaxation was not exact and some
/// scenario turns out physically infeasible, PV penetrations are scaled
/// back until every scenario is feasible.
pub fn solve_ssp(
    model: &SspModel,
    net: &Network,
    set: &ScenarioSet,
    cfg: &SspConfig,
    warm: Option<&WarmStart>,
) -> Result<SspResult> {
    let sol = solve_model(model, &cfg.settings, cfg.eps, warm)?;
    let has_point = !sol.values.is_empty() && sol.values.iter().all(|v| v.is_finite());
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::GapLimit | SolveStatus::IterationLimit if has_point => {}
        SolveStatus::Infeasible => return Ok(SspResult::infeasible(model, SolveStatus::Infeasible, sol.stats)),
        s => return Err(Error::Indeterminate(format!("2-SSP solve stopped with {s:?}"))),
    }
    let exact = model.prog.soc_tightness(&sol.values) <= cfg.opf.exactness_tol;
    let mut x = model.first_stage_values(&sol.values);
    for k in DerKind::ALL {
        for v in x.get_mut(k) {
            if *v < cfg.eps * (1.0 - 1e-6) {
                *v = 0.0;
            }
        }
    }
    let mut evals = evaluate_first_stage(&x, set, net, cfg)?;
    let mut repair_scale = None;
    if !evals.iter().all(|e| e.feasible) {
        log::debug!("2-SSP first stage infeasible under exact flows (exact relaxation: {exact}), repairing");
        match repair(&x, set, net, cfg)? {
            Some((s, xr, e)) => {
                repair_scale = Some(s);
                x = xr;
                evals = e;
            }
            None => {
                let mut r = SspResult::infeasible(model, sol.status, sol.stats);
                r.scenario_feasible = evals.iter().map(|e| e.feasible).collect();
                return Ok(r);
            }
        }
    }
    let dt = set.scenarios[0].dt;
    let fleet = derive_capacities(&x, net, &cfg.coupling, &cfg.templates.for_step(dt))?;
    let capacities = DerKind::ALL.iter().map(|&k| (k, fleet.capacity(k))).collect();
    let second_stage = evals.iter().zip(set.probabilities()).map(|(e, p)| p * e.objective).sum();
    Ok(SspResult {
        tag: "direct".into(),
        mode: model.mode,
        status: sol.status,
        feasible: true,
        z: PresenceFlags::from_x(&x, cfg.eps),
        capacities,
        fleet,
        objective: sol.objective,
        split: ObjectiveSplit {
            first_stage: first_stage_objective(&x, cfg),
            second_stage,
        },
        exact,
        repair_scale,
        scenario_feasible: evals.iter().map(|e| e.feasible).collect(),
        feasibility_rate: None,
        recourse: evals.into_iter().map(|e| e.recourse).collect(),
        stats: sol.stats,
        x,
    })
}

/// Builds and solves the deterministic equivalent over `set`.
pub fn run_ssp(net: &Network, set: &ScenarioSet, cfg: &SspConfig) -> Result<SspResult> {
    let model = build_deterministic_equivalent(net, set, cfg)?;
    solve_ssp(&model, net, set, cfg, None)
}

/// Presence hints for the full model from a crude first stage.
fn first_stage_warm(model: &SspModel, x: &FirstStageVars, eps: f64) -> WarmStart {
    let mut w = WarmStart::new();
    for (&k, col) in &model.first {
        for (i, p) in col.iter().enumerate() {
            if let Some(p) = p {
                let v = x.get(k)[i].min(p.ub);
                w.set(p.x, v);
                w.set(p.z, if v >= eps { 1.0 } else { 0.0 });
            }
        }
    }
    w
}

/// Reduce, solve, check against the full set, and re-solve the full set
/// warm-started from the crude solution when its feasibility rate is
/// below `threshold` (%).
pub fn accelerated_ssp(
    net: &Network,
    full: &ScenarioSet,
    k: usize,
    threshold: f64,
    seed: u64,
    cfg: &SspConfig,
) -> Result<SspResult> {
    if k == 0 || k > full.len() {
        return Err(Error::Parameter(format!("k must lie in 1..={}, got {k}", full.len())));
    }
    if !(threshold > 0.0 && threshold <= 100.0) {
        return Err(Error::Parameter(format!("threshold must lie in (0, 100], got {threshold}")));
    }
    let reduced = kmeans_reduce(full, k, seed)?;
    let mut crude = run_ssp(net, &reduced.set, cfg)?;
    crude.tag = "reduced".into();
    if crude.feasible {
        let (rate, flags) = feasibility_rate(&crude.x, full, net, cfg)?;
        log::info!("reduced 2-SSP ({k} scenarios) feasible in {rate:.1}% of {}", full.len());
        if rate >= threshold {
            crude.feasibility_rate = Some(rate);
            crude.scenario_feasible = flags;
            return Ok(crude);
        }
    }
    let model = build_deterministic_equivalent(net, full, cfg)?;
    let warm = crude.feasible.then(|| first_stage_warm(&model, &crude.x, cfg.eps));
    let mut r = solve_ssp(&model, net, full, cfg, warm.as_ref())?;
    r.tag = "full+warm".into();
    if r.feasible {
        r.feasibility_rate = Some(100.0 * r.scenario_feasible.iter().filter(|&&f| f).count() as f64 / full.len() as f64);
    }
    Ok(r)
}
