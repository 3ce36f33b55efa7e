//! Multiperiod dispatch of flexible devices on top of the branch-flow model.
//!
//! Device powers live in the program in per-unit, energies in pu·h and
//! temperatures in °C. Heat-pump temperatures are carried as extensive
//! states `W = homes · T`, so the same builder serves fixed fleets and
//! fleets whose size is itself a decision variable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conic::{
    solve_continuous, solve_misocp, ConicProgram, LinExpr, SolveStats, SolveStatus, SolverSettings, VarId, WarmStart,
};
use crate::der::{
    battery_soc_step, ev_available, hp_temp_step_mode, pf_tan, BatteryParams, DerFleet, EVParams, HPParams, HpMode,
    ObjectiveWeights, PVParams,
};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::powerflow::{add_branch_flow, classify, FlowSolution, FlowVars, InjectionProfile};

/// Exogenous data for one day (or window) of operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioData {
    /// Step length (hours).
    pub dt: f64,
    /// Index of the first step within the day (used by EV availability).
    #[serde(default)]
    pub t0: usize,
    /// Available PV output as a fraction of rating, per step.
    pub alpha_pv: Vec<f64>,
    /// Outdoor temperature (°C), common to all buses.
    pub t_out: Vec<f64>,
    /// Price ($/kWh).
    pub lmp: Vec<f64>,
    /// Inflexible load `[bus][t]` (kW / kvar).
    pub load_p: Vec<Vec<f64>>,
    pub load_q: Vec<Vec<f64>>,
    /// Static-mode device profiles as fractions of nodal capacity
    /// (`[bus][t]`, battery/EV in [−1, 1], heat pump in [−1, 0]).
    /// Absent battery/EV profiles mean idle devices; an absent heat-pump
    /// profile means each home draws its holding power.
    #[serde(default)]
    pub baseline_bs: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub baseline_ev: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub baseline_hp: Option<Vec<Vec<f64>>>,
    pub probability: f64,
}

impl ScenarioData {
    pub fn horizon(&self) -> usize {
        self.alpha_pv.len()
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let h = self.horizon();
        if h == 0 {
            return Err(Error::Dimension("scenario has no timesteps".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {}", self.dt)));
        }
        for (name, v) in [("t_out", &self.t_out), ("lmp", &self.lmp)] {
            if v.len() != h {
                return Err(Error::Dimension(format!("{name} has {} steps, alpha_pv has {h}", v.len())));
            }
        }
        if self.alpha_pv.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Parameter("alpha_pv must lie in [0, 1]".into()));
        }
        let matrices = [
            ("load_p", Some(&self.load_p)),
            ("load_q", Some(&self.load_q)),
            ("baseline_bs", self.baseline_bs.as_ref()),
            ("baseline_ev", self.baseline_ev.as_ref()),
            ("baseline_hp", self.baseline_hp.as_ref()),
        ];
        for (name, m) in matrices {
            let Some(m) = m else { continue };
            if m.len() != net.n_buses() {
                return Err(Error::Dimension(format!(
                    "{name} has {} buses, network has {}",
                    m.len(),
                    net.n_buses()
                )));
            }
            if let Some(row) = m.iter().position(|r| r.len() != h) {
                return Err(Error::Dimension(format!("{name} row {row} does not have {h} steps")));
            }
        }
        let all = self
            .alpha_pv
            .iter()
            .chain(&self.t_out)
            .chain(&self.lmp)
            .chain(self.load_p.iter().flatten())
            .chain(self.load_q.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("scenario contains non-finite values".into()));
        }
        Ok(())
    }

    /// Steps `start..start + len` as a standalone scenario.
    pub fn window(&self, start: usize, len: usize) -> Result<ScenarioData> {
        let end = start + len;
        if len == 0 || end > self.horizon() {
            return Err(Error::Dimension(format!(
                "window {start}..{end} outside horizon {}",
                self.horizon()
            )));
        }
        let cut = |v: &Vec<f64>| v[start..end].to_vec();
        let cut_m = |m: &Vec<Vec<f64>>| m.iter().map(cut).collect::<Vec<_>>();
        Ok(ScenarioData {
            dt: self.dt,
            t0: self.t0 + start,
            alpha_pv: cut(&self.alpha_pv),
            t_out: cut(&self.t_out),
            lmp: cut(&self.lmp),
            load_p: cut_m(&self.load_p),
            load_q: cut_m(&self.load_q),
            baseline_bs: self.baseline_bs.as_ref().map(cut_m),
            baseline_ev: self.baseline_ev.as_ref().map(cut_m),
            baseline_hp: self.baseline_hp.as_ref().map(cut_m),
            probability: self.probability,
        })
    }

    pub fn lambda_bar(&self, weights: &ObjectiveWeights) -> f64 {
        weights
            .lambda_bar
            .unwrap_or_else(|| self.lmp.iter().sum::<f64>() / self.lmp.len().max(1) as f64)
    }

    /// Fixed-load injection profile (no devices).
    pub fn load_injections(&self) -> InjectionProfile {
        InjectionProfile {
            p: self.load_p.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
            q: self.load_q.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
        }
    }
}

/// Static-mode heat-pump power per home (kW, ≤ 0) at step `t`.
pub(crate) fn hp_baseline_per_home(scen: &ScenarioData, bus: usize, t: usize, params: &HPParams) -> f64 {
    match &scen.baseline_hp {
        Some(m) => m[bus][t].clamp(-1.0, 0.0) * params.p_rated,
        None => params.holding_power(scen.t_out[t]),
    }
}

pub(crate) fn baseline_fraction(m: &Option<Vec<Vec<f64>>>, bus: usize, t: usize) -> f64 {
    m.as_ref().map_or(0.0, |m| m[bus][t].clamp(-1.0, 1.0))
}

/// Net injections when every device follows its baseline profile and PV
/// produces its full available output. Reactive injections are loads only.
pub fn static_injections(net: &Network, fleet: &DerFleet, scen: &ScenarioData) -> Result<InjectionProfile> {
    scen.validate(net)?;
    if fleet.len() != net.n_buses() {
        return Err(Error::Dimension(format!(
            "fleet has {} buses, network has {}",
            fleet.len(),
            net.n_buses()
        )));
    }
    let mut inj = scen.load_injections();
    for (i, ders) in fleet.buses.iter().enumerate() {
        for t in 0..scen.horizon() {
            let mut p = 0.0;
            if let Some(pv) = &ders.pv {
                p += scen.alpha_pv[t] * pv.p_max;
            }
            if let Some(bs) = &ders.battery {
                p += baseline_fraction(&scen.baseline_bs, i, t) * bs.p_max;
            }
            if let Some(ev) = &ders.ev {
                if ev_available(&ev.params, scen.t0 + t) {
                    p += baseline_fraction(&scen.baseline_ev, i, t) * ev.p_max();
                }
            }
            if let Some(hp) = &ders.hp {
                p += hp.count * hp_baseline_per_home(scen, i, t, &hp.params);
            }
            inj.p[i][t] += p;
        }
    }
    Ok(inj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpfOptions {
    pub weights: ObjectiveWeights,
    pub settings: SolverSettings,
    /// Allow PV output below its available power.
    pub allow_curtailment: bool,
    /// Per-step heat-pump mode binaries instead of modes fixed from the
    /// outdoor temperature.
    pub hp_mode_binaries: bool,
    pub exactness_tol: f64,
    /// Re-solves with a ×10 loss weight when the relaxation is inexact.
    pub exactness_retries: u32,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions {
            weights: ObjectiveWeights::default(),
            settings: SolverSettings::default(),
            allow_curtailment: true,
            hp_mode_binaries: false,
            exactness_tol: 1e-5,
            exactness_retries: 3,
        }
    }
}

// ---------------------------------------------------------------------------
// Device blocks

/// Capacity of one device block as affine expressions (pu, pu·h, homes),
/// with constant upper bounds used for big-M style rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Sizing {
    pub p: LinExpr,
    pub e: LinExpr,
    pub units: LinExpr,
    pub p_ub: f64,
    pub e_ub: f64,
    pub units_ub: f64,
    /// Energy used to normalize the EV target term (pu·h).
    pub e_norm: f64,
    pub gate: Option<VarId>,
}

impl Sizing {
    pub fn fixed(p: f64, e: f64, units: f64) -> Self {
        Sizing {
            p: LinExpr::constant(p),
            e: LinExpr::constant(e),
            units: LinExpr::constant(units),
            p_ub: p,
            e_ub: e,
            units_ub: units,
            e_norm: e,
            gate: None,
        }
    }

    fn is_fixed(&self) -> bool {
        self.p.is_constant() && self.e.is_constant() && self.units.is_constant() && self.gate.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct BusSpec {
    pub pv: Option<(Sizing, PVParams)>,
    pub bs: Option<(Sizing, BatteryParams)>,
    pub ev: Option<(Sizing, EVParams)>,
    pub hp: Option<(Sizing, HPParams)>,
}

pub(crate) fn fleet_specs(net: &Network, fleet: &DerFleet) -> Vec<BusSpec> {
    let pu = |kw: f64| net.kw_to_pu(kw);
    fleet
        .buses
        .iter()
        .map(|b| BusSpec {
            pv: b.pv.map(|p| (Sizing::fixed(pu(p.p_max), 0.0, 0.0), p)),
            bs: b.battery.map(|p| (Sizing::fixed(pu(p.p_max), pu(p.e_max), 0.0), p)),
            ev: b.ev.map(|e| (Sizing::fixed(pu(e.p_max()), pu(e.e_max()), e.count), e.params)),
            hp: b.hp.map(|h| (Sizing::fixed(pu(h.p_max()), 0.0, h.count), h.params)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvVars {
    pub p: Vec<VarId>,
    pub q: Vec<VarId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageVars {
    pub pc: Vec<VarId>,
    pub pd: Vec<VarId>,
    pub uc: Vec<VarId>,
    pub ud: Vec<VarId>,
    /// Stored energy at the start of each step, plus the final state.
    pub e: Vec<VarId>,
    pub q: Vec<VarId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpVars {
    pub p: Vec<VarId>,
    /// Extensive heat state `homes · T_in`, H + 1 entries.
    pub w: Vec<VarId>,
    pub cool: Option<Vec<VarId>>,
    pub heat: Option<Vec<VarId>>,
    pub mode: Option<Vec<VarId>>,
    pub fixed_modes: Vec<HpMode>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BusDeviceVars {
    pub pv: Option<PvVars>,
    pub bs: Option<StorageVars>,
    pub ev: Option<StorageVars>,
    pub hp: Option<HpVars>,
}

/// Names of the objective entries reported by [`objective_breakdown`].
pub const BREAKDOWN_TERMS: [&str; 9] = [
    "curtailment",
    "losses",
    "coupling",
    "comfort",
    "cycling_hp",
    "cycling_bs",
    "cycling_ev",
    "soc_tracking",
    "import_cost",
];

/// Groups the breakdown entries into the seven objective groups.
pub fn breakdown_group(term: &str) -> &str {
    if term.starts_with("cycling") {
        "cycling"
    } else {
        term
    }
}

/// Adds `h = rhs`; when gated, also the pair `|h − rhs| ≤ M(1 − z)`
/// (label `presence_gate`) with M from the variable bounds. Gated blocks
/// have capacities that vanish with `z`, so the plain equality stays valid
/// when the gate is closed.
pub(crate) fn gated_eq(prog: &mut ConicProgram, label: &str, h: LinExpr, rhs: f64, gate: Option<VarId>) -> Result<()> {
    if let Some(z) = gate {
        let m = auto_big_m(prog, &h, rhs).ok_or_else(|| Error::AutoMOverflow(label.to_string()))?;
        prog.add_le("presence_gate", h.clone() + LinExpr::term(z, m), rhs + m);
        prog.add_ge("presence_gate", h.clone() - LinExpr::term(z, m), rhs - m);
    }
    prog.add_eq(label, h, rhs);
    Ok(())
}

/// Largest `|h − rhs|` over the variable box, floored at 1000.
pub(crate) fn auto_big_m(prog: &ConicProgram, h: &LinExpr, rhs: f64) -> Option<f64> {
    let mut lo = h.constant - rhs;
    let mut hi = h.constant - rhs;
    for &(v, c) in &h.terms {
        let var = prog.var(v);
        let (a, b) = (c * var.lb, c * var.ub);
        lo += a.min(b);
        hi += a.max(b);
    }
    let m = lo.abs().max(hi.abs());
    m.is_finite().then_some(m.max(1000.0))
}

/// `var ≤ coef · cap` (and `var ≥ lo_coef · cap`), as bounds when `cap` is
/// constant and as rows otherwise. With a gate, also `var ≤ z · ub`.
fn scaled_bounds(
    prog: &mut ConicProgram,
    label: &str,
    var: VarId,
    cap: &LinExpr,
    lo_coef: f64,
    hi_coef: f64,
    gate: Option<VarId>,
) {
    if cap.is_constant() {
        let v = prog.var_mut(var);
        v.lb = v.lb.max(lo_coef * cap.constant);
        v.ub = v.ub.min(hi_coef * cap.constant);
        if v.lb > v.ub {
            v.lb = v.ub;
        }
    } else {
        prog.add_le(label, LinExpr::from(var) - cap.clone() * hi_coef, 0.0);
        if lo_coef != 0.0 {
            prog.add_ge(label, LinExpr::from(var) - cap.clone() * lo_coef, 0.0);
        }
    }
    if let Some(z) = gate {
        let (lb, ub) = (prog.var(var).lb, prog.var(var).ub);
        prog.add_le("gate_bound", LinExpr::from(var) - LinExpr::term(z, ub), 0.0);
        if lb < 0.0 {
            prog.add_ge("gate_bound", LinExpr::from(var) - LinExpr::term(z, lb), 0.0);
        }
    }
}

struct Ctx<'a> {
    net: &'a Network,
    scen: &'a ScenarioData,
    opts: &'a OpfOptions,
    /// Objective scale (scenario probability).
    scale: f64,
    prefix: &'a str,
}

fn add_storage(
    prog: &mut ConicProgram,
    ctx: &Ctx,
    bus: usize,
    sizing: &Sizing,
    params: &BatteryParams,
    kind: &str,
    available: impl Fn(usize) -> bool,
    v2g: bool,
) -> Result<StorageVars> {
    let h = ctx.scen.horizon();
    let dt = ctx.scen.dt;
    let id = ctx.net.buses[bus].id;
    let pre = ctx.prefix;
    let tan = pf_tan(params.pf_min);
    let mut sv = StorageVars {
        pc: Vec::with_capacity(h),
        pd: Vec::with_capacity(h),
        uc: Vec::with_capacity(h),
        ud: Vec::with_capacity(h),
        e: Vec::with_capacity(h + 1),
        q: Vec::with_capacity(h),
    };
    for t in 0..h {
        let on = available(t);
        let pc = prog.add_var(format!("{pre}{kind}_pc[{t},{id}]"), 0.0, if on { sizing.p_ub } else { 0.0 });
        let pd_ub = if on && v2g { sizing.p_ub } else { 0.0 };
        let pd = prog.add_var(format!("{pre}{kind}_pd[{t},{id}]"), 0.0, pd_ub);
        let uc = prog.add_binary(format!("{pre}{kind}_uc[{t},{id}]"));
        let ud = prog.add_binary(format!("{pre}{kind}_ud[{t},{id}]"));
        let q = prog.add_var(format!("{pre}{kind}_q[{t},{id}]"), -tan * sizing.p_ub, tan * sizing.p_ub);
        scaled_bounds(prog, &format!("{kind}_power"), pc, &sizing.p, 0.0, if on { 1.0 } else { 0.0 }, sizing.gate);
        scaled_bounds(prog, &format!("{kind}_power"), pd, &sizing.p, 0.0, if on && v2g { 1.0 } else { 0.0 }, sizing.gate);
        prog.add_le(format!("{kind}_charge_gate"), LinExpr::from(pc) - LinExpr::term(uc, sizing.p_ub), 0.0);
        prog.add_le(format!("{kind}_discharge_gate"), LinExpr::from(pd) - LinExpr::term(ud, sizing.p_ub), 0.0);
        prog.add_le(format!("{kind}_exclusive"), LinExpr::from(uc) + ud, 1.0);
        // |Q| ≤ tan φ · (P_c + P_d)
        let mag = (LinExpr::from(pc) + pd) * tan;
        prog.add_le(format!("{kind}_pf"), LinExpr::from(q) - mag.clone(), 0.0);
        prog.add_ge(format!("{kind}_pf"), LinExpr::from(q) + mag, 0.0);
        sv.pc.push(pc);
        sv.pd.push(pd);
        sv.uc.push(uc);
        sv.ud.push(ud);
        sv.q.push(q);
    }
    for t in 0..=h {
        let e = prog.add_var(format!("{pre}{kind}_e[{t},{id}]"), 0.0, params.soc_max * sizing.e_ub);
        scaled_bounds(prog, &format!("{kind}_energy"), e, &sizing.e, params.soc_min, params.soc_max, sizing.gate);
        sv.e.push(e);
    }
    // initial state and recurrence
    gated_eq(prog, &format!("{kind}_init"), LinExpr::from(sv.e[0]) - sizing.e.clone() * params.soc_init, 0.0, sizing.gate)?;
    for t in 0..h {
        let rec = LinExpr::from(sv.e[t + 1])
            + LinExpr::term(sv.e[t], -(1.0 - params.delta))
            + LinExpr::term(sv.pc[t], -dt * params.eta)
            + LinExpr::term(sv.pd[t], dt / params.eta);
        gated_eq(prog, &format!("soc_{kind}"), rec, 0.0, sizing.gate)?;
    }
    gated_eq(prog, &format!("terminal_{kind}"), LinExpr::from(sv.e[h]) - sv.e[0], 0.0, sizing.gate)?;

    // cycling on net power
    let w = ctx.scale
        * if kind == "bs" {
            ctx.opts.weights.w_cycle_bs
        } else {
            ctx.opts.weights.w_cycle_ev
        };
    if w > 0.0 && h > 1 {
        let diffs = (0..h - 1)
            .map(|t| LinExpr::from(sv.pd[t + 1]) - sv.pc[t + 1] - sv.pd[t] + sv.pc[t])
            .collect();
        prog.add_sum_squares(format!("cycling_{kind}"), w, diffs);
    }
    let _ = bus;
    Ok(sv)
}

fn add_hp(
    prog: &mut ConicProgram,
    ctx: &Ctx,
    bus: usize,
    sizing: &Sizing,
    params: &HPParams,
) -> Result<HpVars> {
    if !(params.t_min..=params.t_max).contains(&params.t_init) {
        return Err(Error::Parameter(format!(
            "heat pump at bus {}: initial temperature {} outside [{}, {}]",
            ctx.net.buses[bus].id, params.t_init, params.t_min, params.t_max
        )));
    }
    let scen = ctx.scen;
    let h = scen.horizon();
    let id = ctx.net.buses[bus].id;
    let pre = ctx.prefix;
    let theta = params.theta(scen.dt);
    let rho_pu = params.rho() * ctx.net.base_kva;
    let binaries = ctx.opts.hp_mode_binaries && sizing.is_fixed();
    let fixed_modes: Vec<HpMode> = scen.t_out.iter().map(|&o| HpMode::from_temperatures(o, params.t_set)).collect();
    let mut hv = HpVars {
        p: Vec::with_capacity(h),
        w: Vec::with_capacity(h + 1),
        cool: binaries.then(Vec::new),
        heat: binaries.then(Vec::new),
        mode: binaries.then(Vec::new),
        fixed_modes: fixed_modes.clone(),
    };
    for t in 0..h {
        let p = prog.add_var(format!("{pre}hp_p[{t},{id}]"), -sizing.p_ub, 0.0);
        scaled_bounds(prog, "hp_power", p, &sizing.p, -1.0, 0.0, sizing.gate);
        hv.p.push(p);
        if binaries {
            let c = prog.add_var(format!("{pre}hp_cool[{t},{id}]"), 0.0, sizing.p_ub);
            let hh = prog.add_var(format!("{pre}hp_heat[{t},{id}]"), 0.0, sizing.p_ub);
            let m = prog.add_binary(format!("{pre}hp_mode[{t},{id}]"));
            prog.add_eq("hp_split", LinExpr::from(p) + c + hh, 0.0);
            prog.add_le("hp_mode_gate", LinExpr::from(c) - LinExpr::term(m, sizing.p_ub), 0.0);
            prog.add_le("hp_mode_gate", LinExpr::from(hh) + LinExpr::term(m, sizing.p_ub), sizing.p_ub);
            hv.cool.as_mut().unwrap().push(c);
            hv.heat.as_mut().unwrap().push(hh);
            hv.mode.as_mut().unwrap().push(m);
        }
    }
    for t in 0..=h {
        let w = prog.add_var(format!("{pre}hp_w[{t},{id}]"), 0.0, sizing.units_ub * params.t_max);
        if t > 0 {
            scaled_bounds(prog, "hp_temperature", w, &sizing.units, params.t_min, params.t_max, sizing.gate);
        } else if let Some(z) = sizing.gate {
            prog.add_le("gate_bound", LinExpr::from(w) - LinExpr::term(z, sizing.units_ub * params.t_max), 0.0);
        }
        hv.w.push(w);
    }
    gated_eq(prog, "hp_init", LinExpr::from(hv.w[0]) - sizing.units.clone() * params.t_init, 0.0, sizing.gate)?;
    for t in 0..h {
        // W' = θW + (1 − θ)(n·T_out + s·ρ·P)
        let mut rec = LinExpr::from(hv.w[t + 1]) + LinExpr::term(hv.w[t], -theta) - sizing.units.clone() * ((1.0 - theta) * scen.t_out[t]);
        if binaries {
            rec.add_term(hv.cool.as_ref().unwrap()[t], (1.0 - theta) * rho_pu);
            rec.add_term(hv.heat.as_ref().unwrap()[t], -(1.0 - theta) * rho_pu);
        } else {
            rec.add_term(hv.p[t], -(1.0 - theta) * fixed_modes[t].sign() * rho_pu);
        }
        gated_eq(prog, "hp_dynamics", rec, 0.0, sizing.gate)?;
    }
    for t in 0..h.saturating_sub(1) {
        let d = LinExpr::from(hv.p[t + 1]) - hv.p[t];
        let cap = sizing.p.clone() * params.ramp_frac;
        prog.add_le("hp_ramp", d.clone() - cap.clone(), 0.0);
        prog.add_ge("hp_ramp", d + cap, 0.0);
    }

    let w_comfort = ctx.scale * ctx.opts.weights.w_comfort;
    if w_comfort > 0.0 {
        if sizing.units.is_constant() {
            let n = sizing.units.constant;
            let dev = (1..=h).map(|t| (LinExpr::from(hv.w[t]) - n * params.t_set) * (1.0 / n)).collect();
            prog.add_sum_squares("comfort", w_comfort, dev);
        } else {
            // n·s ≥ (W − n·T*)², i.e. s ≥ n·(T − T*)²; weighted by the
            // electrified share of the bus.
            let mut total = LinExpr::new();
            for t in 1..=h {
                let s = prog.add_var(format!("{pre}hp_comfort[{t},{id}]"), 0.0, f64::INFINITY);
                let dev = LinExpr::from(hv.w[t]) - sizing.units.clone() * params.t_set;
                prog.add_rotated("comfort_epigraph", sizing.units.clone(), LinExpr::term(s, 2.0), vec![dev], false);
                total.add_term(s, w_comfort / sizing.units_ub.max(1e-12));
            }
            prog.add_linear_objective("comfort", total);
        }
    }
    let w_cycle = ctx.scale * ctx.opts.weights.w_cycle_hp;
    if w_cycle > 0.0 && h > 1 {
        let diffs = (0..h - 1).map(|t| LinExpr::from(hv.p[t + 1]) - hv.p[t]).collect();
        prog.add_sum_squares("cycling_hp", w_cycle, diffs);
    }
    Ok(hv)
}

/// Adds device blocks for every bus, ties net injections to the flow block
/// and adds the scenario's objective terms (scaled by `scale`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_devices(
    prog: &mut ConicProgram,
    net: &Network,
    scen: &ScenarioData,
    specs: &[BusSpec],
    flow: &FlowVars,
    opts: &OpfOptions,
    scale: f64,
    prefix: &str,
) -> Result<Vec<BusDeviceVars>> {
    let ctx = Ctx {
        net,
        scen,
        opts,
        scale,
        prefix,
    };
    let h = scen.horizon();
    let w = &opts.weights;
    let mut out = Vec::with_capacity(specs.len());
    let mut curtail = Vec::new();
    let mut coupling = LinExpr::new();
    let lambda_bar = scen.lambda_bar(w);
    let mut import = LinExpr::new();

    for (i, spec) in specs.iter().enumerate() {
        let id = net.buses[i].id;
        let mut dv = BusDeviceVars::default();
        if let Some((sz, params)) = &spec.pv {
            let tan = pf_tan(params.pf_min);
            let mut pv = PvVars {
                p: Vec::with_capacity(h),
                q: Vec::with_capacity(h),
            };
            for t in 0..h {
                let a = scen.alpha_pv[t];
                let p = prog.add_var(format!("{prefix}pv_p[{t},{id}]"), 0.0, a * sz.p_ub);
                let q = prog.add_var(format!("{prefix}pv_q[{t},{id}]"), -tan * a * sz.p_ub, tan * a * sz.p_ub);
                if opts.allow_curtailment {
                    scaled_bounds(prog, "pv_available", p, &sz.p, 0.0, a, sz.gate);
                    curtail.push(LinExpr::from(p) - sz.p.clone() * a);
                } else {
                    gated_eq(prog, "pv_output", LinExpr::from(p) - sz.p.clone() * a, 0.0, sz.gate)?;
                    if let Some(z) = sz.gate {
                        prog.add_le("gate_bound", LinExpr::from(p) - LinExpr::term(z, a * sz.p_ub), 0.0);
                    }
                }
                prog.add_le("pv_pf", LinExpr::from(q) - LinExpr::term(p, tan), 0.0);
                prog.add_ge("pv_pf", LinExpr::from(q) + LinExpr::term(p, tan), 0.0);
                pv.p.push(p);
                pv.q.push(q);
            }
            dv.pv = Some(pv);
        }
        if let Some((sz, params)) = &spec.bs {
            let sv = add_storage(prog, &ctx, i, sz, params, "bs", |_| true, true)?;
            for t in 0..h {
                let net_p = LinExpr::from(sv.pd[t]) - sv.pc[t];
                coupling.add_expr(&net_p, w.w_couple_bs * scen.alpha_pv[t]);
                import.add_expr(&net_p, -(scen.lmp[t] - lambda_bar));
            }
            dv.bs = Some(sv);
        }
        if let Some((sz, params)) = &spec.ev {
            let t0 = scen.t0;
            let sv = add_storage(prog, &ctx, i, sz, &params.as_battery(), "ev", |t| ev_available(params, t0 + t), params.v2g)?;
            for t in 0..h {
                coupling.add_expr(&(LinExpr::from(sv.pd[t]) - sv.pc[t]), w.w_couple_ev * scen.alpha_pv[t]);
            }
            let target = params.target_time.checked_sub(t0).filter(|&k| k <= h);
            if let (Some(k), true) = (target, w.w_soc_track > 0.0 && sz.e_norm > 0.0) {
                let dev = (LinExpr::from(sv.e[k]) - sz.e.clone() * params.soc_target) * (1.0 / sz.e_norm);
                prog.add_sum_squares("soc_tracking", scale * w.w_soc_track, vec![dev]);
            }
            dv.ev = Some(sv);
        }
        if let Some((sz, params)) = &spec.hp {
            dv.hp = Some(add_hp(prog, &ctx, i, sz, params)?);
        }

        for t in 0..h {
            let mut p = LinExpr::constant(-net.kw_to_pu(scen.load_p[i][t]));
            let mut q = LinExpr::constant(-net.kw_to_pu(scen.load_q[i][t]));
            if let Some(pv) = &dv.pv {
                p = p + pv.p[t];
                q = q + pv.q[t];
            }
            for s in [&dv.bs, &dv.ev].into_iter().flatten() {
                p = p + s.pd[t] - s.pc[t];
                q = q + s.q[t];
            }
            if let Some(hp) = &dv.hp {
                p = p + hp.p[t];
            }
            prog.add_eq("injection_p", LinExpr::from(flow.p_inj[t][i]) - p, 0.0);
            prog.add_eq("injection_q", LinExpr::from(flow.q_inj[t][i]) - q, 0.0);
        }
        out.push(dv);
    }

    if opts.allow_curtailment && w.w_curtail > 0.0 && !curtail.is_empty() {
        prog.add_sum_squares("curtailment", scale * w.w_curtail, curtail);
    }
    if w.w_loss > 0.0 {
        prog.add_linear_objective("losses", flow.losses(net) * (scale * w.w_loss));
    }
    if !coupling.terms.is_empty() {
        prog.add_linear_objective("coupling", coupling * scale);
    }
    if w.w_import > 0.0 {
        for t in 0..h {
            import.add_term(flow.pcc_p[t], scen.lmp[t]);
        }
        prog.add_linear_objective("import_cost", import * (scale * w.w_import));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dispatch problem

/// Assembled dispatch program with handles to its variables.
#[derive(Debug, Clone)]
pub struct OpfModel {
    pub prog: ConicProgram,
    pub flow: FlowVars,
    pub devices: Vec<BusDeviceVars>,
}

pub fn assemble_opf(net: &Network, fleet: &DerFleet, scen: &ScenarioData, opts: &OpfOptions) -> Result<OpfModel> {
    scen.validate(net)?;
    fleet.validate()?;
    opts.weights.validate()?;
    if fleet.len() != net.n_buses() {
        return Err(Error::Dimension(format!(
            "fleet has {} buses, network has {}",
            fleet.len(),
            net.n_buses()
        )));
    }
    let topo = net.topology();
    let mut prog = ConicProgram::new();
    let flow = add_branch_flow(&mut prog, net, &topo, scen.horizon(), "");
    let specs = fleet_specs(net, fleet);
    let devices = add_devices(&mut prog, net, scen, &specs, &flow, opts, 1.0, "")?;
    Ok(OpfModel { prog, flow, devices })
}

/// Per-device timeseries in kW / kvar, indexed `[bus][t]`. Buses without
/// the device carry zeros (states carry empty rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub p_pv: Vec<Vec<f64>>,
    pub q_pv: Vec<Vec<f64>>,
    pub p_bs: Vec<Vec<f64>>,
    pub q_bs: Vec<Vec<f64>>,
    pub p_bs_charge: Vec<Vec<f64>>,
    pub p_bs_discharge: Vec<Vec<f64>>,
    pub p_ev: Vec<Vec<f64>>,
    pub q_ev: Vec<Vec<f64>>,
    pub p_ev_charge: Vec<Vec<f64>>,
    pub p_ev_discharge: Vec<Vec<f64>>,
    pub p_hp: Vec<Vec<f64>>,
    /// State of charge at the start of each step plus the final state.
    pub soc_bs: Vec<Vec<f64>>,
    pub soc_ev: Vec<Vec<f64>>,
    pub t_in: Vec<Vec<f64>>,
    pub hp_modes: Vec<Vec<HpMode>>,
    pub flow: FlowSolution,
    pub objective: f64,
    pub breakdown: BTreeMap<String, f64>,
    pub tightness: f64,
    #[serde(skip)]
    pub stats: SolveStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchOutcome {
    Solved(Box<DispatchResult>),
    Infeasible { reason: String },
}

impl DispatchOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, DispatchOutcome::Solved(_))
    }

    pub fn result(&self) -> Option<&DispatchResult> {
        match self {
            DispatchOutcome::Solved(r) => Some(r),
            DispatchOutcome::Infeasible { .. } => None,
        }
    }
}

/// Binary values implied by device powers: charge indicator where charging
/// dominates, discharge where discharging dominates.
pub(crate) fn binary_hints(devices: &[BusDeviceVars], x: &[f64], warm: &mut WarmStart) {
    for dv in devices {
        for s in [&dv.bs, &dv.ev].into_iter().flatten() {
            for t in 0..s.pc.len() {
                let (c, d) = (x[s.pc[t].0], x[s.pd[t].0]);
                let charge = c > d && c > 1e-9;
                let discharge = d >= c && d > 1e-9;
                warm.set(s.uc[t], f64::from(u8::from(charge)));
                warm.set(s.ud[t], f64::from(u8::from(discharge)));
            }
        }
        if let Some(hp) = &dv.hp {
            if let (Some(m), Some(c), Some(h)) = (&hp.mode, &hp.cool, &hp.heat) {
                for t in 0..m.len() {
                    let cooling = x[c[t].0] > x[h[t].0] || (x[c[t].0] == x[h[t].0] && hp.fixed_modes[t] == HpMode::Cooling);
                    warm.set(m[t], f64::from(u8::from(cooling)));
                }
            }
        }
    }
}

fn extract_dispatch(
    net: &Network,
    model_flow: &FlowVars,
    devices: &[BusDeviceVars],
    units: &[(f64, f64, f64)],
    x: &[f64],
) -> DispatchResult {
    let nb = devices.len();
    let h = model_flow.horizon();
    let kw = |v: VarId| net.pu_to_kw(x[v.0]);
    let zeros = || vec![vec![0.0; h]; nb];
    let mut r = DispatchResult {
        p_pv: zeros(),
        q_pv: zeros(),
        p_bs: zeros(),
        q_bs: zeros(),
        p_bs_charge: zeros(),
        p_bs_discharge: zeros(),
        p_ev: zeros(),
        q_ev: zeros(),
        p_ev_charge: zeros(),
        p_ev_discharge: zeros(),
        p_hp: zeros(),
        soc_bs: vec![Vec::new(); nb],
        soc_ev: vec![Vec::new(); nb],
        t_in: vec![Vec::new(); nb],
        hp_modes: vec![Vec::new(); nb],
        flow: model_flow.extract(x),
        objective: f64::NAN,
        breakdown: BTreeMap::new(),
        tightness: f64::NAN,
        stats: SolveStats::default(),
    };
    for (i, dv) in devices.iter().enumerate() {
        let (e_bs, e_ev, n_hp) = units[i];
        if let Some(pv) = &dv.pv {
            for t in 0..h {
                r.p_pv[i][t] = kw(pv.p[t]);
                r.q_pv[i][t] = kw(pv.q[t]);
            }
        }
        if let Some(s) = &dv.bs {
            for t in 0..h {
                r.p_bs_charge[i][t] = kw(s.pc[t]);
                r.p_bs_discharge[i][t] = kw(s.pd[t]);
                r.p_bs[i][t] = kw(s.pd[t]) - kw(s.pc[t]);
                r.q_bs[i][t] = kw(s.q[t]);
            }
            r.soc_bs[i] = s.e.iter().map(|&e| if e_bs > 0.0 { x[e.0] / e_bs } else { 0.0 }).collect();
        }
        if let Some(s) = &dv.ev {
            for t in 0..h {
                r.p_ev_charge[i][t] = kw(s.pc[t]);
                r.p_ev_discharge[i][t] = kw(s.pd[t]);
                r.p_ev[i][t] = kw(s.pd[t]) - kw(s.pc[t]);
                r.q_ev[i][t] = kw(s.q[t]);
            }
            r.soc_ev[i] = s.e.iter().map(|&e| if e_ev > 0.0 { x[e.0] / e_ev } else { 0.0 }).collect();
        }
        if let Some(hp) = &dv.hp {
            for t in 0..h {
                r.p_hp[i][t] = kw(hp.p[t]);
            }
            r.t_in[i] = hp.w.iter().map(|&w| if n_hp > 0.0 { x[w.0] / n_hp } else { f64::NAN }).collect();
            r.hp_modes[i] = match (&hp.cool, &hp.heat) {
                (Some(c), Some(hh)) => (0..h)
                    .map(|t| {
                        let (cv, hv) = (x[c[t].0], x[hh[t].0]);
                        if cv > hv {
                            HpMode::Cooling
                        } else if hv > cv {
                            HpMode::Heating
                        } else {
                            hp.fixed_modes[t]
                        }
                    })
                    .collect(),
                _ => hp.fixed_modes.clone(),
            };
        }
    }
    r
}

/// Per-bus (battery energy, EV energy, heat-pump homes) in program units.
fn fleet_units(net: &Network, fleet: &DerFleet) -> Vec<(f64, f64, f64)> {
    fleet
        .buses
        .iter()
        .map(|b| {
            (
                b.battery.map_or(0.0, |p| net.kw_to_pu(p.e_max)),
                b.ev.map_or(0.0, |e| net.kw_to_pu(e.e_max())),
                b.hp.map_or(0.0, |h| h.count),
            )
        })
        .collect()
}

enum Attempt {
    Done(crate::conic::Solution, f64),
    Inexact(f64),
    Infeasible(String),
}

/// Solves an assembled model once. The continuous relaxation is solved
/// first: a certified infeasible or inexact root ends the attempt without
/// branching; otherwise its device powers seed the binary hints.
fn attempt(model: &OpfModel, settings: &SolverSettings, tol: f64) -> Result<Attempt> {
    let relax = solve_continuous(&model.prog, settings);
    match classify(&model.prog, &relax, tol)? {
        Err(reason) if relax.status == SolveStatus::Infeasible => return Ok(Attempt::Infeasible(reason)),
        Err(_) => return Ok(Attempt::Inexact(model.prog.soc_tightness(&relax.values))),
        Ok(_) => {}
    }
    let mut warm = WarmStart::new();
    binary_hints(&model.devices, &relax.values, &mut warm);
    let sol = solve_misocp(&model.prog, settings, Some(&warm));
    let has_incumbent = !sol.values.is_empty() && sol.values.iter().all(|v| v.is_finite());
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::GapLimit | SolveStatus::IterationLimit if has_incumbent => {}
        SolveStatus::Infeasible => return Ok(Attempt::Infeasible("no dispatch satisfies the limits".into())),
        s => return Err(Error::Indeterminate(format!("dispatch solve stopped with {s:?}"))),
    }
    let tight = model.prog.soc_tightness(&sol.values);
    if tight > tol {
        return Ok(Attempt::Inexact(tight));
    }
    Ok(Attempt::Done(sol, tight))
}

/// Assembles and solves the dispatch problem. An inexact relaxation is
/// retried with a heavier loss weight before being reported infeasible.
pub fn solve_opf(net: &Network, fleet: &DerFleet, scen: &ScenarioData, opts: &OpfOptions) -> Result<DispatchOutcome> {
    let mut run = opts.clone();
    let units = fleet_units(net, fleet);
    let mut slack = f64::NAN;
    for k in 0..=opts.exactness_retries {
        if k > 0 {
            log::debug!("inexact dispatch (cone slack {slack:e}), raising loss weight");
            run.weights.w_loss = run.weights.w_loss.max(1e-3) * 10.0;
        }
        let model = assemble_opf(net, fleet, scen, &run)?;
        match attempt(&model, &run.settings, run.exactness_tol)? {
            Attempt::Done(sol, tight) => {
                let mut r = extract_dispatch(net, &model.flow, &model.devices, &units, &sol.values);
                r.objective = sol.objective;
                r.breakdown = objective_breakdown(&model.prog, &sol.values);
                r.tightness = tight;
                r.stats = sol.stats;
                return Ok(DispatchOutcome::Solved(Box::new(r)));
            }
            Attempt::Infeasible(reason) => return Ok(DispatchOutcome::Infeasible { reason }),
            Attempt::Inexact(t) => slack = t,
        }
    }
    Ok(DispatchOutcome::Infeasible {
        reason: format!("relaxation inexact (cone slack {slack:e})"),
    })
}

/// Objective value per breakdown entry; every entry of
/// [`BREAKDOWN_TERMS`] is present.
pub fn objective_breakdown(prog: &ConicProgram, x: &[f64]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BREAKDOWN_TERMS.iter().map(|t| (t.to_string(), 0.0)).collect();
    for (label, v) in prog.objective_by_label(x) {
        *out.entry(label).or_insert(0.0) += v;
    }
    out
}

/// Re-simulates device states from the dispatched powers.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub soc_bs: Vec<Vec<f64>>,
    pub soc_ev: Vec<Vec<f64>>,
    pub t_in: Vec<Vec<f64>>,
}

pub fn replay(result: &DispatchResult, fleet: &DerFleet, scen: &ScenarioData) -> Result<Replay> {
    let h = scen.horizon();
    let nb = fleet.len();
    let mut out = Replay {
        soc_bs: vec![Vec::new(); nb],
        soc_ev: vec![Vec::new(); nb],
        t_in: vec![Vec::new(); nb],
    };
    let clean = |c: f64, d: f64, cap: f64| {
        let tiny = 1e-7 * cap.max(1.0);
        let c = if c <= tiny && d > c { 0.0 } else { c.max(0.0) };
        let d = if d <= tiny && c > 0.0 { 0.0 } else { d.max(0.0) };
        if c > 0.0 && d > 0.0 {
            // residual numerical overlap: keep the net power
            if c >= d {
                (c - d, 0.0)
            } else {
                (0.0, d - c)
            }
        } else {
            (c, d)
        }
    };
    for (i, b) in fleet.buses.iter().enumerate() {
        let mut storages = Vec::new();
        if let Some(p) = &b.battery {
            storages.push((*p, &result.p_bs_charge[i], &result.p_bs_discharge[i], true));
        }
        if let Some(e) = &b.ev {
            let mut p = e.params.as_battery();
            p.p_max = e.p_max();
            p.e_max = e.e_max();
            storages.push((p, &result.p_ev_charge[i], &result.p_ev_discharge[i], false));
        }
        for (params, pc, pd, is_bs) in storages {
            let mut soc = vec![params.soc_init];
            for t in 0..h {
                let (c, d) = clean(pc[t], pd[t], params.p_max);
                let next = battery_soc_step(&params, soc[t], c, d, scen.dt)?;
                soc.push(next);
            }
            if is_bs {
                out.soc_bs[i] = soc;
            } else {
                out.soc_ev[i] = soc;
            }
        }
        if let Some(hp) = &b.hp {
            let mut temps = vec![hp.params.t_init];
            for t in 0..h {
                let per_home = result.p_hp[i][t] / hp.count;
                let mode = result.hp_modes[i].get(t).copied().unwrap_or(HpMode::Cooling);
                temps.push(hp_temp_step_mode(&hp.params, temps[t], scen.t_out[t], per_home, scen.dt, mode));
            }
            out.t_in[i] = temps;
        }
    }
    Ok(out)
}
