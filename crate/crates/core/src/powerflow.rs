//! Branch-flow relaxation of radial power flow, static feasibility checks and
//! voltage/current metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conic::{solve_continuous, ConicProgram, LinExpr, Solution, SolveStatus, SolverSettings, VarId};
use crate::error::{Error, Result};
use crate::network::{Network, TopologyOrder};
use crate::stats;

/// Net injections per bus and timestep (generation minus load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionProfile {
    /// Active injection (kW), indexed `[bus][t]`.
    pub p: Vec<Vec<f64>>,
    /// Reactive injection (kvar), indexed `[bus][t]`.
    pub q: Vec<Vec<f64>>,
}

impl InjectionProfile {
    pub fn zeros(n_buses: usize, horizon: usize) -> Self {
        InjectionProfile {
            p: vec![vec![0.0; horizon]; n_buses],
            q: vec![vec![0.0; horizon]; n_buses],
        }
    }

    pub fn horizon(&self) -> usize {
        self.p.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let h = self.horizon();
        if self.p.len() != net.n_buses() || self.q.len() != net.n_buses() {
            return Err(Error::Dimension(format!(
                "injection profile has {} buses, network has {}",
                self.p.len(),
                net.n_buses()
            )));
        }
        if h == 0 {
            return Err(Error::Dimension("injection profile has no timesteps".into()));
        }
        for (k, row) in self.p.iter().chain(&self.q).enumerate() {
            if row.len() != h {
                return Err(Error::Dimension(format!(
                    "injection row {} has {} steps, expected {h}",
                    k % net.n_buses(),
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dimension(format!("injection row {} is not finite", k % net.n_buses())));
            }
        }
        Ok(())
    }
}

/// Variables of one branch-flow block, indexed `[t][bus]` or `[t][branch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVars {
    pub v: Vec<Vec<VarId>>,
    pub l: Vec<Vec<VarId>>,
    pub p: Vec<Vec<VarId>>,
    pub q: Vec<Vec<VarId>>,
    /// Net injection per bus (pu); callers tie these to devices or data.
    pub p_inj: Vec<Vec<VarId>>,
    pub q_inj: Vec<Vec<VarId>>,
    pub pcc_p: Vec<VarId>,
    pub pcc_q: Vec<VarId>,
}

impl FlowVars {
    pub fn horizon(&self) -> usize {
        self.v.len()
    }

    /// `Σ_t Σ_branches R·l` (pu).
    pub fn losses(&self, net: &Network) -> LinExpr {
        let mut e = LinExpr::new();
        for lt in &self.l {
            for (k, &l) in lt.iter().enumerate() {
                e.add_term(l, net.branches[k].r);
            }
        }
        e
    }

    pub fn extract(&self, values: &[f64]) -> FlowSolution {
        let grab = |m: &Vec<Vec<VarId>>| -> Vec<Vec<f64>> {
            m.iter().map(|row| row.iter().map(|v| values[v.0]).collect()).collect()
        };
        FlowSolution {
            v: grab(&self.v),
            l: grab(&self.l),
            p: grab(&self.p),
            q: grab(&self.q),
            p_inj: grab(&self.p_inj),
            q_inj: grab(&self.q_inj),
            pcc_p: self.pcc_p.iter().map(|v| values[v.0]).collect(),
            pcc_q: self.pcc_q.iter().map(|v| values[v.0]).collect(),
        }
    }
}

/// Adds branch-flow variables, rows and cones for `horizon` steps.
///
/// Flow variables are oriented from the upstream to the downstream bus of
/// each branch. Net injections are left free within the bus bounds.
pub fn add_branch_flow(
    prog: &mut ConicProgram,
    net: &Network,
    topo: &TopologyOrder,
    horizon: usize,
    prefix: &str,
) -> FlowVars {
    let nb = net.n_buses();
    let slack = net.slack();
    let vs = net.v_slack * net.v_slack;
    let inf = f64::INFINITY;
    let mut vars = FlowVars {
        v: Vec::with_capacity(horizon),
        l: Vec::with_capacity(horizon),
        p: Vec::with_capacity(horizon),
        q: Vec::with_capacity(horizon),
        p_inj: Vec::with_capacity(horizon),
        q_inj: Vec::with_capacity(horizon),
        pcc_p: Vec::with_capacity(horizon),
        pcc_q: Vec::with_capacity(horizon),
    };

    for t in 0..horizon {
        let v: Vec<VarId> = net
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if i == slack {
                    prog.add_var(format!("{prefix}v[{t},{}]", b.id), vs, vs)
                } else {
                    prog.add_var(format!("{prefix}v[{t},{}]", b.id), b.v_min(), b.v_max())
                }
            })
            .collect();
        let mut l = Vec::with_capacity(net.n_branches());
        let mut p = Vec::with_capacity(net.n_branches());
        let mut q = Vec::with_capacity(net.n_branches());
        for (k, br) in net.branches.iter().enumerate() {
            let up = topo.upstream[k];
            let v_lo = if up == slack { vs } else { net.buses[up].v_min() };
            let mut l_ub = br.s_max * br.s_max / v_lo;
            if up == slack {
                l_ub = l_ub.min(net.s_tran * net.s_tran / vs);
            }
            let tag = format!("{t},{}-{}", net.buses[up].id, net.buses[topo.downstream[k]].id);
            l.push(prog.add_var(format!("{prefix}l[{tag}]"), 0.0, l_ub));
            p.push(prog.add_var(format!("{prefix}P[{tag}]"), -br.s_max, br.s_max));
            q.push(prog.add_var(format!("{prefix}Q[{tag}]"), -br.s_max, br.s_max));
        }
        let p_inj: Vec<VarId> = net
            .buses
            .iter()
            .map(|b| {
                let (lo, hi) = b.p_bounds.map_or((-inf, inf), |(lo, hi)| (net.kw_to_pu(lo), net.kw_to_pu(hi)));
                prog.add_var(format!("{prefix}Pinj[{t},{}]", b.id), lo, hi)
            })
            .collect();
        let q_inj: Vec<VarId> = net
            .buses
            .iter()
            .map(|b| {
                let (lo, hi) = b.q_bounds.map_or((-inf, inf), |(lo, hi)| (net.kw_to_pu(lo), net.kw_to_pu(hi)));
                prog.add_var(format!("{prefix}Qinj[{t},{}]", b.id), lo, hi)
            })
            .collect();
        let pcc_p = prog.add_var(format!("{prefix}Ppcc[{t}]"), net.pcc.p_min, net.pcc.p_max);
        let pcc_q = prog.add_var(format!("{prefix}Qpcc[{t}]"), net.pcc.q_min, net.pcc.q_max);

        for (k, br) in net.branches.iter().enumerate() {
            let (i, j) = (topo.upstream[k], topo.downstream[k]);
            let z2 = br.r * br.r + br.x * br.x;
            // v_j − v_i − |z|²·l + 2(R·P + X·Q) = 0
            let drop = LinExpr::from(v[j]) - v[i] + LinExpr::term(l[k], -z2) + LinExpr::term(p[k], 2.0 * br.r)
                + LinExpr::term(q[k], 2.0 * br.x);
            prog.add_eq("voltage_drop", drop, 0.0);
            prog.add_rotated("branch_flow", v[i].into(), l[k].into(), vec![p[k].into(), q[k].into()], true);
            prog.add_soc("thermal", LinExpr::constant(br.s_max), vec![p[k].into(), q[k].into()]);
        }
        for j in 0..nb {
            let mut bp = LinExpr::from(p_inj[j]);
            let mut bq = LinExpr::from(q_inj[j]);
            for &k in &topo.children[j] {
                bp.add_term(p[k], -1.0);
                bq.add_term(q[k], -1.0);
            }
            match topo.parent[j] {
                Some(k) => {
                    let br = &net.branches[k];
                    bp = bp + p[k] + LinExpr::term(l[k], -br.r);
                    bq = bq + q[k] + LinExpr::term(l[k], -br.x);
                    prog.add_eq("balance_p", bp, 0.0);
                    prog.add_eq("balance_q", bq, 0.0);
                }
                None => {
                    prog.add_eq("pcc_balance_p", bp + pcc_p, 0.0);
                    prog.add_eq("pcc_balance_q", bq + pcc_q, 0.0);
                }
            }
        }
        prog.add_soc("transformer", LinExpr::constant(net.s_tran), vec![pcc_p.into(), pcc_q.into()]);

        vars.v.push(v);
        vars.l.push(l);
        vars.p.push(p);
        vars.q.push(q);
        vars.p_inj.push(p_inj);
        vars.q_inj.push(q_inj);
        vars.pcc_p.push(pcc_p);
        vars.pcc_q.push(pcc_q);
    }
    vars
}

/// Branch-flow program with injections pinned to `inj` and a loss objective.
pub fn assemble_branch_flow(net: &Network, inj: &InjectionProfile) -> Result<(ConicProgram, FlowVars)> {
    inj.validate(net)?;
    let h = inj.horizon();
    let topo = net.topology();
    let mut prog = ConicProgram::new();
    let vars = add_branch_flow(&mut prog, net, &topo, h, "");
    for t in 0..h {
        for i in 0..net.n_buses() {
            prog.add_eq("injection_p", vars.p_inj[t][i].into(), net.kw_to_pu(inj.p[i][t]));
            prog.add_eq("injection_q", vars.q_inj[t][i].into(), net.kw_to_pu(inj.q[i][t]));
        }
    }
    prog.add_linear_objective("losses", vars.losses(net));
    Ok((prog, vars))
}

/// Per-timestep branch-flow solution (pu quantities).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    /// Squared voltage magnitudes `[t][bus]`.
    pub v: Vec<Vec<f64>>,
    /// Squared currents `[t][branch]`.
    pub l: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub p_inj: Vec<Vec<f64>>,
    pub q_inj: Vec<Vec<f64>>,
    /// Import at the substation (positive = import).
    pub pcc_p: Vec<f64>,
    pub pcc_q: Vec<f64>,
}

impl FlowSolution {
    pub fn horizon(&self) -> usize {
        self.v.len()
    }

    pub fn losses(&self, net: &Network) -> f64 {
        self.l
            .iter()
            .map(|lt| lt.iter().zip(&net.branches).map(|(l, br)| l * br.r).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub t: usize,
    pub vmin: f64,
    pub vmax: f64,
    pub vmean: f64,
    pub vmedian: f64,
    pub imax_pct: f64,
    pub imean_pct: f64,
    pub imedian_pct: f64,
    /// Substation import (kW / kvar).
    pub pcc_p: f64,
    pub pcc_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub per_time: Vec<TimeMetrics>,
    pub vmin: f64,
    pub vmax: f64,
    pub vmean: f64,
    pub vmedian: f64,
    pub imax_pct: f64,
    pub imean_pct: f64,
    pub imedian_pct: f64,
}

/// Voltage magnitudes (pu) and current loadings (% of ampacity).
pub fn flow_metrics(sol: &FlowSolution, net: &Network) -> FlowMetrics {
    let topo = net.topology();
    let mut all_v = Vec::new();
    let mut all_i = Vec::new();
    let mut per_time = Vec::with_capacity(sol.horizon());
    for t in 0..sol.horizon() {
        let vm: Vec<f64> = sol.v[t].iter().map(|v| v.max(0.0).sqrt()).collect();
        let load: Vec<f64> = net
            .branches
            .iter()
            .enumerate()
            .map(|(k, br)| 100.0 * (sol.l[t][k].max(0.0) * sol.v[t][topo.upstream[k]].max(0.0)).sqrt() / br.s_max)
            .collect();
        let i_or_zero = |f: fn(&[f64]) -> f64| if load.is_empty() { 0.0 } else { f(&load) };
        per_time.push(TimeMetrics {
            t,
            vmin: stats::min(&vm),
            vmax: stats::max(&vm),
            vmean: stats::mean(&vm),
            vmedian: stats::median(&vm),
            imax_pct: i_or_zero(stats::max),
            imean_pct: i_or_zero(stats::mean),
            imedian_pct: i_or_zero(stats::median),
            pcc_p: net.pu_to_kw(sol.pcc_p[t]),
            pcc_q: net.pu_to_kw(sol.pcc_q[t]),
        });
        all_v.extend(vm);
        all_i.extend(load);
    }
    let i_or_zero = |f: fn(&[f64]) -> f64| if all_i.is_empty() { 0.0 } else { f(&all_i) };
    FlowMetrics {
        per_time,
        vmin: stats::min(&all_v),
        vmax: stats::max(&all_v),
        vmean: stats::mean(&all_v),
        vmedian: stats::median(&all_v),
        imax_pct: i_or_zero(stats::max),
        imean_pct: i_or_zero(stats::mean),
        imedian_pct: i_or_zero(stats::median),
    }
}

pub const METRICS_CSV_HEADER: &str = "time,vmin,vmax,vmean,vmedian,imax_pct,imean_pct,imedian_pct,pcc_p,pcc_q";

pub fn metrics_csv(m: &FlowMetrics) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in &m.per_time {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t, r.vmin, r.vmax, r.vmean, r.vmedian, r.imax_pct, r.imean_pct, r.imedian_pct, r.pcc_p, r.pcc_q
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticOptions {
    pub settings: SolverSettings,
    /// Largest cone slack accepted as a physical operating point.
    pub exactness_tol: f64,
}

impl Default for StaticOptions {
    fn default() -> Self {
        StaticOptions {
            settings: SolverSettings::default(),
            exactness_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticCheck {
    pub feasible: bool,
    pub reason: Option<String>,
    pub flow: Option<FlowSolution>,
    pub metrics: Option<FlowMetrics>,
    pub tightness: f64,
    pub losses: f64,
}

impl StaticCheck {
    fn infeasible(reason: impl Into<String>) -> Self {
        StaticCheck {
            feasible: false,
            reason: Some(reason.into()),
            flow: None,
            metrics: None,
            tightness: f64::NAN,
            losses: f64::NAN,
        }
    }
}

/// Interprets a loss-minimizing solve: feasible only when optimal and the
/// relaxation is tight enough to describe a physical operating point.
pub(crate) fn classify(
    prog: &ConicProgram,
    sol: &Solution,
    exactness_tol: f64,
) -> Result<std::result::Result<f64, String>> {
    match sol.status {
        SolveStatus::Optimal => {
            let tight = prog.soc_tightness(&sol.values);
            if tight <= exactness_tol {
                Ok(Ok(tight))
            } else {
                Ok(Err(format!("relaxation inexact (cone slack {tight:e})")))
            }
        }
        SolveStatus::Infeasible => Ok(Err("no operating point satisfies the limits".into())),
        SolveStatus::Unbounded => Err(Error::Indeterminate("power-flow program is unbounded".into())),
        s => Err(Error::Indeterminate(format!("solver stopped with {s:?}"))),
    }
}

/// Checks whether fixed injections admit a power-flow solution within all
/// voltage, thermal and substation limits.
pub fn static_feasible(net: &Network, inj: &InjectionProfile, opts: &StaticOptions) -> Result<StaticCheck> {
    let (prog, vars) = assemble_branch_flow(net, inj)?;
    let sol = solve_continuous(&prog, &opts.settings);
    match classify(&prog, &sol, opts.exactness_tol)? {
        Ok(tightness) => {
            let flow = vars.extract(&sol.values);
            let metrics = flow_metrics(&flow, net);
            Ok(StaticCheck {
                feasible: true,
                reason: None,
                losses: flow.losses(net),
                flow: Some(flow),
                metrics: Some(metrics),
                tightness,
            })
        }
        Err(reason) => Ok(StaticCheck::infeasible(reason)),
    }
}
