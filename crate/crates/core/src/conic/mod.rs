//! Conic program container shared by power flow, dispatch and siting models.
//!
//! A [`ConicProgram`] holds bounded (optionally binary) variables, linear
//! rows, second-order cones (standard and rotated) and an objective made of
//! labelled linear and sum-of-squares terms. Sum-of-squares terms are lifted
//! to rotated-cone epigraphs before reaching a backend, so backends only see
//! linear objectives over cones.

mod backend;
mod bnb;
mod expr;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backend::{ClarabelBackend, Compiled, ContinuousBackend};
pub use bnb::{solve_misocp, solve_misocp_with, WarmStart};
pub use expr::{LinExpr, VarId};

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
    pub binary: bool,
    pub hint: Option<f64>,
    /// Ownership tag (0 = shared); used to check block structure.
    pub block: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Eq,
    Le,
}

/// `expr (sense) rhs`, with any constant in `expr` moved to the right.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub label: String,
    pub expr: LinExpr,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cone {
    /// `‖x‖₂ ≤ t`
    Soc { t: LinExpr, x: Vec<LinExpr> },
    /// `u·w ≥ ‖z‖₂²` with `u, w ≥ 0`
    Rotated { u: LinExpr, w: LinExpr, z: Vec<LinExpr> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeConstraint {
    pub label: String,
    pub cone: Cone,
    /// Marks `v·l ≥ P² + Q²` branch-flow cones (u = v, w = l, z = (P, Q)).
    pub power_flow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    Linear(LinExpr),
    /// `weight · Σ e²`
    SumSquares { weight: f64, exprs: Vec<LinExpr> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerm {
    pub label: String,
    pub kind: TermKind,
}

impl ObjectiveTerm {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TermKind::Linear(e) => e.eval(x),
            TermKind::SumSquares { weight, exprs } => {
                weight * exprs.iter().map(|e| e.eval(x).powi(2)).sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    pub vars: Vec<Variable>,
    pub rows: Vec<LinearRow>,
    pub cones: Vec<ConeConstraint>,
    pub objective: Vec<ObjectiveTerm>,
    block: u32,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subsequently created variables carry this block tag.
    pub fn set_block(&mut self, block: u32) {
        self.block = block;
    }

    pub fn add_var(&mut self, name: impl Into<String>, lb: f64, ub: f64) -> VarId {
        self.vars.push(Variable {
            name: name.into(),
            lb,
            ub,
            binary: false,
            hint: None,
            block: self.block,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> VarId {
        let v = self.add_var(name, 0.0, 1.0);
        self.vars[v.0].binary = true;
        v
    }

    pub fn var(&self, v: VarId) -> &Variable {
        &self.vars[v.0]
    }

    pub fn var_mut(&mut self, v: VarId) -> &mut Variable {
        &mut self.vars[v.0]
    }

    pub fn fix(&mut self, v: VarId, value: f64) {
        let var = &mut self.vars[v.0];
        var.lb = value;
        var.ub = value;
    }

    pub fn set_hint(&mut self, v: VarId, value: f64) {
        self.vars[v.0].hint = Some(value);
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn n_binaries(&self) -> usize {
        self.vars.iter().filter(|v| v.binary).count()
    }

    pub fn add_row(&mut self, label: impl Into<String>, expr: LinExpr, sense: Sense, rhs: f64) {
        let mut expr = expr;
        let rhs = rhs - expr.constant;
        expr.constant = 0.0;
        self.rows.push(LinearRow {
            label: label.into(),
            expr,
            sense,
            rhs,
        });
    }

    pub fn add_eq(&mut self, label: impl Into<String>, expr: LinExpr, rhs: f64) {
        self.add_row(label, expr, Sense::Eq, rhs);
    }

    pub fn add_le(&mut self, label: impl Into<String>, expr: LinExpr, rhs: f64) {
        self.add_row(label, expr, Sense::Le, rhs);
    }

    pub fn add_ge(&mut self, label: impl Into<String>, expr: LinExpr, rhs: f64) {
        self.add_row(label, -expr, Sense::Le, -rhs);
    }

    pub fn add_soc(&mut self, label: impl Into<String>, t: LinExpr, x: Vec<LinExpr>) {
        self.cones.push(ConeConstraint {
            label: label.into(),
            cone: Cone::Soc { t, x },
            power_flow: false,
        });
    }

    pub fn add_rotated(
        &mut self,
        label: impl Into<String>,
        u: LinExpr,
        w: LinExpr,
        z: Vec<LinExpr>,
        power_flow: bool,
    ) {
        self.cones.push(ConeConstraint {
            label: label.into(),
            cone: Cone::Rotated { u, w, z },
            power_flow,
        });
    }

    pub fn add_linear_objective(&mut self, label: impl Into<String>, expr: LinExpr) {
        self.objective.push(ObjectiveTerm {
            label: label.into(),
            kind: TermKind::Linear(expr),
        });
    }

    /// Adds `weight · Σ e²`. Weights must be non-negative (convexity).
    pub fn add_sum_squares(&mut self, label: impl Into<String>, weight: f64, exprs: Vec<LinExpr>) {
        self.objective.push(ObjectiveTerm {
            label: label.into(),
            kind: TermKind::SumSquares { weight, exprs },
        });
    }

    pub fn count_rows(&self, label: &str) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn count_cones(&self, label: &str) -> usize {
        self.cones.iter().filter(|c| c.label == label).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        let check = |e: &LinExpr, what: &str| -> Result<()> {
            match e.terms.iter().find(|(v, c)| v.0 >= n || !c.is_finite()) {
                Some((v, _)) => Err(Error::Contract(format!(
                    "{what} references variable {} of {n} or has a non-finite coefficient",
                    v.0
                ))),
                None if !e.constant.is_finite() => {
                    Err(Error::Contract(format!("{what} has a non-finite constant")))
                }
                None => Ok(()),
            }
        };
        for v in &self.vars {
            if v.lb > v.ub || v.lb.is_nan() || v.ub.is_nan() {
                return Err(Error::Contract(format!("variable {} has empty bounds", v.name)));
            }
        }
        for r in &self.rows {
            check(&r.expr, &r.label)?;
            if !r.rhs.is_finite() {
                return Err(Error::Contract(format!("row {} has a non-finite rhs", r.label)));
            }
        }
        for c in &self.cones {
            match &c.cone {
                Cone::Soc { t, x } => {
                    check(t, &c.label)?;
                    x.iter().try_for_each(|e| check(e, &c.label))?;
                }
                Cone::Rotated { u, w, z } => {
                    check(u, &c.label)?;
                    check(w, &c.label)?;
                    z.iter().try_for_each(|e| check(e, &c.label))?;
                }
            }
        }
        for o in &self.objective {
            match &o.kind {
                TermKind::Linear(e) => check(e, &o.label)?,
                TermKind::SumSquares { weight, exprs } => {
                    if !(weight.is_finite() && *weight >= 0.0) {
                        return Err(Error::Contract(format!(
                            "objective term {} has a negative weight",
                            o.label
                        )));
                    }
                    exprs.iter().try_for_each(|e| check(e, &o.label))?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate_objective(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|t| t.eval(x)).sum()
    }

    /// Objective value grouped by term label.
    pub fn objective_by_label(&self, x: &[f64]) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for t in &self.objective {
            *out.entry(t.label.clone()).or_insert(0.0) += t.eval(x);
        }
        out
    }

    /// Largest scaled constraint violation at `x` (bounds, rows and cones).
    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (v, &xv) in self.vars.iter().zip(x) {
            worst = worst.max((v.lb - xv) / (1.0 + v.lb.abs())).max((xv - v.ub) / (1.0 + v.ub.abs()));
        }
        for r in &self.rows {
            let lhs = r.expr.eval(x);
            let scale = 1.0 + r.rhs.abs() + r.expr.abs_eval(x);
            let viol = match r.sense {
                Sense::Eq => (lhs - r.rhs).abs(),
                Sense::Le => (lhs - r.rhs).max(0.0),
            };
            worst = worst.max(viol / scale);
        }
        for c in &self.cones {
            let viol = match &c.cone {
                Cone::Soc { t, x: xs } => {
                    let tv = t.eval(x);
                    let n = xs.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                    (n - tv).max(0.0) / (1.0 + tv.abs())
                }
                Cone::Rotated { u, w, z } => {
                    let (uv, wv) = (u.eval(x), w.eval(x));
                    let zz: f64 = z.iter().map(|e| e.eval(x).powi(2)).sum();
                    let n = ((uv - wv).powi(2) + 4.0 * zz).sqrt();
                    (n - (uv + wv)).max(0.0) / (1.0 + (uv + wv).abs())
                }
            };
            worst = worst.max(viol);
        }
        worst
    }

    /// Largest relative slack `(v·l − P² − Q²) / max(1, v·l)` over the
    /// power-flow cones. Zero means the relaxation is exact at `x`.
    pub fn soc_tightness(&self, x: &[f64]) -> f64 {
        self.cones
            .iter()
            .filter(|c| c.power_flow)
            .filter_map(|c| match &c.cone {
                Cone::Rotated { u, w, z } => {
                    let vl = u.eval(x) * w.eval(x);
                    let pq: f64 = z.iter().map(|e| e.eval(x).powi(2)).sum();
                    Some((vl - pq) / vl.max(1.0))
                }
                Cone::Soc { .. } => None,
            })
            .fold(0.0, f64::max)
    }

    /// Plain-text listing of variables, rows, cones and objective terms.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# {} variables ({} binary), {} rows, {} cones, {} objective terms",
            self.vars.len(),
            self.n_binaries(),
            self.rows.len(),
            self.cones.len(),
            self.objective.len()
        );
        for (k, v) in self.vars.iter().enumerate() {
            let _ = write!(s, "var x{k} {} [{}, {}]", v.name, v.lb, v.ub);
            if v.binary {
                s.push_str(" binary");
            }
            if let Some(h) = v.hint {
                let _ = write!(s, " hint={h}");
            }
            s.push('\n');
        }
        for r in &self.rows {
            let op = match r.sense {
                Sense::Eq => "=",
                Sense::Le => "<=",
            };
            let _ = writeln!(s, "row {}: {} {op} {}", r.label, r.expr, r.rhs);
        }
        for c in &self.cones {
            match &c.cone {
                Cone::Soc { t, x } => {
                    let xs: Vec<String> = x.iter().map(|e| format!("({e})")).collect();
                    let _ = writeln!(s, "soc {}: ||{}|| <= {t}", c.label, xs.join(", "));
                }
                Cone::Rotated { u, w, z } => {
                    let zs: Vec<String> = z.iter().map(|e| format!("({e})")).collect();
                    let _ = writeln!(s, "rsoc {}: ({u})*({w}) >= ||{}||^2", c.label, zs.join(", "));
                }
            }
        }
        for o in &self.objective {
            match &o.kind {
                TermKind::Linear(e) => {
                    let _ = writeln!(s, "obj {}: {e}", o.label);
                }
                TermKind::SumSquares { weight, exprs } => {
                    let xs: Vec<String> = exprs.iter().map(|e| format!("({e})^2")).collect();
                    let _ = writeln!(s, "obj {}: {weight} * [{}]", o.label, xs.join(" + "));
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    GapLimit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: u32,
    pub nodes: usize,
    pub wall_time_s: f64,
    pub mip_gap: f64,
    pub max_residual: f64,
    /// Global lower bound after each processed node.
    pub bound_history: Vec<f64>,
    /// Incumbent objective after each processed node (+inf before the first).
    pub incumbent_history: Vec<f64>,
    pub numerical_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: SolveStatus,
    pub values: Vec<f64>,
    /// True objective (sum-of-squares terms evaluated directly).
    pub objective: f64,
    pub dual_objective: Option<f64>,
    /// Dual ray certifying primal infeasibility.
    pub certificate: Option<Vec<f64>>,
    pub stats: SolveStats,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.values)
    }

    pub(crate) fn failed(status: SolveStatus, n: usize) -> Self {
        Solution {
            status,
            values: vec![f64::NAN; n],
            objective: f64::NAN,
            dual_objective: None,
            certificate: None,
            stats: SolveStats::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Scaled constraint residual accepted for an optimal point.
    pub feas_tol: f64,
    /// Relative duality gap for continuous solves.
    pub opt_tol: f64,
    pub max_iter: u32,
    /// Relative MIP gap `(incumbent − bound) / max(1, |incumbent|)`.
    pub gap_tol: f64,
    pub node_limit: usize,
    /// Distance from 0/1 below which a relaxed binary counts as integral.
    pub int_tol: f64,
    pub time_limit_s: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            feas_tol: 1e-7,
            opt_tol: 1e-8,
            max_iter: 200,
            gap_tol: 1e-4,
            node_limit: 20_000,
            int_tol: 1e-6,
            time_limit_s: None,
        }
    }
}

/// Solves the continuous relaxation (binaries relaxed to their bounds) with
/// the bundled backend.
pub fn solve_continuous(prog: &ConicProgram, settings: &SolverSettings) -> Solution {
    ClarabelBackend.solve_program(prog, settings)
}
