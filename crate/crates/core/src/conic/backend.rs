#![allow(non_snake_case)]

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::{Cone, ConicProgram, LinExpr, Sense, Solution, SolveStats, SolveStatus, SolverSettings, TermKind};

/// Continuous conic solver used for relaxations and fixed-binary solves.
pub trait ContinuousBackend: Send + Sync {
    /// Solves `compiled` with the given per-variable bounds (binaries are
    /// treated as continuous within those bounds).
    fn solve(&self, compiled: &Compiled, bounds: &[(f64, f64)], settings: &SolverSettings) -> Solution;

    fn solve_program(&self, prog: &ConicProgram, settings: &SolverSettings) -> Solution {
        let compiled = Compiled::new(prog);
        let bounds: Vec<(f64, f64)> = prog.vars.iter().map(|v| (v.lb, v.ub)).collect();
        self.solve(&compiled, &bounds, settings)
    }
}

type Row = (Vec<(usize, f64)>, f64);

/// Program in backend form: linear objective, rows and second-order cone
/// blocks, with sum-of-squares objective terms lifted to epigraphs.
#[derive(Debug, Clone)]
pub struct Compiled<'a> {
    pub prog: &'a ConicProgram,
    n: usize,
    c: Vec<f64>,
    c0: f64,
    /// `a·x = b`
    eq: Vec<Row>,
    /// `a·x ≤ b`
    le: Vec<Row>,
    /// Each block lists affine entries `(terms, const)`; the first entry
    /// bounds the norm of the rest.
    socs: Vec<Vec<Row>>,
    epi_lb: Vec<usize>,
}

fn affine(e: &LinExpr) -> Row {
    let e = e.compact();
    (e.terms.iter().map(|&(v, c)| (v.0, c)).collect(), e.constant)
}

fn combine(a: &LinExpr, b: &LinExpr, sb: f64) -> Row {
    let mut e = a.clone();
    e.add_expr(b, sb);
    affine(&e)
}

impl<'a> Compiled<'a> {
    pub fn new(prog: &'a ConicProgram) -> Self {
        let nx = prog.vars.len();
        let mut n = nx;
        let mut c = vec![0.0; nx];
        let mut c0 = 0.0;
        let mut eq = Vec::new();
        let mut le = Vec::new();
        let mut socs = Vec::new();
        let mut epi_lb = Vec::new();

        for r in &prog.rows {
            let (terms, k) = affine(&r.expr);
            let row = (terms, r.rhs - k);
            match r.sense {
                Sense::Eq => eq.push(row),
                Sense::Le => le.push(row),
            }
        }
        for cc in &prog.cones {
            match &cc.cone {
                Cone::Soc { t, x } => {
                    let mut block = vec![affine(t)];
                    block.extend(x.iter().map(affine));
                    socs.push(block);
                }
                Cone::Rotated { u, w, z } => {
                    let mut block = vec![combine(u, w, 1.0), combine(u, w, -1.0)];
                    block.extend(z.iter().map(|e| affine(&(e.clone() * 2.0))));
                    socs.push(block);
                }
            }
        }
        for term in &prog.objective {
            match &term.kind {
                TermKind::Linear(e) => {
                    for &(v, k) in &e.terms {
                        c[v.0] += k;
                    }
                    c0 += e.constant;
                }
                TermKind::SumSquares { weight, exprs } => {
                    if *weight == 0.0 || exprs.is_empty() {
                        continue;
                    }
                    // t·1 ≥ Σ (√w·e)²  as  ‖(t − 1, 2√w·e)‖ ≤ t + 1
                    let t = n;
                    n += 1;
                    c.push(1.0);
                    epi_lb.push(t);
                    let sw = weight.sqrt();
                    let mut block = vec![(vec![(t, 1.0)], 1.0), (vec![(t, 1.0)], -1.0)];
                    for e in exprs {
                        let (terms, k) = affine(e);
                        block.push((terms.into_iter().map(|(j, a)| (j, 2.0 * sw * a)).collect(), 2.0 * sw * k));
                    }
                    socs.push(block);
                }
            }
        }
        Compiled {
            prog,
            n,
            c,
            c0,
            eq,
            le,
            socs,
            epi_lb,
        }
    }

    pub fn n_lifted(&self) -> usize {
        self.n
    }
}

pub struct ClarabelBackend;

struct Assembly {
    I: Vec<usize>,
    J: Vec<usize>,
    V: Vec<f64>,
    b: Vec<f64>,
}

impl Assembly {
    /// Appends `s = b − A·x` with `s = rhs − a·x`.
    fn push(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let i = self.b.len();
        for &(j, a) in terms {
            self.I.push(i);
            self.J.push(j);
            self.V.push(a);
        }
        self.b.push(rhs);
    }
}

impl ContinuousBackend for ClarabelBackend {
    fn solve(&self, compiled: &Compiled, bounds: &[(f64, f64)], settings: &SolverSettings) -> Solution {
        let start = Instant::now();
        let prog = compiled.prog;
        let nx = prog.vars.len();
        let n = compiled.n;
        let mut asm = Assembly {
            I: Vec::new(),
            J: Vec::new(),
            V: Vec::new(),
            b: Vec::new(),
        };
        let mut cones = Vec::new();

        // zero cone: equality rows and fixed variables
        for (terms, rhs) in &compiled.eq {
            asm.push(terms, *rhs);
        }
        for (j, &(lb, ub)) in bounds.iter().enumerate() {
            if lb == ub {
                asm.push(&[(j, 1.0)], lb);
            }
        }
        let n_zero = asm.b.len();
        if n_zero > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_zero));
        }

        // nonnegative cone: inequality rows and finite bounds
        for (terms, rhs) in &compiled.le {
            asm.push(terms, *rhs);
        }
        for (j, &(lb, ub)) in bounds.iter().enumerate() {
            if lb == ub {
                continue;
            }
            if ub.is_finite() {
                asm.push(&[(j, 1.0)], ub);
            }
            if lb.is_finite() {
                asm.push(&[(j, -1.0)], -lb);
            }
        }
        for &t in &compiled.epi_lb {
            asm.push(&[(t, -1.0)], 0.0);
        }
        let n_nonneg = asm.b.len() - n_zero;
        if n_nonneg > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
        }

        // second-order cones: s = e(x) means A = −a, b = const
        for block in &compiled.socs {
            for (terms, k) in block {
                let neg: Vec<(usize, f64)> = terms.iter().map(|&(j, a)| (j, -a)).collect();
                asm.push(&neg, *k);
            }
            cones.push(SupportedConeT::SecondOrderConeT(block.len()));
        }

        let m = asm.b.len();
        let A = CscMatrix::new_from_triplets(m, n, asm.I, asm.J, asm.V);
        let P = CscMatrix::<f64>::zeros((n, n));
        let mut cs = DefaultSettings::<f64>::default();
        cs.verbose = false;
        cs.max_iter = settings.max_iter;
        cs.tol_gap_abs = settings.opt_tol;
        cs.tol_gap_rel = settings.opt_tol;
        cs.tol_feas = settings.feas_tol.min(1e-8);
        cs.max_threads = 1;
        if let Some(t) = settings.time_limit_s {
            cs.time_limit = t.max(1e-3);
        }

        let mut solver = match DefaultSolver::new(&P, &compiled.c, &A, &asm.b, &cones, cs) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("backend rejected problem: {e}");
                return Solution::failed(SolveStatus::IterationLimit, nx);
            }
        };
        solver.solve();
        let sol = &solver.solution;
        // snap into the (node) bounds so fixed variables are exact
        let values: Vec<f64> = sol.x[..nx]
            .iter()
            .zip(bounds)
            .map(|(&v, &(lb, ub))| if v.is_finite() { v.clamp(lb, ub) } else { v })
            .collect();
        let stats = SolveStats {
            iterations: sol.iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            ..SolveStats::default()
        };

        let make = |status, certificate| {
            let objective = prog.evaluate_objective(&values);
            let residual = prog.max_residual(&values);
            Solution {
                status,
                values: values.clone(),
                objective,
                dual_objective: Some(sol.obj_val_dual + compiled.c0),
                certificate,
                stats: SolveStats {
                    max_residual: residual,
                    ..stats.clone()
                },
            }
        };

        match sol.status {
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                let mut s = Solution::failed(SolveStatus::Infeasible, nx);
                s.certificate = Some(sol.z.clone());
                s.stats = stats;
                s
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                let mut s = Solution::failed(SolveStatus::Unbounded, nx);
                s.stats = stats;
                s
            }
            status => {
                if values.iter().any(|v| !v.is_finite()) {
                    let mut s = Solution::failed(SolveStatus::IterationLimit, nx);
                    s.stats = stats;
                    return s;
                }
                let mut out = make(SolveStatus::Optimal, None);
                let ok_res = out.stats.max_residual <= settings.feas_tol.max(1e-9) * 10.0;
                let gap = (sol.obj_val - sol.obj_val_dual).abs() / (1.0 + sol.obj_val.abs());
                let converged = match status {
                    SolverStatus::Solved | SolverStatus::AlmostSolved => true,
                    _ => gap <= 1e-6,
                };
                if !(ok_res && converged) {
                    out.status = SolveStatus::IterationLimit;
                }
                out
            }
        }
    }
}
