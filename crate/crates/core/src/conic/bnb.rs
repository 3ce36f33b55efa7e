use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use super::{ClarabelBackend, Compiled, ConicProgram, ContinuousBackend, Solution, SolveStats, SolveStatus, SolverSettings, VarId};

/// Known-good values used to seed the incumbent. Values outside variable
/// bounds are clamped; binaries are rounded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    pub values: Vec<(VarId, f64)>,
}

impl WarmStart {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_solution(sol: &Solution) -> Self {
        WarmStart {
            values: sol.values.iter().enumerate().map(|(k, &v)| (VarId(k), v)).collect(),
        }
    }

    pub fn set(&mut self, v: VarId, value: f64) {
        self.values.push((v, value));
    }
}

#[derive(Debug, Clone)]
struct Node {
    bound: f64,
    id: u64,
    fixings: Vec<(usize, f64)>,
    // branched binary, direction, distance moved, parent objective
    origin: Option<(usize, bool, f64, f64)>,
}

/// Per-binary average objective gain per unit change, by direction.
#[derive(Debug, Clone, Copy, Default)]
struct PseudoCost {
    down: (f64, u32),
    up: (f64, u32),
}

fn mean((sum, n): (f64, u32)) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // reversed so the max-heap pops the lowest bound, then the lowest id
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then(other.id.cmp(&self.id))
    }
}

/// Mixed-integer conic solve with the bundled continuous backend.
pub fn solve_misocp(prog: &ConicProgram, settings: &SolverSettings, warm: Option<&WarmStart>) -> Solution {
    solve_misocp_with(&ClarabelBackend, prog, settings, warm)
}

struct Search<'a> {
    backend: &'a dyn ContinuousBackend,
    compiled: Compiled<'a>,
    base: Vec<(f64, f64)>,
    binaries: Vec<usize>,
    settings: &'a SolverSettings,
    incumbent: Option<Solution>,
    iterations: u32,
}

impl Search<'_> {
    fn bounds(&self, fixings: &[(usize, f64)]) -> Vec<(f64, f64)> {
        let mut b = self.base.clone();
        for &(j, v) in fixings {
            b[j] = (v, v);
        }
        b
    }

    fn solve(&mut self, bounds: &[(f64, f64)]) -> Solution {
        let s = self.backend.solve(&self.compiled, bounds, self.settings);
        self.iterations += s.stats.iterations;
        s
    }

    fn inc_obj(&self) -> f64 {
        self.incumbent.as_ref().map_or(f64::INFINITY, |s| s.objective)
    }

    fn offer(&mut self, mut sol: Solution) {
        if sol.status != SolveStatus::Optimal {
            return;
        }
        for &j in &self.binaries {
            sol.values[j] = sol.values[j].round();
        }
        if sol.objective < self.inc_obj() {
            self.incumbent = Some(sol);
        }
    }

    /// Solves with every binary fixed to the given value.
    fn try_assignment(&mut self, assign: impl Fn(usize, f64) -> f64, x: &[f64]) {
        let fix: Vec<(usize, f64)> = self
            .binaries
            .iter()
            .map(|&j| {
                let (lb, ub) = self.base[j];
                (j, assign(j, x[j]).clamp(lb, ub))
            })
            .collect();
        let b = self.bounds(&fix);
        let s = self.solve(&b);
        self.offer(s);
    }
}

/// Picks the fractional binary with the largest pseudo-cost product score.
/// Binaries without history use the average of those with history, and
/// before any history exists the score reduces to the most fractional one.
/// Ties go to the lowest index.
fn select_branch(binaries: &[usize], x: &[f64], pseudo: &[PseudoCost], int_tol: f64) -> Option<(usize, f64)> {
    let avg = |pick: fn(&PseudoCost) -> (f64, u32)| {
        let (s, n) = binaries.iter().filter_map(|&j| mean(pick(&pseudo[j]))).fold((0.0, 0u32), |(s, n), g| (s + g, n + 1));
        if n > 0 {
            s / n as f64
        } else {
            1.0
        }
    };
    let (avg_down, avg_up) = (avg(|p| p.down), avg(|p| p.up));
    let mut best: Option<(usize, f64)> = None;
    for &j in binaries {
        let f = (x[j] - x[j].round()).abs();
        if f <= int_tol {
            continue;
        }
        let down = mean(pseudo[j].down).unwrap_or(avg_down) * x[j];
        let up = mean(pseudo[j].up).unwrap_or(avg_up) * (1.0 - x[j]);
        let score = down.max(1e-6) * up.max(1e-6);
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((j, score));
        }
    }
    best
}

/// Best-bound branch and bound over the binaries of `prog` with pseudo-cost
/// branching. Children are explored in a deterministic order, so repeated
/// runs visit identical trees.
pub fn solve_misocp_with(
    backend: &dyn ContinuousBackend,
    prog: &ConicProgram,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Solution {
    let start = Instant::now();
    let base: Vec<(f64, f64)> = prog
        .vars
        .iter()
        .map(|v| if v.binary { (v.lb.max(0.0).ceil(), v.ub.min(1.0).floor()) } else { (v.lb, v.ub) })
        .collect();
    let binaries: Vec<usize> = prog.vars.iter().enumerate().filter(|(_, v)| v.binary).map(|(k, _)| k).collect();
    if base.iter().any(|&(l, u)| l > u) {
        return Solution::failed(SolveStatus::Infeasible, prog.vars.len());
    }
    let mut search = Search {
        backend,
        compiled: Compiled::new(prog),
        base,
        binaries,
        settings,
        incumbent: None,
        iterations: 0,
    };

    if search.binaries.is_empty() {
        let b = search.base.clone();
        let mut s = search.solve(&b);
        s.stats.wall_time_s = start.elapsed().as_secs_f64();
        return s;
    }

    // hints from the program itself, overridden by the explicit warm start
    let mut hint: Vec<Option<f64>> = prog.vars.iter().map(|v| v.hint).collect();
    if let Some(w) = warm {
        for &(v, val) in &w.values {
            if v.0 < hint.len() {
                hint[v.0] = Some(val);
            }
        }
    }
    if search.binaries.iter().all(|&j| hint[j].is_some()) {
        let x: Vec<f64> = hint.iter().map(|h| h.unwrap_or(0.0)).collect();
        search.try_assignment(|_, v| v.round(), &x);
    }

    let gap_of = |inc: f64, lb: f64| {
        if inc.is_finite() {
            ((inc - lb) / inc.abs().max(1.0)).max(0.0)
        } else {
            f64::INFINITY
        }
    };

    let mut stats = SolveStats::default();
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        id: 0,
        fixings: Vec::new(),
        origin: None,
    });
    let mut pseudo = vec![PseudoCost::default(); prog.vars.len()];
    let mut next_id = 1u64;
    let mut lower = f64::NEG_INFINITY;
    let mut root_status = None;
    let mut hit_limit = None;

    while let Some(node) = heap.pop() {
        lower = lower.max(node.bound);
        let inc = search.inc_obj();
        if gap_of(inc, lower) <= settings.gap_tol {
            heap.push(node);
            break;
        }
        if stats.nodes >= settings.node_limit {
            heap.push(node);
            hit_limit = Some(SolveStatus::IterationLimit);
            break;
        }
        if let Some(t) = settings.time_limit_s {
            if start.elapsed().as_secs_f64() > t {
                heap.push(node);
                hit_limit = Some(SolveStatus::GapLimit);
                break;
            }
        }
        stats.nodes += 1;
        let b = search.bounds(&node.fixings);
        let relax = search.solve(&b);
        if node.id == 0 {
            root_status = Some(relax.status);
        }
        match relax.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                stats.bound_history.push(lower);
                stats.incumbent_history.push(search.inc_obj());
                continue;
            }
            SolveStatus::Unbounded if node.id == 0 => {
                let mut s = Solution::failed(SolveStatus::Unbounded, prog.vars.len());
                s.stats = stats;
                return s;
            }
            _ => {
                stats.numerical_failures += 1;
                stats.bound_history.push(lower);
                stats.incumbent_history.push(search.inc_obj());
                continue;
            }
        }
        if let Some((j, up, dist, parent)) = node.origin {
            let gain = (relax.objective - parent).max(0.0) / dist.max(1e-9);
            let slot = if up { &mut pseudo[j].up } else { &mut pseudo[j].down };
            slot.0 += gain;
            slot.1 += 1;
        }
        let bound = node.bound.max(relax.objective);
        let x = relax.values.clone();
        let frac = select_branch(&search.binaries, &x, &pseudo, settings.int_tol);
        match frac {
            None => search.offer(relax),
            Some((j, _)) => {
                if gap_of(search.inc_obj(), bound) > settings.gap_tol {
                    if node.id == 0 {
                        search.try_assignment(|_, v| v.round(), &x);
                        search.try_assignment(|_, v| if v > settings.int_tol { 1.0 } else { 0.0 }, &x);
                    } else if stats.nodes % 16 == 0 {
                        search.try_assignment(|_, v| v.round(), &x);
                    }
                }
                if gap_of(search.inc_obj(), bound) > settings.gap_tol {
                    for (k, val) in [(0u64, 0.0), (1u64, 1.0)] {
                        let (lb, ub) = search.base[j];
                        if val < lb || val > ub {
                            continue;
                        }
                        let mut fixings = node.fixings.clone();
                        fixings.push((j, val));
                        let up = val > 0.5;
                        let dist = if up { 1.0 - x[j] } else { x[j] };
                        heap.push(Node {
                            bound,
                            id: next_id + k,
                            fixings,
                            origin: Some((j, up, dist, relax.objective)),
                        });
                    }
                    next_id += 2;
                }
            }
        }
        stats.bound_history.push(lower);
        stats.incumbent_history.push(search.inc_obj());
    }

    let inc = search.inc_obj();
    let lb = if heap.is_empty() {
        inc
    } else {
        heap.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min).max(lower).min(inc)
    };
    stats.iterations = search.iterations;
    stats.wall_time_s = start.elapsed().as_secs_f64();
    match search.incumbent.take() {
        Some(mut sol) => {
            stats.mip_gap = gap_of(inc, lb);
            stats.max_residual = sol.stats.max_residual;
            sol.status = match hit_limit {
                Some(limit) if stats.mip_gap > settings.gap_tol => limit,
                _ => SolveStatus::Optimal,
            };
            sol.dual_objective = Some(lb);
            sol.stats = stats;
            sol
        }
        None => {
            let status = if hit_limit.is_some() || stats.numerical_failures > 0 {
                SolveStatus::IterationLimit
            } else if root_status == Some(SolveStatus::IterationLimit) {
                SolveStatus::IterationLimit
            } else {
                SolveStatus::Infeasible
            };
            let mut s = Solution::failed(status, prog.vars.len());
            stats.mip_gap = f64::INFINITY;
            s.stats = stats;
            s
        }
    }
}
