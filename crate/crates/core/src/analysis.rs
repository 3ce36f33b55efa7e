//! Post-hoc analytics: rank correlations of colocated capacities,
//! BS × HP sensitivity sweeps of the maximum PV penetration, and the
//! feasible-volume ratio between two sweeps.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::der::{DerFleet, DerKind, ObjectiveWeights};
use crate::error::{Error, Result};
use crate::hca::{run_deterministic_hca, HcaConfig, HcaMode};
use crate::network::Network;
use crate::powerflow::{flow_metrics, FlowMetrics};
use crate::scenarios::ScenarioSet;
use crate::ssp::{build_deterministic_equivalent, solve_ssp, DerWeights, SspConfig};

// ---------------------------------------------------------------------------
// Rank correlation

/// Ranks starting at 1; ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with mean ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("spearman on {} and {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("spearman needs at least two pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("spearman input is not finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Labelled square correlation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("der");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            s.push_str(l);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub const COLOCATION_ORDER: [DerKind; 4] = [DerKind::Pv, DerKind::Bs, DerKind::Hp, DerKind::Ev];

/// Pairwise Spearman correlations of nodal capacities over all buses of
/// the fleet, in the order PV, BS, HP, EV.
pub fn colocation_matrix(fleet: &DerFleet) -> Result<CorrelationMatrix> {
    colocation_matrix_on(fleet, &(0..fleet.len()).collect::<Vec<_>>())
}

/// As [`colocation_matrix`], restricted to the given buses.
pub fn colocation_matrix_on(fleet: &DerFleet, buses: &[usize]) -> Result<CorrelationMatrix> {
    if let Some(&b) = buses.iter().find(|&&b| b >= fleet.len()) {
        return Err(Error::Dimension(format!("bus index {b} outside a fleet of {}", fleet.len())));
    }
    let caps: Vec<Vec<f64>> = COLOCATION_ORDER
        .iter()
        .map(|&k| {
            let c = fleet.capacity(k);
            buses.iter().map(|&b| c[b]).collect()
        })
        .collect();
    let n = caps.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = spearman(&caps[i], &caps[j]).map_err(|e| match e {
                Error::Degenerate(_) => Error::Degenerate(format!(
                    "{} or {} capacities are constant across buses",
                    COLOCATION_ORDER[i], COLOCATION_ORDER[j]
                )),
                e => e,
            })?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        labels: COLOCATION_ORDER.iter().map(|k| k.to_string()).collect(),
        values,
    })
}

/// Relative increase `a / b − 1`, e.g. of one standard deviation over
/// another.
pub fn relative_increase(a: f64, b: f64) -> Result<f64> {
    if b == 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::Degenerate(format!("relative increase of {a} over {b}")));
    }
    Ok(a / b - 1.0)
}

// ---------------------------------------------------------------------------
// Sensitivity sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepEngine {
    Iterative,
    Ssp,
}

/// One (BS, HP) grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub bs_pct: f64,
    pub hp_pct: f64,
    /// Largest PV penetration (% of total nominal load) feasible in every
    /// scenario; `None` when none is.
    pub max_pv_pct: Option<f64>,
    pub vmin: Option<f64>,
    pub vmax: Option<f64>,
    pub imax_pct: Option<f64>,
    /// Solver failure that prevented an answer for this cell.
    pub error: Option<String>,
}

impl SweepCell {
    /// Cell at a grid point with no result yet.
    pub fn empty(bs_pct: f64, hp_pct: f64) -> Self {
        SweepCell {
            bs_pct,
            hp_pct,
            max_pv_pct: None,
            vmin: None,
            vmax: None,
            imax_pct: None,
            error: None,
        }
    }

    fn failed(bs_pct: f64, hp_pct: f64, e: impl ToString) -> Self {
        SweepCell {
            error: Some(e.to_string()),
            ..SweepCell::empty(bs_pct, hp_pct)
        }
    }

    fn with_metrics<'a>(mut self, metrics: impl IntoIterator<Item = &'a FlowMetrics>) -> Self {
        for m in metrics {
            self.vmin = Some(self.vmin.map_or(m.vmin, |v| v.min(m.vmin)));
            self.vmax = Some(self.vmax.map_or(m.vmax, |v| v.max(m.vmax)));
            self.imax_pct = Some(self.imax_pct.map_or(m.imax_pct, |v| v.max(m.imax_pct)));
        }
        self
    }
}

/// Maximum PV penetration over a BS × HP grid; cells are stored with BS
/// as the outer index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSurface {
    pub mode: HcaMode,
    pub engine: SweepEngine,
    pub bs_pcts: Vec<f64>,
    pub hp_pcts: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

pub const SURFACE_CSV_HEADER: &str = "bs_pct,hp_pct,max_pv_pct,vmin,vmax,imax_pct";

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Parameter(format!("{name} grid is empty")));
    }
    if axis.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Parameter(format!("{name} grid must hold finite non-negative percentages")));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

impl SweepSurface {
    pub fn validate(&self) -> Result<()> {
        check_axis("bs", &self.bs_pcts)?;
        check_axis("hp", &self.hp_pcts)?;
        if self.cells.len() != self.bs_pcts.len() * self.hp_pcts.len() {
            return Err(Error::Dimension(format!(
                "{} cells for a {}×{} grid",
                self.cells.len(),
                self.bs_pcts.len(),
                self.hp_pcts.len()
            )));
        }
        for (k, c) in self.cells.iter().enumerate() {
            let (i, j) = (k / self.hp_pcts.len(), k % self.hp_pcts.len());
            if c.bs_pct != self.bs_pcts[i] || c.hp_pct != self.hp_pcts[j] {
                return Err(Error::Dimension(format!("cell {k} does not sit at its grid point")));
            }
        }
        Ok(())
    }

    pub fn cell(&self, bs_idx: usize, hp_idx: usize) -> &SweepCell {
        &self.cells[bs_idx * self.hp_pcts.len() + hp_idx]
    }

    /// Grid of max PV values with infeasible and failed cells as `None`.
    pub fn max_pv(&self) -> Vec<Vec<Option<f64>>> {
        self.cells.chunks(self.hp_pcts.len()).map(|row| row.iter().map(|c| c.max_pv_pct).collect()).collect()
    }

    /// One row per cell; cells without a value read "infeasible" (or
    /// "error" when the solver failed).
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from(SURFACE_CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let pv = match (c.max_pv_pct, &c.error) {
                (Some(v), _) => v.to_string(),
                (None, Some(_)) => "error".into(),
                (None, None) => "infeasible".into(),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                c.bs_pct,
                c.hp_pct,
                pv,
                opt(c.vmin),
                opt(c.vmax),
                opt(c.imax_pct)
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Settings of a sweep. The iterative engine takes the PV step, start,
/// allocation and device options from `hca`; the 2-SSP engine takes its
/// options from `ssp`. The mode of both is overridden by `mode`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub mode: HcaMode,
    pub engine: SweepEngine,
    pub hca: HcaConfig,
    pub weights: ObjectiveWeights,
    pub ssp: SspConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mode: HcaMode::Static,
            engine: SweepEngine::Iterative,
            hca: HcaConfig {
                target: DerKind::Pv,
                ..HcaConfig::default()
            },
            weights: ObjectiveWeights::default(),
            ssp: SspConfig::default(),
        }
    }
}

/// Runs the chosen engine at every (BS, HP) grid point in parallel.
/// Solver failures are recorded in the cell and the sweep continues.
pub fn sensitivity_sweep(
    net: &Network,
    set: &ScenarioSet,
    bs_grid: &[f64],
    hp_grid: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepSurface> {
    check_axis("bs", bs_grid)?;
    check_axis("hp", hp_grid)?;
    if set.is_empty() {
        return Err(Error::Parameter("sweep needs at least one scenario".into()));
    }
    let points: Vec<(f64, f64)> = bs_grid.iter().flat_map(|&b| hp_grid.iter().map(move |&h| (b, h))).collect();
    let cells = points
        .par_iter()
        .map(|&(bs, hp)| {
            let cell = match cfg.engine {
                SweepEngine::Iterative => iterative_cell(net, set, bs, hp, cfg),
                SweepEngine::Ssp => ssp_cell(net, set, bs, hp, cfg),
            };
            cell.unwrap_or_else(|e| {
                log::warn!("sweep cell bs={bs}% hp={hp}% failed: {e}");
                SweepCell::failed(bs, hp, e)
            })
        })
        .collect();
    Ok(SweepSurface {
        mode: cfg.mode,
        engine: cfg.engine,
        bs_pcts: bs_grid.to_vec(),
        hp_pcts: hp_grid.to_vec(),
        cells,
    })
}

fn iterative_cell(net: &Network, set: &ScenarioSet, bs: f64, hp: f64, cfg: &SweepConfig) -> Result<SweepCell> {
    let hca = HcaConfig {
        target: DerKind::Pv,
        mode: cfg.mode,
        bs_pct: bs,
        hp_pct: hp,
        ..cfg.hca.clone()
    };
    let mut traces = Vec::with_capacity(set.len());
    for scen in &set.scenarios {
        let trace = run_deterministic_hca(net, &hca, scen, &cfg.weights)?;
        if let Some(reason) = &trace.aborted {
            return Ok(SweepCell::failed(bs, hp, reason));
        }
        traces.push(trace);
    }
    let Some(level) = traces.iter().map(|t| t.final_hc).try_fold(f64::INFINITY, |m, f| f.map(|f| m.min(f))) else {
        return Ok(SweepCell::empty(bs, hp));
    };
    let metrics = traces.iter().filter_map(|t| {
        t.levels
            .iter()
            .find(|l| l.feasible && (l.level_pct - level).abs() <= 1e-9)
            .and_then(|l| l.metrics.as_ref())
    });
    Ok(SweepCell {
        max_pv_pct: Some(level),
        ..SweepCell::empty(bs, hp)
    }
    .with_metrics(metrics))
}

fn ssp_cell(net: &Network, set: &ScenarioSet, bs: f64, hp: f64, cfg: &SweepConfig) -> Result<SweepCell> {
    let ssp = SspConfig {
        mode: cfg.mode,
        bs_budget: bs / 100.0,
        der_weights: DerWeights {
            pv: cfg.ssp.der_weights.pv,
            ..DerWeights::uniform(0.0)
        },
        ..cfg.ssp.clone()
    };
    let mut model = build_deterministic_equivalent(net, set, &ssp)?;
    let fixed = [(DerKind::Bs, bs / 100.0), (DerKind::Hp, hp / 100.0), (DerKind::Ev, 0.0)];
    for (kind, value) in fixed {
        for p in model.first[&kind].iter().flatten() {
            if value > p.ub * (1.0 + 1e-12) {
                return Err(Error::Parameter(format!("{kind} level {value} exceeds its bound {}", p.ub)));
            }
            let v = value.min(p.ub);
            model.prog.fix(p.x, v);
            model.prog.fix(p.z, if v >= ssp.eps { 1.0 } else { 0.0 });
        }
    }
    let res = solve_ssp(&model, net, set, &ssp, None)?;
    if !res.feasible {
        return Ok(SweepCell::empty(bs, hp));
    }
    // the repair may scale every penetration; the cell's BS and HP levels
    // must survive it
    let kept = fixed.iter().all(|&(kind, value)| {
        model.first[&kind].iter().enumerate().all(|(i, p)| {
            p.map_or(true, |p| (res.x.get(kind)[i] - value.min(p.ub)).abs() <= 1e-9 * value.max(1.0))
        })
    });
    if !kept {
        return Ok(SweepCell::empty(bs, hp));
    }
    let total = net.total_nominal_load();
    let pv: f64 = net.buses.iter().zip(&res.x.x_pv).map(|(b, x)| x * b.nominal_load_p).sum();
    let metrics: Vec<FlowMetrics> = res.recourse.iter().flatten().map(|r| flow_metrics(r.flow(), net)).collect();
    Ok(SweepCell {
        max_pv_pct: Some(if total > 0.0 { 100.0 * pv / total } else { 0.0 }),
        ..SweepCell::empty(bs, hp)
    }
    .with_metrics(&metrics))
}

// ---------------------------------------------------------------------------
// Feasible volume

/// Trapezoid weights of a grid axis; a single point has unit width.
fn axis_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let left = if i > 0 { axis[i] - axis[i - 1] } else { 0.0 };
            let right = if i + 1 < n { axis[i + 1] - axis[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Integral of max(PV, 0) over the (BS, HP) grid; cells without a value
/// count as zero.
pub fn feasible_volume(s: &SweepSurface) -> Result<f64> {
    s.validate()?;
    let wb = axis_weights(&s.bs_pcts);
    let wh = axis_weights(&s.hp_pcts);
    let mut vol = 0.0;
    for (i, w_b) in wb.iter().enumerate() {
        for (j, w_h) in wh.iter().enumerate() {
            vol += s.cell(i, j).max_pv_pct.unwrap_or(0.0).max(0.0) * w_b * w_h;
        }
    }
    Ok(vol)
}

/// Ratio of feasible volumes, dynamic over static. A zero static volume
/// gives `f64::INFINITY` (or 1 when both volumes are zero).
pub fn feasible_volume_ratio(dynamic: &SweepSurface, stat: &SweepSurface) -> Result<f64> {
    if dynamic.bs_pcts != stat.bs_pcts || dynamic.hp_pcts != stat.hp_pcts {
        return Err(Error::Dimension("sweep surfaces have different axes".into()));
    }
    let (d, s) = (feasible_volume(dynamic)?, feasible_volume(stat)?);
    Ok(match (d > 0.0, s > 0.0) {
        (_, true) => d / s,
        (true, false) => f64::INFINITY,
        (false, false) => 1.0,
    })
}

#[cfg(test)]
mod tests;
