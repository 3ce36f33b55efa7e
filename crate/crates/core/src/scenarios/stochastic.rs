//! Monte Carlo hosting capacity over a scenario set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kde::{gaussian_kde, Bandwidth};
use super::ScenarioSet;
use crate::der::ObjectiveWeights;
use crate::error::{Error, Result};
use crate::hca::{run_deterministic_hca, HcaConfig, HcaTrace};
use crate::network::Network;
use crate::stats;

/// Per-scenario result with flow extremes over the probed levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHc {
    pub index: usize,
    pub final_hc: Option<f64>,
    pub aborted: Option<String>,
    pub levels: usize,
    pub vmax: f64,
    pub vmin: f64,
    pub vmean: f64,
    pub imax_pct: f64,
    pub imean_pct: f64,
}

impl ScenarioHc {
    fn from_trace(index: usize, t: &HcaTrace) -> Self {
        let m: Vec<_> = t.levels.iter().filter_map(|l| l.metrics.as_ref()).collect();
        let pick = |f: fn(&crate::powerflow::FlowMetrics) -> f64| m.iter().map(|x| f(x)).collect::<Vec<_>>();
        let or_nan = |v: f64| if m.is_empty() { f64::NAN } else { v };
        ScenarioHc {
            index,
            final_hc: t.final_hc,
            aborted: t.aborted.clone(),
            levels: t.levels.len(),
            vmax: or_nan(stats::max(&pick(|x| x.vmax))),
            vmin: or_nan(stats::min(&pick(|x| x.vmin))),
            vmean: stats::mean(&pick(|x| x.vmean)),
            imax_pct: or_nan(stats::max(&pick(|x| x.imax_pct))),
            imean_pct: stats::mean(&pick(|x| x.imean_pct)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcDistribution {
    /// Hosting capacity per scenario (%), "no feasible level" as 0.
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    /// Worst case over scenarios.
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// True when any scenario run aborted.
    pub partial: bool,
    pub per_scenario: Vec<ScenarioHc>,
    /// Optional `(x, density)` evaluation grid.
    pub kde: Option<Vec<(f64, f64)>>,
}

impl HcDistribution {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parameter("distribution needs at least one sample".into()));
        }
        Ok(HcDistribution {
            mean: stats::mean(&samples),
            std: stats::std_sample(&samples),
            min: stats::min(&samples),
            max: stats::max(&samples),
            median: stats::median(&samples),
            samples,
            partial: false,
            per_scenario: Vec::new(),
            kde: None,
        })
    }

    /// Adds a density grid; identical samples get a unit bandwidth.
    pub fn with_kde(mut self, points: usize) -> Self {
        if self.samples.len() >= 2 {
            let kde = gaussian_kde(&self.samples, Bandwidth::Auto)
                .or_else(|_| gaussian_kde(&self.samples, Bandwidth::Fixed(1.0)));
            self.kde = kde.ok().map(|k| k.grid(points, 3.0));
        }
        self
    }

    pub fn histogram_csv(&self, bins: usize) -> String {
        let bins = bins.max(1);
        let (lo, hi) = (self.min, self.max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &s in &self.samples {
            let b = (((s - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", lo + b as f64 * width, lo + (b + 1) as f64 * width, c);
        }
        out
    }
}

/// Runs the deterministic search independently on every scenario (in
/// parallel, results kept in scenario order).
pub fn run_stochastic_hca(
    net: &Network,
    cfg: &HcaConfig,
    set: &ScenarioSet,
    weights: &ObjectiveWeights,
) -> Result<HcDistribution> {
    if set.is_empty() {
        return Err(Error::Parameter("scenario set is empty".into()));
    }
    let traces: Vec<HcaTrace> = set
        .scenarios
        .par_iter()
        .map(|s| run_deterministic_hca(net, cfg, s, weights))
        .collect::<Result<_>>()?;
    let per: Vec<ScenarioHc> = traces.iter().enumerate().map(|(k, t)| ScenarioHc::from_trace(k, t)).collect();
    let mut dist = HcDistribution::from_samples(traces.iter().map(HcaTrace::hc_or_zero).collect())?;
    dist.partial = traces.iter().any(|t| t.aborted.is_some());
    dist.per_scenario = per;
    Ok(dist)
}
