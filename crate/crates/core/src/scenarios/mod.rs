//! Scenario generation, reduction and hosting-capacity distributions.

mod kde;
mod kmeans;
mod stochastic;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opf::ScenarioData;

pub use kde::{gaussian_kde, silverman_bandwidth, Bandwidth, Kde};
pub use kmeans::{elbow_curve, elbow_point, forced_extremes, kmeans_reduce, Reduction};
pub use stochastic::{run_stochastic_hca, HcDistribution, ScenarioHc};

/// Gaussian noise standard deviation per channel. Scalar channels are
/// absolute; loads are relative to each bus's baseline peak; device
/// baselines are absolute on their normalized fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevels {
    pub alpha_pv: f64,
    pub t_out: f64,
    pub lmp: f64,
    pub load: f64,
    pub der_baseline: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            alpha_pv: 0.05,
            t_out: 1.5,
            lmp: 0.007,
            load: 0.05,
            der_baseline: 0.05,
        }
    }
}

impl NoiseLevels {
    pub fn zero() -> Self {
        NoiseLevels {
            alpha_pv: 0.0,
            t_out: 0.0,
            lmp: 0.0,
            load: 0.0,
            der_baseline: 0.0,
        }
    }

    /// Every channel at `frac` of its baseline peak.
    pub fn relative(base: &ScenarioData, frac: f64) -> Self {
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        NoiseLevels {
            alpha_pv: frac * peak(&base.alpha_pv),
            t_out: frac * peak(&base.t_out),
            lmp: frac * peak(&base.lmp),
            load: frac,
            der_baseline: frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_pv, self.t_out, self.lmp, self.load, self.der_baseline];
        if all.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("noise standard deviations must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub noise: NoiseLevels,
    pub baseline_id: String,
    /// Indices into the generating set when this set is a reduction.
    #[serde(default)]
    pub source_indices: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<ScenarioData>,
    pub provenance: Provenance,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.scenarios.iter().map(|s| s.probability).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.scenarios.first() else {
            return Err(Error::Parameter("scenario set is empty".into()));
        };
        let (h, nb) = (first.horizon(), first.load_p.len());
        for (k, s) in self.scenarios.iter().enumerate() {
            if s.horizon() != h || s.load_p.len() != nb || s.dt != first.dt {
                return Err(Error::Dimension(format!("scenario {k} differs in shape from scenario 0")));
            }
            if !(s.probability >= 0.0) {
                return Err(Error::Parameter(format!("scenario {k} has negative probability")));
            }
        }
        let total: f64 = self.scenarios.iter().map(|s| s.probability).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Equally likely scenarios.
    pub fn uniform(mut scenarios: Vec<ScenarioData>, baseline_id: &str) -> Self {
        let p = 1.0 / scenarios.len().max(1) as f64;
        for s in &mut scenarios {
            s.probability = p;
        }
        ScenarioSet {
            scenarios,
            provenance: Provenance {
                seed: 0,
                noise: NoiseLevels::zero(),
                baseline_id: baseline_id.to_string(),
                source_indices: None,
            },
        }
    }

    /// Single-scenario set with probability 1.
    pub fn singleton(mut scen: ScenarioData, baseline_id: &str) -> Self {
        scen.probability = 1.0;
        ScenarioSet {
            scenarios: vec![scen],
            provenance: Provenance {
                seed: 0,
                noise: NoiseLevels::zero(),
                baseline_id: baseline_id.to_string(),
                source_indices: None,
            },
        }
    }
}

fn perturb(values: &mut [f64], std: f64, rng: &mut ChaCha8Rng, clamp: impl Fn(f64, f64) -> f64) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    for v in values.iter_mut() {
        let base = *v;
        *v = clamp(base, base + normal.sample(rng));
    }
}

fn bus_peak(row: &[f64]) -> f64 {
    row.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `count` independently perturbed copies of `baseline` with uniform
/// probabilities. Scenario `k` draws from its own stream of the seeded
/// generator, so a larger set extends a smaller one.
pub fn generate_scenarios(baseline: &ScenarioData, noise: &NoiseLevels, count: usize, seed: u64) -> Result<ScenarioSet> {
    generate_scenarios_with_id(baseline, noise, count, seed, "baseline")
}

pub fn generate_scenarios_with_id(
    baseline: &ScenarioData,
    noise: &NoiseLevels,
    count: usize,
    seed: u64,
    baseline_id: &str,
) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(Error::Parameter("scenario count must be at least 1".into()));
    }
    noise.validate()?;
    let p = 1.0 / count as f64;
    let mut scenarios = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut s = baseline.clone();
        s.probability = p;
        // no sun stays no sun
        perturb(&mut s.alpha_pv, noise.alpha_pv, &mut rng, |b, v| if b <= 0.0 { 0.0 } else { v.clamp(0.0, 1.0) });
        perturb(&mut s.t_out, noise.t_out, &mut rng, |_, v| v);
        perturb(&mut s.lmp, noise.lmp, &mut rng, |_, v| v);
        for rows in [&mut s.load_p, &mut s.load_q] {
            for row in rows.iter_mut() {
                let std = noise.load * bus_peak(row);
                perturb(row, std, &mut rng, |b, v| if b >= 0.0 { v.max(0.0) } else { v });
            }
        }
        for (m, hi) in [(&mut s.baseline_bs, 1.0), (&mut s.baseline_ev, 1.0), (&mut s.baseline_hp, 0.0)] {
            for row in m.iter_mut().flatten() {
                perturb(row, noise.der_baseline, &mut rng, |_, v| v.clamp(-1.0, hi));
            }
        }
        scenarios.push(s);
    }
    let set = ScenarioSet {
        scenarios,
        provenance: Provenance {
            seed,
            noise: *noise,
            baseline_id: baseline_id.to_string(),
            source_indices: None,
        },
    };
    normalize_probabilities(set)
}

/// Rescales probabilities so they sum to one exactly in floating point
/// (the last entry absorbs the rounding).
pub(crate) fn normalize_probabilities(mut set: ScenarioSet) -> Result<ScenarioSet> {
    let total: f64 = set.scenarios.iter().map(|s| s.probability).sum();
    if !(total > 0.0) {
        return Err(Error::Parameter("probabilities sum to zero".into()));
    }
    for s in &mut set.scenarios {
        s.probability /= total;
    }
    let n = set.scenarios.len();
    let head: f64 = set.scenarios[..n - 1].iter().map(|s| s.probability).sum();
    set.scenarios[n - 1].probability = 1.0 - head;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Directory format: one CSV per channel plus manifest.json.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SetManifest {
    provenance: Provenance,
    dt: f64,
    t0: usize,
    horizon: usize,
    n_buses: usize,
    probabilities: Vec<f64>,
    channels: Vec<String>,
}

const SCALAR_CHANNELS: [&str; 3] = ["alpha_pv", "t_out", "lmp"];
const BUS_CHANNELS: [&str; 5] = ["load_p", "load_q", "baseline_bs", "baseline_ev", "baseline_hp"];

fn scalar<'a>(s: &'a ScenarioData, name: &str) -> &'a Vec<f64> {
    match name {
        "alpha_pv" => &s.alpha_pv,
        "t_out" => &s.t_out,
        _ => &s.lmp,
    }
}

fn per_bus<'a>(s: &'a ScenarioData, name: &str) -> Option<&'a Vec<Vec<f64>>> {
    match name {
        "load_p" => Some(&s.load_p),
        "load_q" => Some(&s.load_q),
        "baseline_bs" => s.baseline_bs.as_ref(),
        "baseline_ev" => s.baseline_ev.as_ref(),
        _ => s.baseline_hp.as_ref(),
    }
}

impl ScenarioSet {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let first = &self.scenarios[0];
        let h = first.horizon();
        let mut channels = Vec::new();
        let steps: Vec<String> = (0..h).map(|t| format!("t{t}")).collect();
        for name in SCALAR_CHANNELS {
            let path = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Timeseries(format!("{}: {e}", path.display())))?;
            let mut header = vec!["scenario".to_string()];
            header.extend(steps.iter().cloned());
            w.write_record(&header)?;
            for (k, s) in self.scenarios.iter().enumerate() {
                let mut rec = vec![k.to_string()];
                rec.extend(scalar(s, name).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            channels.push(name.to_string());
        }
        for name in BUS_CHANNELS {
            if per_bus(first, name).is_none() {
                continue;
            }
            let path = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Timeseries(format!("{}: {e}", path.display())))?;
            let mut header = vec!["scenario".to_string(), "bus".to_string()];
            header.extend(steps.iter().cloned());
            w.write_record(&header)?;
            for (k, s) in self.scenarios.iter().enumerate() {
                let m = per_bus(s, name).ok_or_else(|| Error::Dimension(format!("scenario {k} lacks channel {name}")))?;
                for (i, row) in m.iter().enumerate() {
                    let mut rec = vec![k.to_string(), i.to_string()];
                    rec.extend(row.iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            channels.push(name.to_string());
        }
        let manifest = SetManifest {
            provenance: self.provenance.clone(),
            dt: first.dt,
            t0: first.t0,
            horizon: h,
            n_buses: first.load_p.len(),
            probabilities: self.probabilities(),
            channels,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<ScenarioSet> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SetManifest = serde_json::from_str(&text)?;
        let k = m.probabilities.len();
        let read = |name: &str, keyed_by_bus: bool| -> Result<Vec<Vec<Vec<f64>>>> {
            let path = dir.join(format!("{name}.csv"));
            let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Timeseries(format!("{}: {e}", path.display())))?;
            let rows = if keyed_by_bus { m.n_buses } else { 1 };
            let mut out = vec![vec![Vec::new(); rows]; k];
            let skip = if keyed_by_bus { 2 } else { 1 };
            for rec in r.records() {
                let rec = rec?;
                let idx = |j: usize| -> Result<usize> {
                    rec.get(j)
                        .and_then(|v| v.trim().parse().ok())
                        .ok_or_else(|| Error::Timeseries(format!("{name}.csv: bad index in row {rec:?}")))
                };
                let s = idx(0)?;
                let b = if keyed_by_bus { idx(1)? } else { 0 };
                if s >= k || b >= rows {
                    return Err(Error::Dimension(format!("{name}.csv: index ({s}, {b}) out of range")));
                }
                let vals: Vec<f64> = rec
                    .iter()
                    .skip(skip)
                    .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Timeseries(format!("{name}.csv: bad value '{v}'"))))
                    .collect::<Result<_>>()?;
                if vals.len() != m.horizon || vals.iter().any(|v| v.is_nan()) {
                    return Err(Error::Timeseries(format!("{name}.csv: row for scenario {s} is malformed")));
                }
                out[s][b] = vals;
            }
            Ok(out)
        };
        let scal: Vec<Vec<Vec<Vec<f64>>>> =
            SCALAR_CHANNELS.iter().map(|c| read(c, false)).collect::<Result<_>>()?;
        let mut bus: Vec<Option<Vec<Vec<Vec<f64>>>>> = Vec::new();
        for c in BUS_CHANNELS {
            bus.push(if m.channels.iter().any(|x| x == c) { Some(read(c, true)?) } else { None });
        }
        let load_p = bus[0].clone().ok_or_else(|| Error::MissingProfile("load_p.csv".into()))?;
        let load_q = bus[1].clone().ok_or_else(|| Error::MissingProfile("load_q.csv".into()))?;
        let mut scenarios = Vec::with_capacity(k);
        for s in 0..k {
            scenarios.push(ScenarioData {
                dt: m.dt,
                t0: m.t0,
                alpha_pv: scal[0][s][0].clone(),
                t_out: scal[1][s][0].clone(),
                lmp: scal[2][s][0].clone(),
                load_p: load_p[s].clone(),
                load_q: load_q[s].clone(),
                baseline_bs: bus[2].as_ref().map(|b| b[s].clone()),
                baseline_ev: bus[3].as_ref().map(|b| b[s].clone()),
                baseline_hp: bus[4].as_ref().map(|b| b[s].clone()),
                probability: m.probabilities[s],
            });
        }
        let set = ScenarioSet {
            scenarios,
            provenance: m.provenance,
        };
        set.validate()?;
        Ok(set)
    }
}
