//! k-means scenario reduction with medoid representatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize_probabilities, ScenarioSet};
use crate::error::{Error, Result};
use crate::opf::ScenarioData;

const MAX_LLOYD: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub set: ScenarioSet,
    /// Within-cluster sum of squared distances to the centroids.
    pub inertia: f64,
    /// Cluster of every original scenario (after forced-extreme moves).
    pub assignments: Vec<usize>,
    /// Original index represented by each reduced scenario.
    pub representatives: Vec<usize>,
    /// Forced-extreme scenarios (original indices).
    pub forced: Vec<usize>,
}

fn channels(s: &ScenarioData) -> Vec<Vec<f64>> {
    let mut out = vec![s.alpha_pv.clone(), s.t_out.clone(), s.lmp.clone()];
    out.push(s.load_p.concat());
    out.push(s.load_q.concat());
    for m in [&s.baseline_bs, &s.baseline_ev, &s.baseline_hp].into_iter().flatten() {
        out.push(m.concat());
    }
    out
}

/// Concatenated channel timeseries, z-normalized per channel over the set.
pub(crate) fn features(set: &ScenarioSet) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<Vec<f64>>> = set.scenarios.iter().map(channels).collect();
    let n_ch = raw.first().map_or(0, Vec::len);
    let mut out = vec![Vec::new(); raw.len()];
    for c in 0..n_ch {
        let all: Vec<f64> = raw.iter().flat_map(|r| r[c].iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len().max(1) as f64;
        let sd = var.sqrt();
        for (k, r) in raw.iter().enumerate() {
            out[k].extend(r[c].iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }));
        }
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = dist2(p, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &c)| dist2(p, &centers[c])).sum()
}

/// Lloyd iterations to an assignment fixpoint. Empty clusters are moved to
/// the point farthest from its center.
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let mut counts = vec![0usize; centers.len()];
        for &c in &next {
            counts[c] += 1;
        }
        for c in 0..centers.len() {
            if counts[c] > 0 {
                continue;
            }
            // farthest point among clusters with more than one member
            let mut far: Option<(usize, f64)> = None;
            for (k, p) in points.iter().enumerate() {
                if counts[next[k]] < 2 {
                    continue;
                }
                let d = dist2(p, &centers[next[k]]);
                if far.map_or(true, |(_, fd)| d > fd) {
                    far = Some((k, d));
                }
            }
            if let Some((k, _)) = far {
                counts[next[k]] -= 1;
                next[k] = c;
                counts[c] = 1;
                centers[c] = points[k].clone();
            }
        }
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        for (p, &c) in points.iter().zip(&next) {
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, s) in sums.into_iter().enumerate() {
            if counts[c] > 0 {
                centers[c] = s.into_iter().map(|v| v / counts[c] as f64).collect();
            }
        }
        if next == assign {
            break;
        }
        assign = next;
    }
    (centers, assign)
}

/// Next k-means++ seed: a point drawn with probability proportional to its
/// squared distance from the current centers (lowest index when all
/// distances vanish).
fn plus_plus_pick(points: &[Vec<f64>], centers: &[Vec<f64>], rng: &mut ChaCha8Rng) -> usize {
    let d: Vec<f64> = points.iter().map(|p| nearest(p, centers).1).collect();
    let total: f64 = d.iter().sum();
    let u: f64 = rng.gen::<f64>();
    if !(total > 0.0) {
        return 0;
    }
    let mut acc = 0.0;
    for (k, v) in d.iter().enumerate() {
        acc += v / total;
        if u < acc && *v > 0.0 {
            return k;
        }
    }
    d.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

/// Runs the incremental seeding sequence k = 1..=k_max, calling `visit`
/// with each k's centers and assignments. Centers for k + 1 start from
/// the converged centers for k plus one k-means++ pick, so inertia never
/// increases with k.
fn incremental(points: &[Vec<f64>], k_max: usize, seed: u64, mut visit: impl FnMut(usize, &[Vec<f64>], &[usize])) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let first = rng.gen_range(0..n);
    let mut centers = vec![points[first].clone()];
    for k in 1..=k_max {
        if k > 1 {
            let pick = plus_plus_pick(points, &centers, &mut rng);
            centers.push(points[pick].clone());
        }
        if k == n {
            // every scenario is its own cluster
            let assign: Vec<usize> = (0..n).collect();
            visit(k, points, &assign);
            continue;
        }
        let (c, a) = lloyd(points, centers);
        visit(k, &c, &a);
        centers = c;
    }
}

/// `(k, inertia)` for k = 1..=k_max.
pub fn elbow_curve(set: &ScenarioSet, k_max: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    set.validate()?;
    if k_max == 0 || k_max > set.len() {
        return Err(Error::Parameter(format!("k_max must lie in 1..={}", set.len())));
    }
    let pts = features(set);
    let mut out = Vec::with_capacity(k_max);
    incremental(&pts, k_max, seed, |k, c, a| {
        let mut v = inertia(&pts, c, a);
        if let Some(&(_, prev)) = out.last() {
            // absorb floating-point noise from recomputed centroid means
            if v > prev && v - prev <= 1e-12 * prev.max(1.0) {
                v = prev;
            }
        }
        out.push((k, v));
    });
    Ok(out)
}

/// k with the largest second difference of the inertia curve.
pub fn elbow_point(curve: &[(usize, f64)]) -> Option<usize> {
    if curve.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for i in 1..curve.len() - 1 {
        let d2 = curve[i - 1].1 - 2.0 * curve[i].1 + curve[i + 1].1;
        if best.map_or(true, |(_, b)| d2 > b) {
            best = Some((curve[i].0, d2));
        }
    }
    best.map(|(k, _)| k)
}

/// Scenarios with the largest total PV availability and the largest total
/// load energy (ties to the lowest index), deduplicated.
pub fn forced_extremes(set: &ScenarioSet) -> Vec<usize> {
    let argmax = |f: &dyn Fn(&ScenarioData) -> f64| {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, s) in set.scenarios.iter().enumerate() {
            let v = f(s);
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let pv = argmax(&|s| s.alpha_pv.iter().sum());
    let load = argmax(&|s| s.load_p.iter().flatten().sum());
    if pv == load {
        vec![pv]
    } else {
        vec![pv, load]
    }
}

/// Reduces `set` to `k` medoid representatives with member-fraction
/// probabilities. Forced extremes replace the nearest non-forced medoid
/// and carry their own probability mass into that cluster; if `k` is
/// smaller than the number of extremes the set grows to hold them.
pub fn kmeans_reduce(set: &ScenarioSet, k: usize, seed: u64) -> Result<Reduction> {
    set.validate()?;
    if k == 0 || k > set.len() {
        return Err(Error::Parameter(format!("k = {k} must lie in 1..={}", set.len())));
    }
    let pts = features(set);
    let mut result: Option<(Vec<Vec<f64>>, Vec<usize>)> = None;
    incremental(&pts, k, seed, |kk, c, a| {
        if kk == k {
            result = Some((c.to_vec(), a.to_vec()));
        }
    });
    let (centers, mut assign) = result.expect("k visited");
    let inertia = inertia(&pts, &centers, &assign);
    let probs = set.probabilities();

    // medoids
    let mut reps: Vec<usize> = (0..centers.len())
        .map(|c| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (i, p) in pts.iter().enumerate() {
                if assign[i] == c {
                    let d = dist2(p, &centers[c]);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
            }
            best.0
        })
        .collect();
    let mut mass: Vec<f64> = vec![0.0; reps.len()];
    for (i, &c) in assign.iter().enumerate() {
        mass[c] += probs[i];
    }

    let forced = forced_extremes(set);
    let mut locked = vec![false; reps.len()];
    for &e in &forced {
        if let Some(slot) = reps.iter().position(|&r| r == e) {
            locked[slot] = true;
            continue;
        }
        let slot = (0..reps.len())
            .filter(|&s| !locked[s])
            .min_by(|&a, &b| dist2(&pts[reps[a]], &pts[e]).total_cmp(&dist2(&pts[reps[b]], &pts[e])));
        let slot = match slot {
            Some(s) => {
                reps[s] = e;
                s
            }
            None => {
                reps.push(e);
                mass.push(0.0);
                locked.push(false);
                reps.len() - 1
            }
        };
        locked[slot] = true;
        let from = assign[e];
        if from != slot {
            mass[from] -= probs[e];
            mass[slot] += probs[e];
            assign[e] = slot;
        }
    }

    let scenarios = reps
        .iter()
        .zip(&mass)
        .map(|(&r, &m)| ScenarioData {
            probability: m,
            ..set.scenarios[r].clone()
        })
        .collect();
    let mut provenance = set.provenance.clone();
    provenance.source_indices = Some(reps.clone());
    let reduced = normalize_probabilities(ScenarioSet { scenarios, provenance })?;
    Ok(Reduction {
        set: reduced,
        inertia,
        assignments: assign,
        representatives: reps,
        forced,
    })
}
