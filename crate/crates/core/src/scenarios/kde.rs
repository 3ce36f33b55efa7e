//! Gaussian kernel density estimates of hosting-capacity samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Silverman's rule of thumb.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    pub fn evaluate(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self.samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>()
    }

    /// `n` evenly spaced `(x, density)` points over
    /// `[min − pad·h, max + pad·h]`.
    pub fn grid(&self, n: usize, pad: f64) -> Vec<(f64, f64)> {
        let lo = stats::min(&self.samples) - pad * self.bandwidth;
        let hi = stats::max(&self.samples) + pad * self.bandwidth;
        if n < 2 {
            return vec![(lo, self.evaluate(lo))];
        }
        (0..n)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                (x, self.evaluate(x))
            })
            .collect()
    }
}

/// 0.9 · min(σ, IQR/1.34) · n^(−1/5), falling back to σ when the IQR is
/// zero.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let sd = stats::std_sample(samples);
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

pub fn gaussian_kde(samples: &[f64], bandwidth: Bandwidth) -> Result<Kde> {
    if samples.len() < 2 {
        return Err(Error::Parameter("density estimate needs at least two samples".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Parameter("density samples must be finite".into()));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::Parameter(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::Auto => {
            let h = silverman_bandwidth(samples);
            if !(h > 0.0) {
                return Err(Error::Degenerate(
                    "all samples are equal; pass an explicit bandwidth".into(),
                ));
            }
            h
        }
    };
    Ok(Kde {
        samples: samples.to_vec(),
        bandwidth: h,
    })
}
