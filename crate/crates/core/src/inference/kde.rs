//! Gaussian kernel density estimates and Kullback–Leibler divergences
//! between densities tabulated on a grid.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::trapezoid_tabulated;
use crate::random::stream_rng;

pub const GRID_POINTS: usize = 512;
/// `p` values at or below this contribute nothing to a divergence.
pub const SUPPORT_TOL: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub bandwidth: f64,
}

impl Density {
    pub fn integral(&self) -> f64 {
        trapezoid_tabulated(&self.x, &self.p)
    }

    /// Grid point of maximal density.
    pub fn mode(&self) -> f64 {
        let i = self
            .p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        self.x[i]
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSample);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::DegenerateSample);
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Evaluates the estimate with bandwidth `h` at `x`.
pub fn kde_at(samples: &[f64], h: f64, x: &[f64]) -> Vec<f64> {
    let norm = INV_SQRT_2PI / (h * samples.len() as f64);
    x.iter()
        .map(|&xi| {
            samples
                .iter()
                .map(|&s| (-0.5 * ((xi - s) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Silverman-bandwidth estimate on 512 points spanning the sample range
/// widened by three bandwidths.
pub fn kde(samples: &[f64]) -> Result<Density> {
    let h = silverman_bandwidth(samples)?;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let x = uniform_grid(lo, hi, GRID_POINTS);
    let p = kde_at(samples, h, &x);
    Ok(Density { x, p, bandwidth: h })
}

/// `∫ p ln(p/q)` by the trapezoid rule on the grid of `p`, with `0 ln 0 = 0`.
/// A non-negligible `p` where `q` has underflowed to zero (or a subnormal) is
/// an error rather than an infinite or clipped contribution.
pub fn kld(p: &Density, q: &[f64]) -> Result<f64> {
    Error::check_dim(p.x.len(), q.len())?;
    let mut integrand = Vec::with_capacity(q.len());
    for ((&x, &pi), &qi) in p.x.iter().zip(&p.p).zip(q) {
        if pi > SUPPORT_TOL && qi < f64::MIN_POSITIVE {
            return Err(Error::SupportViolation { x, p: pi, q: qi });
        }
        integrand.push(if pi <= SUPPORT_TOL { 0.0 } else { pi * (pi / qi).ln() });
    }
    Ok(trapezoid_tabulated(&p.x, &integrand))
}

pub fn std_normal_pdf(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| INV_SQRT_2PI * (-0.5 * v * v).exp()).collect()
}

/// Divergence of the sample's KDE from the standard normal.
pub fn kld_from_std_normal(samples: &[f64]) -> Result<f64> {
    let p = kde(samples)?;
    kld(&p, &std_normal_pdf(&p.x))
}

/// The `level` quantile of the divergence between the KDEs of two
/// independent standard normal samples of size `n`.
pub fn kld_noise_threshold(n: usize, replicates: usize, level: f64, seed: u64) -> Result<f64> {
    if n < 2 || replicates == 0 {
        return Err(Error::config(
            "threshold bootstrap needs n >= 2 and at least one replicate",
        ));
    }
    let mut values = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let mut rng = stream_rng(seed, r as u64);
        let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (ha, hb) = (silverman_bandwidth(&a)?, silverman_bandwidth(&b)?);
        let h = ha.max(hb);
        let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
        let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
        let x = uniform_grid(lo, hi, GRID_POINTS);
        let p = Density {
            p: kde_at(&a, ha, &x),
            x: x.clone(),
            bandwidth: ha,
        };
        values.push(kld(&p, &kde_at(&b, hb, &x))?);
    }
    Ok(quantile(&values, level))
}
