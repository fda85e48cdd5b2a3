//! Monte-Carlo estimates of the process approximation error (`ε_M`, `E_M`)
//! and of the surrogate error (`ε_U`, `E_U`).
//!
//! Every sample `s` draws from its own stream `(seed, s)`, so estimates for
//! different truncations, references or surrogates computed with the same
//! seed are paired.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{DiffusionModel, ForwardModel, Outputs};
use crate::kernels::{assemble_cov_matrix, HyperParams, HyperPrior, Kernel};
use crate::kl::{decompose, inner_product, orient, reconstruct, KLBasis};
use crate::pce::PCSurrogate;
use crate::quadrature::trapezoid_tabulated;
use crate::random::stream_rng;
use crate::transform::projection_coeffs;

pub const MIN_SAMPLES: usize = 100;
pub const DEFAULT_PROCESS_SAMPLES: usize = 2000;
pub const DEFAULT_SURROGATE_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub value: f64,
    pub se: f64,
    pub n_mc: usize,
}

impl ErrorEstimate {
    /// `√mean(e²)` with a delta-method standard error.
    pub fn from_squared(sq: &[f64]) -> Self {
        let n = sq.len();
        let mean = sq.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let value = mean.max(0.0).sqrt();
        let se = if value > 0.0 {
            (var / n as f64).sqrt() / (2.0 * value)
        } else {
            0.0
        };
        ErrorEstimate { value, se, n_mc: n }
    }

    /// `√(Σ a / Σ b)` with a delta-method standard error for the ratio.
    pub fn from_ratio(pairs: &[(f64, f64)]) -> Self {
        let n = pairs.len();
        let a = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let b = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let r = if b > 0.0 { a / b } else { 0.0 };
        let var = if n > 1 {
            pairs.iter().map(|p| (p.0 - r * p.1).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let se_r = if b > 0.0 { (var / n as f64).sqrt() / b } else { 0.0 };
        let value = r.max(0.0).sqrt();
        let se = if value > 0.0 { se_r / (2.0 * value) } else { 0.0 };
        ErrorEstimate { value, se, n_mc: n }
    }
}

/// One row of an exported error curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub abscissa: f64,
    pub reference: String,
    pub error: f64,
    pub se: f64,
    pub n_mc: usize,
    pub seed: u64,
}

fn check_samples(n_mc: usize) -> Result<()> {
    if n_mc < MIN_SAMPLES {
        return Err(Error::config(format!(
            "need at least {MIN_SAMPLES} Monte-Carlo samples, got {n_mc}"
        )));
    }
    Ok(())
}

/// Draws `q` and a realization of `M(q)` from the complete grid spectrum.
struct Realization {
    q: HyperParams,
    /// Complete basis of `C(q)`, oriented against the reference.
    basis: KLBasis,
    z: Vec<f64>,
    field: Vec<f64>,
}

fn realize(kernel: &Kernel, prior: &HyperPrior, reference: &KLBasis, seed: u64, s: usize) -> Result<Realization> {
    let mut rng = stream_rng(seed, s as u64);
    let q = prior.sample(&mut rng);
    let n = reference.n_cells();
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let cov = assemble_cov_matrix(kernel, &reference.grid, &q)?;
    let basis = orient(&decompose(&cov, n)?, reference)?;
    let field = reconstruct(&basis, &z)?.values;
    Ok(Realization { q, basis, z, field })
}

/// `‖M − M̂_K‖²_X / σ_f²` for each truncation in `ks` against `reference`.
fn process_errors(r: &Realization, reference: &KLBasis, ks: &[usize]) -> Result<Vec<f64>> {
    let grid = &reference.grid;
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Ok(inner_product(grid, &r.field, &r.field) / r.q.sigma_f2);
            }
            let reference_k = reference.truncated(k)?;
            let t = projection_coeffs(&r.basis.truncated(k)?, &reference_k)?;
            let eta_hat = &t.b * DVector::from_column_slice(&r.z[..k]);
            let approx = &reference_k.modes * eta_hat;
            let diff: Vec<f64> = r.field.iter().zip(approx.iter()).map(|(a, b)| a - b).collect();
            Ok(inner_product(grid, &diff, &diff) / r.q.sigma_f2)
        })
        .collect()
}

fn validate_truncations(ks: &[usize], references: &[&KLBasis]) -> Result<()> {
    for r in references {
        for &k in ks {
            if k > r.n_cells() {
                return Err(Error::config(format!(
                    "truncation {k} exceeds grid size {}",
                    r.n_cells()
                )));
            }
            if k > r.k() {
                return Err(Error::config(format!(
                    "truncation {k} exceeds the {} reference modes",
                    r.k()
                )));
            }
        }
    }
    if references.windows(2).any(|w| w[0].grid != w[1].grid) {
        return Err(Error::config("references must share a grid"));
    }
    Ok(())
}

/// Per-sample squared relative errors, indexed `[reference][k][sample]`.
pub fn process_error_samples(
    kernel: &Kernel,
    prior: &HyperPrior,
    ks: &[usize],
    references: &[&KLBasis],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_samples(n_mc)?;
    prior.validate()?;
    validate_truncations(ks, references)?;
    let Some(first) = references.first() else {
        return Ok(Vec::new());
    };
    let per_sample: Vec<Vec<Vec<f64>>> = (0..n_mc)
        .into_par_iter()
        .map(|s| {
            let r = realize(kernel, prior, first, seed, s)?;
            references
                .iter()
                .map(|reference| {
                    // Orientation does not change the error; only the reference
                    // basis truncation matters.
                    process_errors(&r, reference, ks)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..references.len())
        .map(|ri| {
            (0..ks.len())
                .map(|ki| per_sample.iter().map(|s| s[ri][ki]).collect())
                .collect()
        })
        .collect())
}

/// `ε_M(q)` for each truncation in `ks`.
pub fn eps_m(
    kernel: &Kernel,
    q: &HyperParams,
    ks: &[usize],
    reference: &KLBasis,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<ErrorEstimate>> {
    q.validate()?;
    let prior = HyperPrior::point_mass(*q);
    let samples = process_error_samples(kernel, &prior, ks, &[reference], n_mc, seed)?;
    Ok(finish_process(ks, &samples[0]))
}

/// `E_M` for each truncation in `ks` and each reference, indexed
/// `[reference][k]`.
pub fn e_m(
    kernel: &Kernel,
    prior: &HyperPrior,
    ks: &[usize],
    references: &[&KLBasis],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<ErrorEstimate>>> {
    let samples = process_error_samples(kernel, prior, ks, references, n_mc, seed)?;
    Ok(samples.iter().map(|per_k| finish_process(ks, per_k)).collect())
}

fn finish_process(ks: &[usize], per_k: &[Vec<f64>]) -> Vec<ErrorEstimate> {
    ks.iter()
        .zip(per_k)
        .map(|(&k, sq)| {
            if k == 0 {
                // The zero approximation leaves the whole process, whose norm
                // is exactly σ_f.
                ErrorEstimate {
                    value: 1.0,
                    se: 0.0,
                    n_mc: sq.len(),
                }
            } else {
                ErrorEstimate::from_squared(sq)
            }
        })
        .collect()
}

/// `∫_0^T ∫_0^1 u² dx dt` for a full-field output vector: P1 mass matrix in
/// space, trapezoid rule over the emitted levels in time.
pub fn space_time_norm2(values: &[f64], n_elems: usize, times: &[f64]) -> Result<f64> {
    let n_nodes = n_elems + 1;
    Error::check_dim(n_nodes * times.len(), values.len())?;
    let h = 1.0 / n_elems as f64;
    let per_level: Vec<f64> = values
        .chunks_exact(n_nodes)
        .map(|u| {
            u.windows(2)
                .map(|e| h / 3.0 * (e[0] * e[0] + e[0] * e[1] + e[1] * e[1]))
                .sum()
        })
        .collect();
    Ok(trapezoid_tabulated(times, &per_level))
}

/// Per-sample `(‖U − Ũ‖², ‖U‖²)` for each surrogate, indexed
/// `[surrogate][sample]`. All surrogates must emit the model's full field and
/// share the reference basis.
pub fn surrogate_error_samples(
    kernel: &Kernel,
    prior: &HyperPrior,
    model: &DiffusionModel,
    reference: &KLBasis,
    surrogates: &[&PCSurrogate],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    check_samples(n_mc)?;
    prior.validate()?;
    if !matches!(model.outputs, Outputs::FullField { .. }) {
        return Err(Error::config("surrogate error needs a full-field model"));
    }
    for s in surrogates {
        s.check_reference(reference)?;
        if s.n_outputs != model.n_outputs() {
            return Err(Error::config(format!(
                "surrogate emits {} outputs, forward configuration {}",
                s.n_outputs,
                model.n_outputs()
            )));
        }
    }
    let times = model.field_times();
    let n_elems = model.cfg.n_elems;
    let k = reference.k();
    let per_sample: Vec<Vec<(f64, f64)>> = (0..n_mc)
        .into_par_iter()
        .map(|s| {
            let r = realize(kernel, prior, reference, seed, s)?;
            let exact = model.evaluate(&crate::kl::FieldSample {
                values: r.field.clone(),
            })?;
            let den = space_time_norm2(&exact, n_elems, &times)?;
            let t = projection_coeffs(&r.basis.truncated(k)?, reference)?;
            surrogates
                .iter()
                .map(|sur| {
                    let t = t.clone().with_kappa(sur.kappa)?;
                    let xi = crate::transform::xi_transform(&r.z[..k], &t)?;
                    let approx = sur.eval(&xi)?;
                    let diff: Vec<f64> = exact.iter().zip(&approx).map(|(a, b)| a - b).collect();
                    Ok((space_time_norm2(&diff, n_elems, &times)?, den))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..surrogates.len())
        .map(|i| per_sample.iter().map(|s| s[i]).collect())
        .collect())
}

/// `ε_U(q)` (point-mass prior) or `E_U` for each surrogate.
pub fn surrogate_error(
    kernel: &Kernel,
    prior: &HyperPrior,
    model: &DiffusionModel,
    reference: &KLBasis,
    surrogates: &[&PCSurrogate],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<ErrorEstimate>> {
    let samples = surrogate_error_samples(kernel, prior, model, reference, surrogates, n_mc, seed)?;
    Ok(samples.iter().map(|s| ErrorEstimate::from_ratio(s)).collect())
}
