//! Hermite polynomial chaos surrogates fitted non-intrusively.
//!
//! Training inputs are standard Gaussian coordinates `ξ` in the reference KL
//! basis; each is mapped to the field `Σ √λ_k^r φ_k^r ξ_k` and pushed through
//! the forward model.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::kl::{reconstruct, KLBasis};
use crate::quadrature::gauss_hermite;
use crate::random::stream_rng;

pub const ARTIFACT_VERSION: u32 = 1;

/// Relative pivot size below which the regression matrix counts as rank
/// deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// `binomial(n + o, o)`, or a capacity error if it does not fit in `usize`.
pub fn basis_size(n: usize, o: usize) -> Result<usize> {
    let overflow = || Error::Capacity(format!("binomial({}, {o}) overflows", n as u128 + o as u128));
    let mut acc: u128 = 1;
    for i in 1..=o as u128 {
        acc = acc.checked_mul(n as u128 + i).ok_or_else(overflow)? / i;
    }
    usize::try_from(acc).map_err(|_| overflow())
}

/// All multi-indices of total degree at most `order` in graded
/// lexicographic order, stored flat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    pub n_dim: usize,
    pub order: usize,
    indices: Vec<u8>,
}

impl MultiIndexSet {
    pub fn enumerate(n_dim: usize, order: usize) -> Result<Self> {
        if n_dim == 0 {
            return Err(Error::config("multi-index dimension must be at least 1"));
        }
        if order > u8::MAX as usize {
            return Err(Error::Capacity(format!("order {order} exceeds {}", u8::MAX)));
        }
        let size = basis_size(n_dim, order)?;
        let bytes = size
            .checked_mul(n_dim)
            .ok_or_else(|| Error::Capacity(format!("{size} indices of dimension {n_dim}")))?;
        let mut indices = Vec::new();
        indices
            .try_reserve_exact(bytes)
            .map_err(|e| Error::Capacity(e.to_string()))?;
        let mut alpha = vec![0u8; n_dim];
        for degree in 0..=order {
            // Start from (degree, 0, ..., 0) and walk down lexicographically.
            alpha.fill(0);
            alpha[0] = degree as u8;
            loop {
                indices.extend_from_slice(&alpha);
                if !prev_composition(&mut alpha) {
                    break;
                }
            }
        }
        debug_assert_eq!(indices.len(), bytes);
        Ok(MultiIndexSet { n_dim, order, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.n_dim
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u8] {
        &self.indices[i * self.n_dim..(i + 1) * self.n_dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.indices.chunks_exact(self.n_dim)
    }

    /// `Ψ_α(ξ)` for every index, in set order.
    pub fn basis_row(&self, xi: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.n_dim, xi.len())?;
        let tables: Vec<Vec<f64>> = xi.iter().map(|&x| hermite_table(self.order, x)).collect();
        Ok(self
            .iter()
            .map(|alpha| alpha.iter().zip(&tables).map(|(&a, t)| t[a as usize]).product())
            .collect())
    }
}

/// Next composition of the same total in descending lexicographic order.
fn prev_composition(alpha: &mut [u8]) -> bool {
    let n = alpha.len();
    // Find the last non-zero entry that is not in the final slot.
    let Some(j) = (0..n - 1).rev().find(|&j| alpha[j] > 0) else {
        return false;
    };
    let tail: u8 = alpha[j + 1..].iter().sum();
    alpha[j] -= 1;
    alpha[j + 1..].fill(0);
    alpha[j + 1] = tail + 1;
    true
}

/// Orthonormal probabilists' Hermite values `He_n(x)/√n!`, `n = 0..=order`.
pub fn hermite_table(order: usize, x: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(order + 1);
    h.push(1.0);
    if order >= 1 {
        h.push(x);
    }
    for n in 1..order {
        let next = (x * h[n] - (n as f64).sqrt() * h[n - 1]) / ((n + 1) as f64).sqrt();
        h.push(next);
    }
    h
}

pub fn hermite_eval(alpha: &[u8], xi: &[f64]) -> Result<f64> {
    Error::check_dim(alpha.len(), xi.len())?;
    Ok(alpha
        .iter()
        .zip(xi)
        .map(|(&a, &x)| hermite_table(a as usize, x)[a as usize])
        .product())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum TrainingSpec {
    /// Least squares on `oversampling · (P + 1)` Gaussian draws.
    Regression { oversampling: f64 },
    /// Tensor Gauss–Hermite projection with `level` nodes per dimension.
    Projection { level: usize },
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec::Regression { oversampling: 3.0 }
    }
}

/// Training inputs with the corresponding forward-model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub xi: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    /// Quadrature weights; `None` for random draws.
    pub weights: Option<Vec<f64>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    /// The first `n` samples; draws are indexed by stream so prefixes of a
    /// larger set are valid training sets in their own right.
    pub fn prefix(&self, n: usize) -> TrainingSet {
        TrainingSet {
            xi: self.xi[..n.min(self.len())].to_vec(),
            outputs: self.outputs[..n.min(self.len())].to_vec(),
            weights: self.weights.as_ref().map(|w| w[..n.min(w.len())].to_vec()),
        }
    }
}

/// Standard normal draw number `index` of dimension `k` for `seed`.
pub fn gaussian_draw(k: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, index);
    (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Runs the forward model at each input, in parallel.
pub fn evaluate_model<M: ForwardModel>(model: &M, reference: &KLBasis, xi: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    xi.par_iter()
        .map(|x| model.evaluate(&reconstruct(reference, x)?))
        .collect()
}

pub fn sample_training_set<M: ForwardModel>(
    model: &M,
    reference: &KLBasis,
    n: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let xi: Vec<Vec<f64>> = (0..n as u64).map(|i| gaussian_draw(reference.k(), seed, i)).collect();
    let outputs = evaluate_model(model, reference, xi.clone())?;
    Ok(TrainingSet {
        xi,
        outputs,
        weights: None,
    })
}

pub fn tensor_training_set<M: ForwardModel>(model: &M, reference: &KLBasis, level: usize) -> Result<TrainingSet> {
    let rule = gauss_hermite(level)?;
    let k = reference.k();
    let total = (level as u128)
        .checked_pow(k as u32)
        .filter(|&t| t <= 1 << 24)
        .ok_or_else(|| Error::Capacity(format!("tensor rule with {level}^{k} nodes")))? as usize;
    let mut xi = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut digits = vec![0usize; k];
    for _ in 0..total {
        xi.push(digits.iter().map(|&d| rule.nodes[d]).collect());
        weights.push(digits.iter().map(|&d| rule.weights[d]).product());
        for d in digits.iter_mut() {
            *d += 1;
            if *d < level {
                break;
            }
            *d = 0;
        }
    }
    let outputs = evaluate_model(model, reference, xi.clone())?;
    Ok(TrainingSet {
        xi,
        outputs,
        weights: Some(weights),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    pub n_samples: usize,
    pub residual_rms: f64,
    pub max_abs_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCSurrogate {
    pub version: u32,
    pub index: MultiIndexSet,
    pub n_outputs: usize,
    /// `(P + 1) × N_o`, row-major: row `α` holds `U_α` for every output.
    pub coeffs: Vec<f64>,
    pub reference_fingerprint: String,
    pub kappa: f64,
    pub diagnostics: TrainingDiagnostics,
}

fn design_matrix(index: &MultiIndexSet, xi: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = index.len();
    let mut a = DMatrix::zeros(xi.len(), p);
    for (s, x) in xi.iter().enumerate() {
        for (j, v) in index.basis_row(x)?.into_iter().enumerate() {
            a[(s, j)] = v;
        }
    }
    Ok(a)
}

fn output_matrix(set: &TrainingSet) -> Result<DMatrix<f64>> {
    let n_out = set.n_outputs();
    let mut y = DMatrix::zeros(set.len(), n_out);
    for (s, row) in set.outputs.iter().enumerate() {
        Error::check_dim(n_out, row.len())?;
        for (j, &v) in row.iter().enumerate() {
            y[(s, j)] = v;
        }
    }
    Ok(y)
}

/// Least-squares fit through a thin QR factorization.
pub fn fit_regression(index: &MultiIndexSet, set: &TrainingSet) -> Result<(Vec<f64>, TrainingDiagnostics)> {
    let p = index.len();
    if set.len() < p {
        return Err(Error::UnderSampled {
            samples: set.len(),
            terms: p,
        });
    }
    let a = design_matrix(index, &set.xi)?;
    let y = output_matrix(set)?;
    let qr = a.clone().qr();
    let r = qr.r();
    let max_pivot = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= RANK_TOLERANCE * max_pivot) {
        return Err(Error::UnderSampled {
            samples: set.len(),
            terms: p,
        });
    }
    let qty = qr.q().transpose() * &y;
    let c = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::numeric("triangular solve failed"))?;
    let resid = &a * &c - &y;
    let diagnostics = residual_stats(&resid, set.len());
    Ok((row_major(&c), diagnostics))
}

/// Pseudo-spectral projection `U_α = Σ w_s Ψ_α(ξ_s) u(ξ_s)`.
pub fn fit_projection(index: &MultiIndexSet, set: &TrainingSet) -> Result<(Vec<f64>, TrainingDiagnostics)> {
    let w = set
        .weights
        .as_ref()
        .ok_or_else(|| Error::config("projection needs quadrature weights"))?;
    let a = design_matrix(index, &set.xi)?;
    let y = output_matrix(set)?;
    let mut aw = a.clone();
    for (s, &ws) in w.iter().enumerate() {
        aw.row_mut(s).scale_mut(ws);
    }
    let c = aw.transpose() * &y;
    let resid = &a * &c - &y;
    Ok((row_major(&c), residual_stats(&resid, set.len())))
}

fn row_major(c: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(c.len());
    for i in 0..c.nrows() {
        out.extend(c.row(i).iter().copied());
    }
    out
}

fn residual_stats(resid: &DMatrix<f64>, n_samples: usize) -> TrainingDiagnostics {
    let n = resid.len().max(1) as f64;
    TrainingDiagnostics {
        n_samples,
        residual_rms: (resid.iter().map(|r| r * r).sum::<f64>() / n).sqrt(),
        max_abs_residual: resid.iter().fold(0.0, |m, r| m.max(r.abs())),
    }
}

impl PCSurrogate {
    /// Fits a surrogate of the given order to an existing training set.
    pub fn fit(set: &TrainingSet, reference: &KLBasis, order: usize, kappa: f64) -> Result<Self> {
        let index = MultiIndexSet::enumerate(reference.k(), order)?;
        let (coeffs, diagnostics) = match set.weights {
            Some(_) => fit_projection(&index, set)?,
            None => fit_regression(&index, set)?,
        };
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::numeric("non-finite surrogate coefficient"));
        }
        Ok(PCSurrogate {
            version: ARTIFACT_VERSION,
            n_outputs: set.n_outputs(),
            index,
            coeffs,
            reference_fingerprint: reference.fingerprint(),
            kappa,
            diagnostics,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.index.len()
    }

    pub fn coeff_row(&self, alpha: usize) -> &[f64] {
        &self.coeffs[alpha * self.n_outputs..(alpha + 1) * self.n_outputs]
    }

    /// Predictions at `ξ`.
    pub fn eval(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let psi = self.index.basis_row(xi)?;
        let mut out = vec![0.0; self.n_outputs];
        for (a, &w) in psi.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.coeff_row(a)) {
                *o += w * c;
            }
        }
        Ok(out)
    }

    /// Rejects artifacts trained against a different reference basis.
    pub fn check_reference(&self, reference: &KLBasis) -> Result<()> {
        if self.version != ARTIFACT_VERSION {
            return Err(Error::StaleSurrogate {
                artifact: format!("version {}", self.version),
                expected: format!("version {ARTIFACT_VERSION}"),
            });
        }
        let expected = reference.fingerprint();
        if self.reference_fingerprint != expected {
            return Err(Error::StaleSurrogate {
                artifact: self.reference_fingerprint.clone(),
                expected,
            });
        }
        Ok(())
    }
}

/// Samples then fits.
pub fn build_surrogate<M: ForwardModel>(
    model: &M,
    reference: &KLBasis,
    order: usize,
    kappa: f64,
    spec: &TrainingSpec,
    seed: u64,
) -> Result<PCSurrogate> {
    let set = match *spec {
        TrainingSpec::Regression { oversampling } => {
            if !(oversampling >= 1.0) {
                return Err(Error::config("oversampling factor must be at least 1"));
            }
            let p = basis_size(reference.k(), order)?;
            sample_training_set(model, reference, (oversampling * p as f64).ceil() as usize, seed)?
        }
        TrainingSpec::Projection { level } => tensor_training_set(model, reference, level)?,
    };
    PCSurrogate::fit(&set, reference, order, kappa)
}
