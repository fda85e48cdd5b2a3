//! Discrete Karhunen-Loève decomposition with piecewise-constant Galerkin
//! modes.
//!
//! Modes are normalized in the cell-measure weighted inner product
//! `(u, v)_X = Σ w_i u_i v_i`. The weighted eigenproblem `C W φ = λ φ` is
//! symmetrized as `W^½ C W^½ v = λ v` with `φ = W^-½ v`, so `‖φ‖_X = ‖v‖₂ = 1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{CovMatrix, Grid1D};

/// Eigen-values below `-NEGATIVE_TOLERANCE * λ_1` are an error; the rest of
/// the negative range is round-off and is clamped to zero.
pub const NEGATIVE_TOLERANCE: f64 = 1e-10;

/// Log-field values on the cells of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub values: Vec<f64>,
}

impl FieldSample {
    pub fn zeros(n: usize) -> Self {
        FieldSample { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KLBasis {
    pub grid: Grid1D,
    /// Retained eigen-values, descending.
    pub eigvals: Vec<f64>,
    /// `N × K`; column `k` holds `φ_k` on the cells.
    pub modes: DMatrix<f64>,
    /// Sum of the complete (clamped) spectrum.
    pub full_trace: f64,
}

pub fn inner_product(grid: &Grid1D, a: &[f64], b: &[f64]) -> f64 {
    (0..grid.len()).map(|i| grid.width(i) * a[i] * b[i]).sum()
}

impl KLBasis {
    pub fn k(&self) -> usize {
        self.eigvals.len()
    }

    /// SHA-256 over the grid, eigen-values and modes; identifies the basis a
    /// surrogate was trained against.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_cells() as u64).to_le_bytes());
        h.update((self.k() as u64).to_le_bytes());
        for v in self.grid.edges().iter().chain(&self.eigvals).chain(self.modes.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn n_cells(&self) -> usize {
        self.grid.len()
    }

    pub fn mode(&self, k: usize) -> Vec<f64> {
        self.modes.column(k).iter().copied().collect()
    }

    /// Gram matrix `(φ_j, φ_k)_X`.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = DVector::from_vec(self.grid.widths());
        let weighted = DMatrix::from_fn(self.modes.nrows(), self.modes.ncols(), |i, j| w[i] * self.modes[(i, j)]);
        self.modes.transpose() * weighted
    }

    /// Same basis restricted to its first `k` modes.
    pub fn truncated(&self, k: usize) -> Result<KLBasis> {
        if k > self.k() {
            return Err(Error::Dimension {
                expected: self.k(),
                found: k,
            });
        }
        Ok(KLBasis {
            grid: self.grid.clone(),
            eigvals: self.eigvals[..k].to_vec(),
            modes: self.modes.columns(0, k).into_owned(),
            full_trace: self.full_trace,
        })
    }

    /// `Σ_k λ_k φ_k φ_kᵀ` over the retained modes.
    pub fn mercer_sum(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.modes.nrows(), self.k(), |i, k| {
            self.modes[(i, k)] * self.eigvals[k]
        });
        scaled * self.modes.transpose()
    }
}

pub fn decompose(cov: &CovMatrix, k: usize) -> Result<KLBasis> {
    let n = cov.grid.len();
    if cov.matrix.nrows() != n || cov.matrix.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            found: cov.matrix.nrows(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::Dimension { expected: n, found: k });
    }
    let scale = cov.matrix.abs().max();
    let asym = (&cov.matrix - cov.matrix.transpose()).abs().max();
    if asym > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::numeric(format!("covariance matrix is not symmetric ({asym:e})")));
    }

    let sqrt_w: Vec<f64> = cov.grid.widths().iter().map(|w| w.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |i, j| sqrt_w[i] * cov.matrix[(i, j)] * sqrt_w[j]);
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_1 = eig.eigenvalues[order[0]].max(0.0);
    let tolerance = NEGATIVE_TOLERANCE * lambda_1;

    let mut full_trace = 0.0;
    for &i in &order {
        let v = eig.eigenvalues[i];
        if v < -tolerance {
            return Err(Error::Indefinite {
                value: v,
                tolerance: -tolerance,
            });
        }
        full_trace += v.max(0.0);
    }

    let eigvals = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let modes = DMatrix::from_fn(n, k, |row, col| eig.eigenvectors[(row, order[col])] / sqrt_w[row]);
    Ok(KLBasis {
        grid: cov.grid.clone(),
        eigvals,
        modes,
        full_trace,
    })
}

/// Flips each mode so that `(φ_k, φ_k^r)_X >= 0`.
pub fn orient(basis: &KLBasis, reference: &KLBasis) -> Result<KLBasis> {
    if basis.grid != reference.grid {
        return Err(Error::config("orientation requires a shared grid"));
    }
    let mut out = basis.clone();
    let w = basis.grid.widths();
    for k in 0..basis.k().min(reference.k()) {
        let dot: f64 = (0..w.len())
            .map(|i| w[i] * basis.modes[(i, k)] * reference.modes[(i, k)])
            .sum();
        if dot < 0.0 {
            out.modes.column_mut(k).neg_mut();
        }
    }
    Ok(out)
}

/// `m = Σ_k √λ_k φ_k η_k`.
pub fn reconstruct(basis: &KLBasis, eta: &[f64]) -> Result<FieldSample> {
    Error::check_dim(basis.k(), eta.len())?;
    let coeffs = DVector::from_iterator(eta.len(), basis.eigvals.iter().zip(eta).map(|(l, e)| l.sqrt() * e));
    let m = &basis.modes * coeffs;
    Ok(FieldSample {
        values: m.iter().copied().collect(),
    })
}

/// `η_k = (m, φ_k)_X / √λ_k`, the inverse of [`reconstruct`] on the span.
pub fn project(field: &FieldSample, basis: &KLBasis) -> Result<Vec<f64>> {
    Error::check_dim(basis.n_cells(), field.len())?;
    let w = basis.grid.widths();
    (0..basis.k())
        .map(|k| {
            let lambda = basis.eigvals[k];
            if lambda <= 0.0 {
                return Err(Error::DegenerateMode(k));
            }
            let dot: f64 = (0..w.len()).map(|i| w[i] * field.values[i] * basis.modes[(i, k)]).sum();
            Ok(dot / lambda.sqrt())
        })
        .collect()
}

/// `m̂ = Σ_k φ_k^r η̂_k`; the eigen-value scaling lives in `η̂`.
pub fn reconstruct_in_reference(eta_hat: &[f64], reference: &KLBasis) -> Result<FieldSample> {
    Error::check_dim(reference.k(), eta_hat.len())?;
    let m = &reference.modes * DVector::from_column_slice(eta_hat);
    Ok(FieldSample {
        values: m.iter().copied().collect(),
    })
}
