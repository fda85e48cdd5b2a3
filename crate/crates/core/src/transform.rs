//! Change of coordinates from the native KL coordinates of `C(q)` to the
//! reference basis.
//!
//! With `Φ_i(q) = √λ_i(q) φ_i(q)` and reference modes `φ_j^r`, the matrix
//! `B[j][i] = (φ_j^r, Φ_i(q))_X` maps `η ↦ η̂ = Bη` so that
//! `Σ_j φ_j^r η̂_j` is the X-orthogonal projection of `Σ_i Φ_i η_i` onto the
//! reference span. `B̂` rescales the rows by `1/√λ_j^r` (zeroing rows whose
//! relative eigen-value is at or below `κ`) and produces the surrogate
//! coordinates `ξ = B̂η`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{assemble_cov_matrix, HyperParams, Kernel};
use crate::kl::{decompose, orient, KLBasis};

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateTransform {
    pub q: Option<HyperParams>,
    pub b: DMatrix<f64>,
    pub bhat: DMatrix<f64>,
    pub lambda_ref: Vec<f64>,
    pub kappa: f64,
    /// Number of rows of `B̂` that survive thresholding.
    pub k_pc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StretchReport {
    pub q: Option<HyperParams>,
    pub beta_max: f64,
}

impl StretchReport {
    pub fn sqrt_beta_max(&self) -> f64 {
        self.beta_max.sqrt()
    }
}

fn threshold(b: &DMatrix<f64>, lambda_ref: &[f64], kappa: f64) -> (DMatrix<f64>, usize) {
    let k = lambda_ref.len();
    let lambda_1 = lambda_ref.first().copied().unwrap_or(0.0);
    let mut bhat = DMatrix::zeros(k, b.ncols());
    let mut kept = 0;
    for j in 0..k {
        if lambda_1 > 0.0 && lambda_ref[j] / lambda_1 > kappa {
            let s = 1.0 / lambda_ref[j].sqrt();
            for i in 0..b.ncols() {
                bhat[(j, i)] = b[(j, i)] * s;
            }
            kept += 1;
        }
    }
    (bhat, kept)
}

/// Builds `B` (and `B̂` with `κ = 0`) from an oriented basis of `C(q)`.
pub fn projection_coeffs(basis_q: &KLBasis, reference: &KLBasis) -> Result<CoordinateTransform> {
    if basis_q.grid != reference.grid {
        return Err(Error::config("transform requires bases on the same grid"));
    }
    Error::check_dim(reference.k(), basis_q.k())?;
    let n = reference.n_cells();
    let k = reference.k();
    let w = reference.grid.widths();
    // weighted reference modes, N × K
    let weighted_ref = DMatrix::from_fn(n, k, |i, j| w[i] * reference.modes[(i, j)]);
    let scaled_q = DMatrix::from_fn(n, k, |i, j| basis_q.modes[(i, j)] * basis_q.eigvals[j].sqrt());
    let b = weighted_ref.transpose() * scaled_q;
    let (bhat, k_pc) = threshold(&b, &reference.eigvals, 0.0);
    Ok(CoordinateTransform {
        q: None,
        b,
        bhat,
        lambda_ref: reference.eigvals.clone(),
        kappa: 0.0,
        k_pc,
    })
}

impl CoordinateTransform {
    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::config(format!("threshold kappa must be >= 0, got {kappa}")));
        }
        let (bhat, k_pc) = threshold(&self.b, &self.lambda_ref, kappa);
        self.bhat = bhat;
        self.k_pc = k_pc;
        self.kappa = kappa;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.lambda_ref.len()
    }

    pub fn eta_hat(&self, eta: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.b.ncols(), eta.len())?;
        Ok((&self.b * DVector::from_column_slice(eta)).iter().copied().collect())
    }
}

/// `Σ² = B Bᵗ`, the covariance of `η̂` given `q`.
pub fn sigma2(t: &CoordinateTransform) -> DMatrix<f64> {
    &t.b * t.b.transpose()
}

/// Lower Cholesky factor; fails when a pivot drops below `1e-14` of the
/// largest diagonal entry.
fn cholesky(s2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = s2.nrows();
    let max_diag = (0..k).map(|i| s2[(i, i)].abs()).fold(0.0, f64::max);
    let threshold = 1e-14 * max_diag;
    let mut l = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut d = s2[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > threshold) {
            return Err(Error::SingularCovariance { pivot: d, threshold });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..k {
            let mut v = s2[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Log-density of `η̂ ~ N(0, Σ²)`.
pub fn conditional_logdensity(eta_hat: &[f64], s2: &DMatrix<f64>) -> Result<f64> {
    let k = eta_hat.len();
    if s2.nrows() != k || s2.ncols() != k {
        return Err(Error::Dimension {
            expected: k,
            found: s2.nrows(),
        });
    }
    let l = cholesky(s2)?;
    // forward substitution L z = η̂
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut v = eta_hat[i];
        for p in 0..i {
            v -= l[(i, p)] * z[p];
        }
        z[i] = v / l[(i, i)];
    }
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let log_det: f64 = 2.0 * (0..k).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(-0.5 * quad - 0.5 * log_det - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// `ξ = B̂ η`.
pub fn xi_transform(eta: &[f64], t: &CoordinateTransform) -> Result<Vec<f64>> {
    Error::check_dim(t.bhat.ncols(), eta.len())?;
    Ok((&t.bhat * DVector::from_column_slice(eta)).iter().copied().collect())
}

/// Largest eigen-value of `B̂ᵗB̂`.
pub fn stretching(t: &CoordinateTransform) -> StretchReport {
    let gram = t.bhat.transpose() * &t.bhat;
    let beta_max = SymmetricEigen::new(gram).eigenvalues.max().max(0.0);
    StretchReport { q: t.q, beta_max }
}

/// Builds oriented transforms for arbitrary `q` against a fixed reference.
#[derive(Debug, Clone)]
pub struct TransformFactory {
    pub kernel: Kernel,
    pub reference: KLBasis,
    pub kappa: f64,
}

impl TransformFactory {
    pub fn new(kernel: Kernel, reference: KLBasis, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::config(format!("threshold kappa must be >= 0, got {kappa}")));
        }
        Ok(TransformFactory {
            kernel,
            reference,
            kappa,
        })
    }

    /// Oriented KL basis of `C(q)` with the reference truncation.
    pub fn basis(&self, q: &HyperParams) -> Result<KLBasis> {
        let cov = assemble_cov_matrix(&self.kernel, &self.reference.grid, q)?;
        let basis = decompose(&cov, self.reference.k())?;
        orient(&basis, &self.reference)
    }

    pub fn build(&self, q: &HyperParams) -> Result<CoordinateTransform> {
        let basis = self.basis(q)?;
        let mut t = projection_coeffs(&basis, &self.reference)?.with_kappa(self.kappa)?;
        t.q = Some(*q);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{average_kernel, Grid1D, HyperPrior, QuadratureSpec};
    use crate::kl::{reconstruct, reconstruct_in_reference};
    use crate::random::stream_rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    const SE: Kernel = Kernel::SquaredExponential;

    fn q(l: f64, s: f64) -> HyperParams {
        HyperParams::new(l, s).unwrap()
    }

    fn se_basis(n: usize, qq: HyperParams, k: usize) -> KLBasis {
        let grid = Grid1D::uniform(n).unwrap();
        decompose(&assemble_cov_matrix(&SE, &grid, &qq).unwrap(), k).unwrap()
    }

    fn averaged_basis(n: usize, k: usize) -> KLBasis {
        let avg = average_kernel(
            &SE,
            &HyperPrior::uniform_length(0.1, 1.0, 0.5),
            &QuadratureSpec::default(),
        )
        .unwrap();
        decompose(&avg.tabulate(&Grid1D::uniform(n).unwrap()).unwrap(), k).unwrap()
    }

    #[test]
    fn same_basis_gives_diagonal_b() {
        let r = se_basis(64, q(0.3, 0.5), 8);
        let t = projection_coeffs(&r, &r).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                let expected = if i == j { r.eigvals[i].sqrt() } else { 0.0 };
                assert!((t.b[(j, i)] - expected).abs() < 1e-12);
            }
        }
        let t = t.with_kappa(0.0).unwrap();
        assert!((t.bhat.clone() - DMatrix::identity(8, 8)).abs().max() < 1e-10);
        let eta = [0.5, -1.0, 0.3, 0.0, 2.0, -0.7, 0.1, 1.1];
        let xi = xi_transform(&eta, &t).unwrap();
        for (a, b) in eta.iter().zip(&xi) {
            assert!((a - b).abs() < 1e-10);
        }
        let s = sigma2(&t);
        for j in 0..8 {
            assert!((s[(j, j)] - r.eigvals[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_reference_gives_zero_b() {
        let full = se_basis(32, q(0.3, 0.5), 32);
        let basis = full.truncated(4).unwrap();
        let mut other = full.clone();
        other.modes = full.modes.columns(4, 4).into_owned();
        other.eigvals = full.eigvals[4..8].to_vec();
        let t = projection_coeffs(&basis, &other).unwrap();
        assert!(t.b.abs().max() < 1e-12);
    }

    #[test]
    fn b_matches_brute_force_inner_products() {
        let r = averaged_basis(128, 15);
        let grid = r.grid.clone();
        let b = orient(&se_basis(128, q(0.3, 0.5), 15), &r).unwrap();
        let t = projection_coeffs(&b, &r).unwrap();
        let mut max_diff: f64 = 0.0;
        for j in 0..15 {
            for i in 0..15 {
                let mut acc = 0.0;
                for c in 0..128 {
                    acc += (grid.edges()[c + 1] - grid.edges()[c])
                        * r.modes[(c, j)]
                        * b.eigvals[i].sqrt()
                        * b.modes[(c, i)];
                }
                max_diff = max_diff.max((acc - t.b[(j, i)]).abs());
            }
        }
        assert!(max_diff < 1e-12, "{max_diff}");
    }

    #[test]
    fn column_norms_bounded_by_scaled_mode_norm() {
        let r = averaged_basis(64, 10);
        let b = orient(&se_basis(64, q(0.17, 0.8), 10), &r).unwrap();
        let t = projection_coeffs(&b, &r).unwrap();
        for i in 0..10 {
            assert!(t.b.column(i).norm() <= b.eigvals[i].sqrt() + 1e-10);
        }
    }

    #[test]
    fn reference_reconstruction_is_an_orthogonal_projection() {
        let r = averaged_basis(64, 8);
        let b = orient(&se_basis(64, q(0.15, 0.5), 8), &r).unwrap();
        let t = projection_coeffs(&b, &r).unwrap();
        let grid = &r.grid;
        let mut rng = stream_rng(3, 0);
        for _ in 0..10 {
            let eta: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mk = reconstruct(&b, &eta).unwrap();
            let mhat = reconstruct_in_reference(&t.eta_hat(&eta).unwrap(), &r).unwrap();
            let diff: Vec<f64> = mk.values.iter().zip(&mhat.values).map(|(a, c)| a - c).collect();
            let dist = crate::kl::inner_product(grid, &diff, &diff).sqrt();

            // Gram–Schmidt residual of M_K against the reference modes.
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for k in 0..8 {
                let mut v = r.mode(k);
                for u in &basis {
                    let c = crate::kl::inner_product(grid, &v, u);
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
                }
                let nrm = crate::kl::inner_product(grid, &v, &v).sqrt();
                v.iter_mut().for_each(|a| *a /= nrm);
                basis.push(v);
            }
            let mut res = mk.values.clone();
            for u in &basis {
                let c = crate::kl::inner_product(grid, &res, u);
                res.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
            let gs = crate::kl::inner_product(grid, &res, &res).sqrt();
            assert!((dist - gs).abs() < 1e-10, "{dist} vs {gs}");
        }
    }

    #[test]
    fn sigma2_is_a_gram_matrix() {
        let r = averaged_basis(64, 10);
        for l in [0.1, 0.4, 0.9] {
            let t = projection_coeffs(&orient(&se_basis(64, q(l, 0.5), 10), &r).unwrap(), &r).unwrap();
            let s = sigma2(&t);
            assert!((s.clone() - s.transpose()).abs().max() < 1e-15);
            assert!(SymmetricEigen::new(s).eigenvalues.min() >= -1e-12);
        }
    }

    #[test]
    fn sigma2_matches_monte_carlo_covariance() {
        let r = averaged_basis(32, 5);
        let t = projection_coeffs(&orient(&se_basis(32, q(0.25, 0.5), 5), &r).unwrap(), &r).unwrap();
        let s = sigma2(&t);
        let n = 100_000;
        let mut rng = stream_rng(21, 0);
        let mut acc = DMatrix::<f64>::zeros(5, 5);
        let mut acc2 = DMatrix::<f64>::zeros(5, 5);
        for _ in 0..n {
            let eta: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let h = t.eta_hat(&eta).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let p = h[i] * h[j];
                    acc[(i, j)] += p;
                    acc2[(i, j)] += p * p;
                }
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                let m = acc[(i, j)] / n as f64;
                let se = ((acc2[(i, j)] / n as f64 - m * m) / n as f64).sqrt();
                assert!((m - s[(i, j)]).abs() < 3.0 * se, "({i},{j}): {m} vs {}", s[(i, j)]);
            }
        }
    }

    #[test]
    fn conditional_logdensity_special_cases() {
        let k = 4;
        let c = -0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
        let v = conditional_logdensity(&[0.0; 4], &DMatrix::identity(4, 4)).unwrap();
        assert!((v - c).abs() < 1e-14);
        let lam = [0.3, 0.1, 0.02, 0.001];
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&lam));
        let v = conditional_logdensity(&[0.0; 4], &d).unwrap();
        let expected = c - 0.5 * lam.iter().map(|l: &f64| l.ln()).sum::<f64>();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn conditional_logdensity_matches_dense_oracle() {
        let mut rng = stream_rng(8, 0);
        for k in [2, 5, 9] {
            let a = DMatrix::<f64>::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
            let s2: DMatrix<f64> = &a * a.transpose() + DMatrix::identity(k, k) * 0.1;
            let x: Vec<f64> = (0..k).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
            let xv = DVector::from_column_slice(&x);
            let inv = s2.clone().try_inverse().unwrap();
            let det = s2.determinant();
            let oracle = -0.5 * (xv.transpose() * inv * &xv)[(0, 0)]
                - 0.5 * det.ln()
                - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
            let v = conditional_logdensity(&x, &s2).unwrap();
            assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
        }
    }

    #[test]
    fn singular_covariance_is_reported() {
        let s2 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            conditional_logdensity(&[0.0, 0.0], &s2),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn threshold_boundary() {
        let r = se_basis(32, q(0.3, 0.5), 4);
        let t = projection_coeffs(&r, &r).unwrap().with_kappa(1.0).unwrap();
        assert_eq!(t.k_pc, 0);
        assert!(xi_transform(&[1.0, 2.0, 3.0, 4.0], &t)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let t = t.with_kappa(0.999).unwrap();
        assert_eq!(t.k_pc, 1);
        let xi = xi_transform(&[1.0, 2.0, 3.0, 4.0], &t).unwrap();
        assert!((xi[0] - 1.0).abs() < 1e-10);
        assert!(xi[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stretching_of_scaled_identity() {
        let r = se_basis(16, q(0.3, 0.5), 3);
        let mut t = projection_coeffs(&r, &r).unwrap();
        t.bhat = DMatrix::identity(3, 3);
        assert!((stretching(&t).beta_max - 1.0).abs() < 1e-14);
        t.bhat = DMatrix::identity(3, 3) * 2.0;
        assert!((stretching(&t).beta_max - 4.0).abs() < 1e-13);
    }

    #[test]
    fn short_reference_keeps_stretching_bounded() {
        let r = se_basis(128, q(0.1, 0.5), 15);
        let f = TransformFactory::new(SE, r, 1e-12).unwrap();
        let worst = (0..=18)
            .map(|i| 0.1 + 0.05 * i as f64)
            .map(|l| stretching(&f.build(&q(l, 0.5)).unwrap()).sqrt_beta_max())
            .fold(0.0, f64::max);
        assert!(worst < 3.0, "{worst}");
    }

    #[test]
    fn q_marginal_of_averaged_reference_is_independent() {
        // K = N so no truncation bias enters the marginal covariance.
        let n = 10;
        let r = averaged_basis(n, n);
        let f = TransformFactory::new(SE, r.clone(), 0.0).unwrap();
        let prior = HyperPrior::uniform_length(0.1, 1.0, 0.5);
        let draws = 100_000;
        let mut rng = stream_rng(99, 0);
        let mut acc = DMatrix::<f64>::zeros(n, n);
        let mut acc2 = DMatrix::<f64>::zeros(n, n);
        let mut acc_hat = vec![0.0; n];
        let mut acc_hat2 = vec![0.0; n];
        for _ in 0..draws {
            let qq = prior.sample(&mut rng);
            let t = f.build(&qq).unwrap();
            let eta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xi = xi_transform(&eta, &t).unwrap();
            let hat = t.eta_hat(&eta).unwrap();
            for i in 0..n {
                acc_hat[i] += hat[i] * hat[i];
                acc_hat2[i] += hat[i].powi(4);
                for j in 0..n {
                    let p = xi[i] * xi[j];
                    acc[(i, j)] += p;
                    acc2[(i, j)] += p * p;
                }
            }
        }
        let nf = draws as f64;
        for i in 0..n {
            let m = acc_hat[i] / nf;
            let se = ((acc_hat2[i] / nf - m * m) / nf).sqrt();
            assert!(
                (m - r.eigvals[i]).abs() < 3.0 * se,
                "eta_hat var {i}: {m} vs {}",
                r.eigvals[i]
            );
            for j in 0..n {
                let m = acc[(i, j)] / nf;
                let se = ((acc2[(i, j)] / nf - m * m) / nf).sqrt();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((m - target).abs() < 3.0 * se, "xi ({i},{j}) = {m}, se {se}");
            }
        }
    }

    proptest! {
        #[test]
        fn raising_kappa_never_adds_components(a in 0.0f64..1.0, b in 0.0f64..1.0, l in 0.1f64..1.0) {
            let r = se_basis(32, q(0.2, 0.5), 12);
            let t = projection_coeffs(&orient(&se_basis(32, q(l, 0.5), 12), &r).unwrap(), &r).unwrap();
            let (lo, hi) = if a <= b { (a * 1e-6, b * 1e-6) } else { (b * 1e-6, a * 1e-6) };
            let t_lo = t.clone().with_kappa(lo).unwrap();
            let t_hi = t.clone().with_kappa(hi).unwrap();
            prop_assert!(t_hi.k_pc <= t_lo.k_pc);
            // thresholding never touches B or Σ²
            prop_assert_eq!(sigma2(&t_lo), sigma2(&t_hi));
            for j in t_hi.k_pc..12 {
                prop_assert!(t_hi.bhat.row(j).iter().all(|&v| v == 0.0));
            }
        }
    }
}
