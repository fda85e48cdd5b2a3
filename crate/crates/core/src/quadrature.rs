//! One-dimensional quadrature rules.
//!
//! Gauss rules are computed with the Golub–Welsch algorithm: nodes are the
//! eigen-values of the symmetric Jacobi matrix of the three-term recurrence,
//! weights the squared first components of its eigen-vectors.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

fn golub_welsch(n: usize, off_diag: impl Fn(usize) -> f64, mass: f64) -> Rule {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = off_diag(k);
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss–Legendre rule with `n` nodes on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<Rule> {
    if n == 0 {
        return Err(Error::config("quadrature rule needs at least one node"));
    }
    if !(b > a) {
        return Err(Error::config(format!("empty interval [{a}, {b}]")));
    }
    let reference = golub_welsch(
        n,
        |k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        },
        2.0,
    );
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Ok(Rule {
        nodes: reference.nodes.iter().map(|x| mid + half * x).collect(),
        weights: reference.weights.iter().map(|w| half * w).collect(),
    })
}

/// Gauss–Hermite rule for the standard normal measure (weights sum to one).
pub fn gauss_hermite(n: usize) -> Result<Rule> {
    if n == 0 {
        return Err(Error::config("quadrature rule needs at least one node"));
    }
    Ok(golub_welsch(n, |k| (k as f64).sqrt(), 1.0))
}

/// Composite trapezoid rule with `n` equispaced nodes on `[a, b]`.
pub fn trapezoid(n: usize, a: f64, b: f64) -> Result<Rule> {
    if n < 2 {
        return Err(Error::config("trapezoid rule needs at least two nodes"));
    }
    let h = (b - a) / (n - 1) as f64;
    let nodes = (0..n).map(|i| a + h * i as f64).collect();
    let weights = (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect();
    Ok(Rule { nodes, weights })
}

/// Trapezoid integral of tabulated values over (possibly non-uniform) abscissae.
pub fn trapezoid_tabulated(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(5, 0.1, 1.0).unwrap();
        // degree 9 is the exactness limit for 5 nodes
        let exact = (1.0f64.powi(10) - 0.1f64.powi(10)) / 10.0;
        assert!((rule.integrate(|x| x.powi(9)) - exact).abs() < 1e-14);
        assert!((rule.weights.iter().sum::<f64>() - 0.9).abs() < 1e-14);
    }

    #[test]
    fn hermite_moments() {
        let rule = gauss_hermite(6).unwrap();
        assert!((rule.integrate(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(rule.integrate(|x| x).abs() < 1e-14);
        assert!((rule.integrate(|x| x * x) - 1.0).abs() < 1e-13);
        assert!((rule.integrate(|x| x.powi(4)) - 3.0).abs() < 1e-12);
        assert!((rule.integrate(|x| x.powi(10)) - 945.0).abs() < 1e-9);
    }

    #[test]
    fn empty_rules_are_rejected() {
        assert!(gauss_legendre(0, 0.0, 1.0).is_err());
        assert!(gauss_hermite(0).is_err());
        assert!(trapezoid(1, 0.0, 1.0).is_err());
    }
}
