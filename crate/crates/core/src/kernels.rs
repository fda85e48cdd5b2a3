//! Parametrized covariance functions, their assembly on a cell grid and the
//! hyper-parameter averaged covariance.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Covariance hyper-parameters: correlation length and process variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub l: f64,
    pub sigma_f2: f64,
}

impl HyperParams {
    pub fn new(l: f64, sigma_f2: f64) -> Result<Self> {
        let q = HyperParams { l, sigma_f2 };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l.is_finite() && self.l > 0.0) {
            return Err(Error::InvalidHyperParameter(format!(
                "length scale must be positive, got {}",
                self.l
            )));
        }
        if !(self.sigma_f2.is_finite() && self.sigma_f2 > 0.0) {
            return Err(Error::InvalidHyperParameter(format!(
                "process variance must be positive, got {}",
                self.sigma_f2
            )));
        }
        Ok(())
    }
}

/// Extra terms of the composite kernel. Experimental: nothing shipped uses it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeTerms {
    /// Multiplier on the `sigma_f2`-scaled squared-exponential term.
    #[serde(default = "one")]
    pub se_weight: f64,
    #[serde(default)]
    pub sigma_d2: f64,
    #[serde(default)]
    pub sigma_b2: f64,
    #[serde(default)]
    pub sigma_n2: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Kernel {
    SquaredExponential,
    Composite(CompositeTerms),
}

impl Kernel {
    pub fn eval(&self, x: f64, xp: f64, q: &HyperParams) -> Result<f64> {
        q.validate()?;
        let r = x - xp;
        let se = q.sigma_f2 * (-(r * r) / (2.0 * q.l * q.l)).exp();
        Ok(match self {
            Kernel::SquaredExponential => se,
            Kernel::Composite(t) => {
                let nugget = if x == xp { t.sigma_n2 } else { 0.0 };
                t.se_weight * se + t.sigma_d2 * (x * xp) + t.sigma_b2 + nugget
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Kernel::Composite(t) = self {
            for (name, v) in [
                ("se_weight", t.se_weight),
                ("sigma_d2", t.sigma_d2),
                ("sigma_b2", t.sigma_b2),
                ("sigma_n2", t.sigma_n2),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::config(format!("composite kernel term {name} must be >= 0")));
                }
            }
        }
        Ok(())
    }
}

pub fn eval_kernel(kernel: &Kernel, x: f64, xp: f64, q: &HyperParams) -> Result<f64> {
    kernel.eval(x, xp, q)
}

/// Uniform cell partition of `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    edges: Vec<f64>,
}

impl Grid1D {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("grid needs at least one cell"));
        }
        let edges = (0..=n).map(|i| i as f64 / n as f64).collect();
        Ok(Grid1D { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn width(&self, i: usize) -> f64 {
        self.edges[i + 1] - self.edges[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| e[1] - e[0]).collect()
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.midpoint(i)).collect()
    }

    /// Index of the cell containing `x` (right-closed on the last cell).
    pub fn cell_of(&self, x: f64) -> usize {
        let n = self.len();
        let i = self.edges.partition_point(|&e| e <= x);
        i.saturating_sub(1).min(n - 1)
    }
}

/// Kernel values at cell midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    pub matrix: DMatrix<f64>,
    pub grid: Grid1D,
}

pub fn assemble_cov_matrix(kernel: &Kernel, grid: &Grid1D, q: &HyperParams) -> Result<CovMatrix> {
    kernel.validate()?;
    q.validate()?;
    let x = grid.midpoints();
    let n = x.len();
    let mut matrix = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = kernel.eval(x[i], x[j], q)?;
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(CovMatrix {
        matrix,
        grid: grid.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthPrior {
    Fixed(f64),
    Uniform { min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariancePrior {
    Fixed(f64),
    InverseGamma { shape: f64, scale: f64 },
}

impl VariancePrior {
    pub fn mean(&self) -> Result<f64> {
        match *self {
            VariancePrior::Fixed(v) => Ok(v),
            VariancePrior::InverseGamma { shape, scale } if shape > 1.0 => Ok(scale / (shape - 1.0)),
            VariancePrior::InverseGamma { .. } => Err(Error::config(
                "inverse-Gamma variance prior needs shape > 1 for a finite mean",
            )),
        }
    }
}

/// Prior over the covariance hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperPrior {
    /// Independent length and variance components.
    Product {
        length: LengthPrior,
        variance: VariancePrior,
    },
    /// Finite mixture of point masses, `(probability, q)`.
    Mixture(Vec<(f64, HyperParams)>),
}

impl HyperPrior {
    pub fn point_mass(q: HyperParams) -> Self {
        HyperPrior::Product {
            length: LengthPrior::Fixed(q.l),
            variance: VariancePrior::Fixed(q.sigma_f2),
        }
    }

    pub fn uniform_length(min: f64, max: f64, sigma_f2: f64) -> Self {
        HyperPrior::Product {
            length: LengthPrior::Uniform { min, max },
            variance: VariancePrior::Fixed(sigma_f2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HyperPrior::Product { length, variance } => {
                match *length {
                    LengthPrior::Fixed(l) if l > 0.0 => {}
                    LengthPrior::Uniform { min, max } if min > 0.0 && max > min => {}
                    _ => return Err(Error::config(format!("invalid length prior {length:?}"))),
                }
                match *variance {
                    VariancePrior::Fixed(v) if v > 0.0 => {}
                    VariancePrior::InverseGamma { shape, scale } if shape > 0.0 && scale > 0.0 => {}
                    _ => return Err(Error::config(format!("invalid variance prior {variance:?}"))),
                }
                Ok(())
            }
            HyperPrior::Mixture(members) => {
                if members.is_empty() {
                    return Err(Error::config("empty mixture prior"));
                }
                for (w, q) in members {
                    if !(*w >= 0.0) {
                        return Err(Error::config("mixture weights must be non-negative"));
                    }
                    q.validate()?;
                }
                if members.iter().map(|m| m.0).sum::<f64>() <= 0.0 {
                    return Err(Error::config("mixture weights sum to zero"));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperParams {
        match self {
            HyperPrior::Product { length, variance } => {
                let l = match *length {
                    LengthPrior::Fixed(l) => l,
                    LengthPrior::Uniform { min, max } => {
                        Uniform::new_inclusive(min, max).expect("validated bounds").sample(rng)
                    }
                };
                let sigma_f2 = match *variance {
                    VariancePrior::Fixed(v) => v,
                    VariancePrior::InverseGamma { shape, scale } => {
                        1.0 / Gamma::new(shape, 1.0 / scale).expect("validated shape").sample(rng)
                    }
                };
                HyperParams { l, sigma_f2 }
            }
            HyperPrior::Mixture(members) => {
                let total: f64 = members.iter().map(|m| m.0).sum();
                let mut u = rng.random::<f64>() * total;
                for (w, q) in members {
                    if u < *w {
                        return *q;
                    }
                    u -= w;
                }
                members.last().expect("non-empty mixture").1
            }
        }
    }

    /// Weighted hyper-parameter nodes whose weighted sum of `C(q)` equals the
    /// prior average. Both kernels are affine in `sigma_f2`, so the variance
    /// integral collapses onto its mean.
    pub fn weighted_nodes(&self, quad: &QuadratureSpec) -> Result<Vec<(f64, HyperParams)>> {
        self.validate()?;
        match self {
            HyperPrior::Product { length, variance } => {
                let sigma_f2 = variance.mean()?;
                match *length {
                    LengthPrior::Fixed(l) => Ok(vec![(1.0, HyperParams { l, sigma_f2 })]),
                    LengthPrior::Uniform { min, max } => {
                        let rule = quad.rule(min, max)?;
                        let width = max - min;
                        Ok(rule
                            .nodes
                            .iter()
                            .zip(&rule.weights)
                            .map(|(&l, &w)| (w / width, HyperParams { l, sigma_f2 }))
                            .collect())
                    }
                }
            }
            HyperPrior::Mixture(members) => {
                let total: f64 = members.iter().map(|m| m.0).sum();
                Ok(members.iter().map(|(w, q)| (w / total, *q)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureSpec {
    GaussLegendre { nodes: usize },
    Trapezoid { nodes: usize },
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec::GaussLegendre { nodes: 64 }
    }
}

impl QuadratureSpec {
    pub fn rule(&self, a: f64, b: f64) -> Result<quadrature::Rule> {
        match *self {
            QuadratureSpec::GaussLegendre { nodes } => quadrature::gauss_legendre(nodes, a, b),
            QuadratureSpec::Trapezoid { nodes } => quadrature::trapezoid(nodes, a, b),
        }
    }
}

/// `C̄(x, x') = ∫ C(x, x', q) p(q) dq`, held as the weighted hyper-parameter
/// nodes of the quadrature used.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedKernel {
    pub kernel: Kernel,
    pub quad: QuadratureSpec,
    pub nodes: Vec<(f64, HyperParams)>,
}

impl AveragedKernel {
    pub fn eval(&self, x: f64, xp: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (w, q) in &self.nodes {
            acc += w * self.kernel.eval(x, xp, q)?;
        }
        Ok(acc)
    }

    pub fn tabulate(&self, grid: &Grid1D) -> Result<CovMatrix> {
        let mut out: Option<DMatrix<f64>> = None;
        for (w, q) in &self.nodes {
            let c = assemble_cov_matrix(&self.kernel, grid, q)?.matrix * *w;
            out = Some(match out {
                Some(acc) => acc + c,
                None => c,
            });
        }
        let matrix = out.ok_or_else(|| Error::config("averaged kernel has no quadrature nodes"))?;
        Ok(CovMatrix {
            matrix,
            grid: grid.clone(),
        })
    }
}

pub fn average_kernel(kernel: &Kernel, prior: &HyperPrior, quad: &QuadratureSpec) -> Result<AveragedKernel> {
    kernel.validate()?;
    let nodes = prior.weighted_nodes(quad)?;
    if nodes.is_empty() {
        return Err(Error::config("empty quadrature"));
    }
    Ok(AveragedKernel {
        kernel: *kernel,
        quad: *quad,
        nodes,
    })
}
