//! Surrogate-accelerated log-posterior over `(η, q, σ_o²)`.
//!
//! The sampler works on `θ = (η_1..η_K, l, ln σ_f², ln σ_o²)`; the log target
//! is the log-posterior plus the log-Jacobian of the two log transforms.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::priors::{log_jeffreys, log_std_normal, Priors};
use crate::error::{Error, Result};
use crate::kernels::{HyperParams, Kernel};
use crate::pce::PCSurrogate;
use crate::transform::{xi_transform, CoordinateTransform, TransformFactory};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub eta: Vec<f64>,
    pub q: HyperParams,
    pub sigma_o2: f64,
}

impl PosteriorState {
    pub fn to_theta(&self) -> Vec<f64> {
        let mut t = self.eta.clone();
        t.extend([self.q.l, self.q.sigma_f2.ln(), self.sigma_o2.ln()]);
        t
    }

    pub fn from_theta(theta: &[f64]) -> Self {
        let k = theta.len() - 3;
        PosteriorState {
            eta: theta[..k].to_vec(),
            q: HyperParams {
                l: theta[k],
                sigma_f2: theta[k + 1].exp(),
            },
            sigma_o2: theta[k + 2].exp(),
        }
    }
}

/// Whether the covariance hyper-parameters are inferred or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum HyperMode {
    Fixed { q: HyperParams },
    Hyper,
}

/// Transforms tabulated on a length-scale grid at unit variance. Only valid
/// for the squared-exponential kernel, where `B(l, σ_f²) = σ_f B(l, 1)`.
#[derive(Debug, Clone)]
pub struct LengthGridCache {
    lengths: Vec<f64>,
    unit: Vec<CoordinateTransform>,
}

impl LengthGridCache {
    pub fn new(factory: &TransformFactory, l_min: f64, l_max: f64, n: usize) -> Result<Self> {
        if factory.kernel != Kernel::SquaredExponential {
            return Err(Error::config(
                "length-grid cache requires the squared-exponential kernel",
            ));
        }
        if n < 2 {
            return Err(Error::config("length-grid cache needs at least two nodes"));
        }
        let lengths: Vec<f64> = (0..n)
            .map(|i| l_min + (l_max - l_min) * i as f64 / (n - 1) as f64)
            .collect();
        let unit = lengths
            .iter()
            .map(|&l| factory.build(&HyperParams::new(l, 1.0)?))
            .collect::<Result<_>>()?;
        Ok(LengthGridCache { lengths, unit })
    }

    fn lookup(&self, q: &HyperParams) -> CoordinateTransform {
        let i = self
            .lengths
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - q.l).abs().total_cmp(&(b.1 - q.l).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut t = self.unit[i].clone();
        let s = q.sigma_f2.sqrt();
        t.b *= s;
        t.bhat *= s;
        t.q = Some(*q);
        t
    }
}

/// Log-posterior for one chain. Holds a memo of the last transform, so it is
/// deliberately not `Sync`; build one per chain.
pub struct Posterior<'a> {
    pub data: &'a [f64],
    pub surrogate: &'a PCSurrogate,
    pub factory: &'a TransformFactory,
    pub priors: Priors,
    pub mode: HyperMode,
    /// Pins the noise variance instead of inferring it.
    pub fixed_sigma_o2: Option<f64>,
    grid_cache: Option<LengthGridCache>,
    memo: RefCell<Option<(HyperParams, Rc<CoordinateTransform>)>>,
}

/// Log-densities at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_post: f64,
    pub log_target: f64,
}

impl<'a> Posterior<'a> {
    pub fn new(
        data: &'a [f64],
        surrogate: &'a PCSurrogate,
        factory: &'a TransformFactory,
        priors: Priors,
        mode: HyperMode,
    ) -> Result<Self> {
        priors.validate()?;
        surrogate.check_reference(&factory.reference)?;
        if surrogate.n_outputs != data.len() {
            return Err(Error::Dimension {
                expected: surrogate.n_outputs,
                found: data.len(),
            });
        }
        if surrogate.index.n_dim != factory.reference.k() {
            return Err(Error::Dimension {
                expected: factory.reference.k(),
                found: surrogate.index.n_dim,
            });
        }
        if let HyperMode::Fixed { q } = mode {
            q.validate()?;
        }
        Ok(Posterior {
            data,
            surrogate,
            factory,
            priors,
            mode,
            fixed_sigma_o2: None,
            grid_cache: None,
            memo: RefCell::new(None),
        })
    }

    pub fn with_fixed_noise(mut self, sigma_o2: f64) -> Result<Self> {
        if !(sigma_o2 > 0.0) {
            return Err(Error::config("pinned noise variance must be positive"));
        }
        self.fixed_sigma_o2 = Some(sigma_o2);
        Ok(self)
    }

    pub fn with_length_cache(mut self, cache: LengthGridCache) -> Self {
        self.grid_cache = Some(cache);
        self
    }

    pub fn k(&self) -> usize {
        self.factory.reference.k()
    }

    /// Sampler dimension including frozen coordinates.
    pub fn dim(&self) -> usize {
        self.k() + 3
    }

    /// Coordinates the sampler must leave untouched.
    pub fn frozen(&self) -> Vec<bool> {
        let k = self.k();
        let mut f = vec![false; k + 3];
        if matches!(self.mode, HyperMode::Fixed { .. }) {
            f[k] = true;
            f[k + 1] = true;
        }
        f[k + 2] = self.fixed_sigma_o2.is_some();
        f
    }

    /// A starting state with `η = 0` and the given noise variance.
    pub fn initial_state(&self, sigma_o2: f64) -> PosteriorState {
        let q = match self.mode {
            HyperMode::Fixed { q } => q,
            HyperMode::Hyper => HyperParams {
                l: 0.5 * (self.priors.l_min + self.priors.l_max),
                sigma_f2: self.priors.variance_mean(),
            },
        };
        PosteriorState {
            eta: vec![0.0; self.k()],
            q,
            sigma_o2: self.fixed_sigma_o2.unwrap_or(sigma_o2),
        }
    }

    /// Transform for `q`, memoized on the last distinct `q`.
    pub fn transform(&self, q: &HyperParams) -> Result<Rc<CoordinateTransform>> {
        if let Some((cached_q, t)) = self.memo.borrow().as_ref() {
            if cached_q == q {
                return Ok(Rc::clone(t));
            }
        }
        let t = Rc::new(match &self.grid_cache {
            Some(cache) => cache.lookup(q),
            None => self.factory.build(q)?,
        });
        *self.memo.borrow_mut() = Some((*q, Rc::clone(&t)));
        Ok(t)
    }

    fn pinned(&self, s: &PosteriorState) -> bool {
        let q_ok = match self.mode {
            HyperMode::Fixed { q } => s.q == q,
            HyperMode::Hyper => true,
        };
        q_ok && self.fixed_sigma_o2.is_none_or(|v| v == s.sigma_o2)
    }

    pub fn log_prior(&self, s: &PosteriorState) -> f64 {
        if s.eta.len() != self.k() || !self.pinned(s) {
            return f64::NEG_INFINITY;
        }
        let mut lp = log_std_normal(&s.eta);
        if self.mode == HyperMode::Hyper {
            lp += self.priors.log_hyper(&s.q);
        }
        if self.fixed_sigma_o2.is_none() {
            lp += log_jeffreys(s.sigma_o2);
        }
        lp
    }

    /// Surrogate predictions at the state.
    pub fn predictions(&self, s: &PosteriorState) -> Result<Vec<f64>> {
        let t = self.transform(&s.q)?;
        self.surrogate.eval(&xi_transform(&s.eta, &t)?)
    }

    /// Gaussian log-likelihood of the data; `-∞` if the transform fails.
    pub fn log_likelihood(&self, s: &PosteriorState) -> f64 {
        if !(s.sigma_o2 > 0.0) {
            return f64::NEG_INFINITY;
        }
        match self.predictions(s) {
            Ok(u) => gaussian_log_likelihood(self.data, &u, s.sigma_o2),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Log-Jacobian of `θ ↦ state` for the free log-transformed coordinates.
    pub fn log_jacobian(&self, s: &PosteriorState) -> f64 {
        let mut j = 0.0;
        if self.mode == HyperMode::Hyper {
            j += s.q.sigma_f2.ln();
        }
        if self.fixed_sigma_o2.is_none() {
            j += s.sigma_o2.ln();
        }
        j
    }

    pub fn evaluate_state(&self, s: &PosteriorState) -> Evaluation {
        let log_prior = self.log_prior(s);
        // Skip the surrogate for states outside the prior support.
        let log_likelihood = if log_prior == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.log_likelihood(s)
        };
        let log_post = log_likelihood + log_prior;
        let log_target = if log_post.is_finite() {
            log_post + self.log_jacobian(s)
        } else {
            f64::NEG_INFINITY
        };
        Evaluation {
            log_likelihood,
            log_prior,
            log_post,
            log_target,
        }
    }

    /// Decodes `θ`, substituting pinned values for frozen coordinates so
    /// that no round trip through the log transform perturbs them.
    pub fn state_from_theta(&self, theta: &[f64]) -> PosteriorState {
        let mut s = PosteriorState::from_theta(theta);
        if let HyperMode::Fixed { q } = self.mode {
            s.q = q;
        }
        if let Some(v) = self.fixed_sigma_o2 {
            s.sigma_o2 = v;
        }
        s
    }

    pub fn evaluate(&self, theta: &[f64]) -> Evaluation {
        self.evaluate_state(&self.state_from_theta(theta))
    }
}

pub fn gaussian_log_likelihood(d: &[f64], u: &[f64], sigma_o2: f64) -> f64 {
    let ssr: f64 = d.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * d.len() as f64 * (LN_2PI + sigma_o2.ln()) - ssr / (2.0 * sigma_o2)
}
