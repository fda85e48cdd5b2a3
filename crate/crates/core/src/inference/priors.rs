use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{HyperParams, HyperPrior, LengthPrior, VariancePrior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Uniform length scale, inverse-Gamma variance, Jeffreys noise variance and
/// standard normal KL coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub l_min: f64,
    pub l_max: f64,
    pub variance_shape: f64,
    pub variance_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            l_min: 0.1,
            l_max: 1.0,
            variance_shape: 3.0,
            variance_scale: 1.0,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_min > 0.0 && self.l_max > self.l_min) {
            return Err(Error::config("length-scale prior needs 0 < l_min < l_max"));
        }
        if !(self.variance_shape > 0.0 && self.variance_scale > 0.0) {
            return Err(Error::config("inverse-Gamma prior needs positive shape and scale"));
        }
        Ok(())
    }

    /// The hyper-parameter prior as a distribution over `q`.
    pub fn hyper_prior(&self) -> HyperPrior {
        HyperPrior::Product {
            length: LengthPrior::Uniform {
                min: self.l_min,
                max: self.l_max,
            },
            variance: VariancePrior::InverseGamma {
                shape: self.variance_shape,
                scale: self.variance_scale,
            },
        }
    }

    pub fn log_length(&self, l: f64) -> f64 {
        if l >= self.l_min && l <= self.l_max {
            -(self.l_max - self.l_min).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn log_variance(&self, s: f64) -> f64 {
        if !(s > 0.0) || !s.is_finite() {
            return f64::NEG_INFINITY;
        }
        let (a, b) = (self.variance_shape, self.variance_scale);
        a * b.ln() - libm::lgamma(a) - (a + 1.0) * s.ln() - b / s
    }

    pub fn variance_mean(&self) -> f64 {
        self.variance_scale / (self.variance_shape - 1.0)
    }

    pub fn variance_variance(&self) -> f64 {
        let a = self.variance_shape;
        self.variance_scale.powi(2) / ((a - 1.0).powi(2) * (a - 2.0))
    }

    pub fn log_hyper(&self, q: &HyperParams) -> f64 {
        self.log_length(q.l) + self.log_variance(q.sigma_f2)
    }
}

/// Improper Jeffreys prior `∝ 1/σ_o²`, as a log-density up to a constant.
pub fn log_jeffreys(sigma_o2: f64) -> f64 {
    if sigma_o2 > 0.0 && sigma_o2.is_finite() {
        -sigma_o2.ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub fn log_std_normal(eta: &[f64]) -> f64 {
    -0.5 * eta.iter().map(|e| e * e).sum::<f64>() - 0.5 * eta.len() as f64 * LN_2PI
}
