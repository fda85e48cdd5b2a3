//! Bayesian inference of the KL coordinates, the covariance
//! hyper-parameters and the noise variance.

pub mod kde;
pub mod mcmc;
pub mod posterior;
pub mod priors;

use serde::{Deserialize, Serialize};

pub use kde::{kde, kld, kld_from_std_normal, kld_noise_threshold, Density};
pub use mcmc::{adaptive_metropolis, effective_sample_size, AdaptiveConfig, Chain};
pub use posterior::{gaussian_log_likelihood, HyperMode, LengthGridCache, Posterior, PosteriorState};
pub use priors::Priors;

use crate::error::{Error, Result};
use crate::kl::reconstruct_in_reference;

/// Runs one chain from `η = 0`, the prior-mean hyper-parameters and the
/// given starting noise variance.
pub fn run_chain(posterior: &Posterior<'_>, cfg: &AdaptiveConfig, initial_sigma_o2: f64, seed: u64) -> Result<Chain> {
    let init = posterior.initial_state(initial_sigma_o2).to_theta();
    let frozen = posterior.frozen();
    adaptive_metropolis(
        |theta| {
            let e = posterior.evaluate(theta);
            (e.log_target, e.log_post)
        },
        &init,
        &frozen,
        cfg,
        seed,
    )
}

/// Pointwise summaries of the reconstructed field on the reference cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    /// `(probability, profile)` for each requested quantile.
    pub quantiles: Vec<(f64, Vec<f64>)>,
    pub map: Vec<f64>,
    pub n_states: usize,
}

/// Field `Σ φ_j^r η̂_j` with `η̂ = B(q)η` at a sampler state.
pub fn field_at(posterior: &Posterior<'_>, theta: &[f64]) -> Result<Vec<f64>> {
    let s = posterior.state_from_theta(theta);
    let t = posterior.transform(&s.q)?;
    Ok(reconstruct_in_reference(&t.eta_hat(&s.eta)?, &posterior.factory.reference)?.values)
}

/// Summaries over every `stride`-th post-burn-in state.
pub fn field_posterior_stats(
    posterior: &Posterior<'_>,
    chain: &Chain,
    quantiles: &[f64],
    stride: usize,
) -> Result<FieldStats> {
    let kept = chain.retained();
    if kept.is_empty() {
        return Err(Error::config("no post-burn-in states"));
    }
    let fields: Vec<Vec<f64>> = kept
        .iter()
        .step_by(stride.max(1))
        .map(|t| field_at(posterior, t))
        .collect::<Result<_>>()?;
    let n_cells = fields[0].len();
    let n = fields.len();
    let mut mean = vec![0.0; n_cells];
    let mut median = vec![0.0; n_cells];
    let mut qs: Vec<(f64, Vec<f64>)> = quantiles.iter().map(|&p| (p, vec![0.0; n_cells])).collect();
    let mut column = vec![0.0; n];
    for i in 0..n_cells {
        for (c, f) in column.iter_mut().zip(&fields) {
            *c = f[i];
        }
        mean[i] = column.iter().sum::<f64>() / n as f64;
        median[i] = kde::quantile(&column, 0.5);
        for (p, profile) in qs.iter_mut() {
            profile[i] = kde::quantile(&column, *p);
        }
    }
    let map = field_at(posterior, &chain.theta[chain.map_index()])?;
    Ok(FieldStats {
        x: posterior.factory.reference.grid.midpoints(),
        mean,
        median,
        quantiles: qs,
        map,
        n_states: n,
    })
}

/// Chain diagnostics written next to the chain dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub acceptance_rate: f64,
    /// Divergence of each `η_k` marginal from its standard normal prior.
    pub kld: Vec<f64>,
    /// Divergence level reachable by KDE noise alone at the chain's
    /// effective sample size.
    pub kld_threshold: f64,
    pub informed_coordinates: usize,
    pub ess: Vec<f64>,
    pub map: PosteriorState,
    pub map_log_post: f64,
    pub sigma_o2_mode: Option<f64>,
    pub l_mode: Option<f64>,
    pub prob_l_above: Option<(f64, f64)>,
}

pub const THRESHOLD_REPLICATES: usize = 200;

pub fn diagnostics(posterior: &Posterior<'_>, chain: &Chain, seed: u64) -> Result<Diagnostics> {
    let k = posterior.k();
    let frozen = posterior.frozen();
    let ess: Vec<f64> = (0..k + 3)
        .map(|i| {
            if frozen[i] {
                0.0
            } else {
                effective_sample_size(&chain.coordinate(i))
            }
        })
        .collect();
    let kld = (0..k)
        .map(|i| kld_from_std_normal(&chain.coordinate(i)))
        .collect::<Result<Vec<_>>>()?;
    let mean_ess = ess[..k].iter().sum::<f64>() / k as f64;
    let kld_threshold = kld_noise_threshold(mean_ess.round().max(2.0) as usize, THRESHOLD_REPLICATES, 0.95, seed)?;
    let informed_coordinates = kld.iter().filter(|&&v| v > kld_threshold).count();
    let map_index = chain.map_index();
    let (sigma_o2_mode, l_mode, prob_l_above) = {
        let sigma = if frozen[k + 2] {
            None
        } else {
            let s: Vec<f64> = chain.coordinate(k + 2).iter().map(|v| v.exp()).collect();
            Some(kde(&s)?.mode())
        };
        if frozen[k] {
            (sigma, None, None)
        } else {
            let l = chain.coordinate(k);
            let above = l.iter().filter(|&&v| v > 0.4).count() as f64 / l.len() as f64;
            (sigma, Some(kde(&l)?.mode()), Some((0.4, above)))
        }
    };
    Ok(Diagnostics {
        acceptance_rate: chain.acceptance_rate(),
        kld,
        kld_threshold,
        informed_coordinates,
        ess,
        map: posterior.state_from_theta(&chain.theta[map_index]),
        map_log_post: chain.log_post[map_index],
        sigma_o2_mode,
        l_mode,
        prob_l_above,
    })
}

/// `‖a − b‖_X` on cells of equal width.
pub fn grid_l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let w = 1.0 / a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * w).sqrt()
}
