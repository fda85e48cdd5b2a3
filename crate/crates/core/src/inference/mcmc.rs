//! Adaptive random-walk Metropolis with the Haario et al. covariance update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub steps: usize,
    /// Steps run with the initial diagonal proposal before adapting.
    pub adapt_start: usize,
    pub epsilon: f64,
    /// Proposal scale; `2.38²/d` when absent.
    pub scale: Option<f64>,
    /// Standard deviation of the initial proposal in every free coordinate.
    pub initial_sd: f64,
    pub burn_in: f64,
    /// Number of proposal-covariance snapshots kept over the run.
    pub snapshots: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            steps: 50_000,
            adapt_start: 2000,
            epsilon: 1e-8,
            scale: None,
            initial_sd: 0.02,
            burn_in: 0.2,
            snapshots: 10,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("chain needs at least one step"));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::config("burn-in fraction must lie in [0, 1)"));
        }
        if !(self.initial_sd > 0.0 && self.epsilon >= 0.0) {
            return Err(Error::config("proposal scales must be positive"));
        }
        if self.scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::config("proposal scale must be positive"));
        }
        Ok(())
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in * self.steps as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// State after each step.
    pub theta: Vec<Vec<f64>>,
    pub log_target: Vec<f64>,
    /// Auxiliary value reported by the target (the log-posterior).
    pub log_post: Vec<f64>,
    pub accepted: Vec<bool>,
    pub seed: u64,
    pub burn_in: usize,
    /// `(step, proposal covariance over free coordinates, row-major)`.
    pub proposal_snapshots: Vec<(usize, Vec<f64>)>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn retained(&self) -> &[Vec<f64>] {
        &self.theta[self.burn_in.min(self.len())..]
    }

    pub fn acceptance_rate(&self) -> f64 {
        let kept = &self.accepted[self.burn_in.min(self.len())..];
        kept.iter().filter(|&&a| a).count() as f64 / kept.len().max(1) as f64
    }

    /// Post-burn-in values of coordinate `i`.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.retained().iter().map(|t| t[i]).collect()
    }

    /// Index of the stored state with the largest log-posterior.
    pub fn map_index(&self) -> usize {
        self.log_post
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Running mean and covariance (Welford).
struct Moments {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments {
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.m2 / (self.n.max(2) - 1) as f64
    }
}

fn cholesky_with_jitter(mut c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = c.nrows();
    let mut jitter = 1e-12 * (0..d).map(|i| c[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    for _ in 0..40 {
        if let Some(ch) = c.clone().cholesky() {
            return Ok(ch.l());
        }
        for i in 0..d {
            c[(i, i)] += jitter;
        }
        jitter *= 10.0;
    }
    Err(Error::numeric("proposal covariance is not positive definite"))
}

/// Runs the chain from `init`. `target` returns `(log target, log-posterior)`;
/// coordinates flagged in `frozen` are never moved.
pub fn adaptive_metropolis<F>(
    mut target: F,
    init: &[f64],
    frozen: &[bool],
    cfg: &AdaptiveConfig,
    seed: u64,
) -> Result<Chain>
where
    F: FnMut(&[f64]) -> (f64, f64),
{
    cfg.validate()?;
    Error::check_dim(init.len(), frozen.len())?;
    let free: Vec<usize> = (0..init.len()).filter(|&i| !frozen[i]).collect();
    let d = free.len();
    let (mut current_target, mut current_post) = target(init);
    if !current_target.is_finite() {
        return Err(Error::Initialization);
    }
    let mut rng = stream_rng(seed, 0);
    let scale = cfg.scale.unwrap_or(2.38 * 2.38 / d.max(1) as f64);
    let mut chol = DMatrix::from_diagonal_element(d, d, cfg.initial_sd);
    let mut moments = Moments::new(d);
    let free_vec = |t: &[f64]| DVector::from_iterator(d, free.iter().map(|&i| t[i]));

    let mut current = init.to_vec();
    moments.push(&free_vec(&current));
    let snapshot_every = cfg.steps.checked_div(cfg.snapshots).map_or(usize::MAX, |s| s.max(1));
    let mut chain = Chain {
        theta: Vec::with_capacity(cfg.steps),
        log_target: Vec::with_capacity(cfg.steps),
        log_post: Vec::with_capacity(cfg.steps),
        accepted: Vec::with_capacity(cfg.steps),
        seed,
        burn_in: cfg.burn_in_steps(),
        proposal_snapshots: Vec::new(),
    };

    for step in 0..cfg.steps {
        if step >= cfg.adapt_start && d > 0 {
            let c = moments.covariance() * scale + DMatrix::identity(d, d) * (scale * cfg.epsilon);
            chol = cholesky_with_jitter(c)?;
        }
        if step % snapshot_every == 0 {
            let cov = &chol * chol.transpose();
            chain
                .proposal_snapshots
                .push((step, cov.transpose().iter().copied().collect()));
        }
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
        let delta = &chol * z;
        let mut proposal = current.clone();
        for (j, &i) in free.iter().enumerate() {
            proposal[i] += delta[j];
        }
        let (prop_target, prop_post) = target(&proposal);
        let u: f64 = rng.random();
        let accept =
            prop_target.is_finite() && (prop_target >= current_target || u.ln() < prop_target - current_target);
        if accept {
            current = proposal;
            current_target = prop_target;
            current_post = prop_post;
        }
        moments.push(&free_vec(&current));
        chain.theta.push(current.clone());
        chain.log_target.push(current_target);
        chain.log_post.push(current_post);
        chain.accepted.push(accept);
    }
    Ok(chain)
}

/// Effective sample size by Geyer's initial positive sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return 1.0;
    }
    let rho = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        // Enforce a monotone sequence of pair sums.
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    (n as f64 / tau.max(1.0)).min(n as f64)
}
