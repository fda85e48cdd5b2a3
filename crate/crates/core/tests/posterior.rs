mod common;

use common::{empty_surrogate, mean, setup, small_config, variance};
use hyperkl::config::ReferenceChoice;
use hyperkl::forward::ForwardModel;
use hyperkl::inference::{
    effective_sample_size, field_posterior_stats, gaussian_log_likelihood, run_chain, Chain, HyperMode, Posterior,
    PosteriorState, Priors,
};
use hyperkl::kernels::HyperParams;
use hyperkl::kl::reconstruct_in_reference;
use hyperkl::pce::gaussian_draw;
use hyperkl::pipeline;
use hyperkl::random::stream_rng;
use hyperkl::transform::TransformFactory;
use proptest::prelude::*;
use rand::Rng;

const LN_2PI: f64 = 1.8378770664093453;

proptest! {
    #[test]
    fn likelihood_at_zero_residual(d in prop::collection::vec(-2.0..2.0f64, 1..30), s2 in 1e-4..10.0f64) {
        let ll = gaussian_log_likelihood(&d, &d, s2);
        let n = d.len() as f64;
        prop_assert!((ll - (-0.5 * n * (LN_2PI + s2.ln()))).abs() < 1e-9 * (1.0 + ll.abs()));
    }

    #[test]
    fn doubling_residuals(
        pairs in prop::collection::vec((-2.0..2.0f64, -1.0..1.0f64), 1..30),
        s2 in 1e-3..10.0f64,
    ) {
        let d: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let u1: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
        let u2: Vec<f64> = pairs.iter().map(|p| p.0 - 2.0 * p.1).collect();
        let ssr: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let diff = gaussian_log_likelihood(&d, &u2, s2) - gaussian_log_likelihood(&d, &u1, s2);
        prop_assert!((diff + 3.0 * ssr / (2.0 * s2)).abs() < 1e-9 * (1.0 + diff.abs()));
    }
}

#[test]
fn surrogate_likelihood_tracks_direct_solver() {
    let s = setup(small_config());
    let factory = TransformFactory::new(s.cfg.kernel, s.reference.clone(), s.cfg.kl.kappa).unwrap();
    let data = s
        .model
        .evaluate(&reconstruct_in_reference(&[0.3, -0.5, 0.2], &s.reference).unwrap())
        .unwrap();
    let posterior = Posterior::new(&data, &s.surrogate, &factory, s.cfg.priors, HyperMode::Hyper).unwrap();
    let mut rng = stream_rng(11, 0);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let state = PosteriorState {
            eta: gaussian_draw(3, 12, i),
            q: HyperParams::new(rng.random_range(0.3..1.0), rng.random_range(0.3..0.8)).unwrap(),
            sigma_o2: 0.01,
        };
        let t = posterior.transform(&state.q).unwrap();
        let field = reconstruct_in_reference(&t.eta_hat(&state.eta).unwrap(), &s.reference).unwrap();
        let direct = s.model.evaluate(&field).unwrap();
        let approx = posterior.predictions(&state).unwrap();
        let num: f64 = direct.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = direct.iter().map(|a| a * a).sum();
        worst = worst.max((num / den).sqrt());
        let ll_direct = gaussian_log_likelihood(&data, &direct, state.sigma_o2);
        let ll = posterior.log_likelihood(&state);
        // 12 outputs at σ² = 0.01: a 1e-2 relative output error moves the
        // log-likelihood by at most a few units.
        assert!(
            (ll - ll_direct).abs() < 5.0 + 0.05 * ll_direct.abs(),
            "{ll} vs {ll_direct}"
        );
    }
    assert!(worst < 5e-2, "worst relative prediction error {worst}");
}

#[test]
fn stored_log_posterior_is_likelihood_plus_prior() {
    let s = setup(small_config());
    let factory = TransformFactory::new(s.cfg.kernel, s.reference.clone(), s.cfg.kl.kappa).unwrap();
    let data = s
        .model
        .evaluate(&reconstruct_in_reference(&[0.5, 0.1, -0.4], &s.reference).unwrap())
        .unwrap();
    let posterior = Posterior::new(&data, &s.surrogate, &factory, s.cfg.priors, HyperMode::Hyper).unwrap();
    let mut cfg = s.cfg.mcmc.sampler.clone();
    cfg.steps = 1500;
    cfg.adapt_start = 300;
    let chain = run_chain(&posterior, &cfg, 0.05, 4).unwrap();
    assert_eq!(chain.len(), 1500);
    for (theta, &lp) in chain.theta.iter().zip(&chain.log_post).step_by(37) {
        let st = posterior.state_from_theta(theta);
        let expect = posterior.log_likelihood(&st) + posterior.log_prior(&st);
        assert!((lp - expect).abs() < 1e-9 * (1.0 + lp.abs()));
        let e = posterior.evaluate(theta);
        let jac = st.q.sigma_f2.ln() + st.sigma_o2.ln();
        assert!((e.log_target - (lp + jac)).abs() < 1e-9 * (1.0 + lp.abs()));
    }
    let rate = chain.acceptance_rate();
    assert!(rate > 0.0 && rate < 1.0);
}

#[test]
fn fixed_mode_at_reference_covariance_is_identity_transform() {
    let mut cfg = small_config();
    cfg.reference = ReferenceChoice::Fixed { l: 0.5, sigma_f2: 0.5 };
    let s = setup(cfg);
    let q = HyperParams::new(0.5, 0.5).unwrap();
    let factory = TransformFactory::new(s.cfg.kernel, s.reference.clone(), s.cfg.kl.kappa).unwrap();
    let data = vec![0.0; s.surrogate.n_outputs];
    let posterior = Posterior::new(&data, &s.surrogate, &factory, s.cfg.priors, HyperMode::Fixed { q }).unwrap();
    let t = posterior.transform(&q).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!(
                (t.bhat[(i, j)] - expect).abs() < 1e-8,
                "bhat[{i},{j}] = {}",
                t.bhat[(i, j)]
            );
        }
    }
    for i in 0..10 {
        let eta = gaussian_draw(3, 8, i);
        let state = PosteriorState {
            eta: eta.clone(),
            q,
            sigma_o2: 0.02,
        };
        let direct = s.surrogate.eval(&eta).unwrap();
        for (a, b) in posterior.predictions(&state).unwrap().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-8);
        }
    }
    // Off the pinned q the state has no prior mass.
    let other = PosteriorState {
        eta: vec![0.0; 3],
        q: HyperParams::new(0.4, 0.5).unwrap(),
        sigma_o2: 0.02,
    };
    assert_eq!(posterior.log_prior(&other), f64::NEG_INFINITY);
    // Frozen coordinates come back exactly as pinned.
    let theta = PosteriorState {
        eta: vec![0.1; 3],
        q,
        sigma_o2: 0.02,
    }
    .to_theta();
    assert_eq!(posterior.state_from_theta(&theta).q, q);
}

fn ess_se(x: &[f64]) -> f64 {
    (variance(x) / effective_sample_size(x).max(1.0)).sqrt()
}

#[test]
fn zero_data_chain_recovers_the_prior() {
    let cfg = small_config();
    let reference = pipeline::reference_basis(&cfg).unwrap();
    let surrogate = empty_surrogate(&reference);
    let factory = TransformFactory::new(cfg.kernel, reference.clone(), cfg.kl.kappa).unwrap();
    let priors = Priors::default();
    let posterior = Posterior::new(&[], &surrogate, &factory, priors, HyperMode::Hyper)
        .unwrap()
        .with_fixed_noise(0.05)
        .unwrap();
    let mut sampler = cfg.mcmc.sampler.clone();
    sampler.steps = 60_000;
    sampler.adapt_start = 2000;
    sampler.initial_sd = 0.3;
    let chain = run_chain(&posterior, &sampler, 0.05, 21).unwrap();
    let k = 3;
    for i in 0..k {
        let x = chain.retained().iter().map(|t| t[i]).collect::<Vec<_>>();
        let se = ess_se(&x);
        assert!(mean(&x).abs() < 4.0 * se + 0.02, "eta_{i} mean {}", mean(&x));
        assert!((variance(&x) - 1.0).abs() < 0.15, "eta_{i} var {}", variance(&x));
    }
    let l: Vec<f64> = chain.retained().iter().map(|t| t[k]).collect();
    let l_mean = 0.5 * (priors.l_min + priors.l_max);
    assert!(
        (mean(&l) - l_mean).abs() < 4.0 * ess_se(&l) + 0.01,
        "l mean {}",
        mean(&l)
    );
    let l_var = (priors.l_max - priors.l_min).powi(2) / 12.0;
    assert!((variance(&l) / l_var - 1.0).abs() < 0.15, "l variance {}", variance(&l));
    let sf: Vec<f64> = chain.retained().iter().map(|t| t[k + 1].exp()).collect();
    // The inverse-gamma median is a robust check with this heavy right tail.
    let mut sorted = sf.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let oracle = inverse_gamma_median(priors.variance_shape, priors.variance_scale);
    assert!(
        (median / oracle - 1.0).abs() < 0.1,
        "sigma_f2 median {median} vs {oracle}"
    );
    assert!(chain.retained().iter().all(|t| t[k + 2] == 0.05f64.ln()));
}

/// Median of InvGamma(a, b) by bisection on the regularized upper gamma,
/// summed as a series so it is independent of the library's lgamma path.
fn inverse_gamma_median(a: f64, b: f64) -> f64 {
    // P(X ≤ x) = Q(a, b/x); for integer a, Q(a, y) = e^{-y} Σ_{n<a} yⁿ/n!.
    assert_eq!(a.fract(), 0.0);
    let cdf = |x: f64| {
        let y = b / x;
        let mut term = 1.0;
        let mut sum = 0.0;
        for n in 0..a as usize {
            if n > 0 {
                term *= y / n as f64;
            }
            sum += term;
        }
        (-y).exp() * sum
    };
    let (mut lo, mut hi) = (1e-6, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn fixed_prior_posterior<'a>(
    surrogate: &'a hyperkl::pce::PCSurrogate,
    factory: &'a TransformFactory,
    q: HyperParams,
) -> Posterior<'a> {
    Posterior::new(&[], surrogate, factory, Priors::default(), HyperMode::Fixed { q })
        .unwrap()
        .with_fixed_noise(0.05)
        .unwrap()
}

/// A chain of exact prior draws, bypassing the sampler.
fn iid_chain(k: usize, q: HyperParams, n: usize, seed: u64) -> Chain {
    let theta: Vec<Vec<f64>> = (0..n as u64)
        .map(|i| {
            PosteriorState {
                eta: gaussian_draw(k, seed, i),
                q,
                sigma_o2: 0.05,
            }
            .to_theta()
        })
        .collect();
    Chain {
        log_target: theta.iter().enumerate().map(|(i, _)| -(i as f64)).collect(),
        log_post: theta.iter().enumerate().map(|(i, _)| -(i as f64)).collect(),
        accepted: vec![true; n],
        theta,
        seed,
        burn_in: 0,
        proposal_snapshots: Vec::new(),
    }
}

#[test]
fn field_stats_of_a_single_state() {
    let mut cfg = small_config();
    cfg.reference = ReferenceChoice::Fixed { l: 0.5, sigma_f2: 0.5 };
    let reference = pipeline::reference_basis(&cfg).unwrap();
    let surrogate = empty_surrogate(&reference);
    let factory = TransformFactory::new(cfg.kernel, reference.clone(), cfg.kl.kappa).unwrap();
    let q = HyperParams::new(0.5, 0.5).unwrap();
    let posterior = fixed_prior_posterior(&surrogate, &factory, q);
    let chain = iid_chain(3, q, 1, 2);
    let stats = field_posterior_stats(&posterior, &chain, &[0.05, 0.95], 1).unwrap();
    assert_eq!(stats.n_states, 1);
    let field = hyperkl::inference::field_at(&posterior, &chain.theta[0]).unwrap();
    for (name, v) in [("mean", &stats.mean), ("median", &stats.median), ("map", &stats.map)] {
        assert_eq!(v, &field, "{name}");
    }
    for (_, v) in &stats.quantiles {
        assert_eq!(v, &field);
    }
}

#[test]
fn field_spread_matches_prior_variance() {
    let mut cfg = small_config();
    cfg.reference = ReferenceChoice::Fixed { l: 0.5, sigma_f2: 0.5 };
    cfg.kl.n_cells = Some(16);
    let reference = pipeline::reference_basis(&cfg).unwrap();
    let surrogate = empty_surrogate(&reference);
    let factory = TransformFactory::new(cfg.kernel, reference.clone(), cfg.kl.kappa).unwrap();
    let q = HyperParams::new(0.5, 0.5).unwrap();
    let posterior = fixed_prior_posterior(&surrogate, &factory, q);
    let chain = iid_chain(3, q, 20_000, 5);
    let stats = field_posterior_stats(&posterior, &chain, &[0.05, 0.5, 0.95], 1).unwrap();
    // z_{0.95} of the standard normal.
    let z = 1.6448536269514722;
    for i in 0..reference.n_cells() {
        let var: f64 = (0..3)
            .map(|j| reference.eigvals[j] * reference.modes[(i, j)].powi(2))
            .sum();
        let width = stats.quantiles[2].1[i] - stats.quantiles[0].1[i];
        assert!(
            (width / (2.0 * z * var.sqrt()) - 1.0).abs() < 0.05,
            "cell {i}: width {width}, var {var}"
        );
        assert!(stats.quantiles[0].1[i] <= stats.median[i] && stats.median[i] <= stats.quantiles[2].1[i]);
        assert!(stats.mean[i].abs() < 5.0 * (var / 20_000.0).sqrt());
        assert_eq!(stats.median[i], stats.quantiles[1].1[i]);
    }
}
