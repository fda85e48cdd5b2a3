#![allow(dead_code)]

use hyperkl::config::ExperimentConfig;
use hyperkl::forward::{DiffusionModel, Outputs};
use hyperkl::kl::KLBasis;
use hyperkl::pce::{PCSurrogate, TrainingSet};
use hyperkl::pipeline;

/// A configuration small enough to train in well under a second.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("desk-sin").unwrap();
    cfg.solver.n_elems = 20;
    cfg.kl.k = 3;
    cfg.surrogate.order = 3;
    cfg.surrogate.held_out = 10;
    cfg.data.n_x = 4;
    cfg.data.n_t = 3;
    cfg.data.fine_n_elems = 80;
    cfg.mcmc.sampler.steps = 4000;
    cfg.mcmc.sampler.adapt_start = 500;
    cfg
}

pub struct Setup {
    pub cfg: ExperimentConfig,
    pub reference: KLBasis,
    pub model: DiffusionModel,
    pub surrogate: PCSurrogate,
}

pub fn setup(cfg: ExperimentConfig) -> Setup {
    let reference = pipeline::reference_basis(&cfg).unwrap();
    let model = pipeline::model(&cfg, Outputs::Observations).unwrap();
    let surrogate = pipeline::train_surrogate(&cfg, &model, &reference, cfg.surrogate.order).unwrap();
    Setup {
        cfg,
        reference,
        model,
        surrogate,
    }
}

/// A surrogate with no outputs, for sampling the prior.
pub fn empty_surrogate(reference: &KLBasis) -> PCSurrogate {
    let k = reference.k();
    let xi: Vec<Vec<f64>> = (0..4 * (k + 1) as u64)
        .map(|i| hyperkl::pce::gaussian_draw(k, 3, i))
        .collect();
    let set = TrainingSet {
        outputs: vec![Vec::new(); xi.len()],
        xi,
        weights: None,
    };
    PCSurrogate::fit(&set, reference, 1, 1e-12).unwrap()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}
