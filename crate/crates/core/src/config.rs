//! Experiment configuration read from TOML, with named presets.
//!
//! A preset supplies a complete configuration; a config file given alongside
//! it only needs the keys it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx_error::{DEFAULT_PROCESS_SAMPLES, DEFAULT_SURROGATE_SAMPLES};
use crate::data::{ProfileKind, DEFAULT_NOISE_VARIANCE, FINE_DT, FINE_ELEMENTS};
use crate::digest::fingerprint;
use crate::error::{Error, Result};
use crate::forward::DiffusionConfig;
use crate::inference::{AdaptiveConfig, Priors};
use crate::kernels::{HyperParams, Kernel, QuadratureSpec};
use crate::pce::{basis_size, TrainingSpec};

/// Largest basis the surrogate builder will attempt.
pub const DESK_BASIS_LIMIT: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceChoice {
    /// Prior average of the covariance over the hyper-parameters.
    Averaged,
    Fixed {
        l: f64,
        sigma_f2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlConfig {
    /// Cells of the KL grid; defaults to the solver's element count.
    pub n_cells: Option<usize>,
    pub k: usize,
    pub kappa: f64,
    pub quadrature: QuadratureSpec,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig {
            n_cells: None,
            k: 6,
            kappa: 0.0,
            quadrature: QuadratureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub order: usize,
    pub training: TrainingSpec,
    pub held_out: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            order: 5,
            training: TrainingSpec::default(),
            held_out: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub profile: ProfileKind,
    pub n_x: usize,
    pub n_t: usize,
    pub sigma_eps2: f64,
    pub fine_n_elems: usize,
    pub fine_dt: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            profile: ProfileKind::Sin,
            n_x: 19,
            n_t: 13,
            sigma_eps2: DEFAULT_NOISE_VARIANCE,
            fine_n_elems: FINE_ELEMENTS,
            fine_dt: FINE_DT,
        }
    }
}

impl DataConfig {
    pub fn fine_config(&self, solver: &DiffusionConfig) -> DiffusionConfig {
        DiffusionConfig {
            n_elems: self.fine_n_elems,
            dt: self.fine_dt,
            ..*solver
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    Fixed,
    Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub mode: InferenceMode,
    /// Pinned hyper-parameters in fixed mode.
    pub fixed_l: f64,
    pub fixed_sigma_f2: f64,
    pub initial_sigma_o2: f64,
    pub chains: usize,
    pub quantiles: Vec<f64>,
    /// Stride over post-burn-in states when reconstructing field statistics.
    pub field_stride: usize,
    /// Length-grid transform cache nodes; 0 recomputes every distinct `q`.
    pub length_cache: usize,
    pub sampler: AdaptiveConfig,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            mode: InferenceMode::Hyper,
            fixed_l: 0.5,
            fixed_sigma_f2: 0.5,
            initial_sigma_o2: 0.05,
            chains: 1,
            quantiles: vec![0.05, 0.95],
            field_stride: 10,
            length_cache: 0,
            sampler: AdaptiveConfig::default(),
        }
    }
}

impl McmcConfig {
    pub fn fixed_q(&self) -> Result<HyperParams> {
        HyperParams::new(self.fixed_l, self.fixed_sigma_f2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_mc_process: usize,
    pub n_mc_surrogate: usize,
    /// KL grid and truncation for the process-error and stretching studies.
    pub process_cells: usize,
    pub process_k: usize,
    /// Row threshold for the stretching and surrogate-error studies;
    /// replaces `kl.kappa` there.
    pub kappa: f64,
    pub ks: Vec<usize>,
    pub lengths: Vec<f64>,
    pub reference_lengths: Vec<f64>,
    pub orders: Vec<usize>,
    pub surrogate_ks: Vec<usize>,
    /// Time-level stride of full-field surrogate outputs.
    pub field_stride: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_mc_process: DEFAULT_PROCESS_SAMPLES,
            n_mc_surrogate: DEFAULT_SURROGATE_SAMPLES,
            process_cells: 128,
            process_k: 15,
            kappa: 1e-12,
            ks: vec![5, 10, 15, 20, 25],
            lengths: (1..=10).map(|i| i as f64 / 10.0).collect(),
            reference_lengths: vec![0.1, 0.3, 0.5, 1.0],
            orders: (1..=5).collect(),
            surrogate_ks: vec![2, 4, 6],
            field_stride: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub kernel: Kernel,
    pub priors: Priors,
    pub reference: ReferenceChoice,
    pub kl: KlConfig,
    pub surrogate: SurrogateConfig,
    pub solver: DiffusionConfig,
    pub data: DataConfig,
    pub mcmc: McmcConfig,
    pub study: StudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            kernel: Kernel::SquaredExponential,
            priors: Priors::default(),
            reference: ReferenceChoice::Averaged,
            kl: KlConfig::default(),
            surrogate: SurrogateConfig::default(),
            solver: DiffusionConfig::default(),
            data: DataConfig::default(),
            mcmc: McmcConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

pub const PRESETS: &[&str] = &[
    "desk-sin",
    "desk-step",
    "desk-ran",
    "desk-sin-fixed",
    "desk-step-fixed",
    "desk-ran-fixed",
    "paper-sin",
    "paper-step",
    "paper-ran",
    "paper-sin-fixed",
    "paper-step-fixed",
    "paper-ran-fixed",
];

impl ExperimentConfig {
    /// Named configuration. `desk-*` runs at K = 6, o = 5 and 5·10⁴ steps;
    /// `paper-*` carries the nominal K = 15, o = 10 and 2.5·10⁵ steps, which
    /// exceeds the surrogate builder's basis limit. A `-fixed` suffix pins
    /// `q = (0.5, 0.5)` and uses `C(q)` as the reference.
    pub fn preset(name: &str) -> Result<Self> {
        let (base, fixed) = match name.strip_suffix("-fixed") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let (scale, profile) = base
            .split_once('-')
            .ok_or_else(|| Error::config(format!("unknown preset '{name}'")))?;
        let profile: ProfileKind = profile
            .parse()
            .map_err(|_| Error::config(format!("unknown preset '{name}'")))?;
        let mut cfg = ExperimentConfig::default();
        cfg.data.profile = profile;
        match scale {
            "desk" => {}
            "paper" => {
                cfg.kl.k = 15;
                cfg.surrogate.order = 10;
                cfg.mcmc.sampler.steps = 250_000;
            }
            _ => return Err(Error::config(format!("unknown preset '{name}'"))),
        }
        if fixed {
            cfg.mcmc.mode = InferenceMode::Fixed;
            cfg.reference = ReferenceChoice::Fixed {
                l: cfg.mcmc.fixed_l,
                sigma_f2: cfg.mcmc.fixed_sigma_f2,
            };
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a preset and/or a file; keys in the file override the preset.
    pub fn load(preset: Option<&str>, path: Option<&Path>) -> Result<Self> {
        let mut value = match preset {
            Some(p) => toml::Table::try_from(ExperimentConfig::preset(p)?).map_err(|e| Error::config(e.to_string()))?,
            None => toml::Table::new(),
        };
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let overlay: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
            merge(&mut value, overlay);
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        fingerprint(self)
    }

    /// Hash of everything the surrogate depends on.
    pub fn surrogate_hash(&self) -> Result<String> {
        fingerprint(&(
            &self.kernel,
            &self.priors,
            &self.reference,
            &self.kl,
            &self.surrogate,
            &self.solver,
            (self.data.n_x, self.data.n_t),
        ))
    }

    pub fn kl_cells(&self) -> usize {
        self.kl.n_cells.unwrap_or(self.solver.n_elems)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.priors.validate()?;
        self.solver.validate()?;
        if let ReferenceChoice::Fixed { l, sigma_f2 } = self.reference {
            HyperParams::new(l, sigma_f2).map_err(|e| Error::config(e.to_string()))?;
        }
        if self.kl.k == 0 || self.kl.k > self.kl_cells() {
            return Err(Error::config(format!(
                "K = {} must lie in 1..={}",
                self.kl.k,
                self.kl_cells()
            )));
        }
        if !(self.kl.kappa >= 0.0
            && self.kl.kappa.is_finite()
            && self.study.kappa >= 0.0
            && self.study.kappa.is_finite())
        {
            return Err(Error::config("kappa must be >= 0"));
        }
        if self.surrogate.order > u8::MAX as usize {
            return Err(Error::config(format!(
                "order {} exceeds {}",
                self.surrogate.order,
                u8::MAX
            )));
        }
        basis_size(self.kl.k, self.surrogate.order)?;
        if let TrainingSpec::Regression { oversampling } = self.surrogate.training {
            if !(oversampling >= 1.0) {
                return Err(Error::config("oversampling must be >= 1"));
            }
        }
        if self.data.fine_n_elems < 2 || !(self.data.fine_dt > 0.0) {
            return Err(Error::config("invalid data-generation mesh"));
        }
        if !(self.data.sigma_eps2 >= 0.0) {
            return Err(Error::config("noise variance must be >= 0"));
        }
        if self.data.n_t == 0 {
            return Err(Error::config("need at least one observation time"));
        }
        self.mcmc.sampler.validate()?;
        if self.mcmc.mode == InferenceMode::Fixed {
            self.mcmc.fixed_q().map_err(|e| Error::config(e.to_string()))?;
        }
        if !(self.mcmc.initial_sigma_o2 > 0.0) {
            return Err(Error::config("initial noise variance must be positive"));
        }
        if self.mcmc.chains == 0 {
            return Err(Error::config("need at least one chain"));
        }
        if self.mcmc.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::config("quantiles must lie in [0, 1]"));
        }
        if self.study.process_cells < 2
            || self.study.field_stride == 0
            || self.study.process_k > self.study.process_cells
        {
            return Err(Error::config("invalid study discretization"));
        }
        if self
            .study
            .lengths
            .iter()
            .chain(&self.study.reference_lengths)
            .any(|&l| !(l > 0.0))
        {
            return Err(Error::config("study length scales must be positive"));
        }
        Ok(())
    }

    /// Whether the surrogate basis is small enough to build here.
    pub fn within_desk_scale(&self) -> Result<bool> {
        Ok(basis_size(self.kl.k, self.surrogate.order)? <= DESK_BASIS_LIMIT)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
