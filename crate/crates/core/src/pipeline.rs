//! Orchestration of the offline (surrogate) and online (sampling) stages and
//! the error studies, with file output.
//!
//! Every file written here gets a `<name>.meta.json` sidecar holding the
//! command, the resolved configuration, its hash and the derived seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx_error::{self, ErrorPoint};
use crate::config::{ExperimentConfig, InferenceMode, ReferenceChoice};
use crate::data::{generate_observations, Dataset, TrueProfile};
use crate::error::{Error, Result};
use crate::forward::{DiffusionModel, ForwardModel, ObservationOperator, Outputs};
use crate::inference::{
    self, diagnostics, field_posterior_stats, Chain, Diagnostics, FieldStats, HyperMode, LengthGridCache, Posterior,
    PosteriorState,
};
use crate::kernels::{assemble_cov_matrix, average_kernel, Grid1D, HyperParams};
use crate::kl::{decompose, reconstruct, KLBasis};
use crate::pce::{basis_size, gaussian_draw, sample_training_set, PCSurrogate, TrainingSpec};
use crate::random::derive_seed;
use crate::transform::{stretching, TransformFactory};

pub const SURROGATE_FILE: &str = "surrogate.json";
pub const DATA_FILE: &str = "data.csv";

/// Sidecar written next to every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunMeta {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(RunMeta {
            command: command.to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            seeds: BTreeMap::new(),
            config: cfg.clone(),
            extra: BTreeMap::new(),
        })
    }

    pub fn seed(mut self, tag: &str, value: u64) -> Self {
        self.seeds.insert(tag.to_string(), value);
        self
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.extra.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn write_for(&self, file: &Path) -> Result<()> {
        std::fs::write(sidecar_path(file), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn sidecar_path(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    file.with_file_name(name)
}

pub fn seed_for(cfg: &ExperimentConfig, tag: &str) -> u64 {
    derive_seed(cfg.seed, tag)
}

/// Reference KL basis with `k` modes on `n_cells` cells.
pub fn reference_basis_on(
    cfg: &ExperimentConfig,
    choice: ReferenceChoice,
    n_cells: usize,
    k: usize,
) -> Result<KLBasis> {
    let grid = Grid1D::uniform(n_cells)?;
    let cov = match choice {
        ReferenceChoice::Averaged => {
            average_kernel(&cfg.kernel, &cfg.priors.hyper_prior(), &cfg.kl.quadrature)?.tabulate(&grid)?
        }
        ReferenceChoice::Fixed { l, sigma_f2 } => {
            assemble_cov_matrix(&cfg.kernel, &grid, &HyperParams::new(l, sigma_f2)?)?
        }
    };
    decompose(&cov, k)
}

/// The reference basis the surrogate and the sampler work in.
pub fn reference_basis(cfg: &ExperimentConfig) -> Result<KLBasis> {
    reference_basis_on(cfg, cfg.reference, cfg.kl_cells(), cfg.kl.k)
}

pub fn layout(cfg: &ExperimentConfig) -> Result<ObservationOperator> {
    ObservationOperator::uniform(cfg.data.n_x, cfg.data.n_t, cfg.solver.t_final)
}

pub fn model(cfg: &ExperimentConfig, outputs: Outputs) -> Result<DiffusionModel> {
    DiffusionModel::new(cfg.solver, layout(cfg)?, outputs)
}

fn check_desk_scale(k: usize, order: usize) -> Result<()> {
    let p = basis_size(k, order)?;
    if p > crate::config::DESK_BASIS_LIMIT {
        return Err(Error::Capacity(format!(
            "{p} basis terms for K = {k}, o = {order} exceed the limit of {}",
            crate::config::DESK_BASIS_LIMIT
        )));
    }
    Ok(())
}

/// Builds the surrogate of `model` against `reference`.
pub fn train_surrogate(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    reference: &KLBasis,
    order: usize,
) -> Result<PCSurrogate> {
    check_desk_scale(reference.k(), order)?;
    crate::pce::build_surrogate(
        model,
        reference,
        order,
        cfg.kl.kappa,
        &cfg.surrogate.training,
        seed_for(cfg, "training"),
    )
}

/// Relative ℓ₂ error of the surrogate at `n` fresh reference-measure draws:
/// aggregate `√(Σ‖Δ‖²/Σ‖u‖²)` and the worst single draw.
pub fn held_out_error(
    model: &DiffusionModel,
    reference: &KLBasis,
    surrogate: &PCSurrogate,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let per_draw: Vec<(f64, f64)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let xi = gaussian_draw(reference.k(), seed, i);
            let direct = model.evaluate(&reconstruct(reference, &xi)?)?;
            let approx = surrogate.eval(&xi)?;
            let num: f64 = direct.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = direct.iter().map(|a| a * a).sum();
            Ok((num, den))
        })
        .collect::<Result<_>>()?;
    let (num, den) = per_draw.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let worst = per_draw
        .iter()
        .map(|p| if p.1 > 0.0 { (p.0 / p.1).sqrt() } else { 0.0 })
        .fold(0.0, f64::max);
    Ok((if den > 0.0 { (num / den).sqrt() } else { 0.0 }, worst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub path: PathBuf,
    pub surrogate_hash: String,
    pub fingerprint: String,
    pub held_out_error: f64,
    pub held_out_max: f64,
    pub reused: bool,
}

fn read_meta(path: &Path) -> Result<RunMeta> {
    Ok(serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?)
}

/// Trains and writes `surrogate.json` unless an artifact for the same
/// surrogate hash is already present.
pub fn cmd_build_surrogate(cfg: &ExperimentConfig, out: &Path) -> Result<SurrogateReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let path = out.join(SURROGATE_FILE);
    let hash = cfg.surrogate_hash()?;
    if let (Ok(meta), Ok(text)) = (read_meta(&path), std::fs::read_to_string(&path)) {
        let same = meta.extra.get("surrogate_hash").and_then(|v| v.as_str()) == Some(hash.as_str());
        if same {
            let s: PCSurrogate = serde_json::from_str(&text)?;
            let get = |k: &str| meta.extra.get(k).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
            return Ok(SurrogateReport {
                path: path.clone(),
                surrogate_hash: hash,
                fingerprint: crate::digest::fingerprint(&s)?,
                held_out_error: get("held_out_error"),
                held_out_max: get("held_out_max"),
                reused: true,
            });
        }
    }
    let reference = reference_basis(cfg)?;
    let model = model(cfg, Outputs::Observations)?;
    let surrogate = train_surrogate(cfg, &model, &reference, cfg.surrogate.order)?;
    let held_seed = seed_for(cfg, "held-out");
    let (err, worst) = held_out_error(&model, &reference, &surrogate, cfg.surrogate.held_out, held_seed)?;
    std::fs::write(&path, serde_json::to_string(&surrogate)?)?;
    let fingerprint = crate::digest::fingerprint(&surrogate)?;
    RunMeta::new("build-surrogate", cfg)?
        .seed("training", seed_for(cfg, "training"))
        .seed("held-out", held_seed)
        .with("surrogate_hash", &hash)?
        .with("artifact_fingerprint", &fingerprint)?
        .with("reference_fingerprint", &surrogate.reference_fingerprint)?
        .with("held_out_error", err)?
        .with("held_out_max", worst)?
        .with("diagnostics", &surrogate.diagnostics)?
        .write_for(&path)?;
    Ok(SurrogateReport {
        path,
        surrogate_hash: hash,
        fingerprint,
        held_out_error: err,
        held_out_max: worst,
        reused: false,
    })
}

/// Loads an artifact and checks it was built for this configuration.
pub fn load_surrogate(cfg: &ExperimentConfig, path: &Path) -> Result<(PCSurrogate, KLBasis)> {
    let surrogate: PCSurrogate = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let expected = cfg.surrogate_hash()?;
    if let Ok(meta) = read_meta(path) {
        let found = meta
            .extra
            .get("surrogate_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        if found != expected {
            return Err(Error::StaleSurrogate {
                artifact: found,
                expected,
            });
        }
    }
    let reference = reference_basis(cfg)?;
    surrogate.check_reference(&reference)?;
    if surrogate.kappa != cfg.kl.kappa {
        return Err(Error::StaleSurrogate {
            artifact: format!("kappa {}", surrogate.kappa),
            expected: format!("kappa {}", cfg.kl.kappa),
        });
    }
    Ok((surrogate, reference))
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let profile = TrueProfile::of_kind(cfg.data.profile)?;
    generate_observations(
        &profile,
        &cfg.data.fine_config(&cfg.solver),
        &cfg.solver,
        cfg.data.n_x,
        cfg.data.n_t,
        cfg.data.sigma_eps2,
        seed_for(cfg, "noise"),
    )
}

pub fn cmd_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let ds = generate_dataset(cfg)?;
    let path = out.join(DATA_FILE);
    ds.save(&path)?;
    RunMeta::new("generate-data", cfg)?
        .seed("noise", ds.meta.noise_seed)
        .with("dataset", &ds.meta)?
        .write_for(&path)?;
    let truth = out.join("truth.csv");
    TrueProfile::of_kind(cfg.data.profile)?.write_csv(std::fs::File::create(&truth)?)?;
    RunMeta::new("generate-data", cfg)?.write_for(&truth)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutcome {
    pub chains: Vec<Chain>,
    /// Post-burn-in states of every chain, concatenated.
    pub pooled: Chain,
    pub diagnostics: Diagnostics,
    pub field: FieldStats,
    /// True profile averaged onto the reference cells.
    pub truth: Vec<f64>,
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl InferenceOutcome {
    /// `‖median − truth‖_X`.
    pub fn median_distance(&self) -> f64 {
        inference::grid_l2_distance(&self.field.median, &self.truth)
    }
}

fn pool(chains: &[Chain]) -> Chain {
    let mut pooled = Chain {
        theta: Vec::new(),
        log_target: Vec::new(),
        log_post: Vec::new(),
        accepted: Vec::new(),
        seed: chains.first().map_or(0, |c| c.seed),
        burn_in: 0,
        proposal_snapshots: Vec::new(),
    };
    for c in chains {
        let b = c.burn_in.min(c.len());
        pooled.theta.extend_from_slice(&c.theta[b..]);
        pooled.log_target.extend_from_slice(&c.log_target[b..]);
        pooled.log_post.extend_from_slice(&c.log_post[b..]);
        pooled.accepted.extend_from_slice(&c.accepted[b..]);
    }
    pooled
}

fn make_posterior<'a>(
    cfg: &ExperimentConfig,
    data: &'a [f64],
    surrogate: &'a PCSurrogate,
    factory: &'a TransformFactory,
    cache: Option<&LengthGridCache>,
) -> Result<Posterior<'a>> {
    let mode = match cfg.mcmc.mode {
        InferenceMode::Fixed => HyperMode::Fixed { q: cfg.mcmc.fixed_q()? },
        InferenceMode::Hyper => HyperMode::Hyper,
    };
    let mut p = Posterior::new(data, surrogate, factory, cfg.priors, mode)?;
    if data.is_empty() {
        // Without data the noise variance has an improper posterior; keep it
        // at its starting value.
        p = p.with_fixed_noise(cfg.mcmc.initial_sigma_o2)?;
    }
    if let Some(c) = cache {
        p = p.with_length_cache(c.clone());
    }
    Ok(p)
}

/// Runs the configured chains on an in-memory dataset and surrogate.
pub fn infer(
    cfg: &ExperimentConfig,
    data: &[f64],
    truth: &TrueProfile,
    surrogate: &PCSurrogate,
    reference: &KLBasis,
) -> Result<InferenceOutcome> {
    cfg.validate()?;
    surrogate.check_reference(reference)?;
    let factory = TransformFactory::new(cfg.kernel, reference.clone(), cfg.kl.kappa)?;
    let cache = if cfg.mcmc.length_cache > 0 {
        Some(LengthGridCache::new(
            &factory,
            cfg.priors.l_min,
            cfg.priors.l_max,
            cfg.mcmc.length_cache,
        )?)
    } else {
        None
    };
    let seeds: Vec<u64> = (0..cfg.mcmc.chains)
        .map(|i| seed_for(cfg, &format!("chain-{i}")))
        .collect();
    let chains: Vec<Chain> = seeds
        .par_iter()
        .map(|&seed| {
            let posterior = make_posterior(cfg, data, surrogate, &factory, cache.as_ref())?;
            inference::run_chain(&posterior, &cfg.mcmc.sampler, cfg.mcmc.initial_sigma_o2, seed)
        })
        .collect::<Result<_>>()?;
    let pooled = pool(&chains);
    let posterior = make_posterior(cfg, data, surrogate, &factory, cache.as_ref())?;
    let diagnostics = diagnostics(&posterior, &pooled, seed_for(cfg, "kld-threshold"))?;
    let field = field_posterior_stats(&posterior, &pooled, &cfg.mcmc.quantiles, cfg.mcmc.field_stride)?;
    Ok(InferenceOutcome {
        chains,
        pooled,
        diagnostics,
        field,
        truth: truth.resample(&reference.grid).values,
        k: reference.k(),
        seeds,
    })
}

fn write_chain(path: &Path, posterior: &Posterior<'_>, chain: &Chain) -> Result<()> {
    let k = posterior.k();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "accepted".into(), "log_post".into()];
    header.extend((1..=k).map(|i| format!("eta_{i}")));
    header.extend(["l".into(), "sigma_f2".into(), "sigma_o2".into()]);
    w.write_record(&header)?;
    for (i, theta) in chain.theta.iter().enumerate() {
        let s: PosteriorState = posterior.state_from_theta(theta);
        let mut row = vec![
            i.to_string(),
            u8::from(chain.accepted[i]).to_string(),
            chain.log_post[i].to_string(),
        ];
        row.extend(s.eta.iter().map(|v| v.to_string()));
        row.extend([s.q.l.to_string(), s.q.sigma_f2.to_string(), s.sigma_o2.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs inference on `out/data.csv` with `out/surrogate.json` and writes the
/// chain, diagnostics, marginal densities, divergences and profiles.
pub fn cmd_infer(cfg: &ExperimentConfig, out: &Path) -> Result<InferenceOutcome> {
    cfg.validate()?;
    let (surrogate, reference) = load_surrogate(cfg, &out.join(SURROGATE_FILE))?;
    let dataset = Dataset::load(&out.join(DATA_FILE))?;
    let truth = TrueProfile::of_kind(dataset.meta.profile)?;
    let outcome = infer(cfg, &dataset.d, &truth, &surrogate, &reference)?;

    let factory = TransformFactory::new(cfg.kernel, reference.clone(), cfg.kl.kappa)?;
    let posterior = make_posterior(cfg, &dataset.d, &surrogate, &factory, None)?;
    let mut meta = RunMeta::new("infer", cfg)?.seed("kld-threshold", seed_for(cfg, "kld-threshold"));
    for (i, s) in outcome.seeds.iter().enumerate() {
        meta = meta.seed(&format!("chain-{i}"), *s);
    }
    meta = meta.with("noise_seed", dataset.meta.noise_seed)?;

    let mut written = Vec::new();
    for (i, chain) in outcome.chains.iter().enumerate() {
        let name = if outcome.chains.len() == 1 {
            "chain.csv".to_string()
        } else {
            format!("chain-{i}.csv")
        };
        let path = out.join(name);
        write_chain(&path, &posterior, chain)?;
        written.push(path);
    }

    let diag_path = out.join("diagnostics.json");
    #[derive(Serialize)]
    struct DiagnosticsFile<'a> {
        #[serde(flatten)]
        diagnostics: &'a Diagnostics,
        median_distance: f64,
        field: &'a FieldStats,
    }
    std::fs::write(
        &diag_path,
        serde_json::to_string_pretty(&DiagnosticsFile {
            diagnostics: &outcome.diagnostics,
            median_distance: outcome.median_distance(),
            field: &outcome.field,
        })?,
    )?;
    written.push(diag_path);

    let kld_path = out.join("kld.csv");
    let mut w = csv::Writer::from_path(&kld_path)?;
    w.write_record(["coordinate", "kld", "threshold", "informed"])?;
    for (i, v) in outcome.diagnostics.kld.iter().enumerate() {
        let t = outcome.diagnostics.kld_threshold;
        w.serialize((format!("eta_{}", i + 1), v, t, u8::from(*v > t)))?;
    }
    w.flush()?;
    written.push(kld_path);

    let kde_path = out.join("kde.csv");
    let mut w = csv::Writer::from_path(&kde_path)?;
    w.write_record(["coordinate", "x", "density"])?;
    let k = outcome.k;
    let frozen = posterior.frozen();
    let mut names: Vec<String> = (1..=k).map(|i| format!("eta_{i}")).collect();
    names.extend(["l".into(), "sigma_f2".into(), "sigma_o2".into()]);
    for (i, name) in names.iter().enumerate() {
        if frozen[i] {
            continue;
        }
        let mut values = outcome.pooled.coordinate(i);
        if i > k {
            values.iter_mut().for_each(|v| *v = v.exp());
        }
        let d = inference::kde(&values)?;
        for (x, p) in d.x.iter().zip(&d.p) {
            w.serialize((name, x, p))?;
        }
    }
    w.flush()?;
    written.push(kde_path);

    let prof_path = out.join("profiles.csv");
    let mut w = csv::Writer::from_path(&prof_path)?;
    let mut header = vec!["x".to_string(), "truth".into(), "mean".into(), "median".into()];
    header.extend(outcome.field.quantiles.iter().map(|(p, _)| format!("q{p}")));
    header.push("map".into());
    w.write_record(&header)?;
    for i in 0..outcome.field.x.len() {
        let mut row = vec![
            outcome.field.x[i],
            outcome.truth[i],
            outcome.field.mean[i],
            outcome.field.median[i],
        ];
        row.extend(outcome.field.quantiles.iter().map(|(_, v)| v[i]));
        row.push(outcome.field.map[i]);
        w.serialize(row)?;
    }
    w.flush()?;
    written.push(prof_path);

    for path in &written {
        meta.write_for(path)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    EpsMVsK,
    EpsMVsL,
    EpsUVsO,
    EpsUVsK,
    StretchingVsL,
}

impl Study {
    pub const ALL: [Study; 5] = [
        Study::EpsMVsK,
        Study::EpsMVsL,
        Study::EpsUVsO,
        Study::EpsUVsK,
        Study::StretchingVsL,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Study::EpsMVsK => "eps_M_vs_K",
            Study::EpsMVsL => "eps_M_vs_l",
            Study::EpsUVsO => "eps_U_vs_o",
            Study::EpsUVsK => "eps_U_vs_K",
            Study::StretchingVsL => "stretching_vs_l",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown study '{s}'")))
    }
}

fn reference_label(choice: &ReferenceChoice) -> String {
    match choice {
        ReferenceChoice::Averaged => "averaged".into(),
        ReferenceChoice::Fixed { l, .. } => format!("l={l}"),
    }
}

/// The averaged reference followed by `C(l^r)` for each study reference length.
fn study_references(cfg: &ExperimentConfig) -> Vec<ReferenceChoice> {
    let sigma_f2 = cfg.priors.variance_mean();
    std::iter::once(ReferenceChoice::Averaged)
        .chain(
            cfg.study
                .reference_lengths
                .iter()
                .map(|&l| ReferenceChoice::Fixed { l, sigma_f2 }),
        )
        .collect()
}

pub fn run_study(cfg: &ExperimentConfig, study: Study) -> Result<Vec<ErrorPoint>> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.kl.kappa = cfg.study.kappa;
    let cfg = &cfg;
    let seed = seed_for(cfg, study.name());
    let st = &cfg.study;
    let sigma_f2 = cfg.priors.variance_mean();
    let point = |abscissa: f64, reference: String, e: approx_error::ErrorEstimate| ErrorPoint {
        abscissa,
        reference,
        error: e.value,
        se: e.se,
        n_mc: e.n_mc,
        seed,
    };
    match study {
        Study::EpsMVsK => {
            let k_max = st.ks.iter().copied().max().unwrap_or(1).min(st.process_cells);
            let choices = study_references(cfg);
            let bases = choices
                .iter()
                .map(|c| reference_basis_on(cfg, *c, st.process_cells, k_max))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&KLBasis> = bases.iter().collect();
            let table = approx_error::e_m(
                &cfg.kernel,
                &cfg.priors.hyper_prior(),
                &st.ks,
                &refs,
                st.n_mc_process,
                seed,
            )?;
            Ok(choices
                .iter()
                .zip(&table)
                .flat_map(|(c, row)| {
                    st.ks
                        .iter()
                        .zip(row)
                        .map(|(&k, e)| point(k as f64, reference_label(c), *e))
                })
                .collect())
        }
        Study::EpsMVsL => {
            let k = st.process_k;
            let basis = reference_basis_on(cfg, cfg.reference, st.process_cells, k)?;
            st.lengths
                .iter()
                .map(|&l| {
                    let e = approx_error::eps_m(
                        &cfg.kernel,
                        &HyperParams::new(l, sigma_f2)?,
                        &[k],
                        &basis,
                        st.n_mc_process,
                        seed,
                    )?;
                    Ok(point(l, reference_label(&cfg.reference), e[0]))
                })
                .collect()
        }
        Study::StretchingVsL => {
            let mut rows = Vec::new();
            for choice in study_references(cfg) {
                let basis = reference_basis_on(cfg, choice, st.process_cells, st.process_k)?;
                let factory = TransformFactory::new(cfg.kernel, basis, cfg.kl.kappa)?;
                for &l in &st.lengths {
                    let r = stretching(&factory.build(&HyperParams::new(l, sigma_f2)?)?);
                    rows.push(ErrorPoint {
                        abscissa: l,
                        reference: reference_label(&choice),
                        error: r.sqrt_beta_max(),
                        se: 0.0,
                        n_mc: 0,
                        seed,
                    });
                }
            }
            Ok(rows)
        }
        Study::EpsUVsO => {
            let reference = reference_basis(cfg)?;
            let model = model(
                cfg,
                Outputs::FullField {
                    stride: st.field_stride,
                },
            )?;
            let surrogates = nested_surrogates(cfg, &model, &reference, &st.orders)?;
            let refs: Vec<&PCSurrogate> = surrogates.iter().collect();
            let est = approx_error::surrogate_error(
                &cfg.kernel,
                &cfg.priors.hyper_prior(),
                &model,
                &reference,
                &refs,
                st.n_mc_surrogate,
                seed,
            )?;
            Ok(st
                .orders
                .iter()
                .zip(est)
                .map(|(&o, e)| point(o as f64, reference_label(&cfg.reference), e))
                .collect())
        }
        Study::EpsUVsK => {
            let model = model(
                cfg,
                Outputs::FullField {
                    stride: st.field_stride,
                },
            )?;
            st.surrogate_ks
                .iter()
                .map(|&k| {
                    let reference = reference_basis_on(cfg, cfg.reference, cfg.kl_cells(), k)?;
                    let s = train_surrogate(cfg, &model, &reference, cfg.surrogate.order)?;
                    let e = approx_error::surrogate_error(
                        &cfg.kernel,
                        &cfg.priors.hyper_prior(),
                        &model,
                        &reference,
                        &[&s],
                        st.n_mc_surrogate,
                        seed,
                    )?;
                    Ok(point(k as f64, reference_label(&cfg.reference), e[0]))
                })
                .collect()
        }
    }
}

/// Surrogates of increasing order fitted to prefixes of one training set, so
/// that lower orders reuse the solves of the highest.
pub fn nested_surrogates(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    reference: &KLBasis,
    orders: &[usize],
) -> Result<Vec<PCSurrogate>> {
    let oversampling = match cfg.surrogate.training {
        TrainingSpec::Regression { oversampling } => oversampling,
        TrainingSpec::Projection { .. } => {
            return orders
                .iter()
                .map(|&o| train_surrogate(cfg, model, reference, o))
                .collect();
        }
    };
    let size = |o: usize| -> Result<usize> {
        check_desk_scale(reference.k(), o)?;
        Ok((oversampling * basis_size(reference.k(), o)? as f64).ceil() as usize)
    };
    let largest = orders
        .iter()
        .map(|&o| size(o))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    let set = sample_training_set(model, reference, largest, seed_for(cfg, "training"))?;
    orders
        .iter()
        .map(|&o| PCSurrogate::fit(&set.prefix(size(o)?), reference, o, cfg.kl.kappa))
        .collect()
}

pub fn write_error_points(path: &Path, rows: &[ErrorPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_error_study(cfg: &ExperimentConfig, study: Study, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let rows = run_study(cfg, study)?;
    let path = out.join(format!("{}.csv", study.name()));
    write_error_points(&path, &rows)?;
    RunMeta::new("error-study", cfg)?
        .seed(study.name(), seed_for(cfg, study.name()))
        .with("study", study.name())?
        .write_for(&path)?;
    Ok(path)
}
