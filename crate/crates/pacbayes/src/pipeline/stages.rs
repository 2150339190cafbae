//! Stage implementations: sample, ti, mfvi, diagnose, certify, report.
//!
//! Stages communicate exclusively through on-disk artifacts tracked by the
//! manifest, so certificates can be recomputed without resampling, an
//! interrupted sampling run resumes at the first incomplete tempering level,
//! and each command maps directly onto one stage.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    certify, naive_kl_upper, BoundFamily, Estimator, KlSource, LossKind, RiskCertificate,
    RiskEvidence,
};
use crate::data::oracle::{make_rosenbrock_demo, ConjugateGaussian, QuadraticLoss, RosenbrockLoss};
use crate::data::{load_mnist_dir, synthetic::write_synthetic_mnist, Dataset, DatasetVariant};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::hmc::{
    calibrate_step_size, run_chains, run_exact_chains, thin, Chain, ChainSet, HmcConfig,
    TargetDescriptor,
};
use crate::mfvi::{self, MeanFieldPosterior, MfviTrainConfig};
use crate::model::{Mlp, MlpArchitecture};
use crate::pipeline::artifacts::{
    read_json, read_matrix_csv, read_sample_matrix, read_trace_csv, write_json,
    write_sample_matrix, write_table_csv, write_trace_csv, SampleHeader,
};
use crate::pipeline::config::{DataSource, ExperimentConfig, SamplePersistence, Stage, TargetSpec};
use crate::pipeline::manifest::{RunManifest, CONFIG_FILE};
use crate::rng::{purpose, stream};
use crate::target::{prior_init, DatasetLoss, GaussianPrior, LossModel, TemperedGibbsTarget};
use crate::ti::{estimate_g_from_traces, kl_from_ti, BetaGrid, GEstimate, TiEstimate};

/// A configuration bound to a run directory, with data loaded and the prior
/// constructed.
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub grid: BetaGrid,
    pub prior: GaussianPrior,
    pub loss: Arc<dyn LossModel>,
    pub kind: ResolvedKind,
}

pub enum ResolvedKind {
    Classifier {
        mlp: Mlp,
        train: Arc<Dataset>,
        test: Arc<Dataset>,
    },
    Conjugate(ConjugateGaussian),
    Rosenbrock {
        init: Vec<f64>,
    },
}

impl ResolvedExperiment {
    /// Validates the configuration, prepares the run directory (writing
    /// `config.json` and generating synthetic data when requested), loads
    /// datasets, and builds the prior.
    pub fn resolve(config: ExperimentConfig, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out_dir)?;
        let grid = match &config.beta_grid.values {
            Some(values) => BetaGrid::new(values.clone())?,
            None => BetaGrid::uniform(config.beta_grid.points)?,
        };
        let (kind, prior, loss) = match &config.target {
            TargetSpec::Classification {
                variant,
                half,
                source,
                subset,
                test_subset,
            } => {
                let variant = DatasetVariant {
                    kind: *variant,
                    half: *half,
                };
                let data_dir = match source {
                    DataSource::IdxDir { path } => path.clone(),
                    DataSource::Synthetic { n_train, n_test } => {
                        let dir = out_dir.join("data");
                        let have_all = [
                            crate::data::TRAIN_IMAGES,
                            crate::data::TRAIN_LABELS,
                            crate::data::TEST_IMAGES,
                            crate::data::TEST_LABELS,
                        ]
                        .iter()
                        .all(|f| dir.join(f).exists());
                        if !have_all {
                            write_synthetic_mnist(&dir, *n_train, *n_test, config.master_seed)?;
                        }
                        dir
                    }
                };
                let (mut train, mut test) = load_mnist_dir(&data_dir, variant)?;
                if let Some(n) = subset {
                    train = train.take(*n)?;
                }
                if let Some(n) = test_subset {
                    test = test.take(*n)?;
                }
                let widths = config
                    .architecture
                    .clone()
                    .unwrap_or_else(|| variant.default_architecture());
                let arch = MlpArchitecture::new(widths)?;
                if arch.input_dim() != train.d() || arch.class_count() != train.k {
                    return Err(Error::Shape(format!(
                        "architecture {:?} does not fit data with {} features and {} classes",
                        arch.widths(),
                        train.d(),
                        train.k
                    )));
                }
                let mlp = Mlp::new(arch.clone());
                let prior = prior_init(&arch, config.prior_variance, config.master_seed)?;
                let train = Arc::new(train);
                let test = Arc::new(test);
                let loss: Arc<dyn LossModel> = Arc::new(DatasetLoss::new(
                    mlp.clone(),
                    Arc::clone(&train),
                    config.p_min,
                )?);
                (ResolvedKind::Classifier { mlp, train, test }, prior, loss)
            }
            TargetSpec::ConjugateGaussian {
                dim,
                prior_variance,
                likelihood_width,
                center_norm,
            } => {
                let unit = 1.0 / (*dim as f64).sqrt();
                let center = vec![center_norm * unit; *dim];
                let oracle =
                    ConjugateGaussian::new(*dim, *prior_variance, *likelihood_width, center)?;
                let prior = oracle.prior();
                let loss: Arc<dyn LossModel> = Arc::new(QuadraticLoss {
                    center: oracle.center.clone(),
                    width_sq: oracle.likelihood_width,
                });
                (ResolvedKind::Conjugate(oracle), prior, loss)
            }
            TargetSpec::Rosenbrock => {
                let demo = make_rosenbrock_demo();
                let prior = demo.target.prior.clone();
                let loss: Arc<dyn LossModel> = Arc::new(RosenbrockLoss);
                (ResolvedKind::Rosenbrock { init: demo.init }, prior, loss)
            }
        };
        write_json(&out_dir.join(CONFIG_FILE), &config)?;
        Ok(Self {
            config,
            out_dir: out_dir.to_path_buf(),
            grid,
            prior,
            loss,
            kind,
        })
    }

    /// Effective `(lambda, n)` for the tempered target: the dataset scale
    /// for classifiers, unit scale for the self-scaled synthetic targets.
    fn scale_params(&self) -> (f64, usize) {
        match &self.kind {
            ResolvedKind::Classifier { train, .. } => (self.config.lambda, train.n()),
            _ => (1.0, 1),
        }
    }

    pub fn target_at(&self, beta: f64) -> Result<TemperedGibbsTarget> {
        let (lambda, n) = self.scale_params();
        TemperedGibbsTarget::new(self.prior.clone(), Arc::clone(&self.loss), beta, lambda, n)
    }

    /// Per-(level, chain) starting point: a prior draw, except for the demo
    /// target whose conventional start is fixed.
    fn chain_init(&self, beta: f64, chain_tag: u64) -> Vec<f64> {
        if let ResolvedKind::Rosenbrock { init } = &self.kind {
            return init.clone();
        }
        let mut rng = stream(
            self.config.master_seed,
            &[purpose::CHAIN_INIT, beta.to_bits(), chain_tag],
        );
        self.prior.sample(&mut rng)
    }

    fn persist_samples_at(&self, beta: f64) -> bool {
        match self.config.persist_samples {
            SamplePersistence::All => true,
            SamplePersistence::BetaOne => beta == 1.0,
            SamplePersistence::None => false,
        }
    }

    fn hmc_config(&self, step_size: f64, store_samples: bool) -> HmcConfig {
        HmcConfig {
            step_size,
            trajectory_length: self.config.hmc.trajectory_length,
            n_iterations: self.config.hmc.n_iterations,
            burn_in: self.config.hmc.burn_in,
            n_chains: self.config.hmc.n_chains,
            seed: self.config.master_seed,
            store_samples,
            coord_subset_size: self.config.hmc.coord_subset_size,
        }
    }

    fn classifier(&self) -> Result<(&Mlp, &Arc<Dataset>, &Arc<Dataset>)> {
        match &self.kind {
            ResolvedKind::Classifier { mlp, train, test } => Ok((mlp, train, test)),
            _ => Err(Error::Dependency(
                "this stage needs a classification target (certificates and the variational \
                 baseline are defined on datasets)"
                    .into(),
            )),
        }
    }
}

// Artifact paths, relative to the run directory.
fn chains_dir() -> &'static str {
    "chains"
}
fn meta_rel(bi: usize) -> String {
    format!("{}/meta_b{bi:02}.json", chains_dir())
}
fn calibration_rel(bi: usize) -> String {
    format!("{}/calibration_b{bi:02}.json", chains_dir())
}
fn trace_rel(bi: usize, c: usize) -> String {
    format!("{}/trace_b{bi:02}_c{c}.csv", chains_dir())
}
fn coords_rel(bi: usize, c: usize) -> String {
    format!("{}/coords_b{bi:02}_c{c}.csv", chains_dir())
}
fn samples_rel(bi: usize, c: usize) -> String {
    format!("{}/samples_b{bi:02}_c{c}.bin", chains_dir())
}
const TI_TABLE: &str = "ti/ti_table.csv";
const TI_SUMMARY: &str = "ti/ti_summary.json";
const MFVI_POSTERIOR_BIN: &str = "mfvi/posterior.bin";
const MFVI_POSTERIOR_JSON: &str = "mfvi/posterior.json";
const MFVI_TRAIN_LOSSES: &str = "mfvi/losses_train.csv";
const MFVI_TEST_LOSSES: &str = "mfvi/losses_test.csv";
const DIAG_TABLE: &str = "diagnostics/diagnostics.csv";
const DIAG_LONG: &str = "diagnostics/diagnostics_long.csv";
const CERTIFICATES: &str = "certificates/certificates.json";
const METHOD_STATS: &str = "certificates/method_stats.json";
const RESULTS_CSV: &str = "certificates/results.csv";
const REPORT_JSON: &str = "report/report.json";
const REPORT_CSV: &str = "report/report.csv";

/// Per-level sampling metadata persisted next to the traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelMeta {
    pub beta_index: usize,
    pub beta: f64,
    pub lambda: f64,
    pub n: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    /// "hmc" or "exact-prior" (the cold endpoint needs no Markov chain).
    pub sampler: String,
    pub step_size: Option<f64>,
    pub leapfrog_steps: Option<usize>,
    pub seed: u64,
    pub coord_subset: Vec<usize>,
    pub acceptance_rates: Vec<f64>,
    pub divergences: Vec<usize>,
    pub has_samples: bool,
    pub has_zero_one: bool,
}

fn persist_level(
    exp: &ResolvedExperiment,
    manifest: &mut RunManifest,
    bi: usize,
    set: &ChainSet,
    sampler: &str,
    step_size: Option<f64>,
) -> Result<()> {
    let out = &exp.out_dir;
    for chain in &set.chains {
        let c = chain.chain_index;
        let trace = trace_rel(bi, c);
        write_trace_csv(
            &out.join(&trace),
            &chain.accepted,
            &chain.ce_trace,
            chain.zo_trace.as_deref(),
        )?;
        manifest.add_artifact("sample", &trace);
        let coords = coords_rel(bi, c);
        let header: Vec<String> = (0..set.coord_subset.len())
            .map(|j| format!("w{}", set.coord_subset[j]))
            .collect();
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> = chain
            .coord_trace
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| format!("{v}")).collect())
            .collect();
        write_table_csv(&out.join(&coords), &header_refs, &rows)?;
        manifest.add_artifact("sample", &coords);
        if let Some(samples) = &chain.samples {
            let rel = samples_rel(bi, c);
            write_sample_matrix(
                &out.join(&rel),
                samples,
                &SampleHeader {
                    dim: samples.ncols(),
                    rows: samples.nrows(),
                    beta: set.descriptor.beta,
                    lambda: set.descriptor.lambda,
                    n: set.descriptor.n as u64,
                    seed: set.config.seed,
                },
            )?;
            manifest.add_artifact("sample", &rel);
        }
    }
    let meta = LevelMeta {
        beta_index: bi,
        beta: set.descriptor.beta,
        lambda: set.descriptor.lambda,
        n: set.descriptor.n,
        n_iterations: set.config.n_iterations,
        burn_in: set.config.burn_in,
        n_chains: set.chains.len(),
        sampler: sampler.to_string(),
        step_size,
        leapfrog_steps: step_size.map(|_| set.config.leapfrog_steps()),
        seed: set.config.seed,
        coord_subset: set.coord_subset.clone(),
        acceptance_rates: set.chains.iter().map(|c| c.acceptance_rate()).collect(),
        divergences: set.chains.iter().map(|c| c.divergences).collect(),
        has_samples: set.chains.iter().all(|c| c.samples.is_some()),
        has_zero_one: set.chains.iter().all(|c| c.zo_trace.is_some()),
    };
    let rel = meta_rel(bi);
    write_json(&out.join(&rel), &meta)?;
    manifest.add_artifact("sample", &rel);
    Ok(())
}

/// Samples every tempering level: calibrates a step size per level, runs the
/// chains concurrently, and persists traces (and weights, per policy).
/// Levels already recorded in the manifest are skipped, so interrupted runs
/// resume where they stopped.
pub fn cmd_sample(exp: &ResolvedExperiment) -> Result<()> {
    let hash = exp.config.hash()?;
    let mut manifest = RunManifest::load_or_new(&exp.out_dir, &hash)?;
    let betas: Vec<f64> = exp.grid.values().to_vec();
    for (bi, &beta) in betas.iter().enumerate() {
        let key = format!("b{bi:02}");
        let done = manifest
            .stage("sample")
            .map(|s| s.items.get(&key).copied().unwrap_or(false))
            .unwrap_or(false);
        if done && exp.out_dir.join(meta_rel(bi)).exists() {
            continue;
        }
        let target = exp.target_at(beta)?;
        let store = exp.persist_samples_at(beta);
        if beta == 0.0 {
            // The cold endpoint is the prior itself; exact draws are cheaper
            // and unbiased. The step size is irrelevant here.
            let cfg = exp.hmc_config(1.0, store);
            let prior = exp.prior.clone();
            let set = run_exact_chains(&target, &cfg, move |rng| prior.sample(rng))?;
            persist_level(exp, &mut manifest, bi, &set, "exact-prior", None)?;
        } else {
            let base = exp.hmc_config(0.1, store);
            let calibration = calibrate_step_size(
                &target,
                &base,
                &exp.config.hmc.step_candidates,
                exp.config.hmc.trial_iterations,
                &exp.chain_init(beta, u64::MAX),
            )?;
            let rel = calibration_rel(bi);
            write_json(
                &exp.out_dir.join(&rel),
                &serde_json::json!({ "beta": beta, "chosen": calibration.chosen,
                                     "trials": calibration.trials }),
            )?;
            manifest.add_artifact("sample", &rel);
            let cfg = exp.hmc_config(calibration.chosen, store);
            let inits: Vec<Vec<f64>> = (0..cfg.n_chains)
                .map(|c| exp.chain_init(beta, c as u64))
                .collect();
            let set = run_chains(&target, &cfg, &inits)?;
            let total_divergences: usize = set.chains.iter().map(|c| c.divergences).sum();
            let total_iterations = cfg.n_chains * cfg.n_iterations;
            let rate = total_divergences as f64 / total_iterations as f64;
            if rate > exp.config.hmc.max_divergence_rate {
                let report = serde_json::json!({
                    "beta": beta,
                    "divergence_rate": rate,
                    "per_chain": set.chains.iter().map(|c| c.divergences).collect::<Vec<_>>(),
                    "step_size": calibration.chosen,
                });
                write_json(
                    &exp.out_dir
                        .join(format!("chains/divergences_b{bi:02}.json")),
                    &report,
                )?;
                return Err(Error::Calibration(format!(
                    "divergence rate {rate:.2} at beta {beta} exceeds the configured limit {}",
                    exp.config.hmc.max_divergence_rate
                )));
            }
            persist_level(
                exp,
                &mut manifest,
                bi,
                &set,
                "hmc",
                Some(calibration.chosen),
            )?;
        }
        manifest.stage_mut("sample").items.insert(key, true);
        manifest.save(&exp.out_dir)?;
    }
    manifest.stage_mut("sample").complete = true;
    manifest.save(&exp.out_dir)?;
    Ok(())
}

fn load_level(exp: &ResolvedExperiment, bi: usize) -> Result<(LevelMeta, Vec<Chain>)> {
    let meta: LevelMeta = read_json(&exp.out_dir.join(meta_rel(bi)))?;
    let mut chains = Vec::with_capacity(meta.n_chains);
    for c in 0..meta.n_chains {
        let (accepted, ce, zo) = read_trace_csv(&exp.out_dir.join(trace_rel(bi, c)))?;
        let retained = ce.len() - meta.burn_in;
        chains.push(Chain {
            chain_index: c,
            burn_in: meta.burn_in,
            samples: None,
            coord_trace: Array2::zeros((retained, 0)),
            accepted,
            ce_trace: ce,
            zo_trace: zo,
            divergences: meta.divergences[c],
        });
    }
    Ok((meta, chains))
}

/// Integrates the tempering curve and assembles the KL estimate.
pub fn cmd_ti(exp: &ResolvedExperiment) -> Result<TiEstimate> {
    let hash = exp.config.hash()?;
    let mut manifest = RunManifest::load_or_new(&exp.out_dir, &hash)?;
    manifest.require_stage("sample").map_err(|_| {
        Error::Dependency("thermodynamic integration needs completed sampling artifacts".into())
    })?;
    let betas = exp.grid.values().to_vec();
    // One slice of the integration budget per grid-point upper limit, plus
    // one for the final level's lower limit used in the KL subtraction.
    let alpha = exp.config.budget.delta_ti / (betas.len() + 1) as f64;
    let mut estimates: Vec<GEstimate> = Vec::with_capacity(betas.len());
    for (bi, &beta) in betas.iter().enumerate() {
        let (meta, chains) = load_level(exp, bi)?;
        let retained: Vec<Vec<f64>> = chains.iter().map(|c| c.retained_ce().to_vec()).collect();
        let scale = meta.lambda * meta.n as f64;
        estimates.push(estimate_g_from_traces(
            &retained,
            beta,
            scale,
            alpha,
            exp.config.budget.epsilon,
        )?);
    }
    let ti = kl_from_ti(&exp.grid, &estimates)?;
    let rows: Vec<Vec<String>> = ti
        .estimates
        .iter()
        .map(|e| {
            vec![
                format!("{}", e.beta),
                format!("{}", e.point),
                format!("{}", e.upper),
                format!("{}", e.lower),
                format!("{}", e.ess),
                e.rhat.map(|r| format!("{r}")).unwrap_or_default(),
                format!("{}", e.mcmc_se),
                format!("{}", e.count),
            ]
        })
        .collect();
    write_table_csv(
        &exp.out_dir.join(TI_TABLE),
        &[
            "beta", "point", "upper", "lower", "ess", "rhat", "mcmc_se", "count",
        ],
        &rows,
    )?;
    write_json(&exp.out_dir.join(TI_SUMMARY), &ti)?;
    manifest.add_artifact("ti", TI_TABLE);
    manifest.add_artifact("ti", TI_SUMMARY);
    manifest.stage_mut("ti").complete = true;
    manifest.save(&exp.out_dir)?;
    Ok(ti)
}

/// Sidecar describing a persisted posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfviSidecar {
    pub architecture: Vec<usize>,
    pub prior_variance: f64,
    pub lambda: f64,
    pub kl: f64,
    pub seed: u64,
    pub objective_trace: Vec<f64>,
    pub sample_count: usize,
    pub test_sample_count: usize,
}

/// Trains the variational baseline and samples its losses.
pub fn cmd_mfvi(exp: &ResolvedExperiment) -> Result<()> {
    let (mlp, train, test) = exp.classifier()?;
    let hash = exp.config.hash()?;
    let mut manifest = RunManifest::load_or_new(&exp.out_dir, &hash)?;
    let settings = &exp.config.mfvi;
    let cfg = MfviTrainConfig {
        learning_rate: settings.learning_rate,
        momentum: settings.momentum,
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        lambda: settings.lambda,
        seed: exp.config.master_seed,
    };
    let result = mfvi::train(mlp, train, &exp.prior, exp.config.budget.delta2, &cfg)?;

    // Posterior parameters as a two-row matrix: means, then rho.
    let dim = result.posterior.dim();
    let mut packed = Array2::zeros((2, dim));
    for i in 0..dim {
        packed[(0, i)] = result.posterior.mean[i];
        packed[(1, i)] = result.posterior.rho[i];
    }
    write_sample_matrix(
        &exp.out_dir.join(MFVI_POSTERIOR_BIN),
        &packed,
        &SampleHeader {
            dim,
            rows: 2,
            beta: 1.0,
            lambda: settings.lambda,
            n: train.n() as u64,
            seed: exp.config.master_seed,
        },
    )?;
    let arch = match &exp.kind {
        ResolvedKind::Classifier { mlp, .. } => mlp.arch.widths().to_vec(),
        _ => unreachable!("classifier checked above"),
    };
    write_json(
        &exp.out_dir.join(MFVI_POSTERIOR_JSON),
        &MfviSidecar {
            architecture: arch,
            prior_variance: exp.config.prior_variance,
            lambda: settings.lambda,
            kl: result.final_kl,
            seed: exp.config.master_seed,
            objective_trace: result.objective_trace.clone(),
            sample_count: settings.sample_count,
            test_sample_count: settings.test_sample_count,
        },
    )?;

    let eval_losses = |data: &Dataset, m: usize, tag: u64| -> Result<Vec<Vec<String>>> {
        let mut rng = stream(exp.config.master_seed, &[purpose::MFVI_SAMPLE, tag]);
        let mut rows = Vec::with_capacity(m);
        for j in 0..m {
            let w = result.posterior.sample(&mut rng);
            let (ce, zo) = mlp.risks(&w, data.inputs.view(), &data.labels, exp.config.p_min)?;
            rows.push(vec![j.to_string(), format!("{ce}"), format!("{zo}")]);
        }
        Ok(rows)
    };
    let header = ["sample", "ce", "zo"];
    write_table_csv(
        &exp.out_dir.join(MFVI_TRAIN_LOSSES),
        &header,
        &eval_losses(train, settings.sample_count, 1)?,
    )?;
    write_table_csv(
        &exp.out_dir.join(MFVI_TEST_LOSSES),
        &header,
        &eval_losses(test, settings.test_sample_count, 2)?,
    )?;
    for rel in [
        MFVI_POSTERIOR_BIN,
        MFVI_POSTERIOR_JSON,
        MFVI_TRAIN_LOSSES,
        MFVI_TEST_LOSSES,
    ] {
        manifest.add_artifact("mfvi", rel);
    }
    manifest.stage_mut("mfvi").complete = true;
    manifest.save(&exp.out_dir)?;
    Ok(())
}

/// Reads the persisted posterior back.
pub fn load_posterior(out_dir: &Path) -> Result<(MeanFieldPosterior, MfviSidecar)> {
    let (packed, _) = read_sample_matrix(&out_dir.join(MFVI_POSTERIOR_BIN))?;
    let sidecar: MfviSidecar = read_json(&out_dir.join(MFVI_POSTERIOR_JSON))?;
    let posterior = MeanFieldPosterior {
        mean: packed.row(0).to_vec(),
        rho: packed.row(1).to_vec(),
    };
    Ok((posterior, sidecar))
}

/// Computes per-level, per-chain diagnostics from the persisted traces.
pub fn cmd_diagnose(exp: &ResolvedExperiment) -> Result<()> {
    let hash = exp.config.hash()?;
    let mut manifest = RunManifest::load_or_new(&exp.out_dir, &hash)?;
    manifest
        .require_stage("sample")
        .map_err(|_| Error::Dependency("diagnostics need completed sampling artifacts".into()))?;
    let betas = exp.grid.values().to_vec();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut long: Vec<Vec<String>> = Vec::new();
    for (bi, &beta) in betas.iter().enumerate() {
        let (meta, chains) = load_level(exp, bi)?;
        let retained: Vec<&[f64]> = chains.iter().map(|c| c.retained_ce()).collect();
        let rhat_fn = if chains.len() >= 2 {
            diagnostics::rhat(&retained)?.value
        } else {
            f64::NAN
        };
        // Weight-space convergence: max R-hat over the traced coordinate
        // subset.
        let rhat_w = {
            let mut coord_traces: Vec<Vec<Vec<f64>>> = Vec::new();
            for c in 0..meta.n_chains {
                coord_traces.push(read_matrix_csv(&exp.out_dir.join(coords_rel(bi, c)))?);
            }
            let n_coords = coord_traces[0].first().map(|r| r.len()).unwrap_or(0);
            let mut worst = f64::NAN;
            for j in 0..n_coords {
                let per_chain: Vec<Vec<f64>> = coord_traces
                    .iter()
                    .map(|rows| rows.iter().map(|r| r[j]).collect())
                    .collect();
                let views: Vec<&[f64]> = per_chain.iter().map(|t| t.as_slice()).collect();
                let r = diagnostics::rhat(&views)?.value;
                if worst.is_nan() || r > worst {
                    worst = r;
                }
            }
            worst
        };
        let ece_per_chain = diagnose_ece(exp, bi, &meta)?;
        for (c, chain) in chains.iter().enumerate() {
            let trace = chain.retained_ce();
            let ess = diagnostics::ess(trace)?.value;
            let se = diagnostics::mcmc_se(trace)?;
            let mean_ce = trace.iter().sum::<f64>() / trace.len() as f64;
            let mean_zo = chain
                .retained_zo()
                .map(|z| z.iter().sum::<f64>() / z.len() as f64);
            let ece = ece_per_chain.as_ref().map(|e| e[c]);
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            rows.push(vec![
                format!("{beta}"),
                c.to_string(),
                format!("{}", chain.acceptance_rate()),
                format!("{ess}"),
                format!("{se}"),
                format!("{rhat_w}"),
                format!("{rhat_fn}"),
                fmt_opt(ece),
                format!("{mean_ce}"),
                fmt_opt(mean_zo),
            ]);
            let mut push = |metric: &str, value: String| {
                long.push(vec![
                    format!("{beta}"),
                    c.to_string(),
                    metric.to_string(),
                    value,
                ]);
            };
            push("acceptance", format!("{}", chain.acceptance_rate()));
            push("ess", format!("{ess}"));
            push("mcmc_se", format!("{se}"));
            push("rhat_weight", format!("{rhat_w}"));
            push("rhat_function", format!("{rhat_fn}"));
            if let Some(e) = ece {
                push("ece", format!("{e}"));
            }
            push("mean_ce", format!("{mean_ce}"));
            if let Some(z) = mean_zo {
                push("mean_zo", format!("{z}"));
            }
        }
    }
    write_table_csv(
        &exp.out_dir.join(DIAG_TABLE),
        &[
            "beta",
            "chain",
            "acceptance",
            "ess",
            "mcmc_se",
            "rhat_weight",
            "rhat_function",
            "ece",
            "mean_ce",
            "mean_zo",
        ],
        &rows,
    )?;
    write_table_csv(
        &exp.out_dir.join(DIAG_LONG),
        &["beta", "chain", "metric", "value"],
        &long,
    )?;
    manifest.add_artifact("diagnose", DIAG_TABLE);
    manifest.add_artifact("diagnose", DIAG_LONG);
    manifest.stage_mut("diagnose").complete = true;
    manifest.save(&exp.out_dir)?;
    Ok(())
}

/// Mean calibration error per chain over a spread of retained samples; only
/// defined for classifier targets with persisted weights.
fn diagnose_ece(exp: &ResolvedExperiment, bi: usize, meta: &LevelMeta) -> Result<Option<Vec<f64>>> {
    let ResolvedKind::Classifier { mlp, train, .. } = &exp.kind else {
        return Ok(None);
    };
    if !meta.has_samples {
        return Ok(None);
    }
    let max_per_chain = exp.config.diagnostics.ece_max_samples_per_chain.max(1);
    let mut out = Vec::with_capacity(meta.n_chains);
    for c in 0..meta.n_chains {
        let (samples, _) = read_sample_matrix(&exp.out_dir.join(samples_rel(bi, c)))?;
        let rows = samples.nrows();
        let stride = (rows / max_per_chain).max(1);
        let mut sum = 0.0;
        let mut count = 0.0;
        for r in (0..rows).step_by(stride) {
            let w = samples.row(r).to_vec();
            let probs = mlp.forward(&w, train.inputs.view())?;
            sum += diagnostics::ece(probs.view(), &train.labels, exp.config.diagnostics.ece_bins)?;
            count += 1.0;
        }
        out.push(sum / count);
    }
    Ok(Some(out))
}

/// One certificate together with the posterior family it certifies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateRecord {
    /// "gibbs", "mfvi", or "gibbs-naive".
    pub method: String,
    pub certificate: RiskCertificate,
}

/// Train/test statistics per method, recorded for the report's audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodStats {
    pub train_ce: f64,
    pub train_zo: f64,
    pub test_ce: f64,
    pub test_zo: f64,
    pub kl: f64,
    pub kl_point: Option<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyOutput {
    pub n: usize,
    pub gibbs: MethodStats,
    pub mfvi: MethodStats,
    pub thinning_stride: usize,
    pub thinned_count: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn chain_evidence(
    retained: &[Vec<f64>],
    thinned: Vec<f64>,
    loss_kind: LossKind,
) -> Result<RiskEvidence> {
    let pooled: Vec<f64> = retained.iter().flatten().copied().collect();
    let m = pooled.len();
    let full_mean = mean(&pooled);
    let mut ess_total = 0.0;
    for t in retained {
        ess_total += diagnostics::ess(t)?.value;
    }
    let var =
        pooled.iter().map(|x| (x - full_mean).powi(2)).sum::<f64>() / (m as f64 - 1.0).max(1.0);
    Ok(RiskEvidence {
        loss_kind,
        thinned,
        full_mean,
        full_mcmc_se: (var / ess_total).sqrt(),
        full_count: m,
        iid: false,
    })
}

fn iid_evidence(values: Vec<f64>, loss_kind: LossKind) -> RiskEvidence {
    let m = values.len();
    let full_mean = mean(&values);
    let var =
        values.iter().map(|x| (x - full_mean).powi(2)).sum::<f64>() / (m as f64 - 1.0).max(1.0);
    RiskEvidence {
        loss_kind,
        thinned: values,
        full_mean,
        full_mcmc_se: (var / m as f64).sqrt(),
        full_count: m,
        iid: true,
    }
}

/// Assembles every certificate from the persisted artifacts: the Gibbs path
/// (KL from integration, chain estimators), the variational path (analytic
/// KL, i.i.d. estimators), and the conservative naive-KL sanity path.
pub fn cmd_certify(exp: &ResolvedExperiment) -> Result<Vec<CertificateRecord>> {
    let (mlp, _, test) = exp.classifier()?;
    let hash = exp.config.hash()?;
    let mut manifest = RunManifest::load_or_new(&exp.out_dir, &hash)?;
    let mut missing = Vec::new();
    for stage in ["sample", "ti", "mfvi"] {
        if manifest.require_stage(stage).is_err() {
            missing.push(stage);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dependency(format!(
            "certificates need completed stages: missing {}",
            missing.join(", ")
        )));
    }
    let ti: TiEstimate = read_json(&exp.out_dir.join(TI_SUMMARY))?;
    let (lambda, n) = exp.scale_params();
    let budget = exp.config.budget;

    // Gibbs posterior evidence, from the warmest level.
    let b1 = exp.grid.point_count() - 1;
    let (meta, chains) = load_level(exp, b1)?;
    if (meta.beta - 1.0).abs() > 1e-12 {
        return Err(Error::Dependency(
            "the warmest level must sit at beta = 1".into(),
        ));
    }
    let pseudo = ChainSet {
        chains: chains
            .iter()
            .map(|c| Chain {
                chain_index: c.chain_index,
                burn_in: 0,
                samples: None,
                coord_trace: Array2::zeros((c.retained_ce().len(), 0)),
                accepted: vec![true; c.retained_ce().len()],
                ce_trace: c.retained_ce().to_vec(),
                zo_trace: c.retained_zo().map(|z| z.to_vec()),
                divergences: 0,
            })
            .collect(),
        config: HmcConfig {
            n_iterations: chains[0].retained_ce().len(),
            burn_in: 0,
            n_chains: meta.n_chains,
            ..HmcConfig::new(1.0, meta.seed)
        },
        descriptor: TargetDescriptor {
            beta: meta.beta,
            lambda: meta.lambda,
            n: meta.n,
        },
        coord_subset: vec![],
        exact: false,
    };
    let thinned = thin(&pseudo, exp.config.thinning.target_ess_ratio)?;
    let thinned_zo = thinned
        .zo
        .clone()
        .ok_or_else(|| Error::Dependency("the warmest level lacks 0-1 traces".into()))?;
    let ce_retained: Vec<Vec<f64>> = chains.iter().map(|c| c.retained_ce().to_vec()).collect();
    let zo_retained: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.retained_zo().map(|z| z.to_vec()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Dependency("the warmest level lacks 0-1 traces".into()))?;
    let gibbs_ce = chain_evidence(&ce_retained, thinned.ce.clone(), LossKind::BoundedCe)?;
    let gibbs_zo = chain_evidence(&zo_retained, thinned_zo, LossKind::ZeroOne)?;

    // Held-out risk of the sampled posterior, averaged over thinned weights.
    let (gibbs_test_ce, gibbs_test_zo) = {
        if !meta.has_samples {
            return Err(Error::Dependency(
                "held-out evaluation needs persisted weight samples at beta = 1".into(),
            ));
        }
        let mut sum_ce = 0.0;
        let mut sum_zo = 0.0;
        let mut count = 0.0;
        for (c, indices) in thinned.indices.iter().enumerate() {
            let (samples, _) = read_sample_matrix(&exp.out_dir.join(samples_rel(b1, c)))?;
            for &r in indices {
                let w = samples.row(r).to_vec();
                let (ce, zo) = mlp.risks(&w, test.inputs.view(), &test.labels, exp.config.p_min)?;
                sum_ce += ce;
                sum_zo += zo;
                count += 1.0;
            }
        }
        (sum_ce / count, sum_zo / count)
    };

    // Variational evidence.
    let (_, sidecar) = load_posterior(&exp.out_dir)?;
    let train_losses = read_matrix_csv(&exp.out_dir.join(MFVI_TRAIN_LOSSES))?;
    let mfvi_ce_values: Vec<f64> = train_losses.iter().map(|r| r[1]).collect();
    let mfvi_zo_values: Vec<f64> = train_losses.iter().map(|r| r[2]).collect();
    let test_losses = read_matrix_csv(&exp.out_dir.join(MFVI_TEST_LOSSES))?;
    let mfvi_test_ce = mean(&test_losses.iter().map(|r| r[1]).collect::<Vec<_>>());
    let mfvi_test_zo = mean(&test_losses.iter().map(|r| r[2]).collect::<Vec<_>>());
    let mfvi_train_ce_mean = mean(&mfvi_ce_values);
    let mfvi_train_zo_mean = mean(&mfvi_zo_values);
    let mfvi_ce = iid_evidence(mfvi_ce_values, LossKind::BoundedCe);
    let mfvi_zo = iid_evidence(mfvi_zo_values, LossKind::ZeroOne);

    let kl_naive = naive_kl_upper(mfvi_train_ce_mean, sidecar.kl, n, lambda);

    let mut records = Vec::new();
    for (evidence, _kind) in [(&gibbs_zo, "zo"), (&gibbs_ce, "ce")] {
        for family in [BoundFamily::Kl, BoundFamily::Lambda] {
            for estimator in [Estimator::KlInverse, Estimator::Asymptotic] {
                records.push(CertificateRecord {
                    method: "gibbs".into(),
                    certificate: certify(
                        evidence,
                        ti.kl_upper,
                        KlSource::TiUpper,
                        n,
                        lambda,
                        &budget,
                        family,
                        estimator,
                    )?,
                });
            }
            // The conservative sanity path reuses the thinned estimator.
            records.push(CertificateRecord {
                method: "gibbs-naive".into(),
                certificate: certify(
                    evidence,
                    kl_naive,
                    KlSource::NaiveUpper,
                    n,
                    lambda,
                    &budget,
                    family,
                    Estimator::KlInverse,
                )?,
            });
        }
    }
    for evidence in [&mfvi_zo, &mfvi_ce] {
        for family in [BoundFamily::Kl, BoundFamily::Lambda] {
            for estimator in [Estimator::KlInverse, Estimator::Clt] {
                records.push(CertificateRecord {
                    method: "mfvi".into(),
                    certificate: certify(
                        evidence,
                        sidecar.kl,
                        KlSource::AnalyticGaussian,
                        n,
                        lambda,
                        &budget,
                        family,
                        estimator,
                    )?,
                });
            }
        }
    }

    let output = CertifyOutput {
        n,
        gibbs: MethodStats {
            train_ce: gibbs_ce.full_mean,
            train_zo: gibbs_zo.full_mean,
            test_ce: gibbs_test_ce,
            test_zo: gibbs_test_zo,
            kl: ti.kl_upper,
            kl_point: Some(ti.kl_point),
            sample_count: gibbs_ce.full_count,
        },
        mfvi: MethodStats {
            train_ce: mfvi_train_ce_mean,
            train_zo: mfvi_train_zo_mean,
            test_ce: mfvi_test_ce,
            test_zo: mfvi_test_zo,
            kl: sidecar.kl,
            kl_point: None,
            sample_count: train_losses.len(),
        },
        thinning_stride: thinned.stride,
        thinned_count: thinned.count,
    };
    write_json(&exp.out_dir.join(CERTIFICATES), &records)?;
    write_json(&exp.out_dir.join(METHOD_STATS), &output)?;
    write_results_csv(exp, &records, &output)?;
    for rel in [CERTIFICATES, METHOD_STATS, RESULTS_CSV] {
        manifest.add_artifact("certify", rel);
    }
    manifest.stage_mut("certify").complete = true;
    manifest.save(&exp.out_dir)?;
    Ok(records)
}

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::ZeroOne => "zero-one",
        LossKind::BoundedCe => "bounded-ce",
    }
}

fn write_results_csv(
    exp: &ResolvedExperiment,
    records: &[CertificateRecord],
    stats: &CertifyOutput,
) -> Result<()> {
    let model = match &exp.kind {
        ResolvedKind::Classifier { mlp, .. } => format!("{:?}", mlp.arch.widths()),
        _ => String::new(),
    };
    let mut rows = Vec::new();
    for method in ["gibbs", "gibbs-naive", "mfvi"] {
        for kind in [LossKind::BoundedCe, LossKind::ZeroOne] {
            let subset: Vec<&CertificateRecord> = records
                .iter()
                .filter(|r| r.method == method && r.certificate.loss_kind == kind)
                .collect();
            if subset.is_empty() {
                continue;
            }
            let find = |family: BoundFamily, estimator: Estimator| -> String {
                subset
                    .iter()
                    .find(|r| {
                        r.certificate.bound_family == family && r.certificate.estimator == estimator
                    })
                    .map(|r| format!("{}", r.certificate.value))
                    .unwrap_or_default()
            };
            let (m, kl_val) = match method {
                "mfvi" => (&stats.mfvi, stats.mfvi.kl),
                _ => (&stats.gibbs, subset[0].certificate.kl_value),
            };
            let (train, test) = match kind {
                LossKind::BoundedCe => (m.train_ce, m.test_ce),
                LossKind::ZeroOne => (m.train_zo, m.test_zo),
            };
            rows.push(vec![
                method.to_string(),
                exp.config.name.clone(),
                model.clone(),
                loss_name(kind).to_string(),
                format!("{train}"),
                format!("{test}"),
                format!("{}", kl_val / stats.n as f64),
                find(BoundFamily::Kl, Estimator::KlInverse),
                find(BoundFamily::Kl, Estimator::Asymptotic),
                find(BoundFamily::Kl, Estimator::Clt),
                find(BoundFamily::Lambda, Estimator::KlInverse),
                find(BoundFamily::Lambda, Estimator::Asymptotic),
                find(BoundFamily::Lambda, Estimator::Clt),
            ]);
        }
    }
    write_table_csv(
        &exp.out_dir.join(RESULTS_CSV),
        &[
            "method",
            "dataset",
            "model",
            "loss",
            "train",
            "test",
            "kl_per_n",
            "rc_kl_klinv",
            "rc_kl_asymptotic",
            "rc_kl_clt",
            "rc_lambda_klinv",
            "rc_lambda_asymptotic",
            "rc_lambda_clt",
        ],
        &rows,
    )
}

/// One row of the bound-violation audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRow {
    pub method: String,
    pub loss_kind: LossKind,
    pub bound_family: BoundFamily,
    pub estimator: Estimator,
    pub certificate: f64,
    pub test_risk: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub status: String,
    pub violations: usize,
    pub audit: Vec<AuditRow>,
}

/// Collates certificates into report tables and audits them against held-out
/// risk. An empty run directory yields an explicit "nothing to report".
pub fn cmd_report(exp: &ResolvedExperiment) -> Result<Report> {
    let hash = exp.config.hash()?;
    let mut manifest = RunManifest::load_or_new(&exp.out_dir, &hash)?;
    let cert_path = exp.out_dir.join(CERTIFICATES);
    if !cert_path.exists() {
        let report = Report {
            status: "nothing to report".into(),
            violations: 0,
            audit: Vec::new(),
        };
        write_json(&exp.out_dir.join(REPORT_JSON), &report)?;
        manifest.add_artifact("report", REPORT_JSON);
        manifest.stage_mut("report").complete = true;
        manifest.save(&exp.out_dir)?;
        return Ok(report);
    }
    let records: Vec<CertificateRecord> = read_json(&cert_path)?;
    let stats: CertifyOutput = read_json(&exp.out_dir.join(METHOD_STATS))?;
    let mut audit = Vec::new();
    for r in &records {
        let m = if r.method == "mfvi" {
            &stats.mfvi
        } else {
            &stats.gibbs
        };
        let test_risk = match r.certificate.loss_kind {
            LossKind::BoundedCe => m.test_ce,
            LossKind::ZeroOne => m.test_zo,
        };
        audit.push(AuditRow {
            method: r.method.clone(),
            loss_kind: r.certificate.loss_kind,
            bound_family: r.certificate.bound_family,
            estimator: r.certificate.estimator,
            certificate: r.certificate.value,
            test_risk,
            violated: test_risk > r.certificate.value,
        });
    }
    let violations = audit.iter().filter(|a| a.violated).count();
    let report = Report {
        status: "ok".into(),
        violations,
        audit,
    };
    write_json(&exp.out_dir.join(REPORT_JSON), &report)?;
    let rows: Vec<Vec<String>> = report
        .audit
        .iter()
        .map(|a| {
            vec![
                a.method.clone(),
                loss_name(a.loss_kind).to_string(),
                format!("{:?}", a.bound_family).to_lowercase(),
                format!("{:?}", a.estimator).to_lowercase(),
                format!("{}", a.certificate),
                format!("{}", a.test_risk),
                (a.violated as u8).to_string(),
            ]
        })
        .collect();
    write_table_csv(
        &exp.out_dir.join(REPORT_CSV),
        &[
            "method",
            "loss",
            "bound",
            "estimator",
            "certificate",
            "test_risk",
            "violated",
        ],
        &rows,
    )?;
    manifest.add_artifact("report", REPORT_JSON);
    manifest.add_artifact("report", REPORT_CSV);
    manifest.stage_mut("report").complete = true;
    manifest.save(&exp.out_dir)?;
    Ok(report)
}

/// Runs one stage by name.
pub fn run_stage(exp: &ResolvedExperiment, stage: Stage) -> Result<()> {
    match stage {
        Stage::Sample => cmd_sample(exp),
        Stage::Ti => cmd_ti(exp).map(|_| ()),
        Stage::Mfvi => cmd_mfvi(exp),
        Stage::Diagnose => cmd_diagnose(exp),
        Stage::Certify => cmd_certify(exp).map(|_| ()),
        Stage::Report => cmd_report(exp).map(|_| ()),
    }
}

/// Runs every stage listed in the configuration, in order.
pub fn run_configured_stages(exp: &ResolvedExperiment) -> Result<()> {
    for stage in exp.config.stages.clone() {
        run_stage(exp, stage)?;
    }
    Ok(())
}
