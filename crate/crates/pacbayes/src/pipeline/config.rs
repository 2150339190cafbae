//! Experiment configuration: a single JSON document drives every stage.
//!
//! The schema is the serde shape of [`ExperimentConfig`]; `config.json` in a
//! run directory is the resolved copy, and its SHA-256 hash pins every later
//! artifact to the inputs that produced it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::CertificateBudget;
use crate::data::VariantKind;
use crate::error::{Error, Result};

/// Pipeline stage names, in canonical execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sample,
    Ti,
    Mfvi,
    Diagnose,
    Certify,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Ti => "ti",
            Stage::Mfvi => "mfvi",
            Stage::Diagnose => "diagnose",
            Stage::Certify => "certify",
            Stage::Report => "report",
        }
    }
}

/// Where classification data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DataSource {
    /// A directory holding the four canonical IDX files.
    IdxDir { path: PathBuf },
    /// Deterministic ten-class generator, written as IDX files into the run
    /// directory and loaded through the same parser.
    Synthetic { n_train: usize, n_test: usize },
}

/// What the sampler targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetSpec {
    /// MLP classifier on a dataset variant.
    Classification {
        variant: VariantKind,
        half: bool,
        source: DataSource,
        /// Keep only the first `subset` training examples (after variant
        /// transforms), for scaled-down runs.
        #[serde(default)]
        subset: Option<usize>,
        /// Same restriction for the test split.
        #[serde(default)]
        test_subset: Option<usize>,
    },
    /// Gaussian prior with a quadratic potential; every downstream quantity
    /// has a closed form, so this target validates the whole chain.
    ConjugateGaussian {
        dim: usize,
        prior_variance: f64,
        likelihood_width: f64,
        /// The potential's center is `center_norm * (1,...,1)/sqrt(dim)`.
        center_norm: f64,
    },
    /// Two-dimensional banana-shaped demo density.
    Rosenbrock,
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcSettings {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub trajectory_length: f64,
    /// Step-size candidates tried per tempering level.
    pub step_candidates: Vec<f64>,
    pub trial_iterations: usize,
    pub coord_subset_size: usize,
    /// Abort when the divergence fraction of a level exceeds this.
    pub max_divergence_rate: f64,
}

/// Variational-baseline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfviSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Posterior draws used for the training-risk estimate.
    pub sample_count: usize,
    /// Posterior draws used for held-out statistics.
    pub test_sample_count: usize,
}

/// Tempering grid: `points` uniform values, or explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaGridSpec {
    pub points: usize,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

/// Which tempering levels keep full weight samples on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplePersistence {
    All,
    BetaOne,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinningSettings {
    /// Required ratio of thinned-trace ESS to kept sample count.
    pub target_ess_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSettings {
    pub ece_bins: usize,
    /// Calibration error is averaged over at most this many retained
    /// samples per chain.
    pub ece_max_samples_per_chain: usize,
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub target: TargetSpec,
    /// Overrides the variant's standard architecture.
    #[serde(default)]
    pub architecture: Option<Vec<usize>>,
    pub prior_variance: f64,
    pub lambda: f64,
    pub p_min: f64,
    pub hmc: HmcSettings,
    pub beta_grid: BetaGridSpec,
    pub budget: CertificateBudget,
    pub mfvi: MfviSettings,
    pub thinning: ThinningSettings,
    pub diagnostics: DiagnosticsSettings,
    pub persist_samples: SamplePersistence,
    pub stages: Vec<Stage>,
}

impl ExperimentConfig {
    /// The standard experiment settings: full-resolution binary labels,
    /// 4 chains of 5000 iterations with 50 burn-in, trajectory length 1.5,
    /// the millinat step grid, an 11-point tempering grid, 0.03 prior
    /// variance, certificates at the 0.95 level.
    pub fn paper_defaults() -> Self {
        Self {
            name: "paper-defaults".into(),
            master_seed: 0,
            target: TargetSpec::Classification {
                variant: VariantKind::Binary,
                half: false,
                source: DataSource::IdxDir {
                    path: PathBuf::from("data/mnist"),
                },
                subset: None,
                test_subset: None,
            },
            architecture: None,
            prior_variance: 0.03,
            lambda: 1.0,
            p_min: 1e-4,
            hmc: HmcSettings {
                n_iterations: 5000,
                burn_in: 50,
                n_chains: 4,
                trajectory_length: 1.5,
                step_candidates: vec![
                    0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008, 0.009, 0.010, 0.020, 0.030,
                ],
                trial_iterations: 100,
                coord_subset_size: 100,
                max_divergence_rate: 0.5,
            },
            beta_grid: BetaGridSpec {
                points: 11,
                values: None,
            },
            budget: CertificateBudget::default(),
            mfvi: MfviSettings {
                learning_rate: 0.005,
                momentum: 0.95,
                epochs: 150,
                batch_size: 250,
                lambda: 1.0,
                sample_count: 20_000,
                test_sample_count: 2_000,
            },
            thinning: ThinningSettings {
                target_ess_ratio: 0.9,
            },
            diagnostics: DiagnosticsSettings {
                ece_bins: 10,
                ece_max_samples_per_chain: 25,
            },
            persist_samples: SamplePersistence::BetaOne,
            stages: vec![
                Stage::Sample,
                Stage::Ti,
                Stage::Mfvi,
                Stage::Diagnose,
                Stage::Certify,
                Stage::Report,
            ],
        }
    }

    /// Desk-scale binary run: 2000 synthetic digits, the 784-20-2 net, a
    /// 6-point grid, 4 chains of 500 iterations. Finishes in minutes.
    pub fn preset_binary_2k() -> Self {
        let mut cfg = Self::paper_defaults();
        cfg.name = "binary-2k".into();
        cfg.target = TargetSpec::Classification {
            variant: VariantKind::Binary,
            half: false,
            source: DataSource::Synthetic {
                n_train: 2000,
                n_test: 2000,
            },
            subset: None,
            test_subset: None,
        };
        cfg.hmc.n_iterations = 500;
        cfg.hmc.burn_in = 50;
        cfg.hmc.trajectory_length = 0.3;
        cfg.hmc.step_candidates = vec![0.01, 0.02, 0.03, 0.05];
        cfg.hmc.trial_iterations = 20;
        cfg.beta_grid = BetaGridSpec {
            points: 6,
            values: None,
        };
        cfg.mfvi.sample_count = 2000;
        cfg.mfvi.test_sample_count = 200;
        cfg.persist_samples = SamplePersistence::All;
        cfg
    }

    /// Conjugate-Gaussian oracle: everything downstream of sampling can be
    /// compared against closed forms.
    pub fn preset_conjugate_oracle() -> Self {
        let mut cfg = Self::paper_defaults();
        cfg.name = "conjugate-oracle".into();
        cfg.target = TargetSpec::ConjugateGaussian {
            dim: 5,
            prior_variance: 1.0,
            likelihood_width: 0.5,
            center_norm: 1.0,
        };
        cfg.hmc.n_iterations = 2000;
        cfg.hmc.burn_in = 50;
        // Tempered precisions span [1, 3]; a unit trajectory keeps the
        // rotation angle away from the half-period resonance where quadratic
        // traces decorrelate slowly.
        cfg.hmc.trajectory_length = 1.0;
        cfg.hmc.step_candidates = vec![0.05, 0.1, 0.2, 0.4];
        cfg.hmc.trial_iterations = 100;
        cfg.stages = vec![Stage::Sample, Stage::Ti, Stage::Diagnose];
        cfg
    }

    /// Two-dimensional demo: chains suitable for a density-comparison plot.
    pub fn preset_rosenbrock_demo() -> Self {
        let mut cfg = Self::paper_defaults();
        cfg.name = "rosenbrock-demo".into();
        cfg.target = TargetSpec::Rosenbrock;
        cfg.hmc.step_candidates = vec![0.02, 0.05, 0.1, 0.2];
        cfg.hmc.trial_iterations = 100;
        cfg.beta_grid = BetaGridSpec {
            points: 2,
            values: None,
        };
        cfg.stages = vec![Stage::Sample, Stage::Diagnose];
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-defaults" => Some(Self::paper_defaults()),
            "binary-2k" => Some(Self::preset_binary_2k()),
            "conjugate-oracle" => Some(Self::preset_conjugate_oracle()),
            "rosenbrock-demo" => Some(Self::preset_rosenbrock_demo()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hmc.burn_in >= self.hmc.n_iterations {
            return Err(Error::Domain(
                "burn-in must be below the iteration count".into(),
            ));
        }
        if self.hmc.step_candidates.is_empty() {
            return Err(Error::Domain(
                "need at least one step-size candidate".into(),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda < 2.0) {
            return Err(Error::Domain(format!(
                "lambda must lie in (0,2), got {}",
                self.lambda
            )));
        }
        if !(self.p_min > 0.0 && self.p_min < 1.0) {
            return Err(Error::Domain(format!(
                "p_min must lie in (0,1), got {}",
                self.p_min
            )));
        }
        if !(self.thinning.target_ess_ratio > 0.0 && self.thinning.target_ess_ratio <= 1.0) {
            return Err(Error::Domain("thinning ratio must lie in (0,1]".into()));
        }
        CertificateBudget::new(
            self.budget.delta,
            self.budget.delta1,
            self.budget.delta2,
            self.budget.epsilon,
            self.budget.delta_ti,
        )?;
        Ok(())
    }

    /// Canonical pretty-JSON serialization (what `config.json` holds).
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_json()?.as_bytes());
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
