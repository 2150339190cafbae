//! Numerically tight PAC-Bayes risk certificates for small neural networks.
//!
//! This crate estimates generalization bounds for randomized predictors by
//! sampling the bound-minimizing Gibbs posterior with full-batch Hamiltonian
//! Monte Carlo, estimating the posterior-prior KL divergence through
//! thermodynamic integration over a tempering path, and assembling
//! high-probability certificates from concentration inequalities. A mean-field
//! variational inference baseline is included so certificate tightness can be
//! compared against the factorized-Gaussian family on the same prior.
//!
//! The main pieces:
//!
//! - [`data`]: MNIST-style IDX ingestion, dataset variants, and synthetic
//!   targets with closed-form normalizing constants for end-to-end checks.
//! - [`model`]: a small MLP with bounded losses and exact reverse-mode
//!   gradients of the empirical risk.
//! - [`target`]: Gaussian priors and the tempered Gibbs log-density family.
//! - [`hmc`]: leapfrog integration, Metropolis-Hastings correction, step-size
//!   calibration, multi-chain runs, and ESS-driven thinning.
//! - [`ti`]: trapezium-rule thermodynamic integration of the log normalizing
//!   constant and KL assembly.
//! - [`bounds`]: Bernoulli-KL calculus, the kl and lambda bounds, and the
//!   high-probability empirical-risk estimators.
//! - [`mfvi`]: the variational baseline trained on the lambda-bound objective.
//! - [`diagnostics`]: autocorrelation, ESS, MCMC standard error, R-hat, and
//!   expected calibration error.
//! - [`pipeline`]: experiment configuration, stage orchestration, artifact
//!   persistence, and report generation.
//!
//! The companion guide under `book/` walks through the same machinery with
//! runnable examples; its code listings are compiled and run as doc-tests.

pub mod bounds;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod hmc;
pub mod mfvi;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod target;
pub mod ti;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    //! Runs the guide's code listings as doc-tests so the book cannot drift
    //! from the library.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(BoundCalculus, "../../../book/src/bound-calculus.md");
    chapter!(GibbsTargets, "../../../book/src/gibbs-targets.md");
    chapter!(Hmc, "../../../book/src/hmc.md");
    chapter!(
        ThermodynamicIntegration,
        "../../../book/src/thermodynamic-integration.md"
    );
    chapter!(RiskEstimators, "../../../book/src/risk-estimators.md");
    chapter!(MfviBaseline, "../../../book/src/mfvi-baseline.md");
    chapter!(Diagnostics, "../../../book/src/diagnostics.md");
    chapter!(
        RunningExperiments,
        "../../../book/src/running-experiments.md"
    );
}
