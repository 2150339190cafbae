//! Gaussian priors and the tempered Gibbs target family.
//!
//! The sampled density interpolates geometrically between the prior (`beta =
//! 0`) and the Gibbs posterior (`beta = 1`):
//!
//! ```text
//! log pi_beta(w) = -beta * lambda * n * loss(w) + log p(w)      (+ const)
//! ```
//!
//! which is affine in `beta` at fixed `w`. Anything that can report a scalar
//! loss and its gradient plugs in through [`LossModel`]; classifiers attach a
//! dataset, the synthetic oracles attach closed forms.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hmc::{HmcTarget, TargetDescriptor, TargetEval};
use crate::model::{Mlp, MlpArchitecture};
use crate::rng::{purpose, stream};

/// A differentiable empirical loss backing a Gibbs target.
pub trait LossModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Loss value at `w` (bounded cross-entropy risk for classifiers).
    fn loss(&self, w: &[f64]) -> f64;

    /// Loss and its exact gradient in one pass.
    fn loss_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>);

    /// Training 0-1 error, for classification models only.
    fn zero_one(&self, w: &[f64]) -> Option<f64> {
        let _ = w;
        None
    }

    /// Loss and 0-1 error together, for callers that want both from one
    /// evaluation.
    fn loss_and_zero_one(&self, w: &[f64]) -> (f64, Option<f64>) {
        (self.loss(w), self.zero_one(w))
    }
}

/// Isotropic Gaussian prior over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub means: Vec<f64>,
    pub variance: f64,
}

impl GaussianPrior {
    pub fn new(means: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::Domain(format!(
                "prior variance must be positive, got {variance}"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("prior means must be finite".into()));
        }
        Ok(Self { means, variance })
    }

    /// Zero-mean isotropic prior.
    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], variance)
    }

    /// Standard normal prior, handy for sampler checks.
    pub fn standard(dim: usize) -> Self {
        Self {
            means: vec![0.0; dim],
            variance: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let sq: f64 = w
            .iter()
            .zip(&self.means)
            .map(|(x, m)| (x - m).powi(2))
            .sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln() - sq / (2.0 * self.variance)
    }

    /// Gradient of the log-density: `-(w - mu) / sigma^2`.
    pub fn grad_log_density(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.means)
            .map(|(x, m)| -(x - m) / self.variance)
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let sd = self.variance.sqrt();
        self.means
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect()
    }
}

/// Builds the prior for an architecture: weight means drawn from a truncated
/// normal with per-layer standard deviation `1/sqrt(fan_in)`, clipped at two
/// standard deviations by rejection; bias means zero. The prior covariance is
/// `variance * I` on top of those means.
pub fn prior_init(arch: &MlpArchitecture, variance: f64, seed: u64) -> Result<GaussianPrior> {
    let mut rng = stream(seed, &[purpose::PRIOR_INIT]);
    let mut means = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layers() {
        let sd = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            means.push(truncated_normal(&mut rng, sd, 2.0));
        }
        means.extend(std::iter::repeat_n(0.0, fan_out));
    }
    GaussianPrior::new(means, variance)
}

/// Rejection-sampled zero-mean truncated normal, clipped at `cutoff` sds.
fn truncated_normal<R: Rng>(rng: &mut R, sd: f64, cutoff: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= cutoff {
            return sd * z;
        }
    }
}

/// The tempered Gibbs log-density `-beta lambda n loss(w) + log p(w)`.
#[derive(Clone)]
pub struct TemperedGibbsTarget {
    pub prior: GaussianPrior,
    pub loss: Arc<dyn LossModel>,
    pub beta: f64,
    pub lambda: f64,
    pub n: usize,
}

impl TemperedGibbsTarget {
    pub fn new(
        prior: GaussianPrior,
        loss: Arc<dyn LossModel>,
        beta: f64,
        lambda: f64,
        n: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Domain(format!("beta must lie in [0,1], got {beta}")));
        }
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if prior.dim() != loss.dim() {
            return Err(Error::Shape(format!(
                "prior dimension {} != loss dimension {}",
                prior.dim(),
                loss.dim()
            )));
        }
        Ok(Self {
            prior,
            loss,
            beta,
            lambda,
            n,
        })
    }

    /// The factor multiplying the loss in the exponent.
    pub fn scale(&self) -> f64 {
        self.beta * self.lambda * self.n as f64
    }

    /// Same target at a different temperature.
    pub fn at_beta(&self, beta: f64) -> Result<Self> {
        Self::new(
            self.prior.clone(),
            Arc::clone(&self.loss),
            beta,
            self.lambda,
            self.n,
        )
    }

    pub fn log_unnorm(&self, w: &[f64]) -> f64 {
        let loss = if self.beta == 0.0 {
            0.0
        } else {
            self.loss.loss(w)
        };
        -self.scale() * loss + self.prior.log_density(w)
    }

    pub fn grad_log_unnorm(&self, w: &[f64]) -> Vec<f64> {
        self.eval_target(w).grad
    }

    fn eval_target(&self, w: &[f64]) -> TargetEval {
        let mut grad = self.prior.grad_log_density(w);
        let scale = self.scale();
        let (loss, value) = if scale == 0.0 {
            // At the path's prior endpoint the loss still gets recorded for
            // the integrand trace, but its gradient does not contribute.
            (self.loss.loss(w), self.prior.log_density(w))
        } else {
            let (loss, loss_grad) = self.loss.loss_and_grad(w);
            for (g, lg) in grad.iter_mut().zip(&loss_grad) {
                *g -= scale * lg;
            }
            (loss, -scale * loss + self.prior.log_density(w))
        };
        TargetEval {
            log_density: value,
            grad,
            loss,
        }
    }
}

impl HmcTarget for TemperedGibbsTarget {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eval(&self, w: &[f64]) -> TargetEval {
        self.eval_target(w)
    }

    fn loss_only(&self, w: &[f64]) -> f64 {
        self.loss.loss(w)
    }

    fn zero_one(&self, w: &[f64]) -> Option<f64> {
        self.loss.zero_one(w)
    }

    fn loss_and_zero_one(&self, w: &[f64]) -> (f64, Option<f64>) {
        self.loss.loss_and_zero_one(w)
    }

    fn descriptor(&self) -> TargetDescriptor {
        TargetDescriptor {
            beta: self.beta,
            lambda: self.lambda,
            n: self.n,
        }
    }
}

/// Bounded cross-entropy empirical risk of an MLP on a fixed dataset.
pub struct DatasetLoss {
    pub mlp: Mlp,
    pub data: Arc<crate::data::Dataset>,
    pub p_min: f64,
}

impl DatasetLoss {
    pub fn new(mlp: Mlp, data: Arc<crate::data::Dataset>, p_min: f64) -> Result<Self> {
        if data.n() == 0 {
            return Err(Error::Domain(
                "empirical risk needs a non-empty dataset".into(),
            ));
        }
        if data.d() != mlp.arch.input_dim() || data.k != mlp.arch.class_count() {
            return Err(Error::Shape(format!(
                "dataset ({} features, {} classes) does not fit architecture {:?}",
                data.d(),
                data.k,
                mlp.arch.widths()
            )));
        }
        Ok(Self { mlp, data, p_min })
    }
}

impl LossModel for DatasetLoss {
    fn dim(&self) -> usize {
        self.mlp.arch.param_count()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let (ce, _) = self
            .mlp
            .risks(w, self.data.inputs.view(), &self.data.labels, self.p_min)
            .expect("dataset and architecture validated at construction");
        ce
    }

    fn loss_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        self.mlp
            .ce_risk_and_grad(w, self.data.inputs.view(), &self.data.labels, self.p_min)
            .expect("dataset and architecture validated at construction")
    }

    fn zero_one(&self, w: &[f64]) -> Option<f64> {
        Some(self.loss_and_zero_one(w).1.expect("classifier reports 0-1"))
    }

    fn loss_and_zero_one(&self, w: &[f64]) -> (f64, Option<f64>) {
        let (ce, zo) = self
            .mlp
            .risks(w, self.data.inputs.view(), &self.data.labels, self.p_min)
            .expect("dataset and architecture validated at construction");
        (ce, Some(zo))
    }
}
