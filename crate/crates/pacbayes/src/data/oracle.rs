//! Closed-form targets for validating the sampler and the integrator.
//!
//! The conjugate Gaussian pairs an isotropic Gaussian prior with the
//! quadratic potential `||w - a||^2 / (2 s^2)`, so the normalizing constant,
//! the tempered integrand, and the posterior-prior KL are all available in
//! closed form. The two-dimensional Rosenbrock target reproduces the usual
//! banana-shaped demo density.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::target::{GaussianPrior, LossModel, TemperedGibbsTarget};

/// Quadratic potential with analytic normalizing constant under a Gaussian
/// prior.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    pub dim: usize,
    /// Prior variance per coordinate.
    pub prior_variance: f64,
    /// Quadratic width `s^2`.
    pub likelihood_width: f64,
    /// Center `a` of the potential.
    pub center: Vec<f64>,
}

impl ConjugateGaussian {
    pub fn new(
        dim: usize,
        prior_variance: f64,
        likelihood_width: f64,
        center: Vec<f64>,
    ) -> Result<Self> {
        if !(prior_variance > 0.0) || !(likelihood_width > 0.0) {
            return Err(Error::Domain(format!(
                "variances must be positive: prior {prior_variance}, width {likelihood_width}"
            )));
        }
        if center.len() != dim {
            return Err(Error::Shape(format!(
                "center has {} coordinates for dimension {dim}",
                center.len()
            )));
        }
        Ok(Self {
            dim,
            prior_variance,
            likelihood_width,
            center,
        })
    }

    /// `log Z = sum_i [ log sqrt(2 pi s^2) + log N(a_i; 0, s0^2 + s^2) ]`,
    /// the product of one-dimensional Gaussian convolutions.
    pub fn log_z(&self) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let conv_var = self.prior_variance + self.likelihood_width;
        self.center
            .iter()
            .map(|a| {
                0.5 * (two_pi * self.likelihood_width).ln()
                    - 0.5 * (two_pi * conv_var).ln()
                    - a * a / (2.0 * conv_var)
            })
            .sum()
    }

    /// Tempered precision `1/s0^2 + beta/s^2`.
    fn tempered_precision(&self, beta: f64) -> f64 {
        1.0 / self.prior_variance + beta / self.likelihood_width
    }

    /// Analytic integrand `g(beta) = E_{pi_beta}[ ||w-a||^2 / (2 s^2) ]`.
    pub fn g(&self, beta: f64) -> f64 {
        let tau = self.tempered_precision(beta);
        let shrink = (1.0 / self.prior_variance) / tau;
        let center_sq: f64 = self.center.iter().map(|a| a * a).sum();
        (self.dim as f64 / tau + center_sq * shrink * shrink) / (2.0 * self.likelihood_width)
    }

    /// Closed-form `KL(posterior || prior)` at `beta = 1`.
    pub fn analytic_kl(&self) -> f64 {
        let tau = self.tempered_precision(1.0);
        let post_var = 1.0 / tau;
        let shrink = (1.0 / self.likelihood_width) / tau;
        self.center
            .iter()
            .map(|a| {
                let mean = a * shrink;
                0.5 * (self.prior_variance / post_var).ln()
                    + (post_var + mean * mean) / (2.0 * self.prior_variance)
                    - 0.5
            })
            .sum()
    }

    pub fn prior(&self) -> GaussianPrior {
        GaussianPrior::isotropic(self.dim, self.prior_variance).expect("validated variance")
    }

    /// The tempered target at inverse temperature `beta` (with `lambda = 1`,
    /// `n = 1`: the potential already carries its own scale).
    pub fn target(&self, beta: f64) -> Result<TemperedGibbsTarget> {
        TemperedGibbsTarget::new(
            self.prior(),
            Arc::new(QuadraticLoss {
                center: self.center.clone(),
                width_sq: self.likelihood_width,
            }),
            beta,
            1.0,
            1,
        )
    }
}

/// `loss(w) = ||w - a||^2 / (2 s^2)`.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub center: Vec<f64>,
    pub width_sq: f64,
}

impl LossModel for QuadraticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.center)
            .map(|(x, a)| (x - a).powi(2))
            .sum::<f64>()
            / (2.0 * self.width_sq)
    }

    fn loss_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let grad = w
            .iter()
            .zip(&self.center)
            .map(|(x, a)| (x - a) / self.width_sq)
            .collect();
        (self.loss(w), grad)
    }
}

/// The two-dimensional Rosenbrock valley `(1-x)^2 + 100 (y - x^2)^2`.
#[derive(Debug, Clone, Default)]
pub struct RosenbrockLoss;

impl RosenbrockLoss {
    pub fn value(x: f64, y: f64) -> f64 {
        (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
    }
}

impl LossModel for RosenbrockLoss {
    fn dim(&self) -> usize {
        2
    }

    fn loss(&self, w: &[f64]) -> f64 {
        Self::value(w[0], w[1])
    }

    fn loss_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (x, y) = (w[0], w[1]);
        let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
        let gy = 200.0 * (y - x * x);
        (Self::value(x, y), vec![gx, gy])
    }
}

/// Demo target: Rosenbrock loss under a unit-variance Gaussian prior centered
/// at `(0, 1.5)`, with the sampler conventionally started at `(0, 3)`.
pub struct RosenbrockDemo {
    pub target: TemperedGibbsTarget,
    pub init: Vec<f64>,
}

pub fn make_rosenbrock_demo() -> RosenbrockDemo {
    let prior = GaussianPrior::new(vec![0.0, 1.5], 1.0).expect("fixed valid parameters");
    let target = TemperedGibbsTarget::new(prior, Arc::new(RosenbrockLoss), 1.0, 1.0, 1)
        .expect("fixed valid parameters");
    RosenbrockDemo {
        target,
        init: vec![0.0, 3.0],
    }
}
