//! Mean-field variational inference baseline.
//!
//! A factorized Gaussian posterior `N(mu, diag(sigma^2))` is trained by SGD
//! with momentum on the lambda-bound objective, using one reparameterized
//! weight sample per step:
//!
//! ```text
//! F = loss(w~) / (1 - lambda/2) + (KL(q||p) + ln(2 sqrt n / delta2)) / (n lambda (1 - lambda/2))
//! w~ = mu + sigma * xi,   xi ~ N(0, I),   sigma = softplus(rho)
//! ```
//!
//! The KL against the isotropic Gaussian prior is analytic, so MFVI
//! certificates need no integration; its samples are exactly i.i.d., so the
//! classical CLT interval applies.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::rng::{purpose, stream};
use crate::target::GaussianPrior;

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: `ln(e^y - 1)` for `y > 0`.
fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Factorized Gaussian over the flat parameter vector, scales parameterized
/// through a softplus so optimization is unconstrained.
#[derive(Debug, Clone)]
pub struct MeanFieldPosterior {
    pub mean: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MeanFieldPosterior {
    /// Initialized at the prior: `mu` at the prior means, `sigma` at the
    /// prior standard deviation, so the KL starts at zero.
    pub fn from_prior(prior: &GaussianPrior) -> Self {
        let rho0 = softplus_inv(prior.variance.sqrt());
        Self {
            mean: prior.means.clone(),
            rho: vec![rho0; prior.dim()],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|r| softplus(*r)).collect()
    }

    /// One exact draw `mu + sigma * xi`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| {
                let z: f64 = StandardNormal.sample(rng);
                m + softplus(*r) * z
            })
            .collect()
    }
}

/// Analytic `KL(q || p)` between the factorized posterior and the isotropic
/// Gaussian prior.
pub fn gaussian_kl(q: &MeanFieldPosterior, p: &GaussianPrior) -> f64 {
    let sp2 = p.variance;
    let sp = sp2.sqrt();
    q.mean
        .iter()
        .zip(&q.rho)
        .zip(&p.means)
        .map(|((mq, r), mp)| {
            let sq = softplus(*r);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp2) - 0.5
        })
        .sum()
}

/// Objective value and exact gradients through the reparameterization.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub batch_loss: f64,
    pub kl: f64,
    pub grad_mean: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

/// Evaluates the lambda-bound objective on one batch at the reparameterized
/// sample `w~ = mu + softplus(rho) * xi`.
#[allow(clippy::too_many_arguments)]
pub fn pacbayes_objective(
    posterior: &MeanFieldPosterior,
    mlp: &Mlp,
    inputs: ArrayView2<'_, f64>,
    labels: &[u8],
    p_min: f64,
    prior: &GaussianPrior,
    n: usize,
    lambda: f64,
    delta2: f64,
    xi: &[f64],
) -> Result<ObjectiveEval> {
    if xi.len() != posterior.dim() {
        return Err(Error::Shape(format!(
            "noise vector length {} != posterior dimension {}",
            xi.len(),
            posterior.dim()
        )));
    }
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::Domain(format!(
            "lambda must lie in (0,2), got {lambda}"
        )));
    }
    let sigma: Vec<f64> = posterior.sigma();
    let w: Vec<f64> = posterior
        .mean
        .iter()
        .zip(&sigma)
        .zip(xi)
        .map(|((m, s), z)| m + s * z)
        .collect();
    let (batch_loss, grad_w) = mlp.ce_risk_and_grad(&w, inputs, labels, p_min)?;
    let kl = gaussian_kl(posterior, prior);
    let n_f = n as f64;
    let denom = 1.0 - lambda / 2.0;
    let complexity = (2.0 * n_f.sqrt() / delta2).ln();
    let value = batch_loss / denom + (kl + complexity) / (n_f * lambda * denom);

    let loss_coeff = 1.0 / denom;
    let kl_coeff = 1.0 / (n_f * lambda * denom);
    let sp2 = prior.variance;
    let mut grad_mean = Vec::with_capacity(posterior.dim());
    let mut grad_rho = Vec::with_capacity(posterior.dim());
    for i in 0..posterior.dim() {
        let dkl_dmu = (posterior.mean[i] - prior.means[i]) / sp2;
        let dkl_dsigma = -1.0 / sigma[i] + sigma[i] / sp2;
        let dsigma_drho = sigmoid(posterior.rho[i]);
        grad_mean.push(loss_coeff * grad_w[i] + kl_coeff * dkl_dmu);
        grad_rho.push((loss_coeff * grad_w[i] * xi[i] + kl_coeff * dkl_dsigma) * dsigma_drho);
    }
    Ok(ObjectiveEval {
        value,
        batch_loss,
        kl,
        grad_mean,
        grad_rho,
    })
}

/// Training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MfviTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for MfviTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.95,
            epochs: 150,
            batch_size: 250,
            lambda: 1.0,
            seed: 0,
        }
    }
}

/// A trained posterior with its per-epoch objective trace.
#[derive(Debug, Clone)]
pub struct MfviTrainResult {
    pub posterior: MeanFieldPosterior,
    /// Full-train objective after each epoch, evaluated at a fixed noise
    /// vector so epochs are comparable.
    pub objective_trace: Vec<f64>,
    pub final_kl: f64,
}

/// Trains the posterior by SGD with momentum on the bound objective, one
/// reparameterized sample per step. Aborts on non-finite objectives.
pub fn train(
    mlp: &Mlp,
    data: &Dataset,
    prior: &GaussianPrior,
    delta2: f64,
    config: &MfviTrainConfig,
) -> Result<MfviTrainResult> {
    if config.batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let dim = mlp.arch.param_count();
    if prior.dim() != dim {
        return Err(Error::Shape(format!(
            "prior dimension {} != parameter count {dim}",
            prior.dim()
        )));
    }
    let n = data.n();
    let mut posterior = MeanFieldPosterior::from_prior(prior);
    let mut rng = stream(config.seed, &[purpose::MFVI_TRAIN, 1]);
    let mut eval_rng = stream(config.seed, &[purpose::MFVI_TRAIN, 0]);
    let xi_eval: Vec<f64> = (0..dim)
        .map(|_| StandardNormal.sample(&mut eval_rng))
        .collect();

    let mut vel_mean = vec![0.0; dim];
    let mut vel_rho = vec![0.0; dim];
    let mut trace = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(config.batch_size) {
            let batch_inputs = data.inputs.select(Axis(0), batch);
            let batch_labels: Vec<u8> = batch.iter().map(|i| data.labels[*i]).collect();
            let xi: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eval = pacbayes_objective(
                &posterior,
                mlp,
                batch_inputs.view(),
                &batch_labels,
                crate::model::DEFAULT_P_MIN,
                prior,
                n,
                config.lambda,
                delta2,
                &xi,
            )?;
            if !eval.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective became {} at epoch {epoch}",
                    eval.value
                )));
            }
            for i in 0..dim {
                vel_mean[i] = config.momentum * vel_mean[i] + eval.grad_mean[i];
                vel_rho[i] = config.momentum * vel_rho[i] + eval.grad_rho[i];
                posterior.mean[i] -= config.learning_rate * vel_mean[i];
                posterior.rho[i] -= config.learning_rate * vel_rho[i];
            }
        }
        let eval = pacbayes_objective(
            &posterior,
            mlp,
            data.inputs.view(),
            &data.labels,
            crate::model::DEFAULT_P_MIN,
            prior,
            n,
            config.lambda,
            delta2,
            &xi_eval,
        )?;
        trace.push(eval.value);
    }
    let final_kl = gaussian_kl(&posterior, prior);
    Ok(MfviTrainResult {
        posterior,
        objective_trace: trace,
        final_kl,
    })
}

/// `m` exact i.i.d. draws from the posterior.
pub fn sample_posterior<R: Rng>(
    posterior: &MeanFieldPosterior,
    m: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..m).map(|_| posterior.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpArchitecture;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(n: usize, d: usize, k: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0));
        let labels: Vec<u8> = (0..n).map(|i| (i % k) as u8).collect();
        Dataset::new(inputs, labels, k).unwrap()
    }

    #[test]
    fn kl_is_zero_at_the_prior() {
        let prior = GaussianPrior::new(vec![0.2, -0.4, 0.0], 0.03).unwrap();
        let q = MeanFieldPosterior::from_prior(&prior);
        assert!(gaussian_kl(&q, &prior).abs() < 1e-12);
    }

    #[test]
    fn kl_one_dimensional_unit_shift() {
        // KL(N(1,1) || N(0,1)) = 1/2.
        let prior = GaussianPrior::standard(1);
        let q = MeanFieldPosterior {
            mean: vec![1.0],
            rho: vec![softplus_inv(1.0)],
        };
        assert_abs_diff_eq!(gaussian_kl(&q, &prior), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kl_nonnegative_over_random_settings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let dim = rng.random_range(1..6);
            let prior = GaussianPrior::new(
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(0.01..2.0),
            )
            .unwrap();
            let q = MeanFieldPosterior {
                mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                rho: (0..dim).map(|_| rng.random_range(-4.0..2.0)).collect(),
            };
            assert!(gaussian_kl(&q, &prior) >= -1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let prior = GaussianPrior::new(vec![0.1, -0.3, 0.6], 0.5).unwrap();
        let q = MeanFieldPosterior {
            mean: vec![0.4, 0.0, 0.2],
            rho: vec![-1.0, -2.0, 0.3],
        };
        let analytic = gaussian_kl(&q, &prior);
        let sigma = q.sigma();
        let log_q = |w: &[f64]| -> f64 {
            w.iter()
                .zip(&q.mean)
                .zip(&sigma)
                .map(|((x, m), s)| {
                    -0.5 * (2.0 * std::f64::consts::PI * s * s).ln()
                        - (x - m).powi(2) / (2.0 * s * s)
                })
                .sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..m {
            let w = q.sample(&mut rng);
            let v = log_q(&w) - prior.log_density(&w);
            sum += v;
            sumsq += v * v;
        }
        let mc = sum / m as f64;
        let se = ((sumsq / m as f64 - mc * mc) / m as f64).sqrt();
        assert!(
            (mc - analytic).abs() < 3.0 * se,
            "MC {mc} vs analytic {analytic} (se {se})"
        );
    }

    #[test]
    fn collapsed_scale_recovers_deterministic_objective() {
        let mlp = Mlp::new(MlpArchitecture::new(vec![3, 4, 2]).unwrap());
        let data = toy_dataset(16, 3, 2, 4);
        let prior = GaussianPrior::isotropic(mlp.arch.param_count(), 0.03).unwrap();
        let mut q = MeanFieldPosterior::from_prior(&prior);
        // Push every scale to effectively zero.
        q.rho.iter_mut().for_each(|r| *r = -40.0);
        let xi = vec![0.7; mlp.arch.param_count()];
        let eval = pacbayes_objective(
            &q,
            &mlp,
            data.inputs.view(),
            &data.labels,
            1e-4,
            &prior,
            16,
            1.0,
            0.025,
            &xi,
        )
        .unwrap();
        let (loss_at_mean, _) = mlp
            .ce_risk_and_grad(&q.mean, data.inputs.view(), &data.labels, 1e-4)
            .unwrap();
        let kl = gaussian_kl(&q, &prior);
        let expect = 2.0 * loss_at_mean + 2.0 * (kl + (2.0 * 4.0 / 0.025f64).ln()) / 16.0;
        assert_abs_diff_eq!(eval.value, expect, epsilon = 1e-9);
    }

    #[test]
    fn kl_term_gradient_matches_closed_form_derivative() {
        let prior = GaussianPrior::new(vec![0.1, -0.2], 0.4).unwrap();
        let q = MeanFieldPosterior {
            mean: vec![0.5, 0.0],
            rho: vec![-0.7, 0.2],
        };
        let h = 1e-6;
        for i in 0..2 {
            // d KL / d mu_i by central differences.
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp.mean[i] += h;
            qm.mean[i] -= h;
            let fd = (gaussian_kl(&qp, &prior) - gaussian_kl(&qm, &prior)) / (2.0 * h);
            let closed = (q.mean[i] - prior.means[i]) / prior.variance;
            assert_abs_diff_eq!(fd, closed, epsilon = 1e-8);
            // d KL / d rho_i.
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp.rho[i] += h;
            qm.rho[i] -= h;
            let fd = (gaussian_kl(&qp, &prior) - gaussian_kl(&qm, &prior)) / (2.0 * h);
            let s = softplus(q.rho[i]);
            let closed = (-1.0 / s + s / prior.variance) * sigmoid(q.rho[i]);
            assert_abs_diff_eq!(fd, closed, epsilon = 1e-8);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mlp = Mlp::new(MlpArchitecture::new(vec![2, 2, 2]).unwrap());
        let dim = mlp.arch.param_count();
        let data = toy_dataset(8, 2, 2, 5);
        let prior = GaussianPrior::isotropic(dim, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = MeanFieldPosterior {
            mean: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            rho: (0..dim).map(|_| rng.random_range(-2.0..0.0)).collect(),
        };
        let xi: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |q: &MeanFieldPosterior| {
            pacbayes_objective(
                q,
                &mlp,
                data.inputs.view(),
                &data.labels,
                1e-4,
                &prior,
                8,
                1.0,
                0.025,
                &xi,
            )
            .unwrap()
        };
        let eval = f(&q);
        let h = 1e-5;
        for i in 0..dim {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp.mean[i] += h;
            qm.mean[i] -= h;
            let fd = (f(&qp).value - f(&qm).value) / (2.0 * h);
            let denom = fd.abs().max(eval.grad_mean[i].abs()).max(1e-8);
            assert!(
                (fd - eval.grad_mean[i]).abs() / denom < 1e-4,
                "mean coord {i}"
            );
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp.rho[i] += h;
            qm.rho[i] -= h;
            let fd = (f(&qp).value - f(&qm).value) / (2.0 * h);
            let denom = fd.abs().max(eval.grad_rho[i].abs()).max(1e-8);
            assert!(
                (fd - eval.grad_rho[i]).abs() / denom < 1e-4,
                "rho coord {i}"
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let mlp = Mlp::new(MlpArchitecture::new(vec![3, 5, 2]).unwrap());
        let data = toy_dataset(60, 3, 2, 8);
        let prior = GaussianPrior::isotropic(mlp.arch.param_count(), 0.03).unwrap();
        let cfg = MfviTrainConfig {
            epochs: 12,
            batch_size: 20,
            seed: 3,
            ..MfviTrainConfig::default()
        };
        let a = train(&mlp, &data, &prior, 0.025, &cfg).unwrap();
        let b = train(&mlp, &data, &prior, 0.025, &cfg).unwrap();
        assert_eq!(a.posterior.mean, b.posterior.mean);
        assert_eq!(a.posterior.rho, b.posterior.rho);
        assert_eq!(a.objective_trace, b.objective_trace);
        assert!(
            a.objective_trace.last().unwrap() <= a.objective_trace.first().unwrap(),
            "trace {:?}",
            a.objective_trace
        );
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let mlp = Mlp::new(MlpArchitecture::new(vec![3, 4, 2]).unwrap());
        let data = toy_dataset(10, 3, 2, 9);
        let prior = GaussianPrior::isotropic(mlp.arch.param_count(), 0.03).unwrap();
        let cfg = MfviTrainConfig {
            epochs: 0,
            batch_size: 5,
            seed: 1,
            ..Default::default()
        };
        let out = train(&mlp, &data, &prior, 0.025, &cfg).unwrap();
        assert_eq!(out.posterior.mean, prior.means);
        assert!(out.final_kl.abs() < 1e-12);
        assert!(out.objective_trace.is_empty());
    }

    #[test]
    fn posterior_sampling_statistics() {
        let q = MeanFieldPosterior {
            mean: vec![0.5, -1.0],
            rho: vec![0.0, -1.0],
        };
        let sigma = q.sigma();
        let m = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = sample_posterior(&q, m, &mut rng);
        for i in 0..2 {
            let mean: f64 = samples.iter().map(|w| w[i]).sum::<f64>() / m as f64;
            let tol = 4.0 * sigma[i] / (m as f64).sqrt();
            assert!(
                (mean - q.mean[i]).abs() < tol,
                "coord {i}: {mean} vs {}",
                q.mean[i]
            );
        }
        // Distinct streams give distinct draws.
        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        assert_ne!(q.sample(&mut rng2), samples[0]);
        // Collapsed scales reproduce the mean exactly.
        let point = MeanFieldPosterior {
            mean: vec![0.3],
            rho: vec![-745.0],
        };
        assert_eq!(point.sample(&mut rng2), vec![0.3]);
    }
}
