//! Bernoulli-KL calculus, PAC-Bayes bounds, and certificate assembly.
//!
//! A risk certificate is a high-probability upper bound on the expected loss
//! of a randomized predictor. Two bound families are supported:
//!
//! - the kl bound, inverted numerically through [`kl_inverse`]:
//!   `L(Q) <= kl_inverse(Lhat, (KL(Q||P) + ln(2 sqrt(n)/delta)) / n)`;
//! - the lambda bound, its closed-form relaxation for `lambda` in (0, 2).
//!
//! The empirical risk of the posterior is itself estimated from samples, so
//! it enters the bounds through one of three high-probability estimators:
//! a kl-inverse concentration bound on thinned (approximately independent)
//! samples, an asymptotic confidence interval that tolerates Markov-chain
//! dependence, and a classical CLT interval reserved for exactly i.i.d.
//! samples. The total failure probability is split between estimation
//! (`delta1`) and the PAC-Bayes bound (`delta2`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Failure-probability accounting for one certificate.
///
/// `delta1` pays for the empirical-risk estimate, `delta2` for the PAC-Bayes
/// bound; they must sum to `delta`. `delta_ti` is the separate allotment for
/// the thermodynamic-integration confidence limits, split across the
/// tempering grid by a union bound. `epsilon` is the slack constant of the
/// asymptotic interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CertificateBudget {
    pub delta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub epsilon: f64,
    pub delta_ti: f64,
}

impl CertificateBudget {
    pub fn new(delta: f64, delta1: f64, delta2: f64, epsilon: f64, delta_ti: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0 && delta1 > 0.0 && delta2 > 0.0) {
            return Err(Error::Domain(format!(
                "deltas must lie in (0,1): delta={delta}, delta1={delta1}, delta2={delta2}"
            )));
        }
        if (delta1 + delta2 - delta).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "budget must split exactly: delta1 + delta2 = {} != delta = {delta}",
                delta1 + delta2
            )));
        }
        if !(epsilon > 0.0) || !(delta_ti > 0.0 && delta_ti < 1.0) {
            return Err(Error::Domain(format!(
                "epsilon and delta_ti must be positive: epsilon={epsilon}, delta_ti={delta_ti}"
            )));
        }
        Ok(Self {
            delta,
            delta1,
            delta2,
            epsilon,
            delta_ti,
        })
    }
}

impl Default for CertificateBudget {
    /// Certificates valid with probability 0.95, evenly split.
    fn default() -> Self {
        Self {
            delta: 0.05,
            delta1: 0.025,
            delta2: 0.025,
            epsilon: 0.01,
            delta_ti: 0.025,
        }
    }
}

/// Which loss the certificate is stated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    ZeroOne,
    BoundedCe,
}

/// Which PAC-Bayes bound produced the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundFamily {
    Kl,
    Lambda,
}

/// Which high-probability estimator upper-bounded the empirical risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    KlInverse,
    Asymptotic,
    Clt,
}

/// Where the KL value plugged into the bound came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlSource {
    /// High-probability overestimate from thermodynamic integration.
    TiUpper,
    /// Closed-form Gaussian KL of a mean-field posterior.
    AnalyticGaussian,
    /// The conservative sanity bound of [`naive_kl_upper`].
    NaiveUpper,
}

/// Binary KL divergence `kl(q || p)` between Bernoulli means.
///
/// Uses the conventions `0 log 0 = 0`; returns infinity when `p` sits on the
/// boundary and `q` disagrees with it.
pub fn bernoulli_kl(q: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "bernoulli_kl needs q,p in [0,1]: q={q}, p={p}"
        )));
    }
    let mut kl = 0.0;
    if q > 0.0 {
        if p == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += q * (q / p).ln();
    }
    if q < 1.0 {
        if p == 1.0 {
            return Ok(f64::INFINITY);
        }
        kl += (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    }
    Ok(kl)
}

/// Inverse Bernoulli KL: `sup { y in [x, 1] : kl(x || y) <= b }`.
///
/// Bisection runs to interval width 1e-12 (tighter than the 1e-9 the
/// certificates need). When the supremum is within 1e-12 of 1 the function
/// returns exactly 1.0: at that point the certificate is vacuous anyway and
/// the saturated value avoids meaningless last-ulp arithmetic.
pub fn kl_inverse(x: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("kl_inverse needs x in [0,1]: x={x}")));
    }
    if !(b >= 0.0) {
        return Err(Error::Domain(format!("kl_inverse needs b >= 0: b={b}")));
    }
    if b == 0.0 {
        return Ok(x);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let sat = 1.0 - 1e-12;
    if bernoulli_kl(x, sat)? <= b {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (x, sat);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if bernoulli_kl(x, mid)? <= b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Certificate from the kl bound: `kl_inverse(Lhat, (KL + ln(2 sqrt n / delta2)) / n)`.
pub fn kl_bound_certificate(emp_upper: f64, kl: f64, n: usize, delta2: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("kl bound needs n >= 1".into()));
    }
    if kl < 0.0 {
        return Err(Error::Domain(format!("kl bound needs KL >= 0, got {kl}")));
    }
    let b = (kl + (2.0 * (n as f64).sqrt() / delta2).ln()) / n as f64;
    kl_inverse(emp_upper, b)
}

/// Certificate from the lambda bound for `lambda` in (0, 2); unclipped.
///
/// At `lambda = 1` this reduces to `2 Lhat + 2 (KL + ln(2 sqrt n / delta2)) / n`.
pub fn lambda_bound_certificate(
    emp_upper: f64,
    kl: f64,
    n: usize,
    lambda: f64,
    delta2: f64,
) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::Domain(format!(
            "lambda bound needs lambda in (0,2): {lambda}"
        )));
    }
    if n == 0 {
        return Err(Error::Domain("lambda bound needs n >= 1".into()));
    }
    if kl < 0.0 {
        return Err(Error::Domain(format!(
            "lambda bound needs KL >= 0, got {kl}"
        )));
    }
    let n = n as f64;
    let denom = 1.0 - lambda / 2.0;
    let complexity = kl + (2.0 * n.sqrt() / delta2).ln();
    Ok(emp_upper / denom + complexity / (n * lambda * denom))
}

/// Upper-bounds the posterior's empirical risk from `m` thinned samples:
/// `kl_inverse(mean, ln(2/delta1)/m)`.
pub fn klinv_risk_estimate(losses: &[f64], delta1: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Domain(
            "klinv_risk_estimate needs at least one sample".into(),
        ));
    }
    let m = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / m;
    kl_inverse(mean, (2.0 / delta1).ln() / m)
}

/// Asymptotic one-sided interval that tolerates Markov-chain dependence:
/// `mean + (1 + epsilon) sigma_hat / sqrt(2 alpha m)`.
///
/// `sigma_hat` estimates the asymptotic standard deviation, i.e.
/// `MCMC_SE * sqrt(m)`.
pub fn asymptotic_risk_estimate(
    mean: f64,
    sigma_hat: f64,
    m: usize,
    alpha: f64,
    epsilon: f64,
) -> f64 {
    mean + (1.0 + epsilon) * sigma_hat / (2.0 * alpha * m as f64).sqrt()
}

/// Classical CLT interval, valid for exactly i.i.d. samples only:
/// `mean + q_alpha sigma_hat / sqrt(m)`.
pub fn clt_risk_estimate(mean: f64, sigma_hat: f64, m: usize, alpha: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let q = Normal::standard().inverse_cdf(1.0 - alpha);
    mean + q * sigma_hat / (m as f64).sqrt()
}

/// Conservative KL sanity bound from an auxiliary tractable posterior `G`:
/// `KL(Q||P) <= n lambda E_G[loss] + KL(G||P)`.
pub fn naive_kl_upper(e_g_loss: f64, kl_g_p: f64, n: usize, lambda: f64) -> f64 {
    n as f64 * lambda * e_g_loss + kl_g_p
}

/// Sampled-loss summary backing one certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskEvidence {
    pub loss_kind: LossKind,
    /// Thinned losses treated as approximately independent.
    pub thinned: Vec<f64>,
    /// Mean of the full retained trace.
    pub full_mean: f64,
    /// MCMC standard error of `full_mean` (sqrt(var/ESS)).
    pub full_mcmc_se: f64,
    /// Length of the full retained trace.
    pub full_count: usize,
    /// True when the samples are exactly i.i.d. (CLT estimator allowed).
    pub iid: bool,
}

/// A fully assembled certificate with every component recorded for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskCertificate {
    pub loss_kind: LossKind,
    pub bound_family: BoundFamily,
    pub estimator: Estimator,
    pub kl_source: KlSource,
    /// Empirical-risk estimate before clamping to [0, 1].
    pub empirical_risk_estimate_raw: f64,
    /// Empirical-risk upper bound actually plugged into the bound.
    pub empirical_risk_upper: f64,
    /// Plain sample mean, for reference.
    pub empirical_risk_mean: f64,
    pub kl_value: f64,
    pub n: usize,
    pub lambda: f64,
    pub budget: CertificateBudget,
    /// Bound value before clipping at 1.
    pub raw_value: f64,
    /// Reported certificate, clipped to at most 1.
    pub value: f64,
}

/// Assembles one certificate from sampled-loss evidence and a KL value.
///
/// The estimation slot `delta1` pays for the empirical-risk upper bound
/// (the asymptotic interval reuses it as `alpha` so the estimators are
/// comparable); `delta2` pays for the PAC-Bayes bound itself.
pub fn certify(
    evidence: &RiskEvidence,
    kl_value: f64,
    kl_source: KlSource,
    n: usize,
    lambda: f64,
    budget: &CertificateBudget,
    family: BoundFamily,
    estimator: Estimator,
) -> Result<RiskCertificate> {
    if evidence.thinned.is_empty() || evidence.full_count == 0 {
        return Err(Error::Domain(
            "certify needs non-empty loss evidence".into(),
        ));
    }
    let raw_estimate = match estimator {
        Estimator::KlInverse => klinv_risk_estimate(&evidence.thinned, budget.delta1)?,
        Estimator::Asymptotic => {
            let m = evidence.full_count;
            let sigma_hat = evidence.full_mcmc_se * (m as f64).sqrt();
            asymptotic_risk_estimate(
                evidence.full_mean,
                sigma_hat,
                m,
                budget.delta1,
                budget.epsilon,
            )
        }
        Estimator::Clt => {
            if !evidence.iid {
                return Err(Error::Domain(
                    "CLT estimator is valid for i.i.d. samples only; use the thinned \
                     kl-inverse or asymptotic estimator for Markov-chain samples"
                        .into(),
                ));
            }
            let m = evidence.full_count;
            let sigma_hat = evidence.full_mcmc_se * (m as f64).sqrt();
            clt_risk_estimate(evidence.full_mean, sigma_hat, m, budget.delta1)
        }
    };
    // Losses are bounded by 1, so the estimate may be clamped without
    // weakening the guarantee.
    let emp_upper = raw_estimate.clamp(0.0, 1.0);
    let raw_value = match family {
        BoundFamily::Kl => kl_bound_certificate(emp_upper, kl_value, n, budget.delta2)?,
        BoundFamily::Lambda => {
            lambda_bound_certificate(emp_upper, kl_value, n, lambda, budget.delta2)?
        }
    };
    Ok(RiskCertificate {
        loss_kind: evidence.loss_kind,
        bound_family: family,
        estimator,
        kl_source,
        empirical_risk_estimate_raw: raw_estimate,
        empirical_risk_upper: emp_upper,
        empirical_risk_mean: evidence.full_mean,
        kl_value,
        n,
        lambda,
        budget: *budget,
        raw_value,
        value: raw_value.min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn kl_at_equal_means_is_zero() {
        for q in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert_eq!(bernoulli_kl(q, q).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_zero_q_closed_form() {
        for p in [0.1, 0.3, 0.7] {
            assert_abs_diff_eq!(
                bernoulli_kl(0.0, p).unwrap(),
                -(1.0 - p).ln(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn kl_fixed_value() {
        // 0.1 ln(1/3) + 0.9 ln(9/7), evaluated independently.
        assert_abs_diff_eq!(
            bernoulli_kl(0.1, 0.3).unwrap(),
            0.1163217565860046,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_boundary_disagreement_is_infinite() {
        assert!(bernoulli_kl(0.5, 0.0).unwrap().is_infinite());
        assert!(bernoulli_kl(0.5, 1.0).unwrap().is_infinite());
        assert_eq!(bernoulli_kl(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(bernoulli_kl(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_out_of_range() {
        assert!(bernoulli_kl(-0.1, 0.5).is_err());
        assert!(bernoulli_kl(0.5, 1.5).is_err());
    }

    #[test]
    fn kl_inverse_zero_budget_is_identity() {
        for x in [0.0, 0.2, 0.9] {
            assert_eq!(kl_inverse(x, 0.0).unwrap(), x);
        }
    }

    #[test]
    fn kl_inverse_zero_mean_closed_form() {
        for b in [0.01, 0.1, 1.0] {
            assert_abs_diff_eq!(
                kl_inverse(0.0, b).unwrap(),
                1.0 - (-b).exp(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn kl_inverse_fixed_value_matches_grid_search() {
        // sup{y: kl(0.1||y) <= 0.05} located by a 1e-6 grid sweep: 0.220078.
        let y = kl_inverse(0.1, 0.05).unwrap();
        assert_abs_diff_eq!(y, 0.2200786011069248, epsilon = 1e-9);
        assert_abs_diff_eq!(bernoulli_kl(0.1, y).unwrap(), 0.05, epsilon = 1e-9);
    }

    #[test]
    fn kl_inverse_roundtrip_over_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(0.0..0.9);
            let b: f64 = rng.random_range(0.0..0.5);
            let y = kl_inverse(x, b).unwrap();
            assert!(y >= x && y <= 1.0);
            if y < 1.0 && b > 0.0 {
                let back = bernoulli_kl(x, y).unwrap();
                assert!((back - b).abs() < 1e-8, "x={x} b={b} y={y} back={back}");
            }
        }
    }

    #[test]
    fn kl_bound_closed_form_case() {
        // Lhat = 0, KL = 0, n = 100, delta2 = 0.05.
        let c = kl_bound_certificate(0.0, 0.0, 100, 0.05).unwrap();
        assert_abs_diff_eq!(c, 0.058155079116972264, epsilon = 1e-9);
    }

    #[test]
    fn kl_bound_monotone_in_kl() {
        let mut prev = 0.0;
        for kl in [0.0, 1.0, 10.0, 100.0, 1000.0] {
            let c = kl_bound_certificate(0.1, kl, 500, 0.025).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        // Huge KL drives the certificate to the vacuous limit.
        assert!(kl_bound_certificate(0.1, 1e9, 500, 0.025).unwrap() > 0.999);
    }

    #[test]
    fn lambda_bound_fixed_value_and_algebra() {
        let c = lambda_bound_certificate(0.0, 0.0, 100, 1.0, 0.05).unwrap();
        assert_abs_diff_eq!(c, 0.11982929094215963, epsilon = 1e-12);
        // lambda = 1 reduces to 2 Lhat + 2 (KL + ln(2 sqrt n/delta))/n.
        let (l, kl, n, d2) = (0.3, 12.0, 777, 0.025);
        let direct = lambda_bound_certificate(l, kl, n, 1.0, d2).unwrap();
        let reduced = 2.0 * l + 2.0 * (kl + (2.0 * (n as f64).sqrt() / d2).ln()) / n as f64;
        assert_abs_diff_eq!(direct, reduced, epsilon = 1e-12);
    }

    #[test]
    fn lambda_bound_rejects_bad_lambda() {
        assert!(lambda_bound_certificate(0.1, 1.0, 100, 0.0, 0.05).is_err());
        assert!(lambda_bound_certificate(0.1, 1.0, 100, 2.0, 0.05).is_err());
    }

    #[test]
    fn kl_bound_never_exceeds_lambda_bound_at_unit_lambda() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let l: f64 = rng.random_range(0.0..1.0);
            let kl: f64 = rng.random_range(0.0..2000.0);
            let n: usize = rng.random_range(100..100_000);
            let klv = kl_bound_certificate(l, kl, n, 0.025).unwrap();
            let lav = lambda_bound_certificate(l, kl, n, 1.0, 0.025).unwrap();
            assert!(
                klv <= lav + 1e-12,
                "kl={klv} lambda={lav} (l={l}, kl={kl}, n={n})"
            );
        }
    }

    #[test]
    fn klinv_risk_estimate_zero_losses() {
        let losses = vec![0.0; 1000];
        let e = klinv_risk_estimate(&losses, 0.025).unwrap();
        assert_abs_diff_eq!(e, 0.00437243956467126, epsilon = 1e-9);
    }

    #[test]
    fn klinv_risk_estimate_dominates_mean_and_shrinks() {
        let losses: Vec<f64> = (0..500)
            .map(|i| if i % 10 == 0 { 1.0 } else { 0.0 })
            .collect();
        let mean = 0.1;
        let e = klinv_risk_estimate(&losses, 0.025).unwrap();
        assert!(e >= mean);
        let big: Vec<f64> = (0..50_000)
            .map(|i| if i % 10 == 0 { 1.0 } else { 0.0 })
            .collect();
        let e_big = klinv_risk_estimate(&big, 0.025).unwrap();
        assert!(e_big < e);
        assert!(e_big - mean < 0.01);
    }

    #[test]
    fn asymptotic_estimate_fixed_value() {
        let c = asymptotic_risk_estimate(0.05, 0.1, 10_000, 0.025, 0.01);
        assert_abs_diff_eq!(c, 0.054516857314549576, epsilon = 1e-12);
        assert_eq!(asymptotic_risk_estimate(0.3, 0.0, 100, 0.025, 0.01), 0.3);
        assert!(
            asymptotic_risk_estimate(0.05, 0.2, 10_000, 0.025, 0.01)
                > asymptotic_risk_estimate(0.05, 0.1, 10_000, 0.025, 0.01)
        );
    }

    #[test]
    fn clt_estimate_uses_normal_quantile() {
        let c = clt_risk_estimate(0.0, 1.0, 1, 0.025);
        assert_abs_diff_eq!(c, 1.959963984540054, epsilon = 1e-9);
        assert_eq!(clt_risk_estimate(0.4, 0.0, 100, 0.025), 0.4);
        // On these inputs the dependence-tolerant interval is the wider one.
        let asy = asymptotic_risk_estimate(0.0, 1.0, 1, 0.025, 0.01);
        assert!(asy > c);
    }

    #[test]
    fn naive_kl_upper_cases() {
        assert_eq!(naive_kl_upper(0.0, 0.0, 1000, 1.0), 0.0);
        // 30000 * 1 * 0.0256 + 318 = 768 + 318.
        assert_abs_diff_eq!(
            naive_kl_upper(0.0256, 318.0, 30_000, 1.0),
            1086.0,
            epsilon = 1e-9
        );
        assert!(naive_kl_upper(0.03, 100.0, 1000, 1.0) > naive_kl_upper(0.02, 100.0, 1000, 1.0));
        assert!(naive_kl_upper(0.02, 200.0, 1000, 1.0) > naive_kl_upper(0.02, 100.0, 1000, 1.0));
    }

    fn evidence(losses: Vec<f64>, iid: bool) -> RiskEvidence {
        let m = losses.len();
        let mean = losses.iter().sum::<f64>() / m as f64;
        let var = losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        RiskEvidence {
            loss_kind: LossKind::ZeroOne,
            thinned: losses,
            full_mean: mean,
            full_mcmc_se: (var / m as f64).sqrt(),
            full_count: m,
            iid,
        }
    }

    #[test]
    fn certify_composes_the_pieces_like_manual_assembly() {
        let ev = evidence(vec![0.0; 200], false);
        let budget = CertificateBudget::default();
        let cert = certify(
            &ev,
            3.0,
            KlSource::TiUpper,
            5000,
            1.0,
            &budget,
            BoundFamily::Kl,
            Estimator::KlInverse,
        )
        .unwrap();
        let manual_upper = klinv_risk_estimate(&ev.thinned, budget.delta1).unwrap();
        let manual = kl_bound_certificate(manual_upper, 3.0, 5000, budget.delta2).unwrap();
        assert_eq!(cert.value, manual);
        assert!(cert.value >= cert.empirical_risk_upper);
    }

    #[test]
    fn certify_rejects_clt_on_chain_samples() {
        let ev = evidence(vec![0.1; 50], false);
        let err = certify(
            &ev,
            1.0,
            KlSource::AnalyticGaussian,
            1000,
            1.0,
            &CertificateBudget::default(),
            BoundFamily::Kl,
            Estimator::Clt,
        );
        assert!(err.is_err());
    }

    #[test]
    fn certificates_monotone_in_kl_and_risk() {
        let budget = CertificateBudget::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let l1: f64 = rng.random_range(0.0..0.5);
            let l2 = l1 + rng.random_range(0.0..0.4);
            let kl1: f64 = rng.random_range(0.0..500.0);
            let kl2 = kl1 + rng.random_range(0.0..500.0);
            let n: usize = rng.random_range(100..50_000);
            for family in [BoundFamily::Kl, BoundFamily::Lambda] {
                let f = |l: f64, kl: f64| match family {
                    BoundFamily::Kl => kl_bound_certificate(l, kl, n, budget.delta2).unwrap(),
                    BoundFamily::Lambda => {
                        lambda_bound_certificate(l, kl, n, 1.0, budget.delta2).unwrap()
                    }
                };
                assert!(f(l1, kl2) >= f(l1, kl1) - 1e-12);
                assert!(f(l2, kl1) >= f(l1, kl1) - 1e-12);
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_inverse_stays_bracketed(x in 0.0f64..1.0, b in 0.0f64..5.0) {
                let y = kl_inverse(x, b).unwrap();
                prop_assert!(y >= x);
                prop_assert!(y <= 1.0);
            }

            #[test]
            fn kl_inverse_monotone_in_budget(x in 0.0f64..0.95, b in 0.0f64..1.0, db in 0.0f64..1.0) {
                let y1 = kl_inverse(x, b).unwrap();
                let y2 = kl_inverse(x, b + db).unwrap();
                prop_assert!(y2 >= y1 - 1e-12);
            }
        }
    }
}
