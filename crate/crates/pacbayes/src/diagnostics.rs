//! MCMC and calibration diagnostics.
//!
//! Everything here is a pure function over immutable traces: sample
//! autocorrelation, effective sample size with Geyer initial-positive-sequence
//! truncation, MCMC standard error, the potential-scale-reduction statistic
//! R-hat across chains, and expected calibration error for classifiers.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Sample autocorrelations with `rho[0] = 1`.
#[derive(Debug, Clone)]
pub struct Autocorrelation {
    pub rho: Vec<f64>,
    /// Set when the trace is constant; `rho[tau] = 0` for `tau >= 1` then.
    pub zero_variance: bool,
}

/// Effective sample size of a trace.
#[derive(Debug, Clone, Copy)]
pub struct EssEstimate {
    pub value: f64,
    /// A constant trace has no correlation structure; ESS is reported as N.
    pub zero_variance: bool,
}

/// Potential scale reduction across chains.
#[derive(Debug, Clone, Copy)]
pub struct RhatEstimate {
    pub value: f64,
    /// Between-chain variance is exactly zero (chains are copies).
    pub degenerate_between: bool,
    /// At least one chain is constant.
    pub constant_chain: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64], m: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Autocovariance-normalized correlation at `lag`, using the biased
/// (length-normalized) estimator that keeps the spectral sum well behaved.
fn rho_at(trace: &[f64], m: f64, var0: f64, lag: usize) -> f64 {
    let n = trace.len();
    if lag >= n || var0 <= 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag)
        .map(|i| (trace[i] - m) * (trace[i + lag] - m))
        .sum();
    cov / (n as f64 * var0)
}

/// Sample autocorrelations `rho(0..=max_lag)`.
pub fn autocorrelation(trace: &[f64], max_lag: usize) -> Result<Autocorrelation> {
    if trace.len() <= max_lag {
        return Err(Error::Domain(format!(
            "autocorrelation needs trace length > max_lag ({} <= {max_lag})",
            trace.len()
        )));
    }
    let m = mean(trace);
    let var0: f64 = trace.iter().map(|x| (x - m).powi(2)).sum::<f64>() / trace.len() as f64;
    if var0 <= 0.0 {
        let mut rho = vec![0.0; max_lag + 1];
        rho[0] = 1.0;
        return Ok(Autocorrelation {
            rho,
            zero_variance: true,
        });
    }
    let mut rho = Vec::with_capacity(max_lag + 1);
    rho.push(1.0);
    for tau in 1..=max_lag {
        rho.push(rho_at(trace, m, var0, tau));
    }
    Ok(Autocorrelation {
        rho,
        zero_variance: false,
    })
}

/// Effective sample size `N / (1 + 2 sum rho(tau))`.
///
/// The lag sum is truncated by the Geyer initial positive sequence: pairs
/// `rho(2k-1) + rho(2k)` are accumulated while they stay positive. The result
/// is clipped to `(0, N]`.
pub fn ess(trace: &[f64]) -> Result<EssEstimate> {
    let n = trace.len();
    if n < 2 {
        return Err(Error::Domain("ess needs at least 2 samples".into()));
    }
    let m = mean(trace);
    let var0: f64 = trace.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if var0 <= 0.0 {
        return Ok(EssEstimate {
            value: n as f64,
            zero_variance: true,
        });
    }
    let mut sum = 0.0;
    let mut lag = 1usize;
    let max_lag = n - 1;
    while lag + 1 <= max_lag {
        let pair = rho_at(trace, m, var0, lag) + rho_at(trace, m, var0, lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let value = (n as f64 / (1.0 + 2.0 * sum)).clamp(f64::MIN_POSITIVE, n as f64);
    Ok(EssEstimate {
        value,
        zero_variance: false,
    })
}

/// Standard error of the trace mean: `sqrt(sample variance / ESS)`.
pub fn mcmc_se(trace: &[f64]) -> Result<f64> {
    let e = ess(trace)?;
    if e.zero_variance {
        return Ok(0.0);
    }
    let m = mean(trace);
    Ok((sample_variance(trace, m) / e.value).sqrt())
}

/// Potential scale reduction over two or more equal-length chains.
///
/// With M chains of length n, chain means `m_j` and within-chain variances
/// `s_j^2`: `B = n/(M-1) sum (m_j - m)^2`, `W = mean(s_j^2)`, and
/// `Rhat = sqrt(((n-1)/n W + B/n) / W)`.
pub fn rhat(chains: &[&[f64]]) -> Result<RhatEstimate> {
    if chains.len() < 2 {
        return Err(Error::Domain(format!(
            "rhat needs >= 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::Domain("rhat needs chains of length >= 2".into()));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("rhat needs equal-length chains".into()));
    }
    let big_m = chains.len() as f64;
    let n_f = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n_f / (big_m - 1.0) * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, m)| sample_variance(c, *m))
        .collect();
    let constant_chain = vars.iter().any(|v| *v == 0.0);
    let w = mean(&vars);
    let degenerate_between = b == 0.0;
    let value = if w > 0.0 {
        (((n_f - 1.0) / n_f * w + b / n_f) / w).sqrt()
    } else if degenerate_between {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(RhatEstimate {
        value,
        degenerate_between,
        constant_chain,
    })
}

/// R-hat on per-chain scalar loss traces (convergence in function space).
pub fn function_space_rhat(loss_traces: &[Vec<f64>]) -> Result<RhatEstimate> {
    let views: Vec<&[f64]> = loss_traces.iter().map(|t| t.as_slice()).collect();
    rhat(&views)
}

/// Kolmogorov-Smirnov statistic of a sample against a reference CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "ks_statistic needs a non-empty sample".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    Ok(d)
}

/// Expected calibration error over equal-width confidence bins.
///
/// Confidence is the per-row maximum probability; each example lands in one
/// of `n_bins` bins on `[0, 1]` and the ECE is the bin-weighted absolute gap
/// between accuracy and mean confidence.
pub fn ece(probs: ArrayView2<'_, f64>, labels: &[u8], n_bins: usize) -> Result<f64> {
    let n = probs.nrows();
    if n == 0 || n != labels.len() {
        return Err(Error::Shape(format!(
            "ece needs one label per probability row: {} rows, {} labels",
            n,
            labels.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::Domain("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (k, &p) in row.iter().enumerate() {
            if p > best_p {
                best_p = p;
                best = k;
            }
        }
        let bin = ((best_p * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += best_p;
        acc_sum[bin] += if best == label as usize { 1.0 } else { 0.0 };
    }
    let mut e = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let w = count[b] as f64 / n as f64;
        let conf = conf_sum[b] / count[b] as f64;
        let acc = acc_sum[b] / count[b] as f64;
        e += w * (acc - conf).abs();
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Stationary AR(1) draw: x_{t+1} = rho x_t + sqrt(1-rho^2) eps.
    fn ar1(rho: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: f64 = StandardNormal.sample(&mut rng);
        let scale = (1.0 - rho * rho).sqrt();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(x);
            let eps: f64 = StandardNormal.sample(&mut rng);
            x = rho * x + scale * eps;
        }
        out
    }

    fn iid_normal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn rho_zero_is_one() {
        let t = iid_normal(100, 1);
        let ac = autocorrelation(&t, 10).unwrap();
        assert_eq!(ac.rho[0], 1.0);
    }

    #[test]
    fn ar1_lag_one_matches_coefficient() {
        let t = ar1(0.5, 100_000, 2);
        let ac = autocorrelation(&t, 5).unwrap();
        assert!((ac.rho[1] - 0.5).abs() < 0.01, "rho(1) = {}", ac.rho[1]);
    }

    #[test]
    fn alternating_sequence_has_negative_lag_one() {
        let t: Vec<f64> = (0..1000)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let ac = autocorrelation(&t, 3).unwrap();
        assert!(ac.rho[1] < -0.99, "rho(1) = {}", ac.rho[1]);
    }

    #[test]
    fn constant_trace_is_flagged() {
        let t = vec![3.0; 64];
        let ac = autocorrelation(&t, 8).unwrap();
        assert!(ac.zero_variance);
        assert_eq!(ac.rho[0], 1.0);
        assert!(ac.rho[1..].iter().all(|r| *r == 0.0));
        let e = ess(&t).unwrap();
        assert!(e.zero_variance);
        assert_eq!(e.value, 64.0);
        assert_eq!(mcmc_se(&t).unwrap(), 0.0);
    }

    #[test]
    fn autocorrelation_rejects_short_trace() {
        assert!(autocorrelation(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn ess_of_iid_noise_is_near_n() {
        let n = 100_000;
        let e = ess(&iid_normal(n, 3)).unwrap();
        let ratio = e.value / n as f64;
        assert!((0.9..=1.1).contains(&ratio), "ESS/N = {ratio}");
    }

    #[test]
    fn ess_of_ar1_matches_closed_form() {
        // 1 + 2 sum rho^tau = (1+rho)/(1-rho), so ESS -> N (1-rho)/(1+rho).
        for (rho, tol) in [(0.5, 0.10), (0.9, 0.15)] {
            let n = 100_000;
            let e = ess(&ar1(rho, n, 4)).unwrap();
            let expect = n as f64 * (1.0 - rho) / (1.0 + rho);
            let rel = (e.value - expect).abs() / expect;
            assert!(rel < tol, "rho={rho}: ESS={} expected {expect}", e.value);
        }
    }

    #[test]
    fn ess_never_exceeds_n() {
        for seed in 0..20 {
            let t = iid_normal(500, seed);
            assert!(ess(&t).unwrap().value <= 500.0);
        }
    }

    #[test]
    fn mcmc_se_iid_rate() {
        let t = iid_normal(10_000, 5);
        let se = mcmc_se(&t).unwrap();
        assert!((se - 0.01).abs() < 0.002, "se = {se}");
    }

    #[test]
    fn mcmc_se_inflates_under_correlation() {
        // AR(1) with rho = 0.5 has sqrt(3) times the i.i.d. standard error.
        let n = 100_000;
        let se = mcmc_se(&ar1(0.5, n, 6)).unwrap();
        let iid = (1.0 / n as f64).sqrt();
        assert!(
            (se / iid - 3.0f64.sqrt()).abs() < 0.2 * 3.0f64.sqrt(),
            "ratio = {}",
            se / iid
        );
        // Positive correlation never shrinks the error below the i.i.d. rate.
        let t = ar1(0.7, 50_000, 7);
        let m = mean(&t);
        let var = sample_variance(&t, m);
        assert!(mcmc_se(&t).unwrap() >= (var / t.len() as f64).sqrt());
    }

    #[test]
    fn rhat_near_one_for_same_distribution() {
        let chains: Vec<Vec<f64>> = (0..4).map(|s| iid_normal(5000, 100 + s)).collect();
        let views: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let r = rhat(&views).unwrap();
        assert!(
            r.value >= 1.0 - 1e-3 && r.value < 1.01,
            "rhat = {}",
            r.value
        );
    }

    #[test]
    fn rhat_detects_split_chains() {
        let a = iid_normal(2000, 8);
        let b: Vec<f64> = iid_normal(2000, 9).iter().map(|x| x + 10.0).collect();
        let r = rhat(&[&a, &b]).unwrap();
        assert!(r.value > 1.5, "rhat = {}", r.value);
    }

    #[test]
    fn rhat_identical_chains_degenerate() {
        let a = iid_normal(1000, 10);
        let r = rhat(&[&a, &a]).unwrap();
        assert!(r.degenerate_between);
        assert!(r.value <= 1.0 + 1e-6);
    }

    #[test]
    fn rhat_flags_constant_chain_and_needs_two() {
        let a = vec![1.0; 100];
        let b = iid_normal(100, 11);
        assert!(rhat(&[&a, &b]).unwrap().constant_chain);
        assert!(rhat(&[&b]).is_err());
    }

    #[test]
    fn rhat_affine_invariant() {
        let chains: Vec<Vec<f64>> = (0..3).map(|s| iid_normal(3000, 20 + s)).collect();
        let views: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let r0 = rhat(&views).unwrap().value;
        let scaled: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|x| 3.5 * x - 7.0).collect())
            .collect();
        let views2: Vec<&[f64]> = scaled.iter().map(|c| c.as_slice()).collect();
        let r1 = rhat(&views2).unwrap().value;
        assert!((r0 - r1).abs() < 1e-10);
    }

    #[test]
    fn function_space_rhat_needs_two_chains() {
        assert!(function_space_rhat(&[iid_normal(100, 1)]).is_err());
        let traces = vec![iid_normal(2000, 30), iid_normal(2000, 31)];
        assert!(function_space_rhat(&traces).unwrap().value < 1.05);
    }

    #[test]
    fn ece_perfect_and_calibrated_cases() {
        // Confident and always right.
        let probs = array![[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(ece(probs.view(), &[0, 0], 10).unwrap(), 0.0);
        // Uniform binary predictor with 50% accuracy is perfectly calibrated.
        let probs = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(ece(probs.view(), &[0, 1], 10).unwrap(), 0.0);
    }

    #[test]
    fn ece_single_bin_gap() {
        // Confidence 0.9 everywhere, accuracy 0.6 -> ECE = 0.3.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            rows.push([0.9, 0.1]);
            labels.push(if i < 6 { 0u8 } else { 1u8 });
        }
        let probs = ndarray::Array2::from(rows);
        let e = ece(probs.view(), &labels, 10).unwrap();
        assert!((e - 0.3).abs() < 1e-12, "ece = {e}");
    }

    #[test]
    fn ece_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 200;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let p: f64 = rng.random_range(0.5..1.0);
            rows.push([p, 1.0 - p]);
            labels.push(rng.random_range(0..2) as u8);
        }
        let probs = ndarray::Array2::from(rows.clone());
        let e0 = ece(probs.view(), &labels, 10).unwrap();
        // Reverse both.
        rows.reverse();
        labels.reverse();
        let probs = ndarray::Array2::from(rows);
        let e1 = ece(probs.view(), &labels, 10).unwrap();
        assert!((e0 - e1).abs() < 1e-15);
    }
}
