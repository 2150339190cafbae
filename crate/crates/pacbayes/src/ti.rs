//! Thermodynamic integration of the negative log normalizing constant, and
//! KL assembly.
//!
//! Writing `g(beta)` for the expectation of `lambda n loss(w)` under the
//! tempered target, the negative log normalizing constant of the Gibbs
//! posterior is the integral of `g` over `[0, 1]`. Because `g` is decreasing
//! and convex in `beta`, both the trapezium rule and the left Riemann sum
//! overestimate the integral; the trapezium estimate is the tighter of the
//! two and is the one the certificates consume. The KL divergence follows as
//!
//! ```text
//! KL(Q* || P) = -log Z - g(1)
//! ```
//!
//! with a conservative high-probability version built from per-grid-point
//! upper confidence limits and a lower limit on `g(1)`.

use serde::{Deserialize, Serialize};

use crate::bounds::asymptotic_risk_estimate;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::hmc::ChainSet;

/// Strictly increasing tempering grid with endpoints exactly 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaGrid {
    values: Vec<f64>,
}

impl BetaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(
                "a tempering grid needs at least two points".into(),
            ));
        }
        if values[0] != 0.0 || *values.last().unwrap() != 1.0 {
            return Err(Error::Domain(format!(
                "grid endpoints must be exactly 0 and 1, got {} and {}",
                values[0],
                values.last().unwrap()
            )));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "grid values must be strictly increasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// `points` equally spaced values from 0 to 1.
    pub fn uniform(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Domain(
                "a uniform grid needs at least two points".into(),
            ));
        }
        let values = (0..points)
            .map(|i| i as f64 / (points - 1) as f64)
            .collect::<Vec<_>>();
        let mut values = values;
        // Pin the endpoints against accumulated rounding.
        values[0] = 0.0;
        *values.last_mut().unwrap() = 1.0;
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of grid points (always at least two).
    pub fn point_count(&self) -> usize {
        self.values.len()
    }
}

/// Point estimate and confidence limits of the integrand at one temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GEstimate {
    pub beta: f64,
    /// Pooled mean of `lambda n loss`.
    pub point: f64,
    /// One-sided upper confidence limit.
    pub upper: f64,
    /// One-sided lower confidence limit (used when the integrand is
    /// subtracted).
    pub lower: f64,
    pub ess: f64,
    /// Potential scale reduction across chains; absent for single-chain runs.
    pub rhat: Option<f64>,
    pub mcmc_se: f64,
    /// Pooled retained sample count behind the estimate.
    pub count: usize,
}

/// Estimates the integrand from per-chain retained loss traces.
///
/// `alpha` is this grid point's slice of the integration budget; the interval
/// is the dependence-tolerant asymptotic one.
pub fn estimate_g_from_traces(
    retained: &[Vec<f64>],
    beta: f64,
    scale: f64,
    alpha: f64,
    epsilon: f64,
) -> Result<GEstimate> {
    let m: usize = retained.iter().map(|t| t.len()).sum();
    if m == 0 {
        return Err(Error::Domain("estimate_g needs retained samples".into()));
    }
    let mean = retained.iter().flatten().sum::<f64>() / m as f64;
    // ESS sums over chains; a flagged constant trace contributes its length.
    let mut ess_total = 0.0;
    for trace in retained {
        ess_total += diagnostics::ess(trace)?.value;
    }
    let var = retained
        .iter()
        .flatten()
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / (m as f64 - 1.0).max(1.0);
    let se = (var / ess_total).sqrt();
    let rhat = if retained.len() >= 2 {
        let traces: Vec<&[f64]> = retained.iter().map(|t| t.as_slice()).collect();
        Some(diagnostics::rhat(&traces)?.value)
    } else {
        None
    };
    let point = scale * mean;
    let sigma_hat = scale * se * (m as f64).sqrt();
    let upper = asymptotic_risk_estimate(point, sigma_hat, m, alpha, epsilon);
    let lower = point - (upper - point);
    Ok(GEstimate {
        beta,
        point,
        upper,
        lower,
        ess: ess_total,
        rhat,
        mcmc_se: scale * se,
        count: m,
    })
}

/// Estimates the integrand from one temperature's in-memory chains.
pub fn estimate_g(set: &ChainSet, alpha: f64, epsilon: f64) -> Result<GEstimate> {
    let retained: Vec<Vec<f64>> = set
        .chains
        .iter()
        .map(|c| c.retained_ce().to_vec())
        .collect();
    estimate_g_from_traces(
        &retained,
        set.descriptor.beta,
        set.descriptor.scale(),
        alpha,
        epsilon,
    )
}

fn check_lengths(grid: &BetaGrid, values: &[f64]) -> Result<()> {
    if grid.point_count() != values.len() {
        return Err(Error::Shape(format!(
            "{} grid points vs {} integrand values",
            grid.point_count(),
            values.len()
        )));
    }
    Ok(())
}

/// Trapezium-rule quadrature of the integrand; overestimates the integral
/// when the integrand is convex.
pub fn trapezium_logz(grid: &BetaGrid, g: &[f64]) -> Result<f64> {
    check_lengths(grid, g)?;
    let b = grid.values();
    Ok((0..g.len() - 1)
        .map(|i| (b[i + 1] - b[i]) * 0.5 * (g[i] + g[i + 1]))
        .sum())
}

/// Left Riemann sum; overestimates the integral when the integrand is
/// decreasing, and dominates the trapezium value in that case.
pub fn left_riemann_logz(grid: &BetaGrid, g: &[f64]) -> Result<f64> {
    check_lengths(grid, g)?;
    let b = grid.values();
    Ok((0..g.len() - 1).map(|i| (b[i + 1] - b[i]) * g[i]).sum())
}

/// Report of increases in a sequence that theory says must decrease.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Indices `i` where `g[i+1] > g[i]` beyond twice the combined standard
    /// errors.
    pub violations: Vec<usize>,
}

impl MonotonicityReport {
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flags statistically significant increases of the integrand along the grid.
pub fn monotonicity_check(estimates: &[GEstimate]) -> MonotonicityReport {
    let mut violations = Vec::new();
    for i in 0..estimates.len().saturating_sub(1) {
        let a = &estimates[i];
        let b = &estimates[i + 1];
        let allowance = 2.0 * (a.mcmc_se.powi(2) + b.mcmc_se.powi(2)).sqrt();
        if b.point > a.point + allowance {
            violations.push(i);
        }
    }
    MonotonicityReport { violations }
}

/// Everything the certificate stage needs from the integration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TiEstimate {
    pub grid: Vec<f64>,
    pub estimates: Vec<GEstimate>,
    pub neg_log_z_point: f64,
    /// Trapezium over the per-point upper limits.
    pub neg_log_z_upper: f64,
    /// Left Riemann sum over point estimates, kept as a cross-check.
    pub neg_log_z_left_riemann: f64,
    pub kl_point: f64,
    /// High-probability overestimate of the KL; never negative.
    pub kl_upper: f64,
    /// Set when the raw upper estimate was negative and clipped to zero.
    pub kl_clipped: bool,
    pub monotonicity: MonotonicityReport,
}

/// Assembles the negative log normalizing constant and the KL divergence
/// from per-temperature integrand estimates.
pub fn kl_from_ti(grid: &BetaGrid, estimates: &[GEstimate]) -> Result<TiEstimate> {
    if estimates.len() != grid.point_count() {
        return Err(Error::Shape(format!(
            "{} estimates for {} grid points",
            estimates.len(),
            grid.point_count()
        )));
    }
    for (b, e) in grid.values().iter().zip(estimates) {
        if (e.beta - b).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "estimate at beta {} does not match grid point {b}",
                e.beta
            )));
        }
    }
    let points: Vec<f64> = estimates.iter().map(|e| e.point).collect();
    let uppers: Vec<f64> = estimates.iter().map(|e| e.upper).collect();
    let neg_log_z_point = trapezium_logz(grid, &points)?;
    let neg_log_z_upper = trapezium_logz(grid, &uppers)?;
    let neg_log_z_left_riemann = left_riemann_logz(grid, &points)?;
    let g1 = estimates.last().unwrap();
    let kl_point = neg_log_z_point - g1.point;
    let raw_upper = neg_log_z_upper - g1.lower;
    let kl_clipped = raw_upper < 0.0;
    if kl_clipped {
        eprintln!(
            "warning: KL overestimate came out negative ({raw_upper:.6}); clipping to 0. \
             The integrand estimates are likely inconsistent."
        );
    }
    let kl_upper = raw_upper.max(0.0);
    Ok(TiEstimate {
        grid: grid.values().to_vec(),
        monotonicity: monotonicity_check(estimates),
        estimates: estimates.to_vec(),
        neg_log_z_point,
        neg_log_z_upper,
        neg_log_z_left_riemann,
        kl_point,
        kl_upper,
        kl_clipped,
    })
}
