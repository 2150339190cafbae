//! Full-batch Hamiltonian Monte Carlo with Metropolis-Hastings correction.
//!
//! The sampler follows the textbook recipe: resample momentum from a standard
//! normal, integrate Hamiltonian dynamics with the leapfrog scheme for
//! `round(trajectory_length / step_size)` steps under an identity mass
//! matrix, then accept the endpoint with probability
//! `min(1, exp(H_current - H_proposed))`. Non-finite trajectories count as
//! rejections and are tallied as divergences.
//!
//! Step sizes are calibrated per target by trial runs over a candidate grid,
//! aiming for the 0.65 acceptance rate that is optimal for HMC;
//! when the acceptance profile is flat across stable candidates the largest
//! stable step wins (the usual "just below the instability edge" rule).
//!
//! Chains run concurrently and draw from per-(temperature, chain) random
//! streams, so results do not depend on scheduling.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

/// Log-density, gradient, and the scalar loss at one position.
#[derive(Debug, Clone)]
pub struct TargetEval {
    pub log_density: f64,
    pub grad: Vec<f64>,
    /// The loss whose tempered expectation the integrand traces record.
    pub loss: f64,
}

/// Identifies where a chain sits on the tempering path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetDescriptor {
    pub beta: f64,
    pub lambda: f64,
    pub n: usize,
}

impl TargetDescriptor {
    /// The factor turning a recorded loss into the integrand `lambda n loss`.
    pub fn scale(&self) -> f64 {
        self.lambda * self.n as f64
    }
}

impl Default for TargetDescriptor {
    fn default() -> Self {
        Self {
            beta: 0.0,
            lambda: 1.0,
            n: 1,
        }
    }
}

/// A differentiable unnormalized log-density the sampler can explore.
pub trait HmcTarget: Sync {
    fn dim(&self) -> usize;

    /// Log-density, gradient, and traced loss in one pass.
    fn eval(&self, w: &[f64]) -> TargetEval;

    /// Loss without the gradient, for exact-sampling traces.
    fn loss_only(&self, w: &[f64]) -> f64 {
        self.eval(w).loss
    }

    /// Training 0-1 error at `w`, when the target wraps a classifier.
    fn zero_one(&self, w: &[f64]) -> Option<f64> {
        let _ = w;
        None
    }

    /// Both traced metrics from a single evaluation.
    fn loss_and_zero_one(&self, w: &[f64]) -> (f64, Option<f64>) {
        (self.loss_only(w), self.zero_one(w))
    }

    fn descriptor(&self) -> TargetDescriptor {
        TargetDescriptor::default()
    }
}

/// Sampler settings shared by every chain of a run.
#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub step_size: f64,
    pub trajectory_length: f64,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// Keep full positions in memory (scalar traces are always kept).
    pub store_samples: bool,
    /// How many coordinates to trace for weight-space convergence checks.
    pub coord_subset_size: usize,
}

impl HmcConfig {
    pub fn new(step_size: f64, seed: u64) -> Self {
        Self {
            step_size,
            trajectory_length: 1.5,
            n_iterations: 5000,
            burn_in: 50,
            n_chains: 4,
            seed,
            store_samples: true,
            coord_subset_size: 100,
        }
    }

    /// Leapfrog steps per iteration: `round(trajectory_length / step_size)`,
    /// at least one.
    pub fn leapfrog_steps(&self) -> usize {
        ((self.trajectory_length / self.step_size).round() as usize).max(1)
    }

    pub fn retained(&self) -> usize {
        self.n_iterations - self.burn_in
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Domain(format!(
                "step size must be positive: {}",
                self.step_size
            )));
        }
        if !(self.trajectory_length > 0.0) {
            return Err(Error::Domain("trajectory length must be positive".into()));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::Domain(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.n_iterations
            )));
        }
        if self.n_chains == 0 {
            return Err(Error::Domain("need at least one chain".into()));
        }
        Ok(())
    }
}

/// One chain's retained samples and per-iteration records.
#[derive(Debug, Clone)]
pub struct Chain {
    pub chain_index: usize,
    pub burn_in: usize,
    /// Retained positions (post burn-in), present when sample storage is on.
    pub samples: Option<Array2<f64>>,
    /// Retained values of the traced coordinate subset.
    pub coord_trace: Array2<f64>,
    /// Acceptance flag for every iteration, burn-in included.
    pub accepted: Vec<bool>,
    /// Loss value at the current position, every iteration.
    pub ce_trace: Vec<f64>,
    /// 0-1 training error, every iteration, for classifier targets.
    pub zo_trace: Option<Vec<f64>>,
    pub divergences: usize,
}

impl Chain {
    /// Accepted proposals over all iterations, exactly.
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }

    pub fn retained_ce(&self) -> &[f64] {
        &self.ce_trace[self.burn_in..]
    }

    pub fn retained_zo(&self) -> Option<&[f64]> {
        self.zo_trace.as_deref().map(|t| &t[self.burn_in..])
    }
}

/// All chains run against one target.
#[derive(Debug, Clone)]
pub struct ChainSet {
    pub chains: Vec<Chain>,
    pub config: HmcConfig,
    pub descriptor: TargetDescriptor,
    /// Coordinates traced for weight-space diagnostics (shared by chains).
    pub coord_subset: Vec<usize>,
    /// Set when samples are exact independent draws rather than HMC output.
    pub exact: bool,
}

impl ChainSet {
    /// Retained losses pooled chain-major.
    pub fn pooled_ce(&self) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.retained_ce().iter().copied())
            .collect()
    }

    pub fn pooled_zo(&self) -> Option<Vec<f64>> {
        if self.chains.iter().any(|c| c.zo_trace.is_none()) {
            return None;
        }
        Some(
            self.chains
                .iter()
                .flat_map(|c| c.retained_zo().unwrap().iter().copied())
                .collect(),
        )
    }

    pub fn retained_per_chain(&self) -> usize {
        self.config.retained()
    }
}

/// Leapfrog endpoint, with a divergence flag instead of poisoned numbers.
#[derive(Debug, Clone)]
pub struct LeapfrogResult {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub divergent: bool,
}

/// Velocity-Verlet integration of Hamiltonian dynamics: half-step momentum,
/// alternating full steps, half-step momentum. Deterministic in its inputs.
pub fn leapfrog(
    position: &[f64],
    momentum: &[f64],
    step_size: f64,
    n_steps: usize,
    mut grad_fn: impl FnMut(&[f64]) -> Vec<f64>,
) -> LeapfrogResult {
    let g0 = grad_fn(position);
    let mut w = position.to_vec();
    let mut p: Vec<f64> = momentum
        .iter()
        .zip(&g0)
        .map(|(pi, gi)| pi + 0.5 * step_size * gi)
        .collect();
    for step in 0..n_steps.max(1) {
        for (wi, pi) in w.iter_mut().zip(&p) {
            *wi += step_size * pi;
        }
        if w.iter().any(|x| !x.is_finite()) {
            return LeapfrogResult {
                position: w,
                momentum: p,
                divergent: true,
            };
        }
        let g = grad_fn(&w);
        if g.iter().any(|x| !x.is_finite()) {
            return LeapfrogResult {
                position: w,
                momentum: p,
                divergent: true,
            };
        }
        let half = if step + 1 == n_steps.max(1) { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += half * step_size * gi;
        }
    }
    LeapfrogResult {
        position: w,
        momentum: p,
        divergent: false,
    }
}

/// Internal integrator that reuses the cached gradient at the start point and
/// hands back the full evaluation at the endpoint.
fn integrate<T: HmcTarget>(
    target: &T,
    position: &[f64],
    momentum: &[f64],
    grad0: &[f64],
    step_size: f64,
    n_steps: usize,
) -> (Vec<f64>, Vec<f64>, Option<TargetEval>, bool) {
    let mut w = position.to_vec();
    let mut p: Vec<f64> = momentum
        .iter()
        .zip(grad0)
        .map(|(pi, gi)| pi + 0.5 * step_size * gi)
        .collect();
    let mut last = None;
    for step in 0..n_steps {
        for (wi, pi) in w.iter_mut().zip(&p) {
            *wi += step_size * pi;
        }
        if w.iter().any(|x| !x.is_finite()) {
            return (w, p, None, true);
        }
        let e = target.eval(&w);
        if !e.log_density.is_finite() || e.grad.iter().any(|x| !x.is_finite()) {
            return (w, p, Some(e), true);
        }
        let half = if step + 1 == n_steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(&e.grad) {
            *pi += half * step_size * gi;
        }
        last = Some(e);
    }
    (w, p, last, false)
}

struct ChainState {
    position: Vec<f64>,
    eval: TargetEval,
}

struct StepOutcome {
    accepted: bool,
    divergent: bool,
}

/// One HMC transition: momentum refresh, leapfrog proposal, accept/reject.
fn hmc_step<T: HmcTarget>(
    target: &T,
    state: &mut ChainState,
    step_size: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> StepOutcome {
    let momentum: Vec<f64> = (0..state.position.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let kinetic0: f64 = 0.5 * momentum.iter().map(|p| p * p).sum::<f64>();
    let h0 = -state.eval.log_density + kinetic0;
    let (w1, p1, eval1, divergent) = integrate(
        target,
        &state.position,
        &momentum,
        &state.eval.grad,
        step_size,
        n_steps,
    );
    // The uniform draw happens on every iteration, divergent or not, so the
    // stream position stays aligned across step-size choices.
    let log_u = rng.random::<f64>().ln();
    if divergent {
        return StepOutcome {
            accepted: false,
            divergent: true,
        };
    }
    let eval1 = eval1.expect("non-divergent trajectory has an endpoint eval");
    let kinetic1: f64 = 0.5 * p1.iter().map(|p| p * p).sum::<f64>();
    let h1 = -eval1.log_density + kinetic1;
    if log_u < h0 - h1 {
        state.position = w1;
        state.eval = eval1;
        StepOutcome {
            accepted: true,
            divergent: false,
        }
    } else {
        StepOutcome {
            accepted: false,
            divergent: false,
        }
    }
}

/// Runs one chain from `init`, recording traces every iteration and retaining
/// positions after burn-in.
pub fn run_single_chain<T: HmcTarget>(
    target: &T,
    config: &HmcConfig,
    chain_index: usize,
    init: &[f64],
    coord_subset: &[usize],
) -> Result<Chain> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::Shape(format!(
            "chain {chain_index}: init length {} != target dim {dim}",
            init.len()
        )));
    }
    if init.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "chain {chain_index}: non-finite init"
        )));
    }
    let eval0 = target.eval(init);
    if !eval0.log_density.is_finite() {
        return Err(Error::NonFinite(format!(
            "chain {chain_index}: log-density at init is {}",
            eval0.log_density
        )));
    }
    let beta_tag = target.descriptor().beta.to_bits();
    let mut rng = stream(config.seed, &[purpose::CHAIN, beta_tag, chain_index as u64]);
    let n_steps = config.leapfrog_steps();
    let retained = config.retained();

    let mut state = ChainState {
        position: init.to_vec(),
        eval: eval0,
    };
    let mut samples = if config.store_samples {
        Some(Array2::zeros((retained, dim)))
    } else {
        None
    };
    let mut coord_trace = Array2::zeros((retained, coord_subset.len()));
    let mut accepted = Vec::with_capacity(config.n_iterations);
    let mut ce_trace = Vec::with_capacity(config.n_iterations);
    let mut current_zo = target.zero_one(&state.position);
    let mut zo_trace = current_zo.map(|_| Vec::with_capacity(config.n_iterations));
    let mut divergences = 0usize;

    for iter in 0..config.n_iterations {
        let outcome = hmc_step(target, &mut state, config.step_size, n_steps, &mut rng);
        if outcome.divergent {
            divergences += 1;
        }
        if outcome.accepted && zo_trace.is_some() {
            current_zo = target.zero_one(&state.position);
        }
        accepted.push(outcome.accepted);
        ce_trace.push(state.eval.loss);
        if let (Some(trace), Some(zo)) = (zo_trace.as_mut(), current_zo) {
            trace.push(zo);
        }
        if iter >= config.burn_in {
            let row = iter - config.burn_in;
            if let Some(s) = samples.as_mut() {
                s.row_mut(row)
                    .assign(&ndarray::ArrayView1::from(&state.position[..]));
            }
            for (j, &c) in coord_subset.iter().enumerate() {
                coord_trace[(row, j)] = state.position[c];
            }
        }
    }
    Ok(Chain {
        chain_index,
        burn_in: config.burn_in,
        samples,
        coord_trace,
        accepted,
        ce_trace,
        zo_trace,
        divergences,
    })
}

/// Deterministic coordinate subset traced for weight-space diagnostics.
pub fn coord_subset(dim: usize, size: usize, seed: u64, beta_tag: u64) -> Vec<usize> {
    let k = size.min(dim);
    let mut rng = stream(seed, &[purpose::COORD_SUBSET, beta_tag]);
    let mut idx = rand::seq::index::sample(&mut rng, dim, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `n_chains` independent chains concurrently, one init each.
pub fn run_chains<T: HmcTarget>(
    target: &T,
    config: &HmcConfig,
    inits: &[Vec<f64>],
) -> Result<ChainSet> {
    config.validate()?;
    if inits.len() != config.n_chains {
        return Err(Error::Shape(format!(
            "{} inits for {} chains",
            inits.len(),
            config.n_chains
        )));
    }
    let descriptor = target.descriptor();
    let subset = coord_subset(
        target.dim(),
        config.coord_subset_size,
        config.seed,
        descriptor.beta.to_bits(),
    );
    let chains: Vec<Chain> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_single_chain(target, config, c, &inits[c], &subset))
        .collect::<Result<_>>()?;
    Ok(ChainSet {
        chains,
        config: config.clone(),
        descriptor,
        coord_subset: subset,
        exact: false,
    })
}

/// Builds a chain set from exact independent draws (used at the prior end of
/// the tempering path, where no Markov chain is needed). Every iteration is
/// recorded as accepted.
pub fn run_exact_chains<T: HmcTarget>(
    target: &T,
    config: &HmcConfig,
    draw: impl Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
) -> Result<ChainSet> {
    config.validate()?;
    let descriptor = target.descriptor();
    let beta_tag = descriptor.beta.to_bits();
    let subset = coord_subset(
        target.dim(),
        config.coord_subset_size,
        config.seed,
        beta_tag,
    );
    let retained = config.retained();
    let dim = target.dim();
    let chains: Vec<Chain> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain_index| {
            let mut rng = stream(
                config.seed,
                &[purpose::PRIOR_EXACT, beta_tag, chain_index as u64],
            );
            let mut samples = if config.store_samples {
                Some(Array2::zeros((retained, dim)))
            } else {
                None
            };
            let mut coord_trace = Array2::zeros((retained, subset.len()));
            let mut ce_trace = Vec::with_capacity(config.n_iterations);
            let mut zo_trace: Option<Vec<f64>> = None;
            for iter in 0..config.n_iterations {
                let w = draw(&mut rng);
                assert_eq!(w.len(), dim, "draw function must match target dim");
                let (loss, zo) = target.loss_and_zero_one(&w);
                ce_trace.push(loss);
                match (zo, zo_trace.as_mut()) {
                    (Some(z), Some(t)) => t.push(z),
                    (Some(z), None) => zo_trace = Some(vec![z]),
                    _ => {}
                }
                if iter >= config.burn_in {
                    let row = iter - config.burn_in;
                    if let Some(s) = samples.as_mut() {
                        s.row_mut(row).assign(&ndarray::ArrayView1::from(&w[..]));
                    }
                    for (j, &c) in subset.iter().enumerate() {
                        coord_trace[(row, j)] = w[c];
                    }
                }
            }
            Chain {
                chain_index,
                burn_in: config.burn_in,
                samples,
                coord_trace,
                accepted: vec![true; config.n_iterations],
                ce_trace,
                zo_trace,
                divergences: 0,
            }
        })
        .collect();
    Ok(ChainSet {
        chains,
        config: config.clone(),
        descriptor,
        coord_subset: subset,
        exact: true,
    })
}

const TARGET_ACCEPTANCE: f64 = 0.65;
const STABILITY_FLOOR: f64 = 0.05;
const NEAR_TIE_TOLERANCE: f64 = 0.02;

/// One calibration trial run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CalibrationTrial {
    pub step_size: f64,
    pub acceptance: f64,
    pub divergences: usize,
}

/// Outcome of the step-size search.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Calibration {
    pub chosen: f64,
    pub trials: Vec<CalibrationTrial>,
}

/// Picks the candidate step size whose trial acceptance rate lands closest to
/// 0.65. Candidates with acceptance below 0.05 are discarded as unstable;
/// exact ties resolve to the smaller step; when every stable candidate is
/// within 0.02 of the best distance the profile is flat and the largest
/// stable step wins.
pub fn calibrate_step_size<T: HmcTarget>(
    target: &T,
    base: &HmcConfig,
    candidates: &[f64],
    trial_iterations: usize,
    init: &[f64],
) -> Result<Calibration> {
    if candidates.is_empty() {
        return Err(Error::Calibration("empty candidate set".into()));
    }
    if trial_iterations == 0 {
        return Err(Error::Calibration(
            "trial_iterations must be positive".into(),
        ));
    }
    let beta_tag = target.descriptor().beta.to_bits();
    let trials: Vec<CalibrationTrial> = candidates
        .par_iter()
        .enumerate()
        .map(|(idx, &step)| {
            let mut cfg = base.clone();
            cfg.step_size = step;
            cfg.n_iterations = trial_iterations;
            cfg.burn_in = 0;
            cfg.store_samples = false;
            cfg.coord_subset_size = 0;
            // Trials get their own streams so calibration does not disturb
            // the production chains.
            cfg.seed = base.seed;
            let n_steps = cfg.leapfrog_steps();
            let mut rng = stream(cfg.seed, &[purpose::CALIBRATION, beta_tag, idx as u64]);
            let eval0 = target.eval(init);
            let mut state = ChainState {
                position: init.to_vec(),
                eval: eval0,
            };
            let mut accepted = 0usize;
            let mut divergences = 0usize;
            for _ in 0..trial_iterations {
                let out = hmc_step(target, &mut state, step, n_steps, &mut rng);
                if out.accepted {
                    accepted += 1;
                }
                if out.divergent {
                    divergences += 1;
                }
            }
            CalibrationTrial {
                step_size: step,
                acceptance: accepted as f64 / trial_iterations as f64,
                divergences,
            }
        })
        .collect();

    let stable: Vec<&CalibrationTrial> = trials
        .iter()
        .filter(|t| t.acceptance >= STABILITY_FLOOR)
        .collect();
    if stable.is_empty() {
        return Err(Error::Calibration(format!(
            "all {} candidates unstable (acceptance below {STABILITY_FLOOR})",
            trials.len()
        )));
    }
    let dist = |t: &CalibrationTrial| (t.acceptance - TARGET_ACCEPTANCE).abs();
    let best = stable.iter().map(|t| dist(t)).fold(f64::INFINITY, f64::min);
    let near: Vec<&&CalibrationTrial> = stable
        .iter()
        .filter(|t| dist(t) <= best + NEAR_TIE_TOLERANCE)
        .collect();
    let chosen = if near.len() == stable.len() {
        // Flat profile: keep the step just below the instability edge.
        stable
            .iter()
            .map(|t| t.step_size)
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        stable
            .iter()
            .filter(|t| dist(t) <= best + 1e-12)
            .map(|t| t.step_size)
            .fold(f64::INFINITY, f64::min)
    };
    Ok(Calibration { chosen, trials })
}

/// Thinned, approximately independent view of a chain set.
#[derive(Debug, Clone)]
pub struct Thinned {
    /// Every `stride`-th retained sample is kept, per chain.
    pub stride: usize,
    /// Total kept samples across chains.
    pub count: usize,
    /// Effective sample size of the thinned loss trace.
    pub ess: f64,
    /// Kept retained-row indices, per chain.
    pub indices: Vec<Vec<usize>>,
    /// Pooled thinned losses, chain-major.
    pub ce: Vec<f64>,
    /// Pooled thinned 0-1 losses for classifier targets.
    pub zo: Option<Vec<f64>>,
}

/// Finds the smallest stride whose thinned loss trace has
/// `ESS >= target_ratio * kept`, then gathers the kept values.
pub fn thin(set: &ChainSet, target_ratio: f64) -> Result<Thinned> {
    if !(0.0 < target_ratio && target_ratio <= 1.0) {
        return Err(Error::Domain(format!(
            "thin ratio must be in (0,1], got {target_ratio}"
        )));
    }
    let retained = set.retained_per_chain();
    let max_stride = (retained / 2).max(1);
    for stride in 1..=max_stride {
        let mut total = 0usize;
        let mut ess_total = 0.0;
        let mut ok = true;
        for chain in &set.chains {
            let thinned: Vec<f64> = chain
                .retained_ce()
                .iter()
                .step_by(stride)
                .copied()
                .collect();
            if thinned.len() < 2 {
                ok = false;
                break;
            }
            total += thinned.len();
            ess_total += diagnostics::ess(&thinned)
                .map_err(|e| Error::Diagnostics(format!("ESS during thinning: {e}")))?
                .value;
        }
        if !ok {
            break;
        }
        if ess_total >= target_ratio * total as f64 {
            let indices: Vec<Vec<usize>> = set
                .chains
                .iter()
                .map(|_| (0..retained).step_by(stride).collect())
                .collect();
            let ce: Vec<f64> = set
                .chains
                .iter()
                .flat_map(|c| c.retained_ce().iter().step_by(stride).copied())
                .collect();
            let zo = if set.chains.iter().all(|c| c.zo_trace.is_some()) {
                Some(
                    set.chains
                        .iter()
                        .flat_map(|c| c.retained_zo().unwrap().iter().step_by(stride).copied())
                        .collect(),
                )
            } else {
                None
            };
            return Ok(Thinned {
                stride,
                count: total,
                ess: ess_total,
                indices,
                ce,
                zo,
            });
        }
    }
    Err(Error::Diagnostics(format!(
        "no thinning stride up to {max_stride} reaches ESS >= {target_ratio} of the kept count"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    /// Standard normal in `dim` dimensions; loss traces the first coordinate
    /// so thinning has something to chew on.
    struct StdGaussian {
        dim: usize,
    }

    impl HmcTarget for StdGaussian {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, w: &[f64]) -> TargetEval {
            let sq: f64 = w.iter().map(|x| x * x).sum();
            TargetEval {
                log_density: -0.5 * sq,
                grad: w.iter().map(|x| -x).collect(),
                loss: w[0],
            }
        }
    }

    /// Constant density: every proposal is ballistic and always accepted.
    struct Flat {
        dim: usize,
    }

    impl HmcTarget for Flat {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, w: &[f64]) -> TargetEval {
            TargetEval {
                log_density: 0.0,
                grad: vec![0.0; w.len()],
                loss: 0.0,
            }
        }
    }

    #[test]
    fn free_particle_moves_ballistically() {
        let w = [1.0, -2.0];
        let p = [0.5, 0.25];
        let eps = 0.1;
        let steps = 7;
        let out = leapfrog(&w, &p, eps, steps, |_| vec![0.0, 0.0]);
        assert!(!out.divergent);
        for i in 0..2 {
            assert_abs_diff_eq!(
                out.position[i],
                w[i] + eps * steps as f64 * p[i],
                epsilon = 1e-14
            );
            assert_abs_diff_eq!(out.momentum[i], p[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = StdGaussian { dim: 3 };
        let w = [0.3, -1.2, 0.8];
        let p = [1.0, 0.2, -0.7];
        let grad = |x: &[f64]| target.eval(x).grad;
        let fwd = leapfrog(&w, &p, 0.05, 30, grad);
        let neg: Vec<f64> = fwd.momentum.iter().map(|p| -p).collect();
        let back = leapfrog(&fwd.position, &neg, 0.05, 30, grad);
        for i in 0..3 {
            assert!((back.position[i] - w[i]).abs() < 1e-10, "coordinate {i}");
            assert!((-back.momentum[i] - p[i]).abs() < 1e-10, "momentum {i}");
        }
    }

    #[test]
    fn small_step_energy_error_is_tiny() {
        // 1-D standard Gaussian, trajectory length 1.5 at step 1e-3.
        let target = StdGaussian { dim: 1 };
        let w = [0.7];
        let p = [-0.4];
        let h0 = 0.5 * (w[0] * w[0] + p[0] * p[0]);
        let out = leapfrog(&w, &p, 1e-3, 1500, |x| target.eval(x).grad);
        let h1 = 0.5 * (out.position[0] * out.position[0] + out.momentum[0] * out.momentum[0]);
        assert!((h1 - h0).abs() < 1e-4, "|dH| = {}", (h1 - h0).abs());
    }

    #[test]
    fn tiny_steps_accept_nearly_always() {
        let target = StdGaussian { dim: 2 };
        let mut cfg = HmcConfig::new(1e-3, 5);
        cfg.n_iterations = 100;
        cfg.burn_in = 0;
        cfg.n_chains = 1;
        cfg.store_samples = false;
        let set = run_chains(&target, &cfg, &[vec![0.5, -0.5]]).unwrap();
        assert!(set.chains[0].acceptance_rate() >= 0.95);
    }

    #[test]
    fn downhill_first_proposal_is_accepted() {
        // Starting far in the tails, the first trajectory drops the energy,
        // and min(1, exp(positive)) accepts unconditionally.
        let target = StdGaussian { dim: 2 };
        let mut cfg = HmcConfig::new(0.2, 9);
        cfg.n_iterations = 1;
        cfg.burn_in = 0;
        cfg.n_chains = 1;
        let set = run_chains(&target, &cfg, &[vec![10.0, 10.0]]).unwrap();
        assert!(set.chains[0].accepted[0]);
    }

    #[test]
    fn fixed_seed_reproduces_chains_exactly() {
        let target = StdGaussian { dim: 2 };
        let mut cfg = HmcConfig::new(0.3, 77);
        cfg.n_iterations = 50;
        cfg.burn_in = 10;
        cfg.n_chains = 2;
        let a = run_chains(&target, &cfg, &[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let b = run_chains(&target, &cfg, &[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            assert_eq!(ca.samples.as_ref().unwrap(), cb.samples.as_ref().unwrap());
            assert_eq!(ca.accepted, cb.accepted);
        }
        // Distinct chains diverge from one another immediately.
        assert_ne!(
            a.chains[0].samples.as_ref().unwrap().row(0),
            a.chains[1].samples.as_ref().unwrap().row(0)
        );
    }

    #[test]
    fn distinct_chain_streams_differ_even_from_equal_inits() {
        let target = StdGaussian { dim: 2 };
        let mut cfg = HmcConfig::new(0.3, 78);
        cfg.n_iterations = 3;
        cfg.burn_in = 0;
        cfg.n_chains = 2;
        let set = run_chains(&target, &cfg, &[vec![0.2, 0.2], vec![0.2, 0.2]]).unwrap();
        let s0 = set.chains[0].samples.as_ref().unwrap();
        let s1 = set.chains[1].samples.as_ref().unwrap();
        assert_ne!(s0.row(1), s1.row(1));
    }

    #[test]
    fn rejected_iterations_repeat_the_previous_sample_bitwise() {
        let target = StdGaussian { dim: 2 };
        // A huge step makes rejections common.
        let mut cfg = HmcConfig::new(2.5, 13);
        cfg.trajectory_length = 5.0;
        cfg.n_iterations = 200;
        cfg.burn_in = 0;
        cfg.n_chains = 1;
        let set = run_chains(&target, &cfg, &[vec![0.1, 0.1]]).unwrap();
        let chain = &set.chains[0];
        let samples = chain.samples.as_ref().unwrap();
        let mut saw_reject = false;
        for i in 1..200 {
            if !chain.accepted[i] {
                saw_reject = true;
                assert_eq!(samples.row(i), samples.row(i - 1));
                assert_eq!(chain.ce_trace[i], chain.ce_trace[i - 1]);
            }
        }
        assert!(saw_reject, "expected at least one rejection at step 2.5");
        // Acceptance rate is the exact count ratio.
        let manual =
            chain.accepted.iter().filter(|a| **a).count() as f64 / chain.accepted.len() as f64;
        assert_eq!(chain.acceptance_rate(), manual);
    }

    #[test]
    fn one_dimensional_marginal_passes_ks_smoke_test() {
        let target = StdGaussian { dim: 1 };
        let mut cfg = HmcConfig::new(0.7, 21);
        cfg.n_iterations = 20_050;
        cfg.burn_in = 50;
        cfg.n_chains = 1;
        cfg.store_samples = true;
        let set = run_chains(&target, &cfg, &[vec![0.0]]).unwrap();
        let samples: Vec<f64> = set.chains[0]
            .samples
            .as_ref()
            .unwrap()
            .column(0)
            .iter()
            .copied()
            .collect();
        let normal = Normal::standard();
        let d = diagnostics::ks_statistic(&samples, |x| normal.cdf(x)).unwrap();
        assert!(d < 0.02, "KS statistic {d}");
    }

    #[test]
    fn prior_variance_recovered_at_cold_endpoint() {
        // beta = 0 sampling of an isotropic 0.03-variance Gaussian prior.
        struct Prior {
            variance: f64,
            dim: usize,
        }
        impl HmcTarget for Prior {
            fn dim(&self) -> usize {
                self.dim
            }
            fn eval(&self, w: &[f64]) -> TargetEval {
                let sq: f64 = w.iter().map(|x| x * x).sum();
                TargetEval {
                    log_density: -0.5 * sq / self.variance,
                    grad: w.iter().map(|x| -x / self.variance).collect(),
                    loss: 0.0,
                }
            }
        }
        let target = Prior {
            variance: 0.03,
            dim: 5,
        };
        let mut cfg = HmcConfig::new(0.08, 31);
        cfg.trajectory_length = 0.8;
        cfg.n_iterations = 4000;
        cfg.burn_in = 100;
        cfg.n_chains = 2;
        let inits = vec![vec![0.0; 5], vec![0.1; 5]];
        let set = run_chains(&target, &cfg, &inits).unwrap();
        let mut all = Vec::new();
        for c in &set.chains {
            all.extend(c.samples.as_ref().unwrap().iter().copied());
        }
        let mean: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let var: f64 = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((var - 0.03).abs() / 0.03 < 0.10, "sample variance {var}");
    }

    #[test]
    fn calibration_prefers_acceptance_near_target() {
        let target = StdGaussian { dim: 1 };
        let base = HmcConfig::new(0.1, 55);
        let cal = calibrate_step_size(&target, &base, &[1e-3, 1.0], 100, &[0.2]).unwrap();
        // The tiny step accepts everything (distance 0.35); the unit step
        // lands nearer 0.65.
        assert_eq!(cal.chosen, 1.0, "trials: {:?}", cal.trials);
    }

    #[test]
    fn calibration_single_candidate_returned_unconditionally() {
        let target = StdGaussian { dim: 1 };
        let base = HmcConfig::new(0.1, 56);
        let cal = calibrate_step_size(&target, &base, &[0.31], 50, &[0.0]).unwrap();
        assert_eq!(cal.chosen, 0.31);
    }

    #[test]
    fn calibration_flat_profile_takes_largest_stable() {
        let target = Flat { dim: 2 };
        let base = HmcConfig::new(0.1, 57);
        let cal = calibrate_step_size(&target, &base, &[0.05, 0.1, 0.2], 50, &[0.0, 0.0]).unwrap();
        assert_eq!(cal.chosen, 0.2);
        assert!(cal.trials.iter().all(|t| t.acceptance == 1.0));
    }

    #[test]
    fn calibration_errors_when_everything_diverges() {
        // log-density with a catastrophic gradient makes every step explode.
        struct Explosive;
        impl HmcTarget for Explosive {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, w: &[f64]) -> TargetEval {
                TargetEval {
                    log_density: -w[0].powi(4) * 1e12,
                    grad: vec![-4e12 * w[0].powi(3)],
                    loss: 0.0,
                }
            }
        }
        let base = HmcConfig::new(0.1, 58);
        let res = calibrate_step_size(&Explosive, &base, &[0.5, 1.0], 30, &[1.0]);
        assert!(res.is_err());
    }

    fn chain_with_trace(ce: Vec<f64>, burn_in: usize, idx: usize) -> Chain {
        let retained = ce.len() - burn_in;
        Chain {
            chain_index: idx,
            burn_in,
            samples: None,
            coord_trace: Array2::zeros((retained, 0)),
            accepted: vec![true; ce.len()],
            ce_trace: ce,
            zo_trace: None,
            divergences: 0,
        }
    }

    fn fixture_set(traces: Vec<Vec<f64>>) -> ChainSet {
        let n_iterations = traces[0].len();
        let mut cfg = HmcConfig::new(0.1, 0);
        cfg.n_iterations = n_iterations;
        cfg.burn_in = 0;
        cfg.n_chains = traces.len();
        let chains = traces
            .into_iter()
            .enumerate()
            .map(|(i, t)| chain_with_trace(t, 0, i))
            .collect();
        ChainSet {
            chains,
            config: cfg,
            descriptor: TargetDescriptor::default(),
            coord_subset: vec![],
            exact: false,
        }
    }

    #[test]
    fn white_noise_needs_no_thinning() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traces: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let set = fixture_set(traces);
        let t = thin(&set, 0.9).unwrap();
        assert_eq!(t.stride, 1);
        assert_eq!(t.count, 8000);
    }

    #[test]
    fn ar1_trace_thins_to_a_small_stride() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let rho: f64 = 0.5;
        let scale = (1.0 - rho * rho).sqrt();
        let traces: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + c);
                let mut x: f64 = StandardNormal.sample(&mut rng);
                (0..20_000)
                    .map(|_| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        x = rho * x + scale * eps;
                        x
                    })
                    .collect()
            })
            .collect();
        let set = fixture_set(traces);
        let t = thin(&set, 0.9).unwrap();
        assert!(
            (2..=8).contains(&t.stride),
            "stride {} (autocorrelation 0.5^k should die off within a few lags)",
            t.stride
        );
        assert!(t.ess >= 0.9 * t.count as f64);
    }

    #[test]
    fn heavy_correlation_thins_into_the_low_thousands() {
        // Four chains of 4950 retained samples (19800 pooled) with strong
        // AR(1) correlation: the ESS criterion keeps on the order of a
        // thousand samples.
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let rho: f64 = 0.8;
        let scale = (1.0 - rho * rho).sqrt();
        let traces: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(500 + c);
                let mut x: f64 = StandardNormal.sample(&mut rng);
                (0..4950)
                    .map(|_| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        x = rho * x + scale * eps;
                        x
                    })
                    .collect()
            })
            .collect();
        let set = fixture_set(traces);
        let t = thin(&set, 0.9).unwrap();
        assert!(
            (800..=3000).contains(&t.count),
            "kept {} of 19800 at stride {}",
            t.count,
            t.stride
        );
    }

    #[test]
    fn coord_subset_is_deterministic_and_clamped() {
        let a = coord_subset(1000, 100, 9, 1);
        let b = coord_subset(1000, 100, 9, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted, duplicate-free");
        let c = coord_subset(1000, 100, 9, 2);
        assert_ne!(a, c, "levels trace different subsets");
        assert_eq!(coord_subset(5, 100, 9, 1).len(), 5);
    }

    #[test]
    fn divergent_proposals_are_rejections() {
        struct Cliff;
        impl HmcTarget for Cliff {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, w: &[f64]) -> TargetEval {
                // Beyond |w| = 1 the density falls off a numerical cliff.
                if w[0].abs() > 1.0 {
                    TargetEval {
                        log_density: f64::NEG_INFINITY,
                        grad: vec![f64::NAN],
                        loss: 0.0,
                    }
                } else {
                    TargetEval {
                        log_density: 0.0,
                        grad: vec![0.0],
                        loss: 0.0,
                    }
                }
            }
        }
        let mut cfg = HmcConfig::new(1.0, 61);
        cfg.trajectory_length = 3.0;
        cfg.n_iterations = 50;
        cfg.burn_in = 0;
        cfg.n_chains = 1;
        let set = run_chains(&Cliff, &cfg, &[vec![0.0]]).unwrap();
        let chain = &set.chains[0];
        assert!(chain.divergences > 0);
        // Divergences never show up as accepted moves.
        assert!(chain
            .samples
            .as_ref()
            .unwrap()
            .iter()
            .all(|x| x.abs() <= 1.0));
    }
}
