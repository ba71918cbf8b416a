//! Generic MCMC kernels over unnormalized log-density targets:
//! random-walk Metropolis-Hastings and Hamiltonian Monte Carlo (with
//! Langevin dynamics as the single-leapfrog-step special case).
//!
//! A chain is strictly sequential and deterministic for a given
//! (seed, config, target); chains with distinct seeds are independent and a
//! finished [`Chain`] is immutable, so running several in parallel is safe.

use crate::error::{Error, Result};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

/// An unnormalized log-density with an optional gradient.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Unnormalized log-density. Must be deterministic; non-finite values are
    /// treated as zero-density states and proposals into them are rejected.
    fn log_density(&self, theta: &DVector<f64>) -> f64;

    /// ∇θ of the log-density, when available.
    fn grad_log_density(&self, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// A target built from a plain closure (no gradient).
pub struct FnTarget<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> f64 + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, theta: &DVector<f64>) -> f64 {
        (self.f)(theta)
    }
}

/// A target built from value and gradient closures.
pub struct GradTarget<F, G> {
    pub dim: usize,
    pub f: F,
    pub g: G,
}

impl<F, G> Target for GradTarget<F, G>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
    G: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, theta: &DVector<f64>) -> f64 {
        (self.f)(theta)
    }
    fn grad_log_density(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some((self.g)(theta))
    }
}

/// Random-walk proposal scale: one stddev for all coordinates or one per
/// dimension.
#[derive(Clone, Debug)]
pub enum ProposalScale {
    Scalar(f64),
    PerDim(DVector<f64>),
}

impl ProposalScale {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ProposalScale::Scalar(s) => {
                if *s < 0.0 || !s.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "proposal stddev must be finite and >= 0, got {s}"
                    )));
                }
            }
            ProposalScale::PerDim(v) => {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                if v.iter().any(|s| *s < 0.0 || !s.is_finite()) {
                    return Err(Error::InvalidInput(
                        "per-dimension proposal stddevs must be finite and >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn stddev(&self, i: usize) -> f64 {
        match self {
            ProposalScale::Scalar(s) => *s,
            ProposalScale::PerDim(v) => v[i],
        }
    }
}

/// Output of one sampler run. `wall_ns` holds cumulative nanoseconds since
/// the start of the run, one stamp per step.
#[derive(Clone, Debug)]
pub struct Chain {
    pub samples: Vec<DVector<f64>>,
    pub accepted: Vec<bool>,
    pub wall_ns: Vec<u64>,
    pub seed: u64,
    pub config: String,
    pub divergences: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }

    /// Samples left after dropping the leading burn-in fraction.
    pub fn retained(&self, burn_in: f64) -> &[DVector<f64>] {
        let drop = burn_in_count(self.len(), burn_in);
        &self.samples[drop..]
    }
}

pub(crate) fn burn_in_count(len: usize, burn_in: f64) -> usize {
    (burn_in * len as f64).floor() as usize
}

/// Moments over the retained part of a sample run.
#[derive(Clone, Debug)]
pub struct ChainSummary {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub retained: usize,
}

/// Mean and per-coordinate variance after removing the leading
/// `burn_in` fraction (default protocol: one quarter).
pub fn chain_summary(chain: &Chain, burn_in: f64) -> Result<ChainSummary> {
    summarize(&chain.samples, burn_in)
}

/// [`chain_summary`] over a plain sample slice.
pub fn summarize(samples: &[DVector<f64>], burn_in: f64) -> Result<ChainSummary> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidInput(format!(
            "burn-in fraction must lie in [0, 1), got {burn_in}"
        )));
    }
    let drop = burn_in_count(samples.len(), burn_in);
    let retained = &samples[drop..];
    if retained.is_empty() {
        return Err(Error::InvalidInput(
            "no samples retained after burn-in".into(),
        ));
    }
    let d = retained[0].len();
    let n = retained.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in retained {
        mean += s;
    }
    mean /= n;
    let mut variance = DVector::zeros(d);
    for s in retained {
        for j in 0..d {
            let r = s[j] - mean[j];
            variance[j] += r * r;
        }
    }
    variance /= n;
    Ok(ChainSummary {
        mean,
        variance,
        retained: retained.len(),
    })
}

/// Random-walk Metropolis-Hastings with a symmetric Gaussian proposal, so the
/// acceptance ratio reduces to min{1, p(θ')/p(θ)}.
///
/// Non-finite log-density at a proposal rejects that step and never aborts
/// the run; a non-finite value at `init` is an error.
pub fn mh_sample(
    target: &dyn Target,
    scale: &ProposalScale,
    steps: usize,
    init: &DVector<f64>,
    seed: u64,
) -> Result<Chain> {
    let d = target.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.len(),
        });
    }
    scale.validate(d)?;
    let mut current = init.clone();
    let mut current_lp = target.log_density(&current);
    if !current_lp.is_finite() {
        return Err(Error::InvalidStart);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(steps);
    let mut accepted = Vec::with_capacity(steps);
    let mut wall_ns = Vec::with_capacity(steps);
    let mut proposal = DVector::zeros(d);
    let start = Instant::now();

    for _ in 0..steps {
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            proposal[i] = current[i] + scale.stddev(i) * z;
        }
        let lp = target.log_density(&proposal);
        let u: f64 = rng.random();
        let accept = lp.is_finite() && (lp - current_lp >= 0.0 || u.ln() < lp - current_lp);
        if accept {
            std::mem::swap(&mut current, &mut proposal);
            current_lp = lp;
        }
        samples.push(current.clone());
        accepted.push(accept);
        wall_ns.push(start.elapsed().as_nanos() as u64);
    }

    Ok(Chain {
        samples,
        accepted,
        wall_ns,
        seed,
        config: format!("mh steps={steps} scale={scale:?}"),
        divergences: 0,
    })
}

/// One leapfrog trajectory of `steps` position updates from (theta, r).
///
/// Standard symmetric (Störmer–Verlet) scheme: a half momentum step, position
/// steps alternating with full momentum steps, and a closing half momentum
/// step. Returns `None` if a gradient or position goes non-finite
/// mid-trajectory.
pub fn leapfrog(
    target: &dyn Target,
    theta: &DVector<f64>,
    r: &DVector<f64>,
    step_size: f64,
    steps: usize,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let mut theta = theta.clone();
    let mut r = r.clone();
    let grad = target.grad_log_density(&theta)?;
    if !grad.iter().all(|g| g.is_finite()) {
        return None;
    }
    r += 0.5 * step_size * grad;
    for step in 0..steps {
        theta += step_size * &r;
        if !theta.iter().all(|v| v.is_finite()) {
            return None;
        }
        let grad = target.grad_log_density(&theta)?;
        if !grad.iter().all(|g| g.is_finite()) {
            return None;
        }
        let factor = if step + 1 == steps { 0.5 } else { 1.0 };
        r += factor * step_size * grad;
    }
    Some((theta, r))
}

/// Hamiltonian Monte Carlo with identity mass matrix.
///
/// Momentum is resampled r ~ N(0, I) each step; the proposal is accepted with
/// probability min{1, exp(log p(θ') − ½‖r'‖² − log p(θ) + ½‖r‖²)}. Trajectories
/// that hit a non-finite gradient or density are rejected and counted in
/// [`Chain::divergences`]. `leapfrog_steps = 1` is Langevin dynamics.
pub fn hmc_sample(
    target: &dyn Target,
    step_size: f64,
    leapfrog_steps: usize,
    steps: usize,
    init: &DVector<f64>,
    seed: u64,
) -> Result<Chain> {
    let d = target.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.len(),
        });
    }
    if !(step_size > 0.0) || !step_size.is_finite() {
        return Err(Error::InvalidInput(format!(
            "step size must be positive and finite, got {step_size}"
        )));
    }
    if leapfrog_steps == 0 {
        return Err(Error::InvalidInput("leapfrog steps must be >= 1".into()));
    }
    if target.grad_log_density(init).is_none() {
        return Err(Error::GradientUnavailable);
    }
    let mut current = init.clone();
    let mut current_lp = target.log_density(&current);
    if !current_lp.is_finite() {
        return Err(Error::InvalidStart);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(steps);
    let mut accepted = Vec::with_capacity(steps);
    let mut wall_ns = Vec::with_capacity(steps);
    let mut divergences = 0usize;
    let start = Instant::now();

    for _ in 0..steps {
        let r0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: f64 = rng.random();
        let mut accept = false;
        match leapfrog(target, &current, &r0, step_size, leapfrog_steps) {
            Some((theta_new, r_new)) => {
                let lp_new = target.log_density(&theta_new);
                if lp_new.is_finite() {
                    let log_ratio = lp_new - 0.5 * r_new.norm_squared() - current_lp
                        + 0.5 * r0.norm_squared();
                    if log_ratio >= 0.0 || u.ln() < log_ratio {
                        current = theta_new;
                        current_lp = lp_new;
                        accept = true;
                    }
                } else {
                    divergences += 1;
                }
            }
            None => divergences += 1,
        }
        samples.push(current.clone());
        accepted.push(accept);
        wall_ns.push(start.elapsed().as_nanos() as u64);
    }

    Ok(Chain {
        samples,
        accepted,
        wall_ns,
        seed,
        config: format!("hmc steps={steps} eps={step_size} leapfrog={leapfrog_steps}"),
        divergences,
    })
}

// ---------------------------------------------------------------------------
// Tuning
// ---------------------------------------------------------------------------

/// Pilot-run proposal scale: doubling/halving to a workable acceptance band,
/// then 2.4·ŝ/√d with ŝ the mean per-coordinate stddev of a pilot chain.
pub fn tune_mh_scale(target: &dyn Target, init: &DVector<f64>, seed: u64) -> Result<f64> {
    let d = target.dim();
    let mut scale = 1.0f64;
    let mut state = init.clone();
    for round in 0..12 {
        let chain = mh_sample(
            target,
            &ProposalScale::Scalar(scale),
            120,
            &state,
            seed.wrapping_add(round),
        )?;
        let acc = chain.acceptance_rate();
        state = chain.samples.last().expect("nonempty pilot").clone();
        if acc < 0.2 {
            scale /= 2.0;
        } else if acc > 0.6 {
            scale *= 2.0;
        } else {
            break;
        }
    }
    let pilot = mh_sample(
        target,
        &ProposalScale::Scalar(scale),
        400,
        &state,
        seed.wrapping_add(100),
    )?;
    let summary = summarize(&pilot.samples, 0.25)?;
    let s_hat = summary.variance.iter().map(|v| v.sqrt()).sum::<f64>() / d as f64;
    let s_hat = if s_hat > 0.0 { s_hat } else { scale.max(1e-3) };
    Ok(2.4 * s_hat / (d as f64).sqrt())
}

/// Warmup step-size search for HMC: double/halve ε until the acceptance rate
/// of a short pilot lands in [0.6, 0.9]. Warmup draws are discarded.
pub fn tune_hmc_step(
    target: &dyn Target,
    init: &DVector<f64>,
    leapfrog_steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut eps = 0.1f64;
    let mut state = init.clone();
    for round in 0..10 {
        let chain = hmc_sample(
            target,
            eps,
            leapfrog_steps,
            50,
            &state,
            seed.wrapping_add(round),
        )?;
        let acc = chain.acceptance_rate();
        state = chain.samples.last().expect("nonempty pilot").clone();
        if acc < 0.6 {
            eps /= 2.0;
        } else if acc > 0.9 {
            eps *= 2.0;
        } else {
            break;
        }
        eps = eps.clamp(1e-7, 10.0);
    }
    Ok(eps)
}

// ---------------------------------------------------------------------------
// Config-driven entry point
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Mh,
    Hmc,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mh" => Ok(SamplerKind::Mh),
            "hmc" => Ok(SamplerKind::Hmc),
            other => Err(Error::Parse(format!("unknown sampler kind '{other}'"))),
        }
    }
}

/// One MCMC run specification. `scale`/`step_size` of `None` mean
/// auto-tuning from a pilot run.
#[derive(Clone, Debug)]
pub struct McmcConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub burn_in: f64,
    pub scale: Option<f64>,
    pub step_size: Option<f64>,
    pub leapfrog_steps: usize,
    pub seed: u64,
    pub init: Option<DVector<f64>>,
}

impl McmcConfig {
    pub fn mh(steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Mh,
            steps,
            burn_in: 0.25,
            scale: None,
            step_size: None,
            leapfrog_steps: 20,
            seed,
            init: None,
        }
    }

    pub fn hmc(steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Hmc,
            ..Self::mh(steps, seed)
        }
    }
}

/// Run the configured kernel, tuning the proposal scale or step size first
/// when not pinned by the config.
pub fn run_mcmc(target: &dyn Target, config: &McmcConfig) -> Result<Chain> {
    let init = match &config.init {
        Some(v) => v.clone(),
        None => DVector::zeros(target.dim()),
    };
    match config.kind {
        SamplerKind::Mh => {
            let scale = match config.scale {
                Some(s) => s,
                None => tune_mh_scale(target, &init, config.seed.wrapping_add(0x9e37))?,
            };
            mh_sample(target, &ProposalScale::Scalar(scale), config.steps, &init, config.seed)
        }
        SamplerKind::Hmc => {
            let eps = match config.step_size {
                Some(e) => e,
                None => tune_hmc_step(
                    target,
                    &init,
                    config.leapfrog_steps,
                    config.seed.wrapping_add(0x9e37),
                )?,
            };
            hmc_sample(
                target,
                eps,
                config.leapfrog_steps,
                config.steps,
                &init,
                config.seed,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Test hook
// ---------------------------------------------------------------------------

/// Maximum relative deviation between the target's gradient and central
/// finite differences over the given points. Intended for tests.
pub fn max_gradient_error(target: &dyn Target, points: &[DVector<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for theta in points {
        let Some(grad) = target.grad_log_density(theta) else {
            return f64::INFINITY;
        };
        for i in 0..theta.len() {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let mut hi = theta.clone();
            hi[i] += h;
            let mut lo = theta.clone();
            lo[i] -= h;
            let fd = (target.log_density(&hi) - target.log_density(&lo)) / (2.0 * h);
            let err = (grad[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
