//! Swap densities p_s ∝ p̃_f · π / π_f built from any false-posterior
//! representation and a prior pair, plus the hierarchical-prior variant over
//! the augmented state (θ, ln α).
//!
//! A swap target closes over the false-posterior representation only — no
//! dataset is reachable from it — so evaluation cost never depends on the
//! data size.

use crate::densities::Prior;
use crate::error::{Error, Result};
use crate::false_posterior::{ParametricAlpha, SemiparametricRep};
use crate::samplers::Target;
use crate::Gaussian;
use nalgebra::DVector;

/// Constant-evaluation-cost representation of the false posterior.
#[derive(Clone, Debug)]
pub enum FalseRep {
    Exact(Gaussian),
    Parametric(ParametricAlpha),
    Semiparametric(SemiparametricRep),
}

impl FalseRep {
    pub fn dim(&self) -> usize {
        match self {
            FalseRep::Exact(g) => g.dim(),
            FalseRep::Parametric(a) => a.dim(),
            FalseRep::Semiparametric(r) => r.dim(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FalseRep::Exact(_) => "exact",
            FalseRep::Parametric(_) => "parametric",
            FalseRep::Semiparametric(_) => "semiparametric",
        }
    }

    /// Unnormalized log p̃_f(θ).
    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        match self {
            FalseRep::Exact(g) => Ok(g.log_density(theta)),
            FalseRep::Parametric(a) => a.log_density(theta),
            FalseRep::Semiparametric(r) => r.log_density(theta),
        }
    }

    pub fn log_density_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        match self {
            FalseRep::Exact(g) => Ok((g.log_density(theta), g.grad_log_density(theta))),
            FalseRep::Parametric(a) => a.log_density_grad(theta),
            FalseRep::Semiparametric(r) => r.log_density_grad(theta),
        }
    }
}

/// The swap density log p_s(θ) = log p̃_f(θ) + log π(θ) − log π_f(θ),
/// unnormalized, with gradient. Immutable and safe to evaluate concurrently.
pub struct SwapTarget {
    rep: FalseRep,
    target_prior: Prior,
    false_prior: Prior,
    provenance: String,
}

/// Build a swap target from a false-posterior representation and the
/// target/false prior pair.
///
/// Support of π_f versus π is checked lazily during evaluation (it is not
/// decidable for arbitrary families at construction): an evaluation where
/// log π_f = −∞ while log π is finite yields [`Error::SupportMismatch`]
/// naming the offending θ.
pub fn make_prior_swap(
    rep: FalseRep,
    target_prior: Prior,
    false_prior: Prior,
) -> Result<SwapTarget> {
    let d = rep.dim();
    for (name, prior) in [("target", &target_prior), ("false", &false_prior)] {
        if prior.state_dim() != d {
            return Err(Error::InvalidInput(format!(
                "{name} prior has state dimension {}, expected {d}",
                prior.state_dim()
            )));
        }
    }
    let provenance = format!(
        "p_s = {} false-posterior rep with target {} over false {}",
        rep.label(),
        prior_label(&target_prior),
        prior_label(&false_prior)
    );
    Ok(SwapTarget {
        rep,
        target_prior,
        false_prior,
        provenance,
    })
}

/// Semiparametric swap: p_s^sp ∝ p_s^α(θ) · (1/T_f)·Σ_t K(‖θ−θ̃_t‖/b)/p̃_f^α(θ̃_t).
/// Same factorized evaluation as routing the semiparametric representation
/// through [`make_prior_swap`].
pub fn make_semiparametric_swap(
    rep: SemiparametricRep,
    target_prior: Prior,
    false_prior: Prior,
) -> Result<SwapTarget> {
    make_prior_swap(FalseRep::Semiparametric(rep), target_prior, false_prior)
}

fn prior_label(prior: &Prior) -> &'static str {
    match prior {
        Prior::Normal(_) => "normal",
        Prior::Laplace { .. } => "laplace",
        Prior::StudentT { .. } => "student-t",
        Prior::VerySparse { .. } => "very-sparse",
        Prior::NormalGamma { .. } => "normal-gamma",
    }
}

impl SwapTarget {
    pub fn rep(&self) -> &FalseRep {
        &self.rep
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Checked evaluation with the support-mismatch error surfaced.
    pub fn try_log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        let lp_false = self.false_prior.log_density(theta)?;
        let lp_target = self.target_prior.log_density(theta)?;
        if lp_false == f64::NEG_INFINITY && lp_target > f64::NEG_INFINITY {
            return Err(Error::SupportMismatch {
                theta: format!("{:?}", theta.as_slice()),
            });
        }
        let lp_rep = self.rep.log_density(theta)?;
        Ok(lp_rep + lp_target - lp_false)
    }

    pub fn log_density_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (lp_false, g_false) = self.false_prior.log_density_grad(theta)?;
        let (lp_target, g_target) = self.target_prior.log_density_grad(theta)?;
        if lp_false == f64::NEG_INFINITY && lp_target > f64::NEG_INFINITY {
            return Err(Error::SupportMismatch {
                theta: format!("{:?}", theta.as_slice()),
            });
        }
        let (lp_rep, g_rep) = self.rep.log_density_grad(theta)?;
        Ok((lp_rep + lp_target - lp_false, g_rep + g_target - g_false))
    }
}

impl Target for SwapTarget {
    fn dim(&self) -> usize {
        self.rep.dim()
    }

    /// Sampling view: states the checked evaluation refuses (support
    /// violations, non-finite proposals) read as zero density and get
    /// rejected by the kernels.
    fn log_density(&self, theta: &DVector<f64>) -> f64 {
        self.try_log_density(theta).unwrap_or(f64::NEG_INFINITY)
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        self.log_density_grad(theta).ok().map(|(_, g)| g)
    }
}

/// Swap target for the hierarchical normal-gamma prior over the augmented
/// state (θ, ℓ = ln α):
///
///   log p_s(θ, ℓ) = log p̃_f(θ) + log N(θ|0, e^{−ℓ} I) + log Gamma(e^ℓ|γ, 1)
///                   − log π_f(θ) + ℓ,
///
/// the final ℓ being the Jacobian of the log transform.
pub struct HierarchicalSwapTarget {
    rep: FalseRep,
    prior: Prior,
    false_prior: Prior,
}

pub fn make_hierarchical_swap(
    rep: FalseRep,
    gamma_shape: f64,
    false_prior: Prior,
) -> Result<HierarchicalSwapTarget> {
    let d = rep.dim();
    if false_prior.state_dim() != d {
        return Err(Error::InvalidInput(format!(
            "false prior has state dimension {}, expected {d}",
            false_prior.state_dim()
        )));
    }
    Ok(HierarchicalSwapTarget {
        rep,
        prior: Prior::normal_gamma(d, gamma_shape)?,
        false_prior,
    })
}

impl HierarchicalSwapTarget {
    pub fn theta_dim(&self) -> usize {
        self.rep.dim()
    }

    pub fn try_log_density(&self, state: &DVector<f64>) -> Result<f64> {
        let d = self.theta_dim();
        if state.len() != d + 1 {
            return Err(Error::DimensionMismatch {
                expected: d + 1,
                got: state.len(),
            });
        }
        let theta = DVector::from(state.rows(0, d).clone_owned());
        let (prior_lp, _) = self.prior.sampling_log_density_grad(state)?;
        let lp_false = self.false_prior.log_density(&theta)?;
        if lp_false == f64::NEG_INFINITY && prior_lp > f64::NEG_INFINITY {
            return Err(Error::SupportMismatch {
                theta: format!("{:?}", theta.as_slice()),
            });
        }
        Ok(self.rep.log_density(&theta)? + prior_lp - lp_false)
    }
}

impl Target for HierarchicalSwapTarget {
    fn dim(&self) -> usize {
        self.theta_dim() + 1
    }

    fn log_density(&self, state: &DVector<f64>) -> f64 {
        self.try_log_density(state).unwrap_or(f64::NEG_INFINITY)
    }

    fn grad_log_density(&self, state: &DVector<f64>) -> Option<DVector<f64>> {
        let d = self.theta_dim();
        if state.len() != d + 1 {
            return None;
        }
        let theta = DVector::from(state.rows(0, d).clone_owned());
        let (_, mut grad) = self.prior.sampling_log_density_grad(state).ok()?;
        let (_, g_rep) = self.rep.log_density_grad(&theta).ok()?;
        let (_, g_false) = self.false_prior.log_density_grad(&theta).ok()?;
        for i in 0..d {
            grad[i] += g_rep[i] - g_false[i];
        }
        Some(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{normal_mean_with_sum, Prior};
    use crate::false_posterior::{conjugate_posterior, sample_exact, ParametricAlpha, SampleSet, SemiparametricRep};
    use crate::math::LN_2PI;
    use crate::samplers::{max_gradient_error, mh_sample, ProposalScale};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use statrs::function::gamma::ln_gamma;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn running_example() -> (Gaussian, Prior, Prior) {
        let model = normal_mean_with_sum(3, &vec1(4.0)).unwrap();
        let post = conjugate_posterior(&model, &Gaussian::standard(1)).unwrap();
        let target = Prior::laplace(vec1(10.0), 1.0 / 2f64.sqrt()).unwrap();
        let false_prior = Prior::normal_spherical(DVector::zeros(1), 1.0).unwrap();
        (post, target, false_prior)
    }

    #[test]
    fn identical_priors_reduce_to_false_posterior() {
        let (post, _, false_prior) = running_example();
        let swap = make_prior_swap(
            FalseRep::Exact(post.clone()),
            false_prior.clone(),
            false_prior,
        )
        .unwrap();
        for t in [-1.0, 0.0, 0.7, 2.0] {
            let theta = vec1(t);
            assert_relative_eq!(
                swap.try_log_density(&theta).unwrap(),
                post.log_density(&theta),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn running_example_pointwise_value() {
        let (post, target, false_prior) = running_example();
        let swap = make_prior_swap(FalseRep::Exact(post), target, false_prior).unwrap();
        let theta = vec1(1.0);
        let b = 1.0 / 2f64.sqrt();
        // log N(1|1, 0.25) + log Laplace(1|10, b) − log N(1|0, 1), by hand.
        let expected = (-0.5 * (LN_2PI + 0.25f64.ln()))
            + (-(2.0 * b).ln() - 9.0 / b)
            - (-0.5 * (LN_2PI + 1.0));
        assert_relative_eq!(swap.try_log_density(&theta).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn support_mismatch_is_reported_with_theta() {
        // Extreme θ overflows the normal false prior to −∞ while the Laplace
        // target stays finite: the checked evaluation must name the point.
        let (post, target, false_prior) = running_example();
        let swap = make_prior_swap(FalseRep::Exact(post), target, false_prior).unwrap();
        let theta = vec1(1e160);
        match swap.try_log_density(&theta) {
            Err(Error::SupportMismatch { theta: msg }) => assert!(msg.contains("1e160")),
            other => panic!("expected support mismatch, got {other:?}"),
        }
        // The sampling view rejects instead of failing.
        assert_eq!(Target::log_density(&swap, &theta), f64::NEG_INFINITY);
    }

    #[test]
    fn swap_gradients_match_finite_differences() {
        let (post, _, false_prior) = running_example();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets: Vec<Prior> = vec![
            Prior::laplace(vec1(10.0), 0.05).unwrap(),
            Prior::student_t_default(vec1(0.0)).unwrap(),
            Prior::very_sparse(1, 1.0).unwrap(),
        ];
        for target_prior in targets {
            let swap = make_prior_swap(
                FalseRep::Exact(post.clone()),
                target_prior,
                false_prior.clone(),
            )
            .unwrap();
            let points: Vec<DVector<f64>> = (0..100)
                .map(|_| {
                    let mut v: f64 = rng.sample(StandardNormal);
                    if v.abs() < 0.15 {
                        v += 0.3;
                    }
                    vec1(1.0 + v)
                })
                .collect();
            assert!(max_gradient_error(&swap, &points) < 1e-4);
        }
    }

    #[test]
    fn semiparametric_factorization_identity() {
        let model = normal_mean_with_sum(3, &vec1(4.0)).unwrap();
        let post = conjugate_posterior(&model, &Gaussian::standard(1)).unwrap();
        let anchors = sample_exact(&post, 50, 5);
        let false_prior = Prior::normal_spherical(DVector::zeros(1), 1.0).unwrap();
        let alpha = ParametricAlpha::new(
            vec![vec1(4.0 / 3.0)],
            3,
            false_prior.clone(),
            model.family(),
        )
        .unwrap();
        let rep = SemiparametricRep::new(&anchors, 0.3, alpha.clone()).unwrap();
        let target = Prior::laplace(vec1(10.0), 0.05).unwrap();

        let semi_swap = make_semiparametric_swap(rep.clone(), target.clone(), false_prior.clone())
            .unwrap();
        let para_swap = make_prior_swap(
            FalseRep::Parametric(alpha),
            target,
            false_prior,
        )
        .unwrap();

        for t in [0.2, 0.9, 1.5] {
            let theta = vec1(t);
            let lhs = semi_swap.try_log_density(&theta).unwrap()
                - para_swap.try_log_density(&theta).unwrap();
            let rhs = rep.log_correction(&theta) - rep.dim() as f64 * rep.bandwidth().ln();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_anchor_semiparametric_swap_shape() {
        // T_f = 1: the correction is exactly one kernel, so
        // p_s^sp(θ) ∝ p_s^α(θ)·K(‖θ−θ̃_1‖/b).
        let model = normal_mean_with_sum(3, &vec1(4.0)).unwrap();
        let false_prior = Prior::normal_spherical(DVector::zeros(1), 1.0).unwrap();
        let alpha = ParametricAlpha::new(
            vec![vec1(4.0 / 3.0)],
            3,
            false_prior.clone(),
            model.family(),
        )
        .unwrap();
        let anchor = vec1(1.1);
        let rep =
            SemiparametricRep::new(&SampleSet::new(vec![anchor.clone()]), 0.4, alpha.clone())
                .unwrap();
        let target = Prior::laplace(vec1(10.0), 0.05).unwrap();
        let semi = make_semiparametric_swap(rep, target.clone(), false_prior.clone()).unwrap();
        let para = make_prior_swap(FalseRep::Parametric(alpha), target, false_prior).unwrap();
        let kernel = |t: f64| -0.5 * ((t - 1.1) / 0.4f64).powi(2);
        let c0 = semi.try_log_density(&vec1(0.8)).unwrap()
            - para.try_log_density(&vec1(0.8)).unwrap()
            - kernel(0.8);
        for t in [0.3, 1.0, 1.6] {
            let c = semi.try_log_density(&vec1(t)).unwrap()
                - para.try_log_density(&vec1(t)).unwrap()
                - kernel(t);
            assert_relative_eq!(c, c0, epsilon = 1e-10);
        }
    }

    #[test]
    fn semiparametric_swap_normalizes_under_quadrature() {
        let model = normal_mean_with_sum(3, &vec1(4.0)).unwrap();
        let post = conjugate_posterior(&model, &Gaussian::standard(1)).unwrap();
        let anchors = sample_exact(&post, 400, 9);
        let false_prior = Prior::normal_spherical(DVector::zeros(1), 1.0).unwrap();
        let alpha = ParametricAlpha::new(
            vec![vec1(4.0 / 3.0)],
            3,
            false_prior.clone(),
            model.family(),
        )
        .unwrap();
        let rep = SemiparametricRep::new(&anchors, 0.3, alpha).unwrap();
        let swap =
            make_semiparametric_swap(rep, false_prior.clone(), false_prior.clone()).unwrap();
        // π = π_f here, so p_s^sp is the semiparametric density itself; its
        // normalized version must integrate to one (checked by normalizing on
        // a wide grid and re-integrating on a sub-grid).
        let lo = -4.0;
        let hi = 6.0;
        let m = 4001;
        let h = (hi - lo) / (m - 1) as f64;
        let mut mass = 0.0;
        for i in 0..m {
            let w = if i == 0 || i == m - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            mass += w * swap.try_log_density(&vec1(lo + i as f64 * h)).unwrap().exp();
        }
        mass *= h / 3.0;
        let mut renorm = 0.0;
        for i in 0..m {
            let w = if i == 0 || i == m - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            renorm +=
                w * (swap.try_log_density(&vec1(lo + i as f64 * h)).unwrap() - mass.ln()).exp();
        }
        renorm *= h / 3.0;
        assert_relative_eq!(renorm, 1.0, max_relative = 1e-3);
    }

    #[test]
    fn hierarchical_value_at_known_point() {
        // At θ = 0, α = γ, the value is the plain sum of the four closed-form
        // terms plus the ln α Jacobian.
        let d = 2usize;
        let gamma_shape = 1.5f64;
        let post = Gaussian::standard(d);
        let false_prior = Prior::normal_spherical(DVector::zeros(d), 1.0).unwrap();
        let swap =
            make_hierarchical_swap(FalseRep::Exact(post.clone()), gamma_shape, false_prior.clone())
                .unwrap();
        let mut state = DVector::zeros(d + 1);
        state[d] = gamma_shape.ln();
        let theta = DVector::zeros(d);
        let expected = post.log_density(&theta)
            + (0.5 * d as f64 * (gamma_shape.ln() - LN_2PI))
            + ((gamma_shape - 1.0) * gamma_shape.ln() - gamma_shape - ln_gamma(gamma_shape))
            - false_prior.log_density(&theta).unwrap()
            + gamma_shape.ln();
        let got = swap.try_log_density(&state).unwrap();
        assert!(got.is_finite());
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn hierarchical_gradient_matches_finite_differences() {
        let post = Gaussian::standard(2);
        let false_prior = Prior::normal_spherical(DVector::zeros(2), 1.0).unwrap();
        let swap = make_hierarchical_swap(FalseRep::Exact(post), 2.0, false_prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<DVector<f64>> = (0..100)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        assert!(max_gradient_error(&swap, &points) < 1e-4);
    }

    #[test]
    fn large_gamma_concentrates_on_fixed_alpha_swap() {
        // As γ grows the Gamma(γ, 1) mass concentrates at α ≈ γ, so the
        // θ-marginal of the joint chain approaches the fixed-α normal-prior
        // swap result.
        let gamma_shape = 400.0;
        let post = Gaussian::spherical(vec1(1.0), 0.25).unwrap();
        let false_prior = Prior::normal_spherical(DVector::zeros(1), 1.0).unwrap();
        let joint =
            make_hierarchical_swap(FalseRep::Exact(post.clone()), gamma_shape, false_prior.clone())
                .unwrap();
        let mut init = DVector::zeros(2);
        init[1] = gamma_shape.ln();
        let chain = mh_sample(&joint, &ProposalScale::PerDim(DVector::from_vec(vec![0.4, 0.05])), 200_000, &init, 3)
            .unwrap();
        let theta_mean: f64 = chain
            .retained(0.25)
            .iter()
            .map(|s| s[0])
            .sum::<f64>()
            / chain.retained(0.25).len() as f64;

        let fixed = make_prior_swap(
            FalseRep::Exact(post),
            Prior::normal_spherical(DVector::zeros(1), 1.0 / gamma_shape).unwrap(),
            false_prior,
        )
        .unwrap();
        let fixed_chain = mh_sample(
            &fixed,
            &ProposalScale::Scalar(0.1),
            200_000,
            &DVector::zeros(1),
            7,
        )
        .unwrap();
        let fixed_mean: f64 = fixed_chain
            .retained(0.25)
            .iter()
            .map(|s| s[0])
            .sum::<f64>()
            / fixed_chain.retained(0.25).len() as f64;
        assert!(
            (theta_mean - fixed_mean).abs() < 0.02,
            "joint {theta_mean} vs fixed-alpha {fixed_mean}"
        );
    }

    #[test]
    fn swap_owns_its_components_no_data_reachable() {
        // Construction consumes only the representation and priors; the
        // dataset can be dropped before evaluation.
        let model = normal_mean_with_sum(3, &vec1(4.0)).unwrap();
        let post = conjugate_posterior(&model, &Gaussian::standard(1)).unwrap();
        drop(model);
        let target = Prior::laplace(vec1(10.0), 0.05).unwrap();
        let false_prior = Prior::normal_spherical(DVector::zeros(1), 1.0).unwrap();
        let swap = make_prior_swap(FalseRep::Exact(post), target, false_prior).unwrap();
        assert!(swap.try_log_density(&vec1(1.0)).unwrap().is_finite());
    }
}
