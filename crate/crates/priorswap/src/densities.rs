//! Log-densities and gradients for prior families and likelihood models,
//! plus synthetic data generation.
//!
//! Everything here is pure and re-entrant: evaluation never mutates model
//! data, so shared references can be used from multiple threads.

use crate::error::{Error, Result};
use crate::math::{logistic, sign, softplus, LN_2PI};
use crate::samplers::Target;
use nalgebra::{DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;
use std::path::Path;

/// A point θ in d-dimensional parameter space.
pub type ParamVector = DVector<f64>;

fn ensure_finite(theta: &DVector<f64>) -> Result<()> {
    if theta.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(
            "parameter vector contains non-finite entries".into(),
        ))
    }
}

fn ensure_dim(theta: &DVector<f64>, expected: usize) -> Result<()> {
    if theta.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            got: theta.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum CovKind {
    /// σ² I
    Spherical(f64),
    Full {
        cov: DMatrix<f64>,
        precision: DMatrix<f64>,
        chol_l: DMatrix<f64>,
        log_det: f64,
    },
}

/// A multivariate normal with either spherical or full covariance.
///
/// Doubles as the exact (conjugate) false-posterior representation.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: CovKind,
}

impl Gaussian {
    /// N(mean, var·I). `var` must be strictly positive.
    pub fn spherical(mean: DVector<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::InvalidInput(format!(
                "variance must be positive and finite, got {var}"
            )));
        }
        ensure_finite(&mean)?;
        if mean.is_empty() {
            return Err(Error::InvalidInput("mean must have dimension >= 1".into()));
        }
        Ok(Self {
            mean,
            cov: CovKind::Spherical(var),
        })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self::spherical(DVector::zeros(dim), 1.0).expect("standard normal is always valid")
    }

    /// N(mean, cov) with a full covariance matrix. The matrix must be square,
    /// symmetric to 1e-12 and strictly positive-definite; otherwise a numeric
    /// error carrying a condition-number estimate is returned.
    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        ensure_finite(&mean)?;
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let mut max_asym = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                max_asym = max_asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if max_asym > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "covariance is not symmetric: max |C_ij - C_ji| = {max_asym:.3e}"
            )));
        }
        let chol = nalgebra::linalg::Cholesky::<f64, Dyn>::new(cov.clone())
            .ok_or_else(|| Error::Numeric(cond_report(&cov)))?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            mean,
            cov: CovKind::Full {
                cov,
                precision,
                chol_l,
                log_det,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance matrix, materialized for the spherical case.
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        match &self.cov {
            CovKind::Spherical(v) => DMatrix::from_diagonal_element(self.dim(), self.dim(), *v),
            CovKind::Full { cov, .. } => cov.clone(),
        }
    }

    fn log_det(&self) -> f64 {
        match &self.cov {
            CovKind::Spherical(v) => self.dim() as f64 * v.ln(),
            CovKind::Full { log_det, .. } => *log_det,
        }
    }

    /// Σ⁻¹ (θ − μ).
    fn precision_times_centered(&self, theta: &DVector<f64>) -> DVector<f64> {
        let centered = theta - &self.mean;
        match &self.cov {
            CovKind::Spherical(v) => centered / *v,
            CovKind::Full { precision, .. } => precision * centered,
        }
    }

    /// Normalized log N(θ | μ, Σ).
    pub fn log_density(&self, theta: &DVector<f64>) -> f64 {
        let centered = theta - &self.mean;
        let quad = match &self.cov {
            CovKind::Spherical(v) => centered.norm_squared() / *v,
            CovKind::Full { precision, .. } => (precision * &centered).dot(&centered),
        };
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det() + quad)
    }

    /// ∇θ log N(θ | μ, Σ) = −Σ⁻¹(θ − μ).
    pub fn grad_log_density(&self, theta: &DVector<f64>) -> DVector<f64> {
        -self.precision_times_centered(theta)
    }

    /// Diagonal of ∂²/∂θ_i² log N = −diag(Σ⁻¹).
    fn second_deriv_diag(&self) -> DVector<f64> {
        match &self.cov {
            CovKind::Spherical(v) => DVector::from_element(self.dim(), -1.0 / *v),
            CovKind::Full { precision, .. } => -precision.diagonal(),
        }
    }

    /// One exact draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        match &self.cov {
            CovKind::Spherical(v) => &self.mean + z * v.sqrt(),
            CovKind::Full { chol_l, .. } => &self.mean + chol_l * z,
        }
    }
}

fn cond_report(m: &DMatrix<f64>) -> String {
    let eig = m.clone().symmetric_eigen();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    format!(
        "matrix is not positive-definite: eigenvalue range [{min:.3e}, {max:.3e}], condition number {cond:.3e}"
    )
}

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

/// Tagged prior family with hyperparameters. Every family has an evaluable
/// log-density and gradient at any finite θ.
#[derive(Clone, Debug)]
pub enum Prior {
    Normal(Gaussian),
    /// Independent Laplace per dimension with a common scale b:
    /// π(θ) = ∏ (1/2b) exp(−|θ_i − loc_i| / b).
    Laplace { loc: DVector<f64>, scale: f64 },
    /// Independent Student-t per dimension.
    StudentT {
        loc: DVector<f64>,
        scale: f64,
        dof: f64,
    },
    /// ∏ (1/2σ) exp(−|θ_i|^0.4 / σ). The 1/(2σ) factor is the conventional
    /// normalizer for this family; the density is only used up to
    /// proportionality (the exact mass per dimension is 2.5·Γ(2.5)·σ^{3/2}).
    VerySparse { dim: usize, scale: f64 },
    /// Hierarchical prior over the augmented state (θ, α):
    /// π(θ, α) = N(θ | 0, α⁻¹ I_d) · Gamma(α | shape, 1).
    /// Samplers work in (θ, ln α); see [`Prior::sampling_log_density_grad`].
    NormalGamma { dim: usize, shape: f64 },
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl Prior {
    pub fn normal_spherical(mean: DVector<f64>, var: f64) -> Result<Self> {
        Ok(Prior::Normal(Gaussian::spherical(mean, var)?))
    }

    pub fn laplace(loc: DVector<f64>, scale: f64) -> Result<Self> {
        ensure_finite(&loc)?;
        Ok(Prior::Laplace {
            loc,
            scale: positive("Laplace scale", scale)?,
        })
    }

    pub fn student_t(loc: DVector<f64>, scale: f64, dof: f64) -> Result<Self> {
        ensure_finite(&loc)?;
        Ok(Prior::StudentT {
            loc,
            scale: positive("Student-t scale", scale)?,
            dof: positive("Student-t dof", dof)?,
        })
    }

    /// Student-t with the default scale 1 and 3 degrees of freedom.
    pub fn student_t_default(loc: DVector<f64>) -> Result<Self> {
        Self::student_t(loc, 1.0, 3.0)
    }

    pub fn very_sparse(dim: usize, scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be >= 1".into()));
        }
        Ok(Prior::VerySparse {
            dim,
            scale: positive("VerySparse scale", scale)?,
        })
    }

    pub fn normal_gamma(dim: usize, shape: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be >= 1".into()));
        }
        Ok(Prior::NormalGamma {
            dim,
            shape: positive("Gamma shape", shape)?,
        })
    }

    /// Dimension of the state the prior is evaluated on. For `NormalGamma`
    /// this is d + 1 (the augmented coordinate).
    pub fn state_dim(&self) -> usize {
        match self {
            Prior::Normal(g) => g.dim(),
            Prior::Laplace { loc, .. } | Prior::StudentT { loc, .. } => loc.len(),
            Prior::VerySparse { dim, .. } => *dim,
            Prior::NormalGamma { dim, .. } => dim + 1,
        }
    }

    /// Exact log π(θ) and ∇θ log π(θ). Kinked families (Laplace, VerySparse)
    /// use the subgradient convention 0 at the kink.
    pub fn log_density_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        ensure_finite(theta)?;
        ensure_dim(theta, self.state_dim())?;
        Ok(match self {
            Prior::Normal(g) => (g.log_density(theta), g.grad_log_density(theta)),
            Prior::Laplace { loc, scale } => {
                let mut lp = -(theta.len() as f64) * (2.0 * scale).ln();
                let mut grad = DVector::zeros(theta.len());
                for i in 0..theta.len() {
                    let r = theta[i] - loc[i];
                    lp -= r.abs() / scale;
                    grad[i] = -sign(r) / scale;
                }
                (lp, grad)
            }
            Prior::StudentT { loc, scale, dof } => {
                let d = theta.len();
                let nu = *dof;
                let c = ln_gamma((nu + 1.0) / 2.0)
                    - ln_gamma(nu / 2.0)
                    - 0.5 * (nu * std::f64::consts::PI).ln()
                    - scale.ln();
                let mut lp = d as f64 * c;
                let mut grad = DVector::zeros(d);
                for i in 0..d {
                    let u = (theta[i] - loc[i]) / scale;
                    lp -= 0.5 * (nu + 1.0) * (1.0 + u * u / nu).ln();
                    grad[i] = -(nu + 1.0) * u / (scale * (nu + u * u));
                }
                (lp, grad)
            }
            Prior::VerySparse { scale, .. } => {
                let mut lp = -(theta.len() as f64) * (2.0 * scale).ln();
                let mut grad = DVector::zeros(theta.len());
                for i in 0..theta.len() {
                    let a = theta[i].abs();
                    lp -= a.powf(0.4) / scale;
                    grad[i] = if a == 0.0 {
                        0.0
                    } else {
                        -0.4 * a.powf(-0.6) * sign(theta[i]) / scale
                    };
                }
                (lp, grad)
            }
            Prior::NormalGamma { dim, shape } => {
                let d = *dim;
                let alpha = theta[d];
                if alpha <= 0.0 {
                    return Ok((f64::NEG_INFINITY, DVector::zeros(d + 1)));
                }
                let norm_sq: f64 = theta.rows(0, d).norm_squared();
                let lp = 0.5 * d as f64 * (alpha.ln() - LN_2PI) - 0.5 * alpha * norm_sq
                    + (shape - 1.0) * alpha.ln()
                    - alpha
                    - ln_gamma(*shape);
                let mut grad = DVector::zeros(d + 1);
                for i in 0..d {
                    grad[i] = -alpha * theta[i];
                }
                grad[d] = 0.5 * d as f64 / alpha - 0.5 * norm_sq + (shape - 1.0) / alpha - 1.0;
                (lp, grad)
            }
        })
    }

    /// Value-only variant of [`Prior::log_density_grad`].
    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        self.log_density_grad(theta).map(|(lp, _)| lp)
    }

    /// Log-density and gradient in sampler coordinates.
    ///
    /// For `NormalGamma` the last state coordinate is ℓ = ln α and the value
    /// includes the change-of-variables Jacobian (+ℓ), so samplers can move
    /// through unconstrained space. All other families are untransformed.
    pub fn sampling_log_density_grad(&self, state: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        match self {
            Prior::NormalGamma { dim, shape } => {
                ensure_finite(state)?;
                ensure_dim(state, dim + 1)?;
                let d = *dim;
                let ell = state[d];
                let alpha = ell.exp();
                let norm_sq: f64 = state.rows(0, d).norm_squared();
                let lp = 0.5 * d as f64 * (ell - LN_2PI) - 0.5 * alpha * norm_sq
                    + (shape - 1.0) * ell
                    - alpha
                    - ln_gamma(*shape)
                    + ell;
                let mut grad = DVector::zeros(d + 1);
                for i in 0..d {
                    grad[i] = -alpha * state[i];
                }
                grad[d] = 0.5 * d as f64 + (shape - 1.0) + 1.0 - alpha * (0.5 * norm_sq + 1.0);
                Ok((lp, grad))
            }
            _ => self.log_density_grad(state),
        }
    }

    /// Diagonal of the Hessian of log π, used by score matching. Kink points
    /// use the same one-sided convention as the gradient.
    pub fn second_deriv_diag(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_finite(theta)?;
        ensure_dim(theta, self.state_dim())?;
        match self {
            Prior::Normal(g) => Ok(g.second_deriv_diag()),
            Prior::Laplace { .. } => Ok(DVector::zeros(theta.len())),
            Prior::StudentT { loc, scale, dof } => {
                let nu = *dof;
                Ok(DVector::from_fn(theta.len(), |i, _| {
                    let u = (theta[i] - loc[i]) / scale;
                    -(nu + 1.0) * (nu - u * u) / (scale * scale * (nu + u * u).powi(2))
                }))
            }
            Prior::VerySparse { scale, .. } => Ok(DVector::from_fn(theta.len(), |i, _| {
                let a = theta[i].abs();
                if a == 0.0 {
                    0.0
                } else {
                    0.24 * a.powf(-1.6) / scale
                }
            })),
            Prior::NormalGamma { .. } => Err(Error::InvalidInput(
                "second derivatives for the hierarchical prior are not supported".into(),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Likelihood models
// ---------------------------------------------------------------------------

/// Model family tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Logistic,
    NormalMean,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Logistic => "logistic",
            ModelKind::NormalMean => "normal-mean",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "logistic" => Ok(ModelKind::Logistic),
            "normal-mean" => Ok(ModelKind::NormalMean),
            other => Err(Error::Parse(format!("unknown model tag '{other}'"))),
        }
    }
}

/// Likelihood model with attached data. Evaluation cost is Θ(n·d).
#[derive(Clone, Debug)]
pub enum Model {
    /// y_i = X_i θ + ε, ε ~ N(0, noise_var).
    Linear {
        x: DMatrix<f64>,
        y: DVector<f64>,
        noise_var: f64,
    },
    /// y_i ~ Bernoulli(logistic(X_i θ)), y ∈ {0, 1}.
    Logistic { x: DMatrix<f64>, y: DVector<f64> },
    /// x_i ~ N(θ, I), rows of `obs`.
    NormalMean { obs: DMatrix<f64> },
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linear { .. } => ModelKind::Linear,
            Model::Logistic { .. } => ModelKind::Logistic,
            Model::NormalMean { .. } => ModelKind::NormalMean,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Model::Linear { x, .. } | Model::Logistic { x, .. } => x.nrows(),
            Model::NormalMean { obs } => obs.nrows(),
        }
    }

    /// Parameter dimension d.
    pub fn dim(&self) -> usize {
        match self {
            Model::Linear { x, .. } | Model::Logistic { x, .. } => x.ncols(),
            Model::NormalMean { obs } => obs.ncols(),
        }
    }

    /// Per-point conditional family descriptor for pseudo-data densities.
    pub fn family(&self) -> PointFamily {
        PointFamily {
            kind: self.kind(),
            dim: self.dim(),
            noise_var: match self {
                Model::Linear { noise_var, .. } => *noise_var,
                _ => 1.0,
            },
        }
    }

    /// Σ_i log p(x_i | θ) and its gradient.
    pub fn log_likelihood_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        ensure_finite(theta)?;
        ensure_dim(theta, self.dim())?;
        Ok(match self {
            Model::Linear { x, y, noise_var } => {
                let n = x.nrows();
                let r = y - x * theta;
                let ll = -0.5 * n as f64 * (LN_2PI + noise_var.ln())
                    - r.norm_squared() / (2.0 * noise_var);
                let grad = (x.transpose() * r) / *noise_var;
                (ll, grad)
            }
            Model::Logistic { x, y } => {
                let z = x * theta;
                let mut ll = 0.0;
                let mut resid = DVector::zeros(x.nrows());
                for i in 0..x.nrows() {
                    ll += y[i] * z[i] - softplus(z[i]);
                    resid[i] = y[i] - logistic(z[i]);
                }
                (ll, x.transpose() * resid)
            }
            Model::NormalMean { obs } => {
                let (n, d) = (obs.nrows(), obs.ncols());
                let mut ll = -0.5 * (n * d) as f64 * LN_2PI;
                let mut grad = DVector::zeros(d);
                for i in 0..n {
                    for j in 0..d {
                        let r = obs[(i, j)] - theta[j];
                        ll -= 0.5 * r * r;
                        grad[j] += r;
                    }
                }
                (ll, grad)
            }
        })
    }

    /// Value-only variant of [`Model::log_likelihood_grad`].
    pub fn log_likelihood(&self, theta: &DVector<f64>) -> Result<f64> {
        ensure_finite(theta)?;
        ensure_dim(theta, self.dim())?;
        Ok(match self {
            Model::Linear { x, y, noise_var } => {
                let n = x.nrows();
                let r = y - x * theta;
                -0.5 * n as f64 * (LN_2PI + noise_var.ln()) - r.norm_squared() / (2.0 * noise_var)
            }
            Model::Logistic { x, y } => {
                let z = x * theta;
                let mut ll = 0.0;
                for i in 0..x.nrows() {
                    ll += y[i] * z[i] - softplus(z[i]);
                }
                ll
            }
            Model::NormalMean { obs } => {
                let (n, d) = (obs.nrows(), obs.ncols());
                let mut ll = -0.5 * (n * d) as f64 * LN_2PI;
                for i in 0..n {
                    for j in 0..d {
                        let r = obs[(i, j)] - theta[j];
                        ll -= 0.5 * r * r;
                    }
                }
                ll
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Per-point conditional PDFs (pseudo-data space)
// ---------------------------------------------------------------------------

/// Conditional PDF p(point | θ) of a single (pseudo-)data point. For the
/// regression families a point is the concatenation (x_1..x_d, y); for the
/// mean model it is the observation itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFamily {
    pub kind: ModelKind,
    pub dim: usize,
    pub noise_var: f64,
}

impl PointFamily {
    /// Dimension p of a data-space point.
    pub fn point_dim(&self) -> usize {
        match self.kind {
            ModelKind::NormalMean => self.dim,
            ModelKind::Linear | ModelKind::Logistic => self.dim + 1,
        }
    }

    /// log p(point | θ) and its gradient with respect to θ.
    pub fn log_pdf_grad(&self, point: &DVector<f64>, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = self.dim;
        match self.kind {
            ModelKind::NormalMean => {
                let mut lp = -0.5 * d as f64 * LN_2PI;
                let mut grad = DVector::zeros(d);
                for j in 0..d {
                    let r = point[j] - theta[j];
                    lp -= 0.5 * r * r;
                    grad[j] = r;
                }
                (lp, grad)
            }
            ModelKind::Linear => {
                let mut z = 0.0;
                for j in 0..d {
                    z += point[j] * theta[j];
                }
                let r = point[d] - z;
                let lp = -0.5 * (LN_2PI + self.noise_var.ln()) - r * r / (2.0 * self.noise_var);
                let mut grad = DVector::zeros(d);
                for j in 0..d {
                    grad[j] = point[j] * r / self.noise_var;
                }
                (lp, grad)
            }
            ModelKind::Logistic => {
                let mut z = 0.0;
                for j in 0..d {
                    z += point[j] * theta[j];
                }
                let y = point[d];
                let p = logistic(z);
                let lp = y * z - softplus(z);
                let mut grad = DVector::zeros(d);
                for j in 0..d {
                    grad[j] = point[j] * (y - p);
                }
                (lp, grad)
            }
        }
    }

    /// Value-only variant of [`PointFamily::log_pdf_grad`].
    pub fn log_pdf(&self, point: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let d = self.dim;
        match self.kind {
            ModelKind::NormalMean => {
                let mut lp = -0.5 * d as f64 * LN_2PI;
                for j in 0..d {
                    let r = point[j] - theta[j];
                    lp -= 0.5 * r * r;
                }
                lp
            }
            ModelKind::Linear => {
                let mut z = 0.0;
                for j in 0..d {
                    z += point[j] * theta[j];
                }
                let r = point[d] - z;
                -0.5 * (LN_2PI + self.noise_var.ln()) - r * r / (2.0 * self.noise_var)
            }
            ModelKind::Logistic => {
                let mut z = 0.0;
                for j in 0..d {
                    z += point[j] * theta[j];
                }
                point[d] * z - softplus(z)
            }
        }
    }

    /// Diagonal of ∂²/∂θ_j² log p(point | θ).
    pub fn second_deriv_diag(&self, point: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let d = self.dim;
        match self.kind {
            ModelKind::NormalMean => DVector::from_element(d, -1.0),
            ModelKind::Linear => {
                DVector::from_fn(d, |j, _| -point[j] * point[j] / self.noise_var)
            }
            ModelKind::Logistic => {
                let mut z = 0.0;
                for j in 0..d {
                    z += point[j] * theta[j];
                }
                let p = logistic(z);
                let w = p * (1.0 - p);
                DVector::from_fn(d, |j, _| -point[j] * point[j] * w)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Direct posterior target
// ---------------------------------------------------------------------------

/// The data-dependent posterior π(θ)·L(θ|xⁿ) as a sampling target. Each
/// evaluation walks the full dataset, so the per-step cost grows with n.
///
/// For a `NormalGamma` prior the state is (θ, ln α) with the Jacobian term
/// included, matching the swap targets.
pub struct Posterior<'a> {
    pub model: &'a Model,
    pub prior: &'a Prior,
}

impl Target for Posterior<'_> {
    fn dim(&self) -> usize {
        self.prior.state_dim()
    }

    fn log_density(&self, state: &DVector<f64>) -> f64 {
        let Ok((prior_lp, _)) = self.prior.sampling_log_density_grad(state) else {
            return f64::NEG_INFINITY;
        };
        if prior_lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let theta_part;
        let theta = if state.len() == self.model.dim() {
            state
        } else {
            theta_part = DVector::from(state.rows(0, self.model.dim()).clone_owned());
            &theta_part
        };
        match self.model.log_likelihood(theta) {
            Ok(ll) => prior_lp + ll,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn grad_log_density(&self, state: &DVector<f64>) -> Option<DVector<f64>> {
        let (_, mut grad) = self.prior.sampling_log_density_grad(state).ok()?;
        let d = self.model.dim();
        let theta_part;
        let theta = if state.len() == d {
            state
        } else {
            theta_part = DVector::from(state.rows(0, d).clone_owned());
            &theta_part
        };
        let (_, ll_grad) = self.model.log_likelihood_grad(theta).ok()?;
        for j in 0..d {
            grad[j] += ll_grad[j];
        }
        Some(grad)
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Deterministic synthetic dataset for a model family. `noise_var` is only
/// used by the linear family.
pub fn generate_synthetic(
    kind: ModelKind,
    n: usize,
    d: usize,
    theta_true: &DVector<f64>,
    noise_var: f64,
    seed: u64,
) -> Result<Model> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be >= 1".into()));
    }
    ensure_dim(theta_true, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        ModelKind::Linear => {
            positive("noise variance", noise_var)?;
            let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise =
                DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * noise_var.sqrt());
            let y = &x * theta_true + noise;
            Model::Linear { x, y, noise_var }
        }
        ModelKind::Logistic => {
            let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(n, |i, _| {
                let p = logistic(x.row(i).transpose().dot(theta_true));
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            });
            Model::Logistic { x, y }
        }
        ModelKind::NormalMean => {
            let obs = DMatrix::from_fn(n, d, |_, j| {
                theta_true[j] + rng.sample::<f64, _>(StandardNormal)
            });
            Model::NormalMean { obs }
        }
    })
}

/// NormalMean dataset with an exact per-dimension sum of observations: all n
/// rows equal `sums`/n. The likelihood depends on the data only through the
/// sum, so this pins the posterior exactly.
pub fn normal_mean_with_sum(n: usize, sums: &DVector<f64>) -> Result<Model> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "forced-sum construction needs n >= 1".into(),
        ));
    }
    ensure_finite(sums)?;
    let row = sums / n as f64;
    let obs = DMatrix::from_fn(n, sums.len(), |_, j| row[j]);
    Ok(Model::NormalMean { obs })
}

/// Read a dataset from CSV: header row, one column per feature, final column
/// the response (linear) or 0/1 label (logistic); for the mean model every
/// column is an observation coordinate.
pub fn model_from_csv(path: &Path, kind: ModelKind, noise_var: f64) -> Result<Model> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!("row {}: cannot parse '{}' as a number", i + 2, field))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("dataset has no rows".into()));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Parse("ragged csv rows".into()));
    }
    match kind {
        ModelKind::NormalMean => {
            let obs = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
            Ok(Model::NormalMean { obs })
        }
        ModelKind::Linear => {
            if width < 2 {
                return Err(Error::InvalidInput(
                    "regression csv needs at least one feature column".into(),
                ));
            }
            positive("noise variance", noise_var)?;
            let x = DMatrix::from_fn(rows.len(), width - 1, |i, j| rows[i][j]);
            let y = DVector::from_fn(rows.len(), |i, _| rows[i][width - 1]);
            Ok(Model::Linear { x, y, noise_var })
        }
        ModelKind::Logistic => {
            if width < 2 {
                return Err(Error::InvalidInput(
                    "classification csv needs at least one feature column".into(),
                ));
            }
            let x = DMatrix::from_fn(rows.len(), width - 1, |i, j| rows[i][j]);
            let y = DVector::from_fn(rows.len(), |i, _| rows[i][width - 1]);
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Parse("labels must be 0 or 1".into()));
            }
            Ok(Model::Logistic { x, y })
        }
    }
}
