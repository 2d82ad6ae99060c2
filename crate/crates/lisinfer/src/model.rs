//! Forward models, misfits, and the Gauss-Newton structures built on them.
//!
//! A [`ForwardModel`] maps parameters `x` to predicted observations `G(x)`
//! and exposes its Jacobian through [`Linearization`] handles: calling
//! [`ForwardModel::linearize`] performs one forward evaluation and returns an
//! object that applies `J(x)` and `J(x)ᵀ` cheaply, reusing whatever
//! factorization the forward solve produced. An inverse problem bundles a
//! model with a Gaussian prior, an observation noise covariance, and data
//! into a [`ForwardProblem`], which provides the misfit
//! `η(x) = ½‖Γ_obs^{-1/2}(G(x) - y)‖²`, the unnormalized log posterior
//! `-η(x) + log π₀(x)`, and the prior-preconditioned Gauss-Newton Hessian
//! action `Lᵀ Jᵀ Γ_obs⁻¹ J L` that drives subspace construction.
//!
//! For linear models the posterior is Gaussian and available in closed form;
//! [`linear_gaussian_posterior`] and [`optimal_linear_projector`] provide the
//! exact reference quantities the rest of the crate is tested against.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::prior::GaussianPrior;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("forward solve failed: {context}")]
    ForwardSolveFailed { context: String },
    #[error("posterior system is singular")]
    SingularSystem,
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Deterministic parameter-to-observable map.
pub trait ForwardModel: Send + Sync {
    fn dim_param(&self) -> usize;
    fn dim_obs(&self) -> usize;

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// Forward-evaluate at `x` and return a handle that applies the Jacobian
    /// and its adjoint at that point. Implementations cache the factorized
    /// state of the forward solve inside the handle, so repeated Jacobian
    /// actions at the same point cost only substitutions.
    fn linearize(&self, x: &DVector<f64>) -> Result<Box<dyn Linearization + '_>, ModelError>;
}

/// Jacobian actions at a fixed linearization point.
pub trait Linearization: Send + Sync {
    /// `G(x)` at the linearization point.
    fn observation(&self) -> &DVector<f64>;

    /// `J(x) v`.
    fn jac_apply(&self, v: &DVector<f64>) -> DVector<f64>;

    /// `J(x)ᵀ w`.
    fn jac_adjoint(&self, w: &DVector<f64>) -> DVector<f64>;
}

/// Observation noise covariance `Γ_obs`, kept diagonal.
#[derive(Debug, Clone)]
pub enum ObsCov {
    /// `σ² I`.
    Iid { sigma: f64 },
    /// Per-observation variances.
    Diagonal { var: DVector<f64> },
}

impl ObsCov {
    pub fn check_dim(&self, d: usize) -> Result<(), ModelError> {
        match self {
            ObsCov::Iid { .. } => Ok(()),
            ObsCov::Diagonal { var } if var.len() == d => Ok(()),
            ObsCov::Diagonal { var } => Err(ModelError::DimensionMismatch {
                context: format!("{} noise variances for {} observations", var.len(), d),
            }),
        }
    }

    /// `Γ_obs⁻¹ r`.
    pub fn apply_inv(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            ObsCov::Iid { sigma } => r / (sigma * sigma),
            ObsCov::Diagonal { var } => r.component_div(var),
        }
    }

    /// `rᵀ Γ_obs⁻¹ r`.
    pub fn inv_quad(&self, r: &DVector<f64>) -> f64 {
        r.dot(&self.apply_inv(r))
    }

    pub fn variances(&self, d: usize) -> DVector<f64> {
        match self {
            ObsCov::Iid { sigma } => DVector::from_element(d, sigma * sigma),
            ObsCov::Diagonal { var } => var.clone(),
        }
    }
}

/// A Bayesian inverse problem: model, Gaussian prior, noise, and data.
#[derive(Clone)]
pub struct ForwardProblem {
    pub model: Arc<dyn ForwardModel>,
    pub prior: GaussianPrior,
    pub obs_cov: ObsCov,
    pub data: DVector<f64>,
}

impl ForwardProblem {
    pub fn new(
        model: Arc<dyn ForwardModel>,
        prior: GaussianPrior,
        obs_cov: ObsCov,
        data: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if prior.dim() != model.dim_param() {
            return Err(ModelError::DimensionMismatch {
                context: format!(
                    "prior dimension {} vs model parameter dimension {}",
                    prior.dim(),
                    model.dim_param()
                ),
            });
        }
        if data.len() != model.dim_obs() {
            return Err(ModelError::DimensionMismatch {
                context: format!(
                    "data length {} vs model observation dimension {}",
                    data.len(),
                    model.dim_obs()
                ),
            });
        }
        obs_cov.check_dim(model.dim_obs())?;
        Ok(ForwardProblem {
            model,
            prior,
            obs_cov,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim_param()
    }

    /// Data misfit `½‖Γ_obs^{-1/2}(G(x) - y)‖²`. Zero exactly at data-matching
    /// parameters, nonnegative everywhere.
    pub fn misfit(&self, x: &DVector<f64>) -> Result<f64, ModelError> {
        let r = self.model.apply(x)? - &self.data;
        Ok(0.5 * self.obs_cov.inv_quad(&r))
    }

    pub fn misfit_of_observation(&self, obs: &DVector<f64>) -> f64 {
        let r = obs - &self.data;
        0.5 * self.obs_cov.inv_quad(&r)
    }

    /// Unnormalized log posterior `-η(x) + log π₀(x)`.
    pub fn log_posterior(&self, x: &DVector<f64>) -> Result<f64, ModelError> {
        Ok(-self.misfit(x)? + self.prior.log_density(x))
    }

    /// Log posterior and its gradient
    /// `-Jᵀ Γ_obs⁻¹ (G(x) - y) - Γ_pr⁻¹ (x - μ)` from a single forward solve.
    pub fn log_posterior_and_grad(
        &self,
        x: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>), ModelError> {
        let lin = self.model.linearize(x)?;
        let r = lin.observation() - &self.data;
        let weighted = self.obs_cov.apply_inv(&r);
        let value = -0.5 * r.dot(&weighted) + self.prior.log_density(x);
        let grad = -lin.jac_adjoint(&weighted) - self.prior.apply_precision(&(x - self.prior.mean()));
        Ok((value, grad))
    }

    /// Gauss-Newton Hessian action `Jᵀ Γ_obs⁻¹ J v` at a linearization point.
    pub fn gn_hessian_apply(&self, lin: &dyn Linearization, v: &DVector<f64>) -> DVector<f64> {
        let jv = lin.jac_apply(v);
        lin.jac_adjoint(&self.obs_cov.apply_inv(&jv))
    }

    /// Prior-preconditioned Gauss-Newton Hessian action
    /// `Lᵀ Jᵀ Γ_obs⁻¹ J L` applied to each column of `block`.
    pub fn ppgnh_block(&self, lin: &dyn Linearization, block: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.prior.factor();
        let lifted = l.mul_l(block);
        let mut out = DMatrix::zeros(block.nrows(), block.ncols());
        for j in 0..block.ncols() {
            let v = DVector::from(lifted.column(j));
            let hv = self.gn_hessian_apply(lin, &v);
            out.set_column(j, &hv);
        }
        l.mul_lt(&out)
    }

    /// Dense Jacobian at `x`.
    pub fn assemble_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let lin = self.model.linearize(x)?;
        Ok(assemble_jacobian_from(
            lin.as_ref(),
            self.model.dim_param(),
            self.model.dim_obs(),
        ))
    }
}

/// Dense Jacobian from an existing linearization, assembled from whichever
/// of the tangent or adjoint directions there are fewer of.
pub fn assemble_jacobian_from(
    lin: &dyn Linearization,
    dim_param: usize,
    dim_obs: usize,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(dim_obs, dim_param);
    if dim_obs <= dim_param {
        let mut e = DVector::zeros(dim_obs);
        for i in 0..dim_obs {
            e[i] = 1.0;
            let row = lin.jac_adjoint(&e);
            for j in 0..dim_param {
                jac[(i, j)] = row[j];
            }
            e[i] = 0.0;
        }
    } else {
        let mut e = DVector::zeros(dim_param);
        for j in 0..dim_param {
            e[j] = 1.0;
            jac.set_column(j, &lin.jac_apply(&e));
            e[j] = 0.0;
        }
    }
    jac
}

/// Exact posterior mean and covariance of a linear-Gaussian problem,
/// `Γ_pos = (Gᵀ Γ_obs⁻¹ G + Γ_pr⁻¹)⁻¹` and
/// `μ_pos = Γ_pos (Γ_pr⁻¹ μ_pr + Gᵀ Γ_obs⁻¹ y)`.
pub fn linear_gaussian_posterior(
    g: &DMatrix<f64>,
    prior: &GaussianPrior,
    obs_cov: &ObsCov,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    let n = g.ncols();
    if prior.dim() != n || y.len() != g.nrows() {
        return Err(ModelError::DimensionMismatch {
            context: format!(
                "G is {}x{}, prior dimension {}, data length {}",
                g.nrows(),
                n,
                prior.dim(),
                y.len()
            ),
        });
    }
    let h = gauss_newton_hessian(g, obs_cov);
    let prior_precision = prior.factor().solve(&DMatrix::identity(n, n));
    let a = h + &prior_precision;
    let a_chol = linalg::sym_factor(&a).map_err(|_| ModelError::SingularSystem)?;
    let cov = a_chol.solve(&DMatrix::identity(n, n));
    let rhs = &prior_precision * prior.mean() + g.tr_mul(&obs_cov.apply_inv(y));
    let mean = a_chol.solve_vec(&rhs);
    Ok((mean, cov))
}

/// `H = Gᵀ Γ_obs⁻¹ G` for an explicit Jacobian.
pub fn gauss_newton_hessian(g: &DMatrix<f64>, obs_cov: &ObsCov) -> DMatrix<f64> {
    let d = g.nrows();
    let var = obs_cov.variances(d);
    let mut weighted = g.clone();
    for i in 0..d {
        let w = 1.0 / var[i];
        for j in 0..g.ncols() {
            weighted[(i, j)] *= w;
        }
    }
    g.tr_mul(&weighted)
}

/// The dominant directions of a linear-Gaussian posterior update.
///
/// Columns of `u` span the optimal rank-`r` update subspace in parameter
/// space, columns of `w` the matching rows of the projector `P = U Wᵀ`, and
/// `values` holds the generalized eigenvalues `λ` of `(H, Γ_pr⁻¹)`
/// descending. The optimal approximation of the posterior covariance is
/// `Γ_pr + U diag(-λ/(1+λ)) Uᵀ`.
#[derive(Debug, Clone)]
pub struct OptimalProjector {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl OptimalProjector {
    /// `Γ_pr + U diag(-λ/(1+λ)) Uᵀ`, the best rank-`r` negative-semidefinite
    /// update of the prior covariance toward the posterior.
    pub fn posterior_cov_update(&self, prior: &GaussianPrior) -> DMatrix<f64> {
        let weights = self.values.map(|l| -l / (1.0 + l));
        let scaled = &self.u * DMatrix::from_diagonal(&weights);
        prior.cov() + scaled * self.u.transpose()
    }
}

/// Leading `r` generalized eigenpairs of `(H, Γ_pr⁻¹)` through the whitened
/// pencil `Lᵀ H L`: `u_i = L v_i`, `w_i = L⁻ᵀ v_i`.
pub fn optimal_linear_projector(
    g: &DMatrix<f64>,
    prior: &GaussianPrior,
    obs_cov: &ObsCov,
    r: usize,
) -> Result<OptimalProjector, ModelError> {
    let h = gauss_newton_hessian(g, obs_cov);
    let l = prior.factor();
    let hl = l.mul_lt(&h).transpose();
    let whitened = l.mul_lt(&hl);
    let pairs = linalg::truncated_eig_dense(&whitened, f64::NEG_INFINITY, r)?;
    let u = l.mul_l(&pairs.vectors);
    let w = l.solve_lt(&pairs.vectors);
    Ok(OptimalProjector {
        u,
        w,
        values: pairs.values,
    })
}

/// Förstner metric between symmetric positive definite matrices,
/// `d(A, B) = sqrt(Σ ln² σ_i)` over the generalized eigenvalues `σ` of
/// `A v = σ B v`. Zero iff `A = B`; symmetric in its arguments.
pub fn forstner_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, ModelError> {
    let rb = linalg::sym_factor(b)?;
    let inner = rb.solve_l(&rb.solve_l(&a.transpose()).transpose());
    let sym = (&inner + inner.transpose()) * 0.5;
    let pairs = linalg::truncated_eig_dense(&sym, f64::NEG_INFINITY, a.nrows())?;
    let mut acc = 0.0;
    for sigma in pairs.values.iter() {
        if *sigma <= 0.0 {
            return Err(ModelError::SingularSystem);
        }
        acc += sigma.ln().powi(2);
    }
    Ok(acc.sqrt())
}

/// Worst normalized adjoint defect `|⟨Jv, w⟩ - ⟨v, Jᵀw⟩|` over seeded random
/// direction pairs at `x`.
pub fn adjoint_consistency(
    model: &dyn ForwardModel,
    x: &DVector<f64>,
    trials: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let lin = model.linearize(x)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let v = DVector::from_fn(model.dim_param(), |_, _| rng.sample(StandardNormal));
        let w = DVector::from_fn(model.dim_obs(), |_, _| rng.sample(StandardNormal));
        let jv = lin.jac_apply(&v);
        let jtw = lin.jac_adjoint(&w);
        let lhs = jv.dot(&w);
        let rhs = v.dot(&jtw);
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Worst relative error of `J(x) v` against a central finite difference of
/// the forward map over seeded random directions.
pub fn fd_jacobian_error(
    model: &dyn ForwardModel,
    x: &DVector<f64>,
    trials: usize,
    step: f64,
    seed: u64,
) -> Result<f64, ModelError> {
    let lin = model.linearize(x)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let mut v = DVector::from_fn(model.dim_param(), |_, _| rng.sample(StandardNormal));
        v /= v.norm();
        let plus = model.apply(&(x + &v * step))?;
        let minus = model.apply(&(x - &v * step))?;
        let fd = (plus - minus) / (2.0 * step);
        let jv = lin.jac_apply(&v);
        let scale = jv.norm().max(fd.norm()).max(1e-12);
        worst = worst.max((jv - fd).norm() / scale);
    }
    Ok(worst)
}

/// Worst relative error of the log-posterior gradient against central finite
/// differences of the log posterior itself.
pub fn fd_gradient_error(
    problem: &ForwardProblem,
    x: &DVector<f64>,
    trials: usize,
    step: f64,
    seed: u64,
) -> Result<f64, ModelError> {
    let (_, grad) = problem.log_posterior_and_grad(x)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let mut v = DVector::from_fn(problem.dim(), |_, _| rng.sample(StandardNormal));
        v /= v.norm();
        let plus = problem.log_posterior(&(x + &v * step))?;
        let minus = problem.log_posterior(&(x - &v * step))?;
        let fd = (plus - minus) / (2.0 * step);
        let dir = grad.dot(&v);
        let scale = dir.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((dir - fd).abs() / scale);
    }
    Ok(worst)
}
