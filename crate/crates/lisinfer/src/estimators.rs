//! Rao-Blackwellized posterior estimators.
//!
//! With the posterior factored as a sampled reduced part times an analytic
//! standard-normal complement, moments decompose into a chain average plus a
//! closed-form correction. The mean is
//! `E[x] = μ_pr + Φ_r (μ̃_r - Ξ_rᵀ μ_pr)` and the covariance is
//! `Γ_pr + Φ_r (Γ̃_r - I) Φ_rᵀ`, where `μ̃_r` and `Γ̃_r` are the reduced
//! chain's moments. Only the `r`-dimensional moments carry Monte Carlo
//! noise; everything in the complement is integrated exactly, which is where
//! the variance reduction over plain chain averages comes from.
//!
//! [`rb_expectation`] extends the same idea to scalar functionals that admit
//! a conditional closed form, including ridge functions handled by
//! Gauss-Hermite quadrature over the complement.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lis::GlobalLis;
use crate::prior::GaussianPrior;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("subspace was built against a different prior")]
    PriorMismatch,
    #[error("dense covariance requested in dimension {n}, supported up to {max}")]
    AmbientTooLarge { n: usize, max: usize },
    #[error("no conditional closed form: {context}")]
    NonDecomposable { context: String },
    #[error("chain holds no states")]
    EmptyChain,
    #[error("series of length {len} is too short for batch means")]
    SeriesTooShort { len: usize },
}

/// Largest ambient dimension for which [`rb_cov`] materializes the dense
/// matrix; beyond it use [`rb_variances`].
pub const DENSE_COV_LIMIT: usize = 2000;

/// Column-wise mean of a states matrix (one state per column).
pub fn sample_mean(states: &DMatrix<f64>) -> DVector<f64> {
    let n = states.ncols().max(1);
    let mut mean = DVector::zeros(states.nrows());
    for t in 0..states.ncols() {
        mean += states.column(t);
    }
    mean / n as f64
}

/// Sample covariance of a states matrix with the `N - 1` denominator.
pub fn sample_cov(states: &DMatrix<f64>) -> DMatrix<f64> {
    let d = states.nrows();
    let n = states.ncols();
    if n < 2 {
        return DMatrix::zeros(d, d);
    }
    let mean = sample_mean(states);
    let mut cov = DMatrix::zeros(d, d);
    for t in 0..n {
        let dev = states.column(t) - &mean;
        cov.ger(1.0, &dev, &dev, 1.0);
    }
    cov / (n - 1) as f64
}

fn check_prior(prior: &GaussianPrior, lis: &GlobalLis) -> Result<(), EstimatorError> {
    if prior.dim() != lis.ambient_dim() {
        return Err(EstimatorError::DimensionMismatch {
            context: format!(
                "prior dimension {} vs subspace ambient dimension {}",
                prior.dim(),
                lis.ambient_dim()
            ),
        });
    }
    if prior.mean() != lis.prior_mean() {
        return Err(EstimatorError::PriorMismatch);
    }
    Ok(())
}

fn check_reduced_dim(lis: &GlobalLis, len: usize, what: &str) -> Result<(), EstimatorError> {
    if len != lis.dim() {
        return Err(EstimatorError::DimensionMismatch {
            context: format!("{what} has dimension {len}, subspace has {}", lis.dim()),
        });
    }
    Ok(())
}

/// Rao-Blackwellized posterior mean from the reduced chain mean.
pub fn rb_mean(
    lis: &GlobalLis,
    reduced_mean: &DVector<f64>,
) -> Result<DVector<f64>, EstimatorError> {
    check_reduced_dim(lis, reduced_mean.len(), "reduced mean")?;
    Ok(lis.prior_mean() + lis.phi() * (reduced_mean - lis.lis_mean()))
}

/// Rao-Blackwellized posterior covariance from the reduced chain covariance.
pub fn rb_cov(
    prior: &GaussianPrior,
    lis: &GlobalLis,
    reduced_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EstimatorError> {
    check_prior(prior, lis)?;
    check_reduced_dim(lis, reduced_cov.nrows(), "reduced covariance")?;
    check_reduced_dim(lis, reduced_cov.ncols(), "reduced covariance")?;
    let n = prior.dim();
    if n > DENSE_COV_LIMIT {
        return Err(EstimatorError::AmbientTooLarge {
            n,
            max: DENSE_COV_LIMIT,
        });
    }
    let r = lis.dim();
    let delta = reduced_cov - DMatrix::identity(r, r);
    Ok(prior.cov() + lis.phi() * delta * lis.phi().transpose())
}

/// Diagonal of the Rao-Blackwellized covariance, without forming it.
pub fn rb_variances(
    prior: &GaussianPrior,
    lis: &GlobalLis,
    reduced_cov: &DMatrix<f64>,
) -> Result<DVector<f64>, EstimatorError> {
    check_prior(prior, lis)?;
    check_reduced_dim(lis, reduced_cov.nrows(), "reduced covariance")?;
    check_reduced_dim(lis, reduced_cov.ncols(), "reduced covariance")?;
    let n = prior.dim();
    let r = lis.dim();
    let delta = reduced_cov - DMatrix::identity(r, r);
    let phi_delta = lis.phi() * &delta;
    let mut var = DVector::zeros(n);
    for i in 0..n {
        let mut corr = 0.0;
        for j in 0..r {
            corr += phi_delta[(i, j)] * lis.phi()[(i, j)];
        }
        var[i] = prior.cov()[(i, i)] + corr;
    }
    Ok(var)
}

/// A scalar functional of the full parameter with a known structure over the
/// complement directions.
///
/// The structure is what makes Rao-Blackwellization possible: conditioned on
/// the reduced coordinates, the complement is Gaussian, and each variant
/// below has a closed-form (or one-dimensional quadrature) conditional
/// expectation. [`CsFunction::Opaque`] deliberately has none and is refused.
pub enum CsFunction<'a> {
    Constant(f64),
    /// `f(x) = wᵀx + c`.
    Linear { weights: DVector<f64>, offset: f64 },
    /// `f(x) = xᵀ A x + bᵀ x + c`.
    Quadratic {
        matrix: DMatrix<f64>,
        linear: DVector<f64>,
        offset: f64,
    },
    /// `f(x) = g(wᵀx)` for a smooth profile `g`, integrated over the
    /// complement by a Gauss-Hermite rule of the given order.
    Ridge {
        direction: DVector<f64>,
        profile: &'a dyn Fn(f64) -> f64,
        order: usize,
    },
    /// An arbitrary pointwise function; no decomposition exists.
    Opaque(&'a dyn Fn(&DVector<f64>) -> f64),
}

/// Rao-Blackwellized estimate of `E[f(x)]` from reduced chain states.
///
/// Each reduced state `x_r` pins the conditional distribution of the full
/// parameter at `N(Φ_r x_r + offset, Φ_⊥ Φ_⊥ᵀ)` with
/// `offset = μ_pr - Φ_r Ξ_rᵀ μ_pr`; the conditional expectation of `f` is
/// evaluated in closed form and averaged over the chain.
pub fn rb_expectation(
    prior: &GaussianPrior,
    lis: &GlobalLis,
    reduced_states: &DMatrix<f64>,
    f: &CsFunction,
) -> Result<f64, EstimatorError> {
    check_prior(prior, lis)?;
    check_reduced_dim(lis, reduced_states.nrows(), "reduced states")?;
    let n_states = reduced_states.ncols();

    if let CsFunction::Constant(c) = f {
        return Ok(*c);
    }
    if n_states == 0 {
        return Err(EstimatorError::EmptyChain);
    }

    let offset = lis.prior_mean() - lis.phi() * lis.lis_mean();

    match f {
        CsFunction::Constant(c) => Ok(*c),
        CsFunction::Linear { weights, offset: c } => {
            check_ambient_dim(lis, weights.len(), "weights")?;
            let mean = rb_mean(lis, &sample_mean(reduced_states))?;
            Ok(weights.dot(&mean) + c)
        }
        CsFunction::Quadratic {
            matrix,
            linear,
            offset: c,
        } => {
            check_ambient_dim(lis, matrix.nrows(), "quadratic matrix")?;
            check_ambient_dim(lis, matrix.ncols(), "quadratic matrix")?;
            check_ambient_dim(lis, linear.len(), "linear term")?;
            // Complement covariance Φ_⊥ Φ_⊥ᵀ = Γ_pr - Φ_r Φ_rᵀ, so the
            // constant trace correction never needs the complement basis.
            let cperp = prior.cov() - lis.phi() * lis.phi().transpose();
            let mut trace_term = 0.0;
            for i in 0..matrix.nrows() {
                for j in 0..matrix.ncols() {
                    trace_term += matrix[(i, j)] * cperp[(j, i)];
                }
            }
            let mut acc = 0.0;
            for t in 0..n_states {
                let u = lis.phi() * reduced_states.column(t) + &offset;
                acc += u.dot(&(matrix * &u)) + linear.dot(&u) + c;
            }
            Ok(acc / n_states as f64 + trace_term)
        }
        CsFunction::Ridge {
            direction,
            profile,
            order,
        } => {
            check_ambient_dim(lis, direction.len(), "ridge direction")?;
            if *order == 0 {
                return Err(EstimatorError::NonDecomposable {
                    context: "quadrature order must be at least 1".into(),
                });
            }
            let proj = lis.phi().tr_mul(direction);
            let base = direction.dot(&offset);
            let s2 = direction.dot(&(prior.cov() * direction)) - proj.norm_squared();
            let s = s2.max(0.0).sqrt();
            let (nodes, weights) = hermite_rule(*order);
            let mut acc = 0.0;
            for t in 0..n_states {
                let m = proj.dot(&reduced_states.column(t).into_owned()) + base;
                let mut cond = 0.0;
                for k in 0..*order {
                    cond += weights[k] * profile(m + s * nodes[k]);
                }
                acc += cond;
            }
            Ok(acc / n_states as f64)
        }
        CsFunction::Opaque(_) => Err(EstimatorError::NonDecomposable {
            context: "pointwise functions have no conditional closed form; \
                      estimate them with a plain chain average"
                .into(),
        }),
    }
}

fn check_ambient_dim(lis: &GlobalLis, len: usize, what: &str) -> Result<(), EstimatorError> {
    if len != lis.ambient_dim() {
        return Err(EstimatorError::DimensionMismatch {
            context: format!(
                "{what} has dimension {len}, ambient dimension is {}",
                lis.ambient_dim()
            ),
        });
    }
    Ok(())
}

/// Gauss-Hermite rule for the standard normal weight: nodes and weights with
/// `Σ w_k = 1` and `Σ w_k g(z_k) ≈ E[g(Z)]`, exact for polynomials of degree
/// up to `2·order - 1`.
///
/// Built by the Golub-Welsch construction: eigenvalues of the symmetric
/// tridiagonal Jacobi matrix with off-diagonals `√1, √2, …` are the nodes and
/// squared first eigenvector components are the weights.
pub fn hermite_rule(order: usize) -> (DVector<f64>, DVector<f64>) {
    assert!(order >= 1, "quadrature order must be at least 1");
    let mut jacobi = DMatrix::zeros(order, order);
    for i in 1..order {
        let b = (i as f64).sqrt();
        jacobi[(i - 1, i)] = b;
        jacobi[(i, i - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nodes = DVector::from_iterator(order, pairs.iter().map(|p| p.0));
    let weights = DVector::from_iterator(order, pairs.iter().map(|p| p.1));
    (nodes, weights)
}

/// Monte Carlo standard error of a correlated series by nonoverlapping batch
/// means: batches of length `⌊√N⌋` over the most recent `k·⌊√N⌋` points, with
/// the standard deviation of batch means scaled by `1/√k`.
pub fn batch_means_mcse(series: &DVector<f64>) -> Result<f64, EstimatorError> {
    let n = series.len();
    if n < 16 {
        return Err(EstimatorError::SeriesTooShort { len: n });
    }
    let m = (n as f64).sqrt().floor() as usize;
    let k = n / m;
    let start = n - k * m;
    let mut means = Vec::with_capacity(k);
    for b in 0..k {
        let mut s = 0.0;
        for i in 0..m {
            s += series[start + b * m + i];
        }
        means.push(s / m as f64);
    }
    let grand = means.iter().sum::<f64>() / k as f64;
    let var = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok((var / k as f64).sqrt())
}
