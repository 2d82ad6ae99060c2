//! Gaussian priors assembled from covariance kernels on structured grids.
//!
//! A [`GaussianPrior`] owns its mean, dense covariance, and the lower
//! Cholesky factor `L` with `Γ = L Lᵀ`. All whitening in the crate goes
//! through this factor: `z = L⁻¹ (x - μ)` maps prior samples to independent
//! standard normals, and every subspace computation downstream works in the
//! whitened coordinates.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{self, LinalgError, SymFactor};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("anisotropy tensor is not symmetric positive definite")]
    DegenerateTensor,
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error(transparent)]
    Factorization(#[from] LinalgError),
}

/// Anisotropic exponential kernel
/// `k(s, t) = σ² exp(-sqrt((s-t)ᵀ Σ⁻¹ (s-t)) / s0)`
/// for two-dimensional locations.
///
/// `σ²` is the marginal variance, `s0` the correlation length, and `Σ` a
/// symmetric positive definite tensor shaping the anisotropy.
#[derive(Debug, Clone)]
pub struct AnisoExpKernel {
    sigma: f64,
    corr_len: f64,
    tensor_inv: Matrix2<f64>,
}

impl AnisoExpKernel {
    pub fn new(sigma: f64, corr_len: f64, tensor: Matrix2<f64>) -> Result<Self, PriorError> {
        let sym = (tensor[(0, 1)] - tensor[(1, 0)]).abs()
            <= 1e-12 * tensor.amax().max(f64::MIN_POSITIVE);
        let det = tensor[(0, 0)] * tensor[(1, 1)] - tensor[(0, 1)] * tensor[(1, 0)];
        if !sym || tensor[(0, 0)] <= 0.0 || det <= 0.0 {
            return Err(PriorError::DegenerateTensor);
        }
        let tensor_inv = Matrix2::new(
            tensor[(1, 1)] / det,
            -tensor[(0, 1)] / det,
            -tensor[(1, 0)] / det,
            tensor[(0, 0)] / det,
        );
        Ok(AnisoExpKernel {
            sigma,
            corr_len,
            tensor_inv,
        })
    }

    pub fn eval(&self, s: [f64; 2], t: [f64; 2]) -> f64 {
        let d = nalgebra::Vector2::new(s[0] - t[0], s[1] - t[1]);
        let q = (self.tensor_inv * d).dot(&d).max(0.0);
        self.sigma * self.sigma * (-q.sqrt() / self.corr_len).exp()
    }
}

/// Squared-exponential kernel `k(s, t) = σ exp(-(s-t)² / (2 s0²))` on the
/// line.
///
/// Here `σ` itself is the marginal variance, not its square; profile priors
/// in the transmission benchmark are specified on that scale.
#[derive(Debug, Clone)]
pub struct SqExpKernel {
    sigma: f64,
    corr_len: f64,
}

impl SqExpKernel {
    pub fn new(sigma: f64, corr_len: f64) -> Self {
        SqExpKernel { sigma, corr_len }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let d = s - t;
        self.sigma * (-d * d / (2.0 * self.corr_len * self.corr_len)).exp()
    }
}

/// A Gaussian measure `N(μ, Γ)` with a cached Cholesky factor of `Γ`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: SymFactor,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, PriorError> {
        if mean.len() != cov.nrows() || cov.nrows() != cov.ncols() {
            return Err(PriorError::DimensionMismatch {
                context: format!(
                    "mean has {} entries, covariance is {}x{}",
                    mean.len(),
                    cov.nrows(),
                    cov.ncols()
                ),
            });
        }
        let factor = linalg::sym_factor(&cov)?;
        Ok(GaussianPrior { mean, cov, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &SymFactor {
        &self.factor
    }

    /// Marginal standard deviations, `sqrt(diag Γ)`.
    pub fn marginal_std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.sqrt())
    }

    /// Draw `count` samples as columns of an `n x count` matrix,
    /// `x = μ + L ξ` with `ξ` standard normal from a seeded generator.
    pub fn sample(&self, seed: u64, count: usize) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut xi = DMatrix::zeros(self.dim(), count);
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        self.sample_from_noise(&xi)
    }

    /// Deterministic sampling path: `μ + L ξ` for caller-supplied whitened
    /// noise. `ξ = 0` returns the mean exactly.
    pub fn sample_from_noise(&self, xi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.factor.mul_l(xi);
        for j in 0..out.ncols() {
            let mut col = out.column_mut(j);
            col += &self.mean;
        }
        out
    }

    /// `z = L⁻¹ (x - μ)`.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_l_vec(&(x - &self.mean))
    }

    /// `x = μ + L z`, the inverse of [`whiten`](Self::whiten).
    pub fn unwhiten(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.factor.mul_l_vec(z)
    }

    /// `Γ⁻¹ v` via two triangular solves.
    pub fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(v)
    }

    /// Normalized log density, `-½‖L⁻¹(x-μ)‖² - ½ log det Γ - (n/2) log 2π`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let z = self.whiten(x);
        let n = self.dim() as f64;
        -0.5 * z.norm_squared()
            - 0.5 * self.factor.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Assemble a prior from a kernel evaluated on a list of locations.
///
/// The covariance is filled in the upper triangle and mirrored, so it is
/// symmetric by construction regardless of rounding inside the kernel.
pub fn build_prior<P: Copy>(
    points: &[P],
    kernel: impl Fn(P, P) -> f64,
    mean: DVector<f64>,
) -> Result<GaussianPrior, PriorError> {
    let n = points.len();
    if mean.len() != n {
        return Err(PriorError::DimensionMismatch {
            context: format!("{} points but mean has {} entries", n, mean.len()),
        });
    }
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel(points[i], points[j]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    GaussianPrior::new(mean, cov)
}

/// The prior split across a subspace and its complement.
///
/// In the coordinates `(x_r, x_⊥) = (Ξ_rᵀ x, Ξ_⊥ᵀ x)` the prior becomes a
/// product of independent standard normals centered at the projected means,
/// `π₀(x) = N(x_r; Ξ_rᵀ μ, I) · N(x_⊥; Ξ_⊥ᵀ μ, I)`, which is what lets the
/// complement be handled in closed form while only `x_r` is sampled.
#[derive(Debug, Clone)]
pub struct FactoredPrior {
    pub lis_mean: DVector<f64>,
    pub cs_mean: DVector<f64>,
}

pub fn factor_prior(
    prior: &GaussianPrior,
    lis: &crate::lis::GlobalLis,
) -> Result<FactoredPrior, PriorError> {
    if lis.ambient_dim() != prior.dim() {
        return Err(PriorError::DimensionMismatch {
            context: format!(
                "subspace lives in dimension {}, prior in {}",
                lis.ambient_dim(),
                prior.dim()
            ),
        });
    }
    let cs_mean = lis.complement().xi_perp.tr_mul(prior.mean());
    Ok(FactoredPrior {
        lis_mean: lis.lis_mean().clone(),
        cs_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn line_grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn factored_prior_coordinates_are_standard_normal() {
        use crate::lis::GlobalLis;
        use rand::{RngExt, SeedableRng};

        let n = 9;
        let kernel = SqExpKernel::new(1.4, 0.15);
        let mean = DVector::from_fn(n, |i, _| 0.2 * i as f64 - 0.5);
        let prior = build_prior(&line_grid(n), |s, t| kernel.eval(s, t), mean).unwrap();

        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let raw: DMatrix<f64> = DMatrix::from_fn(n, 3, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let psi = raw.qr().q();
        let gamma = DVector::from_vec(vec![4.0, 2.0, 1.0]);
        let lis = GlobalLis::from_parts(psi, gamma, &prior, 1).unwrap();
        let split = factor_prior(&prior, &lis).unwrap();

        // The projected coordinates of the prior are independent standard
        // normals: each block of Ξᵀ Γ Ξ is an identity and the cross block
        // vanishes.
        let xi = lis.xi();
        let xi_perp = &lis.complement().xi_perp;
        let rr = xi.tr_mul(&(prior.cov() * xi));
        assert_relative_eq!(rr, DMatrix::identity(3, 3), epsilon = 1e-9);
        let pp = xi_perp.tr_mul(&(prior.cov() * xi_perp));
        assert_relative_eq!(pp, DMatrix::identity(n - 3, n - 3), epsilon = 1e-9);
        let cross = xi.tr_mul(&(prior.cov() * xi_perp));
        assert!(cross.amax() <= 1e-9);

        // The two projected means reassemble the full prior mean.
        let rebuilt = lis.phi() * &split.lis_mean + &lis.complement().phi_perp * &split.cs_mean;
        assert_relative_eq!(rebuilt, prior.mean().clone(), epsilon = 1e-9);
    }

    #[test]
    fn factor_prior_rejects_foreign_subspaces() {
        use crate::lis::GlobalLis;
        let kernel = SqExpKernel::new(1.0, 0.2);
        let small = build_prior(&line_grid(5), |s, t| kernel.eval(s, t), DVector::zeros(5))
            .unwrap();
        let big = build_prior(&line_grid(7), |s, t| kernel.eval(s, t), DVector::zeros(7))
            .unwrap();
        let psi = DMatrix::identity(5, 2);
        let lis = GlobalLis::from_parts(psi, DVector::from_vec(vec![2.0, 1.0]), &small, 1)
            .unwrap();
        assert!(matches!(
            factor_prior(&big, &lis),
            Err(PriorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn aniso_kernel_is_marginal_variance_at_zero_distance() {
        let tensor = Matrix2::new(0.55, -0.45, -0.45, 0.55);
        let k = AnisoExpKernel::new(1.15, 0.18, tensor).unwrap();
        assert_relative_eq!(k.eval([0.3, 0.7], [0.3, 0.7]), 1.15 * 1.15, max_relative = 1e-14);
    }

    #[test]
    fn aniso_kernel_rejects_degenerate_tensor() {
        let singular = Matrix2::new(1.0, 1.0, 1.0, 1.0);
        assert!(matches!(
            AnisoExpKernel::new(1.0, 0.5, singular),
            Err(PriorError::DegenerateTensor)
        ));
        let negative = Matrix2::new(-1.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            AnisoExpKernel::new(1.0, 0.5, negative),
            Err(PriorError::DegenerateTensor)
        ));
    }

    #[test]
    fn sq_exp_kernel_carries_sigma_as_variance_scale() {
        let k = SqExpKernel::new(5.22, 10.0);
        assert_relative_eq!(k.eval(25.0, 25.0), 5.22, max_relative = 1e-14);
        assert_relative_eq!(
            k.eval(0.0, 10.0),
            5.22 * (-0.5_f64).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn line_prior_factors_without_jitter() {
        let grid = line_grid(20);
        let k = SqExpKernel::new(1.0, 0.1);
        let prior = build_prior(&grid, |s, t| k.eval(s, t), DVector::zeros(20)).unwrap();
        assert_eq!(prior.factor().jitter(), 0.0);
        let recon = prior.factor().l() * prior.factor().l().transpose();
        assert_relative_eq!(recon, prior.cov().clone(), epsilon = 1e-10);
    }

    #[test]
    fn whiten_unwhiten_round_trip() {
        let grid = line_grid(15);
        let k = SqExpKernel::new(2.0, 0.25);
        let mean = DVector::from_fn(15, |i, _| (i as f64).cos());
        let prior = build_prior(&grid, |s, t| k.eval(s, t), mean).unwrap();
        let x = DVector::from_fn(15, |i, _| 0.2 * i as f64 - 1.0);
        let back = prior.unwhiten(&prior.whiten(&x));
        assert_relative_eq!(back, x, epsilon = 1e-9);
    }

    #[test]
    fn zero_noise_sample_is_the_mean() {
        let grid = line_grid(10);
        let k = SqExpKernel::new(1.0, 0.5);
        let mean = DVector::from_element(10, 3.5);
        let prior = build_prior(&grid, |s, t| k.eval(s, t), mean.clone()).unwrap();
        let xi = DMatrix::zeros(10, 1);
        let s = prior.sample_from_noise(&xi);
        assert_relative_eq!(DVector::from(s.column(0)), mean, epsilon = 1e-14);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let grid = line_grid(10);
        let k = SqExpKernel::new(1.0, 0.5);
        let prior = build_prior(&grid, |s, t| k.eval(s, t), DVector::zeros(10)).unwrap();
        let a = prior.sample(31, 2);
        let b = prior.sample(31, 2);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = prior.sample(32, 2);
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn sample_moments_converge_loosely() {
        let grid = line_grid(8);
        let k = SqExpKernel::new(1.0, 0.4);
        let mean = DVector::from_element(8, -1.0);
        let prior = build_prior(&grid, |s, t| k.eval(s, t), mean.clone()).unwrap();
        let count = 20_000;
        let samples = prior.sample(5, count);
        let emp_mean = samples.column_mean();
        for i in 0..8 {
            assert!((emp_mean[i] - mean[i]).abs() < 0.05);
        }
        let mut centered = samples.clone();
        for j in 0..count {
            let mut col = centered.column_mut(j);
            col -= &emp_mean;
        }
        let emp_cov = &centered * centered.transpose() / count as f64;
        for i in 0..8 {
            for j in 0..8 {
                assert!(
                    (emp_cov[(i, j)] - prior.cov()[(i, j)]).abs() < 0.1,
                    "covariance entry ({i},{j}) off"
                );
            }
        }
    }

    #[test]
    fn log_density_peaks_at_mean() {
        let grid = line_grid(12);
        let k = SqExpKernel::new(1.5, 0.3);
        let mean = DVector::from_fn(12, |i, _| i as f64 * 0.1);
        let prior = build_prior(&grid, |s, t| k.eval(s, t), mean.clone()).unwrap();
        let at_mean = prior.log_density(&mean);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut x = mean.clone();
            for v in x.iter_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            assert!(prior.log_density(&x) < at_mean);
        }
    }

    proptest! {
        #[test]
        fn kernels_are_exchange_symmetric(
            sx in -3.0_f64..3.0, sy in -3.0_f64..3.0,
            tx in -3.0_f64..3.0, ty in -3.0_f64..3.0,
        ) {
            let tensor = Matrix2::new(0.55, -0.45, -0.45, 0.55);
            let aniso = AnisoExpKernel::new(1.15, 0.18, tensor).unwrap();
            prop_assert!((aniso.eval([sx, sy], [tx, ty]) - aniso.eval([tx, ty], [sx, sy])).abs() <= 1e-14);
            let sq = SqExpKernel::new(9.79, 10.0);
            prop_assert!((sq.eval(sx, tx) - sq.eval(tx, sx)).abs() <= 1e-14);
        }
    }
}
