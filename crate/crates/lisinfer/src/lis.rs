//! Likelihood-informed subspace construction.
//!
//! Everything happens in whitened coordinates. At a point `x`, the local
//! subspace is spanned by the dominant eigenvectors of the
//! prior-preconditioned Gauss-Newton Hessian `Lᵀ H(x) L`; eigenvalues measure
//! how strongly the likelihood constrains a direction relative to the prior,
//! so a threshold `τ` separates data-informed directions from
//! prior-dominated ones. Local spectra accumulated over posterior samples
//! average into `Ŝ_m = (1/m) Σ_k V_k Λ_k V_kᵀ`, whose dominant eigenvectors
//! define the global subspace `Ψ_r`.
//!
//! Back in parameter space the basis pair `Φ_r = L Ψ_r`, `Ξ_r = L⁻ᵀ Ψ_r`
//! satisfies `Ξ_rᵀ Φ_r = I` and defines the oblique projector
//! `Π_r = Φ_r Ξ_rᵀ`, self-adjoint in the `Γ_pr⁻¹` inner product. The prior
//! then factorizes across the split `x = Φ_r x_r + Φ_⊥ x_⊥` into independent
//! standard normals, and only the `r`-dimensional reduced posterior over
//! `x_r` needs sampling.
//!
//! [`adapt_lis`] interleaves the two halves: short MCMC subchains explore the
//! current reduced posterior, fresh Hessian eigendecompositions at the new
//! sample enrich the accumulator, and a weighted subspace distance between
//! successive bases decides convergence.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::io::derive_seed;
use crate::linalg::{self, LinalgError, SymFactor};
use crate::mcmc::{self, LogDensity, MalaConfig, McmcError, Precond};
use crate::model::{ForwardProblem, ModelError};
use crate::prior::GaussianPrior;

#[derive(Debug, Error)]
pub enum LisError {
    #[error("MAP optimization did not produce a usable point: {context}")]
    MapNotFound { context: String },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
}

/// Local eigenpairs of `Lᵀ H(x) L` at one evaluation point, truncated at the
/// local threshold.
#[derive(Debug, Clone)]
pub struct EigenPacket {
    pub point: DVector<f64>,
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPacket {
    pub fn rank(&self) -> usize {
        self.values.len()
    }
}

/// Eigendecomposition of the prior-preconditioned Gauss-Newton Hessian at
/// `x`, keeping eigenvalues at or above `tau_local`, at most `max_rank` of
/// them. The randomized eigensolver draws probes from `seed`.
pub fn local_lis(
    problem: &ForwardProblem,
    x: &DVector<f64>,
    tau_local: f64,
    max_rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<EigenPacket, LisError> {
    let n = problem.dim();
    let lin = problem.model.linearize(x)?;
    let pairs = linalg::truncated_eig_matfree(
        n,
        |block| problem.ppgnh_block(lin.as_ref(), block),
        tau_local,
        max_rank,
        oversample,
        seed,
    )?;
    Ok(EigenPacket {
        point: x.clone(),
        values: pairs.values,
        vectors: pairs.vectors,
    })
}

/// Running average `Ŝ_m = (1/m) Σ_k V_k Λ_k V_kᵀ` of local spectra, stored
/// in compact low-rank form `Ŝ_m = F Fᵀ / m`.
///
/// The stored rank grows by each packet's rank and is re-compressed by a thin
/// QR plus a small eigensolve once it exceeds four times the current
/// subspace dimension (communicated via [`set_rank_hint`]); compression
/// preserves `Ŝ_m` to near machine precision.
///
/// [`set_rank_hint`]: LisAccumulator::set_rank_hint
#[derive(Debug, Clone)]
pub struct LisAccumulator {
    n: usize,
    factors: DMatrix<f64>,
    count: usize,
    rank_hint: usize,
    compressions: usize,
}

impl LisAccumulator {
    pub fn new(n: usize) -> Self {
        LisAccumulator {
            n,
            factors: DMatrix::zeros(n, 0),
            count: 0,
            rank_hint: 0,
            compressions: 0,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    /// Number of accumulated packets `m`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn stored_rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn compressions(&self) -> usize {
        self.compressions
    }

    /// Current subspace dimension, used to size the compression trigger.
    pub fn set_rank_hint(&mut self, r: usize) {
        self.rank_hint = r;
    }

    pub fn accumulate(&mut self, packet: &EigenPacket) {
        assert_eq!(
            packet.vectors.nrows(),
            self.n,
            "packet dimension does not match accumulator"
        );
        let old = self.factors.ncols();
        let add = packet.rank();
        let mut grown = DMatrix::zeros(self.n, old + add);
        grown.columns_mut(0, old).copy_from(&self.factors);
        for j in 0..add {
            let scale = packet.values[j].max(0.0).sqrt();
            let col = packet.vectors.column(j) * scale;
            grown.set_column(old + j, &col);
        }
        self.factors = grown;
        self.count += 1;

        let cap = if self.rank_hint > 0 {
            (4 * self.rank_hint).min(self.n)
        } else {
            self.n
        };
        if self.factors.ncols() > cap {
            self.compress();
        }
    }

    fn compress(&mut self) {
        let k = self.factors.ncols();
        if k == 0 {
            return;
        }
        let qr = self.factors.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let gram = &r * r.transpose();
        let pairs = linalg::truncated_eig_dense(&gram, f64::NEG_INFINITY, gram.nrows())
            .expect("gram matrix is symmetric by construction");
        let lead = pairs.values.iter().copied().fold(0.0_f64, f64::max);
        let cut = 1e-12 * lead.max(f64::MIN_POSITIVE);
        let keep: Vec<usize> = (0..pairs.rank()).filter(|&i| pairs.values[i] > cut).collect();
        let mut compact = DMatrix::zeros(self.n, keep.len());
        for (out, &i) in keep.iter().enumerate() {
            let col = &q * pairs.vectors.column(i) * pairs.values[i].sqrt();
            compact.set_column(out, &col);
        }
        self.factors = compact;
        self.compressions += 1;
    }

    /// Dense `Ŝ_m`, for tests and small problems.
    pub fn matrix(&self) -> DMatrix<f64> {
        if self.count == 0 {
            return DMatrix::zeros(self.n, self.n);
        }
        &self.factors * self.factors.transpose() / self.count as f64
    }
}

/// Orthonormal complement data, built on first use.
#[derive(Debug, Clone)]
pub struct Complement {
    pub psi_perp: DMatrix<f64>,
    pub phi_perp: DMatrix<f64>,
    pub xi_perp: DMatrix<f64>,
}

/// A global likelihood-informed subspace.
///
/// Holds the whitened orthonormal basis `Ψ_r`, its global eigenvalues `γ`
/// descending, the parameter-space pair `Φ_r = L Ψ_r` and `Ξ_r = L⁻ᵀ Ψ_r`,
/// and the prior Cholesky factor it was built against. The complement bases
/// are materialized lazily; mean- and variance-only operations never need
/// them.
#[derive(Debug, Clone)]
pub struct GlobalLis {
    psi: DMatrix<f64>,
    gamma: DVector<f64>,
    phi: DMatrix<f64>,
    xi: DMatrix<f64>,
    lis_mean: DVector<f64>,
    sample_count: usize,
    factor: SymFactor,
    prior_mean: DVector<f64>,
    complement: OnceLock<Complement>,
}

impl GlobalLis {
    /// Assemble the parameter-space bases from a whitened basis and the
    /// prior it refers to.
    pub fn from_parts(
        psi: DMatrix<f64>,
        gamma: DVector<f64>,
        prior: &GaussianPrior,
        sample_count: usize,
    ) -> Result<Self, LisError> {
        if psi.nrows() != prior.dim() {
            return Err(LisError::DimensionMismatch {
                context: format!(
                    "basis has {} rows, prior dimension is {}",
                    psi.nrows(),
                    prior.dim()
                ),
            });
        }
        if psi.ncols() != gamma.len() {
            return Err(LisError::DimensionMismatch {
                context: format!("{} basis columns, {} eigenvalues", psi.ncols(), gamma.len()),
            });
        }
        let factor = prior.factor().clone();
        let phi = factor.mul_l(&psi);
        let xi = factor.solve_lt(&psi);
        let lis_mean = xi.tr_mul(prior.mean());
        Ok(GlobalLis {
            psi,
            gamma,
            phi,
            xi,
            lis_mean,
            sample_count,
            factor,
            prior_mean: prior.mean().clone(),
            complement: OnceLock::new(),
        })
    }

    /// Subspace dimension `r`.
    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    /// Ambient parameter dimension `n`.
    pub fn ambient_dim(&self) -> usize {
        self.psi.nrows()
    }

    /// Whitened orthonormal basis `Ψ_r`.
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Global eigenvalues descending.
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    /// `Φ_r = L Ψ_r`.
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `Ξ_r = L⁻ᵀ Ψ_r`.
    pub fn xi(&self) -> &DMatrix<f64> {
        &self.xi
    }

    /// `Ξ_rᵀ μ_pr`, the reduced-space prior mean.
    pub fn lis_mean(&self) -> &DVector<f64> {
        &self.lis_mean
    }

    /// Mean of the prior the subspace was built against.
    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    /// Number of Hessian packets behind the global average.
    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Reduced coordinates `x_r = Ξ_rᵀ x`.
    pub fn lis_coords(&self, x: &DVector<f64>) -> DVector<f64> {
        self.xi.tr_mul(x)
    }

    /// `Φ_r x_r`.
    pub fn lift(&self, x_r: &DVector<f64>) -> DVector<f64> {
        &self.phi * x_r
    }

    /// The oblique projector `Π_r = Φ_r Ξ_rᵀ` as a dense matrix.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.phi * self.xi.transpose()
    }

    /// Complement bases spanning the prior-orthogonal directions, built once
    /// by completing `Ψ_r` to an orthonormal basis of the whitened space.
    pub fn complement(&self) -> &Complement {
        self.complement.get_or_init(|| {
            let n = self.ambient_dim();
            let r = self.dim();
            let mut padded = DMatrix::zeros(n, r + n);
            padded.columns_mut(0, r).copy_from(&self.psi);
            for i in 0..n {
                padded[(i, r + i)] = 1.0;
            }
            let q = padded.qr().q();
            let psi_perp = q.columns(r, n - r).into_owned();
            let phi_perp = self.factor.mul_l(&psi_perp);
            let xi_perp = self.factor.solve_lt(&psi_perp);
            Complement {
                psi_perp,
                phi_perp,
                xi_perp,
            }
        })
    }

    /// Split `x` into `(x_r, x_⊥) = (Ξ_rᵀ x, Ξ_⊥ᵀ x)`.
    pub fn project(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let xr = self.lis_coords(x);
        let xperp = self.complement().xi_perp.tr_mul(x);
        (xr, xperp)
    }

    /// Rebuild `x = Φ_r x_r + Φ_⊥ x_⊥`.
    pub fn reconstruct(&self, x_r: &DVector<f64>, x_perp: &DVector<f64>) -> DVector<f64> {
        &self.phi * x_r + &self.complement().phi_perp * x_perp
    }
}

/// Global subspace from the accumulated average: eigenpairs of `Ŝ_m` with
/// `γ ≥ tau_global`, computed through the compact factors so no `n x n`
/// matrix is formed. The basis is re-orthonormalized by modified
/// Gram-Schmidt before the parameter-space bases are derived.
pub fn global_lis(
    acc: &LisAccumulator,
    prior: &GaussianPrior,
    tau_global: f64,
) -> Result<GlobalLis, LisError> {
    if acc.ambient_dim() != prior.dim() {
        return Err(LisError::DimensionMismatch {
            context: format!(
                "accumulator dimension {} vs prior dimension {}",
                acc.ambient_dim(),
                prior.dim()
            ),
        });
    }
    let n = acc.ambient_dim();
    let k = acc.factors.ncols();
    if k == 0 || acc.count == 0 {
        return GlobalLis::from_parts(DMatrix::zeros(n, 0), DVector::zeros(0), prior, acc.count);
    }
    let qr = acc.factors.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let gram = &r * r.transpose() / acc.count as f64;
    let pairs = linalg::truncated_eig_dense(&gram, tau_global, gram.nrows())?;
    let mut psi = &q * &pairs.vectors;
    modified_gram_schmidt(&mut psi);
    fix_signs_like_linalg(&mut psi);
    GlobalLis::from_parts(psi, pairs.values, prior, acc.count)
}

fn modified_gram_schmidt(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let prev = m.column(i).into_owned();
            let mut col = m.column_mut(j);
            col.axpy(-proj, &prev, 1.0);
        }
        let norm = m.column(j).norm();
        if norm > 0.0 {
            m.column_mut(j).unscale_mut(norm);
        }
    }
}

fn fix_signs_like_linalg(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let col_max = m.column(j).amax();
        let cut = 1e-12 * col_max;
        let lead = m.column(j).iter().find(|x| x.abs() > cut).copied();
        if let Some(v) = lead {
            if v < 0.0 {
                for i in 0..m.nrows() {
                    m[(i, j)] = -m[(i, j)];
                }
            }
        }
    }
}

/// Weighted distance between two subspaces,
/// `sqrt(1 - ‖(Ψ_a D_a)ᵀ (Ψ_b D_b)‖_F²)` with `D_ii = (γ_i / Σ_j γ_j)^{1/4}`.
///
/// Identical subspaces give 0, orthogonal ones give 1, and either side being
/// empty returns the sentinel value 1.
pub fn weighted_subspace_distance(a: &GlobalLis, b: &GlobalLis) -> f64 {
    if a.dim() == 0 || b.dim() == 0 {
        return 1.0;
    }
    let da = normalized_quarter_weights(a.gamma());
    let db = normalized_quarter_weights(b.gamma());
    let mut cross = a.psi().tr_mul(b.psi());
    for i in 0..cross.nrows() {
        for j in 0..cross.ncols() {
            cross[(i, j)] *= da[i] * db[j];
        }
    }
    let overlap = cross.norm_squared();
    (1.0 - overlap).max(0.0).sqrt()
}

fn normalized_quarter_weights(gamma: &DVector<f64>) -> DVector<f64> {
    let total: f64 = gamma.iter().sum();
    gamma.map(|g| (g / total).powf(0.25))
}

/// The reduced posterior `π̃(x_r | y) ∝ π(y | Φ_r x_r) π_r(x_r)` as a
/// sampling target: log density
/// `-η(Φ_r x_r) - ½‖x_r - Ξ_rᵀ μ_pr‖²` up to a constant.
pub struct ReducedPosterior<'a> {
    pub problem: &'a ForwardProblem,
    pub lis: &'a GlobalLis,
}

impl ReducedPosterior<'_> {
    pub fn eval(&self, x_r: &DVector<f64>) -> Result<f64, ModelError> {
        let x = self.lis.lift(x_r);
        let misfit = self.problem.misfit(&x)?;
        let dev = x_r - self.lis.lis_mean();
        Ok(-misfit - 0.5 * dev.norm_squared())
    }
}

impl LogDensity for ReducedPosterior<'_> {
    fn dim(&self) -> usize {
        self.lis.dim()
    }

    fn eval_grad(&self, x_r: &DVector<f64>) -> Result<(f64, DVector<f64>), ModelError> {
        let x = self.lis.lift(x_r);
        let lin = self.problem.model.linearize(&x)?;
        let resid = lin.observation() - &self.problem.data;
        let weighted = self.problem.obs_cov.apply_inv(&resid);
        let dev = x_r - self.lis.lis_mean();
        let value = -0.5 * resid.dot(&weighted) - 0.5 * dev.norm_squared();
        let grad = -self.lis.phi().tr_mul(&lin.jac_adjoint(&weighted)) - dev;
        Ok((value, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptOutcome {
    /// The weighted subspace distance dropped below `dist_tol`.
    Converged,
    /// The iteration cap was reached first.
    MaxIters,
    /// The Hessian evaluation budget was exhausted first.
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    /// Local truncation threshold `τ_loc`.
    pub tau_local: f64,
    /// Global truncation threshold `τ_g`, conventionally equal to `τ_loc`.
    pub tau_global: f64,
    /// Steps per reduced-space subchain between Hessian evaluations.
    pub subchain_len: usize,
    pub max_iters: usize,
    /// Stop once the weighted subspace distance falls below this.
    pub dist_tol: f64,
    /// Budget on Hessian eigendecompositions.
    pub max_hessians: usize,
    /// Cap on local eigenpairs; 0 picks `min(n, d)`.
    pub local_max_rank: usize,
    /// Oversampling columns for the randomized eigensolver.
    pub oversample: usize,
    pub map_tol: f64,
    pub map_max_iters: usize,
    /// Initial subchain step size, adapted thereafter and carried across
    /// subchains.
    pub subchain_step: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            tau_local: 0.1,
            tau_global: 0.1,
            subchain_len: 200,
            max_iters: 200,
            dist_tol: 1e-3,
            max_hessians: usize::MAX,
            local_max_rank: 0,
            oversample: 10,
            map_tol: 1e-8,
            map_max_iters: 100,
            subchain_step: 0.8,
        }
    }
}

/// One adaptation iteration: the state after rebuilding the global basis.
#[derive(Debug, Clone)]
pub struct AdaptRow {
    pub iter: usize,
    pub r: usize,
    /// Weighted distance between the previous and the rebuilt subspace.
    pub distance: f64,
    /// Hessian evaluations consumed so far.
    pub hessian_evals: usize,
    /// Seconds since the adaptation started.
    pub wall_time: f64,
    pub gamma: Vec<f64>,
    pub subchain_accept: f64,
    pub subchain_lag1_autocorr: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub lis: GlobalLis,
    pub map: mcmc::MapResult,
    pub trace: Vec<AdaptRow>,
    pub outcome: AdaptOutcome,
    pub hessian_evals: usize,
}

/// Adaptive construction of the global subspace.
///
/// Starting from the MAP point, the loop alternates (i) a `subchain_len`-step
/// MALA subchain on the current reduced posterior, (ii) a local Hessian
/// eigendecomposition at the subchain endpoint lifted by `Φ_r`, folded into
/// the running average and a rebuilt global basis, and (iii) a convergence
/// check on the weighted distance between consecutive bases. The subchain
/// state carries over through the changing bases as `Ξ_r'ᵀ Φ_r θ`.
///
/// Subchains are preconditioned with `diag(1/(1+γ_i))`, the reduced posterior
/// covariance the current spectrum predicts, and their step size adapts
/// toward the usual optimal MALA acceptance rate and carries across
/// iterations.
pub fn adapt_lis(
    problem: &ForwardProblem,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AdaptResult, LisError> {
    let n = problem.dim();
    let d = problem.model.dim_obs();
    let local_rank = if config.local_max_rank == 0 {
        n.min(d)
    } else {
        config.local_max_rank
    };

    let map = mcmc::map_point(
        problem,
        problem.prior.mean(),
        config.map_tol,
        config.map_max_iters,
    )
    .map_err(|e| LisError::MapNotFound {
        context: e.to_string(),
    })?;
    if !map.x.iter().all(|v| v.is_finite()) {
        return Err(LisError::MapNotFound {
            context: "optimizer returned non-finite iterate".into(),
        });
    }

    let start = Instant::now();
    let mut acc = LisAccumulator::new(n);
    let packet = local_lis(
        problem,
        &map.x,
        config.tau_local,
        local_rank,
        config.oversample,
        derive_seed(seed, "local", 0),
    )?;
    let mut hessian_evals = 1;
    acc.accumulate(&packet);
    let mut current = global_lis(&acc, &problem.prior, config.tau_global)?;
    acc.set_rank_hint(current.dim());
    let mut theta = current.lis_coords(&map.x);
    let mut step = config.subchain_step;

    let mut trace = Vec::new();
    let mut outcome = AdaptOutcome::MaxIters;

    for iter in 1..=config.max_iters {
        if hessian_evals >= config.max_hessians {
            outcome = AdaptOutcome::BudgetExhausted;
            break;
        }

        let target = ReducedPosterior {
            problem,
            lis: &current,
        };
        let mala = MalaConfig {
            step_size: step,
            precond: Precond::FixedDiag(current.gamma().map(|g| 1.0 / (1.0 + g))),
            ..MalaConfig::default()
        };
        let chain = mcmc::run_mala(
            &target,
            &theta,
            config.subchain_len,
            &mala,
            derive_seed(seed, "subchain", iter as u64),
        )?;
        let (theta_end, accept, lag1) = match chain.last_state() {
            Some(end) => {
                if chain.steps() > 0 {
                    step = chain.step_sizes[chain.steps() - 1];
                }
                let lag1 = if chain.steps() > 2 {
                    mcmc::autocorrelation(&chain.log_post, 1)
                        .map(|rho| rho[1])
                        .unwrap_or(1.0)
                } else {
                    1.0
                };
                (end, chain.acceptance_rate(), lag1)
            }
            None => (theta.clone(), 0.0, 1.0),
        };

        let x_new = current.lift(&theta_end);
        let packet = local_lis(
            problem,
            &x_new,
            config.tau_local,
            local_rank,
            config.oversample,
            derive_seed(seed, "local", iter as u64),
        )?;
        hessian_evals += 1;
        acc.accumulate(&packet);
        let next = global_lis(&acc, &problem.prior, config.tau_global)?;
        acc.set_rank_hint(next.dim());

        let distance = weighted_subspace_distance(&current, &next);
        theta = next.lis_coords(&x_new);
        trace.push(AdaptRow {
            iter,
            r: next.dim(),
            distance,
            hessian_evals,
            wall_time: start.elapsed().as_secs_f64(),
            gamma: next.gamma().iter().copied().collect(),
            subchain_accept: accept,
            subchain_lag1_autocorr: lag1,
        });
        current = next;

        if distance < config.dist_tol {
            outcome = AdaptOutcome::Converged;
            break;
        }
    }

    Ok(AdaptResult {
        lis: current,
        map,
        trace,
        outcome,
        hessian_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_principal_angle;
    use crate::model::optimal_linear_projector;
    use crate::models::linear::LinearProblem;
    use approx::assert_relative_eq;

    fn linear_fixture(n: usize, d: usize, seed: u64) -> ForwardProblem {
        LinearProblem::seeded(n, d, seed).into_problem()
    }

    #[test]
    fn local_lis_of_linear_model_matches_optimal_projector() {
        // For a linear model the packet at any point equals the generalized
        // eigendecomposition behind the optimal projector.
        let problem = linear_fixture(14, 5, 3);
        let jac = problem.assemble_jacobian(&DVector::zeros(14)).unwrap();
        let oracle =
            optimal_linear_projector(&jac, &problem.prior, &problem.obs_cov, 5).unwrap();
        let x = DVector::from_fn(14, |i, _| 0.3 * (i as f64).cos());
        let packet = local_lis(&problem, &x, 1e-9, 5, 10, 77).unwrap();
        assert_eq!(packet.rank(), 5);
        for i in 0..5 {
            assert_relative_eq!(packet.values[i], oracle.values[i], max_relative = 1e-6);
        }
        // Whitened packet vectors against whitened oracle vectors: the oracle
        // returns u = L v, so whiten back.
        let v_oracle = problem.prior.factor().solve_l(&oracle.u);
        assert!(max_principal_angle(&packet.vectors, &v_oracle) <= 1e-6);
    }

    #[test]
    fn accumulator_averages_spectra() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let p1 = EigenPacket {
            point: DVector::zeros(3),
            values: DVector::from_vec(vec![2.0]),
            vectors: DMatrix::from_columns(&[e1.clone()]),
        };
        let p2 = EigenPacket {
            point: DVector::zeros(3),
            values: DVector::from_vec(vec![4.0]),
            vectors: DMatrix::from_columns(&[e2.clone()]),
        };
        let mut acc = LisAccumulator::new(3);
        acc.accumulate(&p1);
        acc.accumulate(&p2);
        let s = acc.matrix();
        let expected =
            (&e1 * e1.transpose() * 2.0 + &e2 * e2.transpose() * 4.0) / 2.0;
        assert_relative_eq!(s, expected, epsilon = 1e-13);
    }

    #[test]
    fn compression_preserves_the_average() {
        use rand::{RngExt, SeedableRng};
        let n = 12;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(19);
        let mut acc = LisAccumulator::new(n);
        acc.set_rank_hint(1);
        let mut dense = DMatrix::zeros(n, n);
        for k in 0..12 {
            let raw: DMatrix<f64> = DMatrix::from_fn(n, 3, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let q = raw.qr().q();
            let values = DVector::from_vec(vec![
                3.0 + 0.1 * k as f64,
                2.0,
                0.5 / (1.0 + k as f64),
            ]);
            for j in 0..3 {
                let col = q.column(j).into_owned();
                dense += &col * col.transpose() * values[j];
            }
            acc.accumulate(&EigenPacket {
                point: DVector::zeros(n),
                values,
                vectors: q,
            });
        }
        assert!(acc.compressions() > 0);
        let expected = dense / 12.0;
        let rel = (acc.matrix() - &expected).norm() / expected.norm();
        assert!(rel <= 1e-10, "compression changed the average by {rel:.3e}");
        assert!(acc.stored_rank() <= n);
    }

    #[test]
    fn global_lis_matches_dense_eigensolve_of_the_average() {
        let problem = linear_fixture(10, 4, 21);
        let mut acc = LisAccumulator::new(10);
        for k in 0..5 {
            let x = DVector::from_fn(10, |i, _| 0.2 * ((i * (k + 1)) as f64).cos());
            acc.accumulate(&local_lis(&problem, &x, 1e-10, 4, 8, 100 + k as u64).unwrap());
        }
        let lis = global_lis(&acc, &problem.prior, 1e-8).unwrap();
        let dense = linalg::truncated_eig_dense(&acc.matrix(), 1e-8, 10).unwrap();
        assert_eq!(lis.dim(), dense.rank());
        for i in 0..lis.dim() {
            assert_relative_eq!(lis.gamma()[i], dense.values[i], max_relative = 1e-9);
        }
        // acos near zero angle resolves subspace agreement only to about
        // sqrt(machine epsilon).
        assert!(max_principal_angle(lis.psi(), &dense.vectors) <= 1e-6);
    }

    #[test]
    fn projector_algebra_holds() {
        let problem = linear_fixture(12, 5, 5);
        let mut acc = LisAccumulator::new(12);
        acc.accumulate(&local_lis(&problem, &DVector::zeros(12), 1e-8, 5, 8, 4).unwrap());
        let lis = global_lis(&acc, &problem.prior, 1e-8).unwrap();
        let r = lis.dim();
        assert!(r > 0);

        let xi_phi = lis.xi().tr_mul(lis.phi());
        assert_relative_eq!(xi_phi, DMatrix::identity(r, r), epsilon = 1e-10);

        let pi = lis.projector();
        assert_relative_eq!(&pi * &pi, pi.clone(), epsilon = 1e-8);

        // Self-adjointness in the Γ_pr⁻¹ inner product.
        let prec_pi = problem.prior.factor().solve(&pi);
        assert_relative_eq!(prec_pi.clone(), prec_pi.transpose(), epsilon = 1e-8);

        // Complement pieces: ΨᵀΨ_⊥ = 0 and [Ψ Ψ_⊥] orthonormal.
        let comp = lis.complement();
        let cross = lis.psi().tr_mul(&comp.psi_perp);
        assert!(cross.amax() <= 1e-10);
        let ptp = comp.psi_perp.tr_mul(&comp.psi_perp);
        assert_relative_eq!(ptp, DMatrix::identity(12 - r, 12 - r), epsilon = 1e-10);
    }

    #[test]
    fn project_reconstruct_round_trip() {
        let problem = linear_fixture(9, 3, 13);
        let mut acc = LisAccumulator::new(9);
        acc.accumulate(&local_lis(&problem, &DVector::zeros(9), 1e-8, 3, 8, 2).unwrap());
        let lis = global_lis(&acc, &problem.prior, 1e-8).unwrap();
        let x = DVector::from_fn(9, |i, _| (i as f64 - 4.0) * 0.7);
        let (xr, xperp) = lis.project(&x);
        assert_eq!(xr.len() + xperp.len(), 9);
        let back = lis.reconstruct(&xr, &xperp);
        assert_relative_eq!(back, x, epsilon = 1e-8);
    }

    #[test]
    fn distance_is_zero_on_self_and_one_on_orthogonal() {
        let problem = linear_fixture(8, 3, 17);
        let mut acc = LisAccumulator::new(8);
        acc.accumulate(&local_lis(&problem, &DVector::zeros(8), 1e-8, 3, 8, 6).unwrap());
        let lis = global_lis(&acc, &problem.prior, 1e-8).unwrap();
        assert!(weighted_subspace_distance(&lis, &lis) <= 1e-12);

        let prior = &problem.prior;
        let mut ea = DMatrix::zeros(8, 1);
        ea[(0, 0)] = 1.0;
        let mut eb = DMatrix::zeros(8, 1);
        eb[(3, 0)] = 1.0;
        let ga = DVector::from_vec(vec![1.0]);
        let a = GlobalLis::from_parts(ea, ga.clone(), prior, 1).unwrap();
        let b = GlobalLis::from_parts(eb, ga, prior, 1).unwrap();
        assert_relative_eq!(weighted_subspace_distance(&a, &b), 1.0, epsilon = 1e-12);

        let empty = GlobalLis::from_parts(DMatrix::zeros(8, 0), DVector::zeros(0), prior, 0)
            .unwrap();
        assert_eq!(weighted_subspace_distance(&empty, &a), 1.0);
        assert_eq!(weighted_subspace_distance(&a, &empty), 1.0);
    }

    #[test]
    fn adapt_converges_on_linear_problem_and_spans_the_oracle() {
        let problem = linear_fixture(20, 6, 51);
        let mut config = AdaptConfig::default();
        config.tau_local = 1e-6;
        config.tau_global = 1e-6;
        config.subchain_len = 30;
        config.max_iters = 20;
        config.dist_tol = 1e-8;
        let result = adapt_lis(&problem, &config, 12).unwrap();
        // The packet is the same at every point of a linear problem, so the
        // subspace cannot move after the second iteration.
        assert_eq!(result.outcome, AdaptOutcome::Converged);
        assert!(result.trace.len() <= 2, "{} iterations", result.trace.len());
        assert_eq!(result.lis.dim(), 6);

        let jac = problem.assemble_jacobian(&result.map.x).unwrap();
        let oracle =
            optimal_linear_projector(&jac, &problem.prior, &problem.obs_cov, 6).unwrap();
        let whitened_u = problem.prior.factor().solve_l(&oracle.u);
        assert!(max_principal_angle(result.lis.psi(), &whitened_u) <= 1e-6);
    }

    #[test]
    fn adapt_respects_the_hessian_budget() {
        let problem = linear_fixture(12, 4, 3);
        let mut config = AdaptConfig::default();
        config.tau_local = 1e-6;
        config.tau_global = 1e-6;
        config.subchain_len = 10;
        config.max_iters = 50;
        config.dist_tol = 0.0;
        config.max_hessians = 3;
        let result = adapt_lis(&problem, &config, 8).unwrap();
        assert_eq!(result.outcome, AdaptOutcome::BudgetExhausted);
        assert_eq!(result.hessian_evals, 3);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let problem = linear_fixture(10, 3, 29);
        let mut config = AdaptConfig::default();
        config.tau_local = 1e-6;
        config.tau_global = 1e-6;
        config.subchain_len = 10;
        config.dist_tol = f64::INFINITY;
        let result = adapt_lis(&problem, &config, 4).unwrap();
        assert_eq!(result.outcome, AdaptOutcome::Converged);
        assert_eq!(result.trace.len(), 1);
    }

    #[test]
    fn reduced_posterior_gradient_matches_finite_differences() {
        let problem = linear_fixture(11, 4, 37);
        let mut acc = LisAccumulator::new(11);
        acc.accumulate(&local_lis(&problem, &DVector::zeros(11), 1e-8, 4, 8, 3).unwrap());
        let lis = global_lis(&acc, &problem.prior, 1e-8).unwrap();
        let target = ReducedPosterior {
            problem: &problem,
            lis: &lis,
        };
        let xr = DVector::from_fn(lis.dim(), |i, _| 0.2 * i as f64 - 0.1);
        let (f0, grad) = target.eval_grad(&xr).unwrap();
        assert_relative_eq!(f0, target.eval(&xr).unwrap(), epsilon = 1e-12);
        let h = 1e-6;
        for i in 0..lis.dim() {
            let mut plus = xr.clone();
            plus[i] += h;
            let mut minus = xr.clone();
            minus[i] -= h;
            let fd = (target.eval(&plus).unwrap() - target.eval(&minus).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn whitened_rayleigh_quotient_is_bounded_by_the_top_eigenvalue() {
        let problem = linear_fixture(10, 4, 41);
        let x0 = DVector::zeros(10);
        let packet = local_lis(&problem, &x0, 1e-10, 4, 10, 5).unwrap();
        use rand::{RngExt, SeedableRng};
        let lin = problem.model.linearize(&x0).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        for _ in 0..10 {
            let v = DVector::from_fn(10, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let hv = problem.ppgnh_block(lin.as_ref(), &DMatrix::from_columns(&[v.clone()]));
            let quotient = v.dot(&hv.column(0).into_owned()) / v.norm_squared();
            assert!(quotient <= packet.values[0] * (1.0 + 1e-8));
            assert!(quotient >= -1e-10);
        }
    }

    #[test]
    fn from_parts_rejects_mismatched_dimensions() {
        let problem = linear_fixture(6, 2, 1);
        let psi = DMatrix::zeros(7, 1);
        let err = GlobalLis::from_parts(psi, DVector::from_vec(vec![1.0]), &problem.prior, 1);
        assert!(matches!(err, Err(LisError::DimensionMismatch { .. })));

        let wide = DMatrix::zeros(6, 2);
        let err = GlobalLis::from_parts(wide, DVector::from_vec(vec![1.0]), &problem.prior, 1);
        assert!(matches!(err, Err(LisError::DimensionMismatch { .. })));
    }
}
