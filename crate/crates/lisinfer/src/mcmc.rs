//! MAP optimization, preconditioned MALA, and chain diagnostics.
//!
//! The sampler is the Metropolis-adjusted Langevin algorithm with a constant
//! symmetric positive definite preconditioner `M = C Cᵀ`:
//!
//! ```text
//! y = x + (ε²/2) M ∇log π(x) + ε C ξ,   ξ ~ N(0, I)
//! ```
//!
//! accepted with the usual Metropolis-Hastings correction. The step size can
//! adapt toward a target acceptance rate by Robbins-Monro updates on `log ε`,
//! and the preconditioner can optionally track the empirical chain
//! covariance. Both adaptations are deterministic functions of the seed, so
//! identical configurations reproduce chains bit for bit.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{self, SymFactor};
use crate::model::{gauss_newton_hessian, ForwardProblem, ModelError};

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("target evaluation failed at step {step}: {source}")]
    TargetEvaluationFailed { step: usize, source: ModelError },
    #[error("series of length {len} is too short for lag {lag}")]
    SeriesTooShort { len: usize, lag: usize },
    #[error("posterior Hessian system is singular at the current iterate")]
    SingularSystem,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// An unnormalized log density with gradient, the sampler-facing target.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn eval_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), ModelError>;
}

/// The full-space posterior of a [`ForwardProblem`] as a sampling target.
pub struct FullPosterior<'a> {
    pub problem: &'a ForwardProblem,
}

impl LogDensity for FullPosterior<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn eval_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), ModelError> {
        self.problem.log_posterior_and_grad(x)
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub x: DVector<f64>,
    pub log_post: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximize the log posterior by Gauss-Newton with Armijo backtracking.
///
/// Each iteration assembles the Jacobian at the current point, solves
/// `(Jᵀ Γ_obs⁻¹ J + Γ_pr⁻¹) d = ∇log π(x)`, and backtracks until the Armijo
/// condition holds, so the log posterior increases monotonically. On a
/// linear-Gaussian problem the first step lands on the posterior mean.
///
/// Convergence is `‖∇log π‖ ≤ tol (1 + ‖∇log π(x₀)‖)`. If the budget runs
/// out first, the best iterate is returned with `converged = false`.
pub fn map_point(
    problem: &ForwardProblem,
    init: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<MapResult, McmcError> {
    let n = problem.dim();
    let prior_precision = problem.prior.factor().solve(&DMatrix::identity(n, n));
    let mut x = init.clone();
    let (mut value, mut grad) = problem.log_posterior_and_grad(&x)?;
    let grad0 = grad.norm();
    let mut iterations = 0;
    for _ in 0..max_iters {
        if grad.norm() <= tol * (1.0 + grad0) {
            return Ok(MapResult {
                x,
                log_post: value,
                grad_norm: grad.norm(),
                iterations,
                converged: true,
            });
        }
        let jac = problem.assemble_jacobian(&x)?;
        let h = gauss_newton_hessian(&jac, &problem.obs_cov);
        let a = &h + &prior_precision;
        let factor = linalg::sym_factor(&a).map_err(|_| McmcError::SingularSystem)?;
        let dir = factor.solve_vec(&grad);
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..30 {
            let cand = &x + &dir * t;
            match problem.log_posterior(&cand) {
                Ok(v) if v >= value + 1e-4 * t * slope => {
                    let (nv, ng) = problem.log_posterior_and_grad(&cand)?;
                    x = cand;
                    value = nv;
                    grad = ng;
                    advanced = true;
                    break;
                }
                _ => t *= 0.5,
            }
        }
        iterations += 1;
        if !advanced {
            break;
        }
    }
    let converged = grad.norm() <= tol * (1.0 + grad0);
    Ok(MapResult {
        grad_norm: grad.norm(),
        x,
        log_post: value,
        iterations,
        converged,
    })
}

/// Preconditioner choices for [`run_mala`].
#[derive(Debug, Clone)]
pub enum Precond {
    Identity,
    /// Diagonal `M`.
    FixedDiag(DVector<f64>),
    /// Dense `M`, factored once at the start of the run.
    FixedCov(DMatrix<f64>),
    /// `M = A⁻¹` for a dense symmetric positive definite `A`, applied through
    /// the Cholesky factor of `A`. The natural choice is the Gauss-Newton
    /// log-posterior Hessian at the MAP point.
    FixedInvCov(DMatrix<f64>),
    /// Track the empirical chain covariance: identity during `warmup`, then
    /// the running covariance with relative jitter `1e-8 trace/dim`,
    /// refactored every `refresh_every` steps.
    Empirical { warmup: usize, refresh_every: usize },
}

#[derive(Debug, Clone)]
pub struct MalaConfig {
    /// Initial step size `ε`.
    pub step_size: f64,
    /// Robbins-Monro adaptation of `log ε` toward `target_accept`.
    pub adapt: bool,
    pub target_accept: f64,
    /// Decay exponent of the adaptation gain `(t₀ + t)^{-decay}`.
    pub adapt_decay: f64,
    pub precond: Precond,
}

impl Default for MalaConfig {
    fn default() -> Self {
        MalaConfig {
            step_size: 0.5,
            adapt: true,
            target_accept: 0.574,
            adapt_decay: 0.6,
            precond: Precond::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainOutcome {
    Completed,
    Aborted { step: usize, reason: String },
}

/// A realized chain. States are stored one per column, so `states` is
/// `dim x steps`; serialization transposes to row-major step order.
#[derive(Debug, Clone)]
pub struct Chain {
    pub states: DMatrix<f64>,
    pub log_post: DVector<f64>,
    pub accepted: Vec<bool>,
    pub step_sizes: DVector<f64>,
    /// Cumulative wall-clock seconds after each step.
    pub wall_times: DVector<f64>,
    pub outcome: ChainOutcome,
}

impl Chain {
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn steps(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, i: usize) -> DVector<f64> {
        DVector::from(self.states.column(i))
    }

    pub fn last_state(&self) -> Option<DVector<f64>> {
        if self.steps() == 0 {
            None
        } else {
            Some(self.state(self.steps() - 1))
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }

    /// Scalar series of one coordinate.
    pub fn coordinate(&self, j: usize) -> DVector<f64> {
        DVector::from(self.states.row(j).transpose())
    }
}

enum PrecondState {
    Identity,
    Diag {
        m: DVector<f64>,
        sqrt_m: DVector<f64>,
    },
    Cov {
        factor: SymFactor,
    },
    InvCov {
        factor: SymFactor,
    },
    Empirical {
        warmup: usize,
        refresh_every: usize,
        count: usize,
        mean: DVector<f64>,
        m2: DMatrix<f64>,
        factor: Option<SymFactor>,
    },
}

impl PrecondState {
    fn build(p: &Precond, dim: usize) -> Result<Self, McmcError> {
        Ok(match p {
            Precond::Identity => PrecondState::Identity,
            Precond::FixedDiag(m) => {
                assert_eq!(m.len(), dim, "preconditioner dimension mismatch");
                PrecondState::Diag {
                    sqrt_m: m.map(|v| v.sqrt()),
                    m: m.clone(),
                }
            }
            Precond::FixedCov(m) => PrecondState::Cov {
                factor: linalg::sym_factor(m).map_err(|_| McmcError::SingularSystem)?,
            },
            Precond::FixedInvCov(a) => PrecondState::InvCov {
                factor: linalg::sym_factor(a).map_err(|_| McmcError::SingularSystem)?,
            },
            Precond::Empirical {
                warmup,
                refresh_every,
            } => PrecondState::Empirical {
                warmup: *warmup,
                refresh_every: (*refresh_every).max(1),
                count: 0,
                mean: DVector::zeros(dim),
                m2: DMatrix::zeros(dim, dim),
                factor: None,
            },
        })
    }

    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            PrecondState::Identity => g.clone(),
            PrecondState::Diag { m, .. } => g.component_mul(m),
            PrecondState::Cov { factor } => factor.mul_l_vec(&factor.mul_lt_vec(g)),
            PrecondState::InvCov { factor } => factor.solve_vec(g),
            PrecondState::Empirical { factor, .. } => match factor {
                None => g.clone(),
                Some(f) => f.mul_l_vec(&f.mul_lt_vec(g)),
            },
        }
    }

    fn sqrt_mul(&self, xi: &DVector<f64>) -> DVector<f64> {
        match self {
            PrecondState::Identity => xi.clone(),
            PrecondState::Diag { sqrt_m, .. } => xi.component_mul(sqrt_m),
            PrecondState::Cov { factor } => factor.mul_l_vec(xi),
            PrecondState::InvCov { factor } => factor.solve_lt_vec(xi),
            PrecondState::Empirical { factor, .. } => match factor {
                None => xi.clone(),
                Some(f) => f.mul_l_vec(xi),
            },
        }
    }

    /// `‖C⁻¹ v‖² = vᵀ M⁻¹ v`.
    fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        match self {
            PrecondState::Identity => v.norm_squared(),
            PrecondState::Diag { m, .. } => v.zip_fold(m, 0.0, |acc, vi, mi| acc + vi * vi / mi),
            PrecondState::Cov { factor } => factor.solve_l_vec(v).norm_squared(),
            PrecondState::InvCov { factor } => factor.mul_lt_vec(v).norm_squared(),
            PrecondState::Empirical { factor, .. } => match factor {
                None => v.norm_squared(),
                Some(f) => f.solve_l_vec(v).norm_squared(),
            },
        }
    }

    fn observe(&mut self, x: &DVector<f64>) {
        if let PrecondState::Empirical {
            warmup,
            refresh_every,
            count,
            mean,
            m2,
            factor,
        } = self
        {
            *count += 1;
            let c = *count as f64;
            let delta = x - &*mean;
            *mean += &delta / c;
            let delta2 = x - &*mean;
            *m2 += &delta * delta2.transpose();
            if *count >= (*warmup).max(2) && count.is_multiple_of(*refresh_every) {
                let mut cov = m2.clone() / (c - 1.0);
                let jitter = 1e-8 * cov.trace() / cov.nrows() as f64;
                for i in 0..cov.nrows() {
                    cov[(i, i)] += jitter;
                }
                if let Ok(f) = linalg::sym_factor(&cov) {
                    *factor = Some(f);
                }
            }
        }
    }
}

/// Run `steps` MALA steps from `init`. The chain records the state after
/// every step, accepted or not. `steps = 0` yields an empty chain.
///
/// If the target fails to evaluate at a proposal, the chain returns
/// immediately with the steps taken so far and an
/// [`ChainOutcome::Aborted`] flag.
pub fn run_mala(
    target: &dyn LogDensity,
    init: &DVector<f64>,
    steps: usize,
    config: &MalaConfig,
    seed: u64,
) -> Result<Chain, McmcError> {
    let dim = target.dim();
    assert_eq!(init.len(), dim, "initial state dimension mismatch");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut precond = PrecondState::build(&config.precond, dim)?;

    let mut states = DMatrix::zeros(dim, steps);
    let mut log_post = DVector::zeros(steps);
    let mut accepted = vec![false; steps];
    let mut step_sizes = DVector::zeros(steps);
    let mut wall_times = DVector::zeros(steps);

    let start = Instant::now();
    let mut x = init.clone();
    let (mut fx, mut gx) = target
        .eval_grad(&x)
        .map_err(|source| McmcError::TargetEvaluationFailed { step: 0, source })?;
    let mut log_eps = config.step_size.max(1e-300).ln();
    let mut outcome = ChainOutcome::Completed;

    for t in 0..steps {
        let eps = log_eps.exp();
        let drift_x = precond.apply(&gx) * (eps * eps / 2.0);
        let xi = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let y = &x + &drift_x + precond.sqrt_mul(&xi) * eps;

        let alpha = match target.eval_grad(&y) {
            Err(source) => {
                outcome = ChainOutcome::Aborted {
                    step: t,
                    reason: source.to_string(),
                };
                states = states.columns(0, t).into_owned();
                log_post = log_post.rows(0, t).into_owned();
                accepted.truncate(t);
                step_sizes = step_sizes.rows(0, t).into_owned();
                wall_times = wall_times.rows(0, t).into_owned();
                break;
            }
            Ok((fy, gy)) => {
                let drift_y = precond.apply(&gy) * (eps * eps / 2.0);
                let fwd = &y - &x - &drift_x;
                let bwd = &x - &y - &drift_y;
                let log_q_fwd = -precond.inv_quad(&fwd) / (2.0 * eps * eps);
                let log_q_bwd = -precond.inv_quad(&bwd) / (2.0 * eps * eps);
                let log_alpha = (fy - fx) + (log_q_bwd - log_q_fwd);
                let alpha = log_alpha.min(0.0).exp();
                let u: f64 = rng.random();
                if u.ln() < log_alpha {
                    x = y;
                    fx = fy;
                    gx = gy;
                    accepted[t] = true;
                }
                alpha
            }
        };

        if config.adapt {
            let gain = (10.0 + t as f64).powf(-config.adapt_decay);
            log_eps += gain * (alpha - config.target_accept);
        }
        precond.observe(&x);

        states.set_column(t, &x);
        log_post[t] = fx;
        step_sizes[t] = log_eps.exp();
        wall_times[t] = start.elapsed().as_secs_f64();
    }

    Ok(Chain {
        states,
        log_post,
        accepted,
        step_sizes,
        wall_times,
        outcome,
    })
}

/// Autocorrelation function `ρ(0..=max_lag)` by direct sums. A series with
/// zero variance returns `ρ ≡ 1` by convention.
pub fn autocorrelation(series: &DVector<f64>, max_lag: usize) -> Result<DVector<f64>, McmcError> {
    let n = series.len();
    if n <= max_lag {
        return Err(McmcError::SeriesTooShort {
            len: n,
            lag: max_lag,
        });
    }
    let mean = series.mean();
    let centered = series.map(|v| v - mean);
    let denom = centered.norm_squared();
    if denom == 0.0 {
        return Ok(DVector::from_element(max_lag + 1, 1.0));
    }
    let mut rho = DVector::zeros(max_lag + 1);
    for lag in 0..=max_lag {
        let mut acc = 0.0;
        for t in 0..(n - lag) {
            acc += centered[t] * centered[t + lag];
        }
        rho[lag] = acc / denom;
    }
    Ok(rho)
}

/// Effective sample size by Geyer's initial positive sequence: sum
/// autocorrelations over adjacent lag pairs until a pair sum turns
/// nonpositive. A constant series has ESS 1 by convention.
pub fn ess(series: &DVector<f64>) -> f64 {
    let n = series.len();
    if n < 2 {
        return n as f64;
    }
    let max_lag = (n - 1).min(2 * ((n as f64).sqrt() as usize) + 50);
    let rho = match autocorrelation(series, max_lag) {
        Ok(r) => r,
        Err(_) => return n as f64,
    };
    if (rho[1] - 1.0).abs() < 1e-14 && series.iter().all(|v| *v == series[0]) {
        return 1.0;
    }
    let mut tau = 1.0;
    let mut k = 1;
    while k + 1 <= max_lag {
        let pair = rho[k] + rho[k + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    (n as f64 / tau).min(n as f64)
}

/// Integrated autocorrelation time `N / ESS`.
pub fn integrated_autocorr_time(series: &DVector<f64>) -> f64 {
    let n = series.len();
    if n == 0 {
        return 1.0;
    }
    n as f64 / ess(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_gaussian_posterior, ObsCov};
    use crate::models::linear::LinearProblem;
    use approx::assert_relative_eq;

    struct StdGaussian {
        dim: usize,
    }

    impl LogDensity for StdGaussian {
        fn dim(&self) -> usize {
            self.dim
        }

        fn eval_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), ModelError> {
            Ok((-0.5 * x.norm_squared(), -x))
        }
    }

    #[test]
    fn map_point_solves_linear_problem_in_one_step() {
        let lp = LinearProblem::seeded(12, 5, 3);
        let problem = lp.into_problem();
        let jac = problem.assemble_jacobian(&DVector::zeros(12)).unwrap();
        let (mu_pos, _) =
            linear_gaussian_posterior(&jac, &problem.prior, &problem.obs_cov, &problem.data)
                .unwrap();
        let map = map_point(&problem, problem.prior.mean(), 1e-10, 50).unwrap();
        assert!(map.converged);
        assert!(map.iterations <= 2, "took {} iterations", map.iterations);
        assert_relative_eq!(map.x, mu_pos, epsilon = 1e-6);
    }

    #[test]
    fn map_increases_log_posterior_monotonically() {
        let problem = LinearProblem::seeded(10, 4, 8).into_problem();
        let start = DVector::from_element(10, 2.0);
        let f0 = problem.log_posterior(&start).unwrap();
        let map = map_point(&problem, &start, 1e-8, 50).unwrap();
        assert!(map.log_post >= f0);
        assert!(map.converged);
    }

    #[test]
    fn mala_is_bit_reproducible() {
        let target = StdGaussian { dim: 3 };
        let cfg = MalaConfig::default();
        let init = DVector::zeros(3);
        let a = run_mala(&target, &init, 200, &cfg, 99).unwrap();
        let b = run_mala(&target, &init, 200, &cfg, 99).unwrap();
        assert_eq!(a.states.as_slice(), b.states.as_slice());
        assert_eq!(a.log_post.as_slice(), b.log_post.as_slice());
        assert_eq!(a.accepted, b.accepted);
    }

    #[test]
    fn mala_matches_gaussian_moments() {
        let target = StdGaussian { dim: 2 };
        let cfg = MalaConfig::default();
        let init = DVector::zeros(2);
        let steps = 100_000;
        let chain = run_mala(&target, &init, steps, &cfg, 7).unwrap();
        assert_eq!(chain.outcome, ChainOutcome::Completed);
        let rate = chain.acceptance_rate();
        assert!((0.45..0.70).contains(&rate), "acceptance rate {rate}");
        // Crude MC error bars: sd/sqrt(ess) for the mean, similar for the
        // second moment; three sigmas.
        for j in 0..2 {
            let series = chain.coordinate(j);
            let m = series.mean();
            let e = ess(&series);
            assert!((m).abs() < 3.0 / e.sqrt() + 0.02, "mean {m}, ess {e}");
            let second: f64 = series.iter().map(|v| v * v).sum::<f64>() / steps as f64;
            assert!((second - 1.0).abs() < 6.0 / e.sqrt() + 0.05, "second {second}");
        }
    }

    #[test]
    fn mala_log_post_column_matches_target() {
        let target = StdGaussian { dim: 4 };
        let cfg = MalaConfig::default();
        let chain = run_mala(&target, &DVector::zeros(4), 500, &cfg, 13).unwrap();
        for t in (0..500).step_by(97) {
            let x = chain.state(t);
            assert_relative_eq!(chain.log_post[t], -0.5 * x.norm_squared(), epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_steps_gives_empty_chain() {
        let target = StdGaussian { dim: 2 };
        let chain = run_mala(
            &target,
            &DVector::zeros(2),
            0,
            &MalaConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(chain.steps(), 0);
        assert_eq!(chain.outcome, ChainOutcome::Completed);
    }

    #[test]
    fn failing_target_aborts_with_partial_chain() {
        struct FailsAt {
            dim: usize,
        }
        impl LogDensity for FailsAt {
            fn dim(&self) -> usize {
                self.dim
            }
            fn eval_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), ModelError> {
                if x.norm() > 0.8 {
                    return Err(ModelError::ForwardSolveFailed {
                        context: "left the stable region".into(),
                    });
                }
                Ok((-0.5 * x.norm_squared(), -x))
            }
        }
        let target = FailsAt { dim: 2 };
        let mut cfg = MalaConfig::default();
        cfg.step_size = 0.6;
        let chain = run_mala(&target, &DVector::zeros(2), 5_000, &cfg, 21).unwrap();
        match chain.outcome {
            ChainOutcome::Aborted { step, .. } => assert_eq!(chain.steps(), step),
            ChainOutcome::Completed => panic!("expected an abort"),
        }
    }

    #[test]
    fn empirical_preconditioner_tracks_anisotropy() {
        struct Aniso;
        impl LogDensity for Aniso {
            fn dim(&self) -> usize {
                2
            }
            fn eval_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), ModelError> {
                let v0 = 100.0;
                let f = -0.5 * (x[0] * x[0] / v0 + x[1] * x[1]);
                Ok((f, DVector::from_vec(vec![-x[0] / v0, -x[1]])))
            }
        }
        let mut cfg = MalaConfig::default();
        cfg.precond = Precond::Empirical {
            warmup: 500,
            refresh_every: 100,
        };
        let chain = run_mala(&Aniso, &DVector::zeros(2), 60_000, &cfg, 5).unwrap();
        let wide = chain.coordinate(0);
        let tail = DVector::from_iterator(30_000, wide.iter().skip(30_000).copied());
        let var: f64 = tail.iter().map(|v| v * v).sum::<f64>() / 30_000.0;
        assert!((var - 100.0).abs() < 30.0, "variance {var}");
    }

    #[test]
    fn autocorrelation_normalizes_and_flags_short_series() {
        let series = DVector::from_vec(vec![1.0, 2.0, 1.5, 2.5, 0.5, 1.0, 2.0]);
        let rho = autocorrelation(&series, 3).unwrap();
        assert_relative_eq!(rho[0], 1.0, epsilon = 1e-14);
        assert!(matches!(
            autocorrelation(&series, 7),
            Err(McmcError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn constant_series_has_unit_ess_and_flat_autocorrelation() {
        let series = DVector::from_element(400, 3.25);
        let rho = autocorrelation(&series, 10).unwrap();
        for v in rho.iter() {
            assert_eq!(*v, 1.0);
        }
        assert_eq!(ess(&series), 1.0);
    }

    #[test]
    fn ess_of_white_noise_is_near_full_length() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 20_000;
        let series = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = ess(&series);
        assert!(e > 0.6 * n as f64, "ess {e} too small for white noise");
        assert!(e <= n as f64 + 1.0);
    }

    #[test]
    fn ess_drops_for_correlated_series() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let n = 20_000;
        let phi = 0.95;
        let mut series = DVector::zeros(n);
        let mut x = 0.0;
        for t in 0..n {
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
            series[t] = x;
        }
        let e = ess(&series);
        // AR(1) theory: τ = (1+φ)/(1-φ) = 39.
        let tau = integrated_autocorr_time(&series);
        assert!(tau > 20.0 && tau < 80.0, "tau {tau}");
        assert!(e < n as f64 / 20.0);
    }

    #[test]
    fn fixed_inverse_hessian_preconditioner_reaches_target_acceptance() {
        let problem = LinearProblem::seeded(15, 6, 31).into_problem();
        let map = map_point(&problem, problem.prior.mean(), 1e-9, 50).unwrap();
        let jac = problem.assemble_jacobian(&map.x).unwrap();
        let h = gauss_newton_hessian(&jac, &problem.obs_cov);
        let n = problem.dim();
        let a = &h + problem.prior.factor().solve(&DMatrix::identity(n, n));
        let mut cfg = MalaConfig::default();
        cfg.precond = Precond::FixedInvCov(a);
        cfg.step_size = 1.0;
        let target = FullPosterior { problem: &problem };
        let chain = run_mala(&target, &map.x, 4_000, &cfg, 11).unwrap();
        let rate = chain.acceptance_rate();
        assert!((0.4..0.8).contains(&rate), "acceptance rate {rate}");
    }

    #[test]
    fn obs_cov_diagonal_matches_iid_when_uniform() {
        let iid = ObsCov::Iid { sigma: 0.5 };
        let diag = ObsCov::Diagonal {
            var: DVector::from_element(4, 0.25),
        };
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert_relative_eq!(iid.inv_quad(&r), diag.inv_quad(&r), epsilon = 1e-14);
    }
}
