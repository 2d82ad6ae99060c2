//! Dense symmetric linear algebra used throughout the crate.
//!
//! Everything here works on `f64` matrices from [`nalgebra`]. Covariance
//! factorizations go through [`sym_factor`], which owns the jitter policy, so
//! that every module sees the same factor for the same matrix. Truncated
//! eigendecompositions come in a dense variant and a matrix-free randomized
//! variant with identical output conventions: eigenvalues descending,
//! orthonormal columns, and a deterministic sign fix (the first component of
//! each vector whose magnitude exceeds `1e-12` times the column max is made
//! positive).

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric: asymmetry {asymmetry:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { asymmetry: f64, tol: f64 },
    #[error("matrix is not positive definite: Cholesky failed at jitter {max_jitter:.3e}")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("operator action failed a linearity probe: relative deviation {deviation:.3e}")]
    ActionNotLinear { deviation: f64 },
}

/// Relative diagonal jitter levels tried in order by [`sym_factor`], each
/// scaled by `trace(A)/n`.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

const SYMMETRY_RTOL: f64 = 1e-8;

/// Lower-triangular Cholesky factor `L` of a symmetric positive definite
/// matrix `A = L Lᵀ`, together with the jitter that was added to reach it.
#[derive(Debug, Clone)]
pub struct SymFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl SymFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Diagonal shift that was added before the factorization succeeded.
    /// Zero for well-conditioned input.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L b` for a matrix or vector `b`.
    pub fn mul_l(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.l * b
    }

    /// `Lᵀ b`.
    pub fn mul_lt(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l.tr_mul(b)
    }

    /// `L⁻¹ b` by forward substitution.
    pub fn solve_l(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `L⁻ᵀ b` by back substitution.
    pub fn solve_lt(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `A⁻¹ b = L⁻ᵀ L⁻¹ b` for the factored matrix `A`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_lt(&self.solve_l(b))
    }

    pub fn mul_l_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.l * b
    }

    pub fn mul_lt_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l.tr_mul(b)
    }

    pub fn solve_l_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    pub fn solve_lt_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_lt_vec(&self.solve_l_vec(b))
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<(), LinalgError> {
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    let tol = SYMMETRY_RTOL * scale;
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > tol {
        return Err(LinalgError::NotSymmetric {
            asymmetry: worst,
            tol,
        });
    }
    Ok(())
}

/// Cholesky-factorize a symmetric positive definite matrix.
///
/// If the plain factorization fails, diagonal jitter is escalated through
/// [`JITTER_LADDER`] (relative to the mean diagonal) before giving up. The
/// recorded [`SymFactor::jitter`] lets callers surface how much regularization
/// was needed.
pub fn sym_factor(a: &DMatrix<f64>) -> Result<SymFactor, LinalgError> {
    assert_eq!(a.nrows(), a.ncols(), "sym_factor needs a square matrix");
    check_symmetric(a)?;
    let scale = a.trace() / a.nrows().max(1) as f64;
    let mut last_jitter = 0.0;
    for level in JITTER_LADDER {
        let jitter = level * scale;
        last_jitter = jitter;
        let mut attempt = a.clone();
        if jitter != 0.0 {
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = attempt.cholesky() {
            return Ok(SymFactor {
                l: chol.unpack(),
                jitter,
            });
        }
    }
    Err(LinalgError::NotPositiveDefinite {
        max_jitter: last_jitter,
    })
}

/// Leading eigenpairs, eigenvalues descending, eigenvectors as orthonormal
/// columns.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigenpairs {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn empty(n: usize) -> Self {
        Eigenpairs {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(n, 0),
        }
    }
}

/// Make the first component of each column with magnitude above
/// `1e-12 * max|column|` positive. Keeps eigenvector output reproducible
/// across eigensolver backends and runs.
fn fix_signs(vectors: &mut DMatrix<f64>) {
    for j in 0..vectors.ncols() {
        let col_max = vectors.column(j).amax();
        let cut = 1e-12 * col_max;
        let lead = vectors.column(j).iter().find(|x| x.abs() > cut).copied();
        if let Some(v) = lead {
            if v < 0.0 {
                for i in 0..vectors.nrows() {
                    vectors[(i, j)] = -vectors[(i, j)];
                }
            }
        }
    }
}

fn sort_truncate(
    mut values: Vec<f64>,
    vectors: DMatrix<f64>,
    threshold: f64,
    max_rank: usize,
) -> Eigenpairs {
    let n = vectors.nrows();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap());
    let mut keep = Vec::new();
    for &idx in &order {
        if values[idx] >= threshold && keep.len() < max_rank {
            keep.push(idx);
        }
    }
    let mut out_vals = DVector::zeros(keep.len());
    let mut out_vecs = DMatrix::zeros(n, keep.len());
    for (k, &idx) in keep.iter().enumerate() {
        out_vals[k] = values[idx];
        out_vecs.set_column(k, &vectors.column(idx));
    }
    values.clear();
    fix_signs(&mut out_vecs);
    Eigenpairs {
        values: out_vals,
        vectors: out_vecs,
    }
}

/// Eigenpairs of a symmetric matrix with eigenvalue at least `threshold`,
/// at most `max_rank` of them.
///
/// `threshold = 0` together with `max_rank = n` recovers the full
/// decomposition of a positive semidefinite matrix.
pub fn truncated_eig_dense(
    a: &DMatrix<f64>,
    threshold: f64,
    max_rank: usize,
) -> Result<Eigenpairs, LinalgError> {
    assert_eq!(a.nrows(), a.ncols(), "eigendecomposition needs a square matrix");
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Ok(sort_truncate(values, eig.eigenvectors, threshold, max_rank))
}

/// Randomized truncated eigendecomposition of a symmetric positive
/// semidefinite operator given only its action on blocks of vectors.
///
/// `apply` receives an `n x k` block and must return the operator applied to
/// each column. Two power iterations over an oversampled range sketch give
/// eigenvalue accuracy around `1e-6` relative whenever
/// `max_rank + oversample` is at least the numerical rank of the operator.
/// The probe draw is seeded, so results are reproducible.
///
/// Debug builds probe the action for linearity on a random triple and return
/// [`LinalgError::ActionNotLinear`] when the probe fails.
pub fn truncated_eig_matfree(
    n: usize,
    mut apply: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    threshold: f64,
    max_rank: usize,
    oversample: usize,
    seed: u64,
) -> Result<Eigenpairs, LinalgError> {
    let k = (max_rank + oversample).min(n);
    if k == 0 || n == 0 {
        return Ok(Eigenpairs::empty(n));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    if cfg!(debug_assertions) {
        probe_linearity(n, &mut apply, &mut rng)?;
    }

    let mut omega = DMatrix::zeros(n, k);
    for x in omega.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    let mut q = thin_q(apply(&omega));
    for _ in 0..2 {
        q = thin_q(apply(&q));
    }
    let aq = apply(&q);
    let b = {
        let raw = q.tr_mul(&aq);
        (&raw + raw.transpose()) * 0.5
    };
    let eig = b.symmetric_eigen();
    let vectors = &q * &eig.eigenvectors;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Ok(sort_truncate(values, vectors, threshold, max_rank))
}

fn thin_q(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

fn probe_linearity(
    n: usize,
    apply: &mut impl FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<(), LinalgError> {
    let alpha = 0.37;
    let mut block = DMatrix::zeros(n, 3);
    for i in 0..n {
        block[(i, 0)] = rng.sample(StandardNormal);
        block[(i, 1)] = rng.sample(StandardNormal);
    }
    for i in 0..n {
        block[(i, 2)] = alpha * block[(i, 0)] + block[(i, 1)];
    }
    let out = apply(&block);
    let combined = alpha * out.column(0) + out.column(1);
    let scale = combined.norm().max(out.column(2).norm()).max(1e-30);
    let deviation = (out.column(2) - combined).norm() / scale;
    if deviation > 1e-8 {
        return Err(LinalgError::ActionNotLinear { deviation });
    }
    Ok(())
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    assert_eq!(a.nrows(), b.nrows(), "subspaces live in different spaces");
    let m = a.tr_mul(b);
    let svd = m.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    DVector::from_vec(angles)
}

/// Largest principal angle; zero when either span is trivial.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || b.ncols() == 0 {
        return 0.0;
    }
    let angles = principal_angles(a, b);
    angles[angles.len() - 1]
}
