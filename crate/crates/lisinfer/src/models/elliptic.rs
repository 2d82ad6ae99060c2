//! Elliptic single-phase flow benchmark.
//!
//! Pressure `p` on Ω = [0,3]x[0,1] obeys `-∇·(κ∇p) = f` with no-flux
//! boundaries and the gauge `∫_∂Ω p ds = 0`; the unknown is the per-element
//! log-conductivity `x` with `κ = exp(x)`. The source is a fixed set of
//! Gaussian plumes whose weights sum to zero, matching the compatibility
//! condition of the pure Neumann problem, and observations are pointwise
//! pressures on a sensor lattice.
//!
//! Discretization is bilinear elements on a uniform grid. The gauge is
//! enforced through a Lagrange multiplier; because the stiffness kernel is
//! exactly the constants, the multiplier and the gauge shift are available
//! in closed form, so each solve reduces to one banded Cholesky on the
//! grounded stiffness matrix. Nodes are numbered fastest along `y`, keeping
//! the half-bandwidth at `ny + 2`. The augmented saddle-point system is
//! retained as a dense reference in the tests and the two routes agree to
//! machine precision.
//!
//! Tangent and adjoint actions reuse the factorization from the forward
//! solve: the tangent right-hand side is `-K'[v] p` and the adjoint weights
//! come through the same constrained solve, which is self-adjoint.

use std::sync::Arc;

use nalgebra::{DVector, Matrix2};

use crate::io::derive_seed;
use crate::model::{ForwardModel, ForwardProblem, Linearization, ModelError, ObsCov};
use crate::models::{synth_data, BuildError, SynthData};
use crate::prior::{build_prior, AnisoExpKernel};

const DOMAIN_X: f64 = 3.0;
const DOMAIN_Y: f64 = 1.0;

const PLUME_STD: f64 = 0.2;
const PLUME_CENTERS: [[f64; 2]; 4] = [[0.0, 0.0], [0.0, 1.0], [3.0, 0.0], [3.0, 1.0]];
const PLUME_WEIGHTS: [f64; 4] = [1.0, 2.0, 3.0, -6.0];

const TRUTH_AMPLITUDES: [f64; 3] = [1.0, -0.9, 0.7];
const TRUTH_CENTERS: [[f64; 2]; 3] = [[0.8, 0.3], [1.7, 0.7], [2.5, 0.4]];
const TRUTH_WIDTHS: [f64; 3] = [0.5, 0.55, 0.45];

const PRIOR_SIGMA: f64 = 1.15;
const PRIOR_CORR_LEN: f64 = 0.18;
const PRIOR_TENSOR: [f64; 4] = [0.55, -0.45, -0.45, 0.55];

/// Local corner offsets `(dx, dy)`; the local index is `2·dx + dy`.
const CORNERS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

fn shape(d: usize, t: f64) -> f64 {
    if d == 0 { 1.0 - t } else { t }
}

fn shape_deriv(d: usize) -> f64 {
    if d == 0 { -1.0 } else { 1.0 }
}

/// Symmetric banded matrix in lower-band storage, for assembly.
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (self.bw + j - i)
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let at = self.idx(i, j);
        self.data[at] += v;
    }

    /// In-place banded Cholesky `A = L Lᵀ`.
    fn cholesky(mut self) -> Result<BandChol, ModelError> {
        let bw = self.bw;
        for i in 0..self.n {
            let kmin = i.saturating_sub(bw);
            for j in kmin..=i {
                let mut s = self.data[self.idx(i, j)];
                for k in kmin..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let at = self.idx(i, j);
                if j < i {
                    let d = self.data[self.idx(j, j)];
                    self.data[at] = s / d;
                } else {
                    if !(s > 0.0) {
                        return Err(ModelError::ForwardSolveFailed {
                            context: format!("stiffness lost positive definiteness at row {i}"),
                        });
                    }
                    self.data[at] = s.sqrt();
                }
            }
        }
        Ok(BandChol {
            n: self.n,
            bw,
            data: self.data,
        })
    }
}

/// Cholesky factor of a banded SPD matrix; solves by two sweeps of
/// substitution in `O(n·bw)`.
struct BandChol {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandChol {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + (self.bw + j - i)]
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let bw = self.bw;
        let mut y = b.clone();
        for i in 0..n {
            let kmin = i.saturating_sub(bw);
            let mut s = y[i];
            for k in kmin..i {
                s -= self.at(i, k) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let kmax = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in (i + 1)..=kmax {
                s -= self.at(k, i) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        y
    }
}

/// A pointwise pressure observation as bilinear interpolation weights.
#[derive(Debug, Clone)]
struct Sensor {
    nodes: [usize; 4],
    weights: [f64; 4],
}

pub struct EllipticModel {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    k_ref: [[f64; 4]; 4],
    /// Load vector `F_i = ∫ f φ_i`.
    pub load: DVector<f64>,
    /// Compatibilized load `F - λ c` with `λ = (1ᵀF)/(1ᵀc)`.
    load_tilde: DVector<f64>,
    /// Multiplier of the boundary-mean constraint in the forward solve.
    pub lambda: f64,
    /// Boundary mass row `c_i = ∫_∂Ω φ_i ds`.
    boundary_row: DVector<f64>,
    boundary_total: f64,
    sensors: Vec<Sensor>,
}

impl EllipticModel {
    /// The benchmark configuration: plume source and the standard sensor
    /// lattice of 15 pressure observations.
    pub fn benchmark(nx: usize, ny: usize) -> Self {
        Self::with_source(nx, ny, &plume_source, &standard_sensors())
    }

    /// A model with a custom source term and sensor locations on the same
    /// domain and discretization.
    pub fn with_source(
        nx: usize,
        ny: usize,
        source: &dyn Fn(f64, f64) -> f64,
        sensor_points: &[[f64; 2]],
    ) -> Self {
        assert!(nx >= 2 && ny >= 2, "grid must have at least 2x2 elements");
        let hx = DOMAIN_X / nx as f64;
        let hy = DOMAIN_Y / ny as f64;
        let n_nodes = (nx + 1) * (ny + 1);

        // Unit-conductivity element stiffness by 2x2 Gauss quadrature,
        // exact for bilinear elements on rectangles.
        let g2 = [0.5 - 0.5 / 3.0_f64.sqrt(), 0.5 + 0.5 / 3.0_f64.sqrt()];
        let mut k_ref = [[0.0; 4]; 4];
        for &xi in &g2 {
            for &eta in &g2 {
                for a in 0..4 {
                    let (ax, ay) = CORNERS[a];
                    let gax = shape_deriv(ax) * shape(ay, eta) / hx;
                    let gay = shape(ax, xi) * shape_deriv(ay) / hy;
                    for b in 0..4 {
                        let (bx, by) = CORNERS[b];
                        let gbx = shape_deriv(bx) * shape(by, eta) / hx;
                        let gby = shape(bx, xi) * shape_deriv(by) / hy;
                        k_ref[a][b] += 0.25 * hx * hy * (gax * gbx + gay * gby);
                    }
                }
            }
        }

        // Load vector by 4x4 Gauss per element.
        let g4_nodes = [0.3399810435848563, 0.8611363115940526];
        let g4_weights = [0.6521451548625461, 0.3478548451374538];
        let mut quad = Vec::with_capacity(4);
        for k in 0..2 {
            quad.push((0.5 * (1.0 - g4_nodes[k]), 0.5 * g4_weights[k]));
            quad.push((0.5 * (1.0 + g4_nodes[k]), 0.5 * g4_weights[k]));
        }
        let mut load = DVector::zeros(n_nodes);
        for ex in 0..nx {
            for ey in 0..ny {
                let nodes = element_nodes(ex, ey, ny);
                for &(xi, wx) in &quad {
                    for &(eta, wy) in &quad {
                        let fval = source((ex as f64 + xi) * hx, (ey as f64 + eta) * hy);
                        let scale = wx * wy * hx * hy * fval;
                        for a in 0..4 {
                            let (ax, ay) = CORNERS[a];
                            load[nodes[a]] += scale * shape(ax, xi) * shape(ay, eta);
                        }
                    }
                }
            }
        }

        // Boundary mass row: each boundary edge contributes half its length
        // to both endpoint nodes, exact for the linear trace.
        let mut boundary_row = DVector::zeros(n_nodes);
        for ex in 0..nx {
            for iy in [0, ny] {
                boundary_row[node_id(ex, iy, ny)] += 0.5 * hx;
                boundary_row[node_id(ex + 1, iy, ny)] += 0.5 * hx;
            }
        }
        for ey in 0..ny {
            for ix in [0, nx] {
                boundary_row[node_id(ix, ey, ny)] += 0.5 * hy;
                boundary_row[node_id(ix, ey + 1, ny)] += 0.5 * hy;
            }
        }
        let boundary_total = boundary_row.sum();
        let lambda = load.sum() / boundary_total;
        let load_tilde = &load - &boundary_row * lambda;

        let sensors = sensor_points
            .iter()
            .map(|&[sx, sy]| {
                let ex = ((sx / hx).floor() as usize).min(nx - 1);
                let ey = ((sy / hy).floor() as usize).min(ny - 1);
                let xi = sx / hx - ex as f64;
                let eta = sy / hy - ey as f64;
                let nodes = element_nodes(ex, ey, ny);
                let mut weights = [0.0; 4];
                for a in 0..4 {
                    let (ax, ay) = CORNERS[a];
                    weights[a] = shape(ax, xi) * shape(ay, eta);
                }
                Sensor { nodes, weights }
            })
            .collect();

        EllipticModel {
            nx,
            ny,
            hx,
            hy,
            k_ref,
            load,
            load_tilde,
            lambda,
            boundary_row,
            boundary_total,
            sensors,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    /// Element centers in the same ordering as the parameter vector.
    pub fn element_centers(&self) -> Vec<[f64; 2]> {
        let mut centers = Vec::with_capacity(self.nx * self.ny);
        for ex in 0..self.nx {
            for ey in 0..self.ny {
                centers.push([
                    (ex as f64 + 0.5) * self.hx,
                    (ey as f64 + 0.5) * self.hy,
                ]);
            }
        }
        centers
    }

    fn check_params(&self, x: &DVector<f64>) -> Result<(), ModelError> {
        if x.len() != self.dim_param() {
            return Err(ModelError::DimensionMismatch {
                context: format!(
                    "{} parameters for a {}x{} element grid",
                    x.len(),
                    self.nx,
                    self.ny
                ),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::ForwardSolveFailed {
                context: "non-finite log-conductivity".into(),
            });
        }
        Ok(())
    }

    /// Assemble and factor the grounded stiffness matrix for `κ = exp(x)`.
    fn factor_stiffness(&self, kappa: &DVector<f64>) -> Result<BandChol, ModelError> {
        let bw = self.ny + 2;
        let mut band = BandMatrix::zeros(self.node_count() - 1, bw);
        for ex in 0..self.nx {
            for ey in 0..self.ny {
                let ke = kappa[element_id(ex, ey, self.ny)];
                let nodes = element_nodes(ex, ey, self.ny);
                for a in 0..4 {
                    for b in 0..4 {
                        let (i, j) = (nodes[a], nodes[b]);
                        if i >= j && j > 0 {
                            band.add(i - 1, j - 1, ke * self.k_ref[a][b]);
                        }
                    }
                }
            }
        }
        band.cholesky()
    }

    /// Solve `K u + μ c = rhs`, `cᵀu = 0` through the grounded factorization.
    ///
    /// This is the action of the pressure block of the inverse saddle-point
    /// matrix, and it is self-adjoint, which is what the adjoint reuses.
    fn solve_constrained(&self, chol: &BandChol, rhs: &DVector<f64>) -> DVector<f64> {
        let mu = rhs.sum() / self.boundary_total;
        let balanced = rhs - &self.boundary_row * mu;
        let reduced = balanced.rows(1, self.node_count() - 1).into_owned();
        let q = chol.solve(&reduced);
        let mut u = DVector::zeros(self.node_count());
        u.rows_mut(1, self.node_count() - 1).copy_from(&q);
        let shift = -self.boundary_row.dot(&u) / self.boundary_total;
        u.add_scalar_mut(shift);
        u
    }

    fn solve_field(&self, kappa: &DVector<f64>) -> Result<(DVector<f64>, BandChol), ModelError> {
        let chol = self.factor_stiffness(kappa)?;
        let p = self.solve_constrained(&chol, &self.load_tilde);
        Ok((p, chol))
    }

    /// Nodal pressure field at parameters `x`.
    pub fn pressure(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_params(x)?;
        let kappa = x.map(f64::exp);
        Ok(self.solve_field(&kappa)?.0)
    }

    fn observe(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.sensors.len(),
            self.sensors.iter().map(|s| {
                (0..4).map(|a| s.weights[a] * p[s.nodes[a]]).sum::<f64>()
            }),
        )
    }

    fn observe_adjoint(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.node_count());
        for (k, s) in self.sensors.iter().enumerate() {
            for a in 0..4 {
                out[s.nodes[a]] += s.weights[a] * w[k];
            }
        }
        out
    }
}

#[inline]
fn node_id(ix: usize, iy: usize, ny: usize) -> usize {
    ix * (ny + 1) + iy
}

#[inline]
fn element_id(ex: usize, ey: usize, ny: usize) -> usize {
    ex * ny + ey
}

#[inline]
fn element_nodes(ex: usize, ey: usize, ny: usize) -> [usize; 4] {
    let mut nodes = [0; 4];
    for (a, &(dx, dy)) in CORNERS.iter().enumerate() {
        nodes[a] = node_id(ex + dx, ey + dy, ny);
    }
    nodes
}

impl ForwardModel for EllipticModel {
    fn dim_param(&self) -> usize {
        self.nx * self.ny
    }

    fn dim_obs(&self) -> usize {
        self.sensors.len()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(self.observe(&self.pressure(x)?))
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<Box<dyn Linearization + '_>, ModelError> {
        self.check_params(x)?;
        let kappa = x.map(f64::exp);
        let (p, chol) = self.solve_field(&kappa)?;
        let obs = self.observe(&p);
        Ok(Box::new(EllipticLin {
            model: self,
            kappa,
            p,
            chol,
            obs,
        }))
    }
}

struct EllipticLin<'a> {
    model: &'a EllipticModel,
    kappa: DVector<f64>,
    p: DVector<f64>,
    chol: BandChol,
    obs: DVector<f64>,
}

impl Linearization for EllipticLin<'_> {
    fn observation(&self) -> &DVector<f64> {
        &self.obs
    }

    fn jac_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.model;
        // rhs = -K'[v] p, with K'[v] = Σ_e v_e κ_e A_e.
        let mut rhs = DVector::zeros(m.node_count());
        for ex in 0..m.nx {
            for ey in 0..m.ny {
                let e = element_id(ex, ey, m.ny);
                let coeff = v[e] * self.kappa[e];
                if coeff == 0.0 {
                    continue;
                }
                let nodes = element_nodes(ex, ey, m.ny);
                for a in 0..4 {
                    let mut s = 0.0;
                    for b in 0..4 {
                        s += m.k_ref[a][b] * self.p[nodes[b]];
                    }
                    rhs[nodes[a]] -= coeff * s;
                }
            }
        }
        let dp = m.solve_constrained(&self.chol, &rhs);
        m.observe(&dp)
    }

    fn jac_adjoint(&self, w: &DVector<f64>) -> DVector<f64> {
        let m = self.model;
        let q = m.solve_constrained(&self.chol, &m.observe_adjoint(w));
        let mut out = DVector::zeros(m.dim_param());
        for ex in 0..m.nx {
            for ey in 0..m.ny {
                let e = element_id(ex, ey, m.ny);
                let nodes = element_nodes(ex, ey, m.ny);
                let mut s = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        s += self.p[nodes[a]] * m.k_ref[a][b] * q[nodes[b]];
                    }
                }
                out[e] = -self.kappa[e] * s;
            }
        }
        out
    }
}

/// The fixed source: four Gaussian plumes at the corners whose weights sum
/// to zero.
pub fn plume_source(x: f64, y: f64) -> f64 {
    let s2 = 2.0 * PLUME_STD * PLUME_STD;
    PLUME_CENTERS
        .iter()
        .zip(PLUME_WEIGHTS.iter())
        .map(|(&[cx, cy], &w)| {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            w * (-d2 / s2).exp()
        })
        .sum()
}

/// The 15-point sensor lattice, chosen to coincide with grid nodes of every
/// benchmark discretization.
pub fn standard_sensors() -> Vec<[f64; 2]> {
    let mut points = Vec::with_capacity(15);
    for i in 1..=5 {
        let x = 0.5 * i as f64;
        for &y in &[0.25, 0.5, 0.75] {
            points.push([x, y]);
        }
    }
    points
}

/// Ground-truth log-conductivity: three smooth bumps evaluated at the given
/// element centers.
pub fn true_log_conductivity(centers: &[[f64; 2]]) -> DVector<f64> {
    DVector::from_iterator(
        centers.len(),
        centers.iter().map(|&[x, y]| {
            let mut v = 0.0;
            for k in 0..3 {
                let [cx, cy] = TRUTH_CENTERS[k];
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                v += TRUTH_AMPLITUDES[k] * (-d2 / (2.0 * TRUTH_WIDTHS[k].powi(2))).exp();
            }
            v
        }),
    )
}

/// Assemble the full benchmark inverse problem on an `nx x ny` element grid:
/// anisotropic exponential prior at the element centers, synthetic data from
/// the bump truth at the given signal-to-noise ratio.
/// The grid that generates observation data, finer than any benchmark
/// inversion grid. Fixing it keeps the data identical across inversion
/// discretizations and avoids the inverse crime of inverting data produced
/// by the same forward solver.
const DATA_GRID: (usize, usize) = (96, 32);

/// 3x3 tensor Gauss rule over one element, as (dx, dy, weight) offsets from
/// the element center with weights summing to one. The discrete prior
/// covariance is the kernel averaged over element pairs, so a cell carries
/// the variance of the field's cell average rather than of its midpoint
/// value; coarse and fine grids then discretize the same continuum prior.
fn cell_quadrature(hx: f64, hy: f64) -> [(f64, f64, f64); 9] {
    let g = (0.6f64).sqrt();
    let nodes = [-g, 0.0, g];
    let weights = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
    let mut out = [(0.0, 0.0, 0.0); 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = (
                0.5 * hx * nodes[i],
                0.5 * hy * nodes[j],
                weights[i] * weights[j],
            );
        }
    }
    out
}

pub fn build_problem(
    nx: usize,
    ny: usize,
    snr: f64,
    seed: u64,
) -> Result<(ForwardProblem, SynthData), BuildError> {
    let model = Arc::new(EllipticModel::benchmark(nx, ny));
    let centers = model.element_centers();
    let tensor = Matrix2::new(
        PRIOR_TENSOR[0],
        PRIOR_TENSOR[1],
        PRIOR_TENSOR[2],
        PRIOR_TENSOR[3],
    );
    let kernel = AnisoExpKernel::new(PRIOR_SIGMA, PRIOR_CORR_LEN, tensor)?;
    let quad = cell_quadrature(3.0 / nx as f64, 1.0 / ny as f64);
    let prior = build_prior(
        &centers,
        |s: [f64; 2], t: [f64; 2]| {
            let mut acc = 0.0;
            for &(sx, sy, ws) in &quad {
                for &(tx, ty, wt) in &quad {
                    acc += ws * wt * kernel.eval([s[0] + sx, s[1] + sy], [t[0] + tx, t[1] + ty]);
                }
            }
            acc
        },
        DVector::zeros(centers.len()),
    )?;

    let data_model = EllipticModel::benchmark(DATA_GRID.0, DATA_GRID.1);
    let data_truth = true_log_conductivity(&data_model.element_centers());
    let synth = synth_data(
        &data_model,
        &data_truth,
        snr,
        derive_seed(seed, "elliptic-data", 0),
    )?;
    let truth = true_log_conductivity(&centers);
    let synth = SynthData { truth, ..synth };

    let problem = ForwardProblem::new(
        model,
        prior,
        ObsCov::Iid { sigma: synth.sigma },
        synth.noisy.clone(),
    )?;
    Ok((problem, synth))
}
