//! Star-occultation transmission benchmark.
//!
//! Starlight passing through the atmosphere is attenuated by absorption,
//! and Beer's law gives the transmission at wavelength `λ` along a ray `l`
//! as `T = exp(-∫ Σ_gas α_λ ρ(z) ds)`. The atmosphere is discretized into
//! concentric spherical shells with constant gas densities, one tangent
//! ray per shell, which turns the model into the matrix form
//! `T = exp(-C Bᵀ Aᵀ)`: `C` holds cross-sections per wavelength and gas,
//! `B` the densities per layer and gas, and `A` the chord lengths of each
//! ray in each shell.
//!
//! The unknown is the log-density `x`, stored gas-major: the block
//! `x[i·n_alts .. (i+1)·n_alts]` is the profile of gas `i` from the lowest
//! to the highest layer. With this layout the prior covariance is literally
//! block-diagonal, one squared-exponential block per gas. The vectorized
//! model `vec(T) = exp(-(A ⊗ C) vec(Bᵀ))` orders the unknowns
//! altitude-major instead; the two differ by a fixed permutation, and the
//! tests pin the correspondence. Observations are `vec(T)`, ray-major with
//! wavelength fastest.
//!
//! Jacobian actions use the Kronecker structure without materializing
//! `A ⊗ C`: a matrix-shaped multiply per action, `O(n_λ·n_gas·n_alts)`.
//!
//! All synthetic constants (geometry, cross-section spectra, prior scales,
//! noise level) live in [`GomosSpec`] so a run's configuration records
//! them; nothing is buried in the operator.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::io::derive_seed;
use crate::model::{ForwardModel, ForwardProblem, Linearization, ModelError, ObsCov};
use crate::models::{synth_data, BuildError, SynthData};
use crate::prior::{build_prior, SqExpKernel};

/// Largest optical depth passed to `exp(-τ)`, keeping transmissions
/// strictly positive and the exponent far from underflow.
const MAX_OPTICAL_DEPTH: f64 = 700.0;

/// Largest log-density magnitude passed to `exp`, guarding overflow for
/// absurd proposals without affecting any realistic state.
const MAX_LOG_DENSITY: f64 = 300.0;

/// Every synthetic constant of the benchmark, serializable so that run
/// configurations carry the full definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GomosSpec {
    pub n_gas: usize,
    pub n_alts: usize,
    pub n_lambda: usize,
    pub earth_radius_km: f64,
    pub alt_min_km: f64,
    pub alt_max_km: f64,
    /// Relative floor added to every spectrum before amplitude scaling.
    pub cross_section_floor: f64,
    /// Overall cross-section scale per gas.
    pub cross_section_amplitudes: Vec<f64>,
    /// Per gas, the centers of its absorption lines in unit wavelength.
    pub cross_section_centers: Vec<Vec<f64>>,
    pub cross_section_widths: Vec<Vec<f64>>,
    pub cross_section_heights: Vec<Vec<f64>>,
    /// Prior variance scale per gas, used verbatim as the kernel prefactor.
    pub prior_sigmas: Vec<f64>,
    pub prior_corr_len_km: f64,
    /// Per-gas constant prior means; when absent, the log mid-profile
    /// density of the generating truth is used.
    pub prior_means: Option<Vec<f64>>,
    /// Ground-truth density at zero altitude per gas.
    pub surface_densities: Vec<f64>,
    /// Ground-truth exponential decay scale per gas, in km.
    pub scale_heights_km: Vec<f64>,
    pub snr: f64,
}

impl Default for GomosSpec {
    fn default() -> Self {
        GomosSpec {
            n_gas: 4,
            n_alts: 12,
            n_lambda: 30,
            earth_radius_km: 6370.0,
            alt_min_km: 10.0,
            alt_max_km: 60.0,
            cross_section_floor: 0.02,
            cross_section_amplitudes: vec![3.0e-3, 2.0e-3, 1.5e-3, 1.0e-20],
            cross_section_centers: vec![
                vec![0.15, 0.45, 0.75],
                vec![0.25, 0.55, 0.85],
                vec![0.10, 0.50, 0.90],
                vec![0.30, 0.60, 0.80],
            ],
            cross_section_widths: vec![
                vec![0.04, 0.07, 0.05],
                vec![0.06, 0.04, 0.08],
                vec![0.05, 0.10, 0.04],
                vec![0.05, 0.06, 0.07],
            ],
            cross_section_heights: vec![
                vec![1.0, 0.6, 0.8],
                vec![0.7, 1.0, 0.5],
                vec![0.9, 0.5, 1.0],
                vec![1.0, 1.0, 1.0],
            ],
            prior_sigmas: vec![5.22, 9.79, 23.66, 83.18],
            prior_corr_len_km: 10.0,
            prior_means: None,
            surface_densities: vec![1.0, 0.8, 0.5, 0.3],
            scale_heights_km: vec![25.0, 30.0, 35.0, 40.0],
            snr: 100.0,
        }
    }
}

impl GomosSpec {
    fn validate(&self) -> Result<(), BuildError> {
        let check = |name: &str, len: usize| {
            if len == self.n_gas {
                Ok(())
            } else {
                Err(BuildError::Model(ModelError::DimensionMismatch {
                    context: format!("{name} must list one entry per gas ({})", self.n_gas),
                }))
            }
        };
        check("cross_section_amplitudes", self.cross_section_amplitudes.len())?;
        check("cross_section_centers", self.cross_section_centers.len())?;
        check("cross_section_widths", self.cross_section_widths.len())?;
        check("cross_section_heights", self.cross_section_heights.len())?;
        check("prior_sigmas", self.prior_sigmas.len())?;
        check("surface_densities", self.surface_densities.len())?;
        check("scale_heights_km", self.scale_heights_km.len())?;
        if let Some(means) = &self.prior_means {
            check("prior_means", means.len())?;
        }
        Ok(())
    }

    /// Layer boundary radii, ascending, in km from the planet center.
    pub fn layer_radii(&self) -> Vec<f64> {
        let dz = (self.alt_max_km - self.alt_min_km) / self.n_alts as f64;
        (0..=self.n_alts)
            .map(|k| self.earth_radius_km + self.alt_min_km + k as f64 * dz)
            .collect()
    }

    /// Cross-section matrix `C`: unit-interval wavelength grid, per-gas sums
    /// of Gaussian lines over a common floor.
    pub fn cross_sections(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_lambda, self.n_gas, |l, i| {
            let lambda = l as f64 / (self.n_lambda - 1) as f64;
            let lines: f64 = self.cross_section_centers[i]
                .iter()
                .zip(&self.cross_section_widths[i])
                .zip(&self.cross_section_heights[i])
                .map(|((&c, &w), &h)| h * (-(lambda - c).powi(2) / (2.0 * w * w)).exp())
                .sum();
            self.cross_section_amplitudes[i] * (self.cross_section_floor + lines)
        })
    }

    /// Ground-truth log-densities: exponential decay per gas, evaluated at
    /// the layer midpoints.
    pub fn true_log_densities(&self) -> DVector<f64> {
        let mids = self.layer_midpoints_km();
        DVector::from_fn(self.n_gas * self.n_alts, |k, _| {
            let (i, a) = (k / self.n_alts, k % self.n_alts);
            self.surface_densities[i].ln() - mids[a] / self.scale_heights_km[i]
        })
    }

    pub fn layer_midpoints_km(&self) -> Vec<f64> {
        let dz = (self.alt_max_km - self.alt_min_km) / self.n_alts as f64;
        (0..self.n_alts)
            .map(|a| self.alt_min_km + (a as f64 + 0.5) * dz)
            .collect()
    }

    /// Per-gas constant prior means: configured values, or the log of the
    /// mid-profile density of the generating truth.
    pub fn gas_means(&self) -> Vec<f64> {
        match &self.prior_means {
            Some(means) => means.clone(),
            None => {
                let z_mid = 0.5 * (self.alt_min_km + self.alt_max_km);
                (0..self.n_gas)
                    .map(|i| self.surface_densities[i].ln() - z_mid / self.scale_heights_km[i])
                    .collect()
            }
        }
    }

    /// Assemble the full benchmark inverse problem: block-diagonal
    /// squared-exponential prior, synthetic transmissions from the decay
    /// truth at the configured signal-to-noise ratio.
    pub fn build_problem(&self, seed: u64) -> Result<(ForwardProblem, SynthData), BuildError> {
        self.validate()?;
        let model = Arc::new(GomosModel::new(self)?);
        let mids = model.spec.layer_midpoints_km();
        let kernels: Vec<SqExpKernel> = self
            .prior_sigmas
            .iter()
            .map(|&s| SqExpKernel::new(s, self.prior_corr_len_km))
            .collect();
        let mut points = Vec::with_capacity(self.n_gas * self.n_alts);
        for i in 0..self.n_gas {
            for &z in &mids {
                points.push((i, z));
            }
        }
        let gas_means = self.gas_means();
        let mean = DVector::from_fn(points.len(), |k, _| gas_means[points[k].0]);
        let prior = build_prior(
            &points,
            |(gi, zi), (gj, zj)| if gi == gj { kernels[gi].eval(zi, zj) } else { 0.0 },
            mean,
        )?;
        let truth = self.true_log_densities();
        let synth = synth_data(
            model.as_ref(),
            &truth,
            self.snr,
            derive_seed(seed, "gomos-data", 0),
        )?;
        let problem = ForwardProblem::new(
            model.clone(),
            prior,
            ObsCov::Iid { sigma: synth.sigma },
            synth.noisy.clone(),
        )?;
        Ok((problem, synth))
    }
}

/// Chord lengths of tangent rays through concentric shells. Row `j` is the
/// ray tangent at the midpoint of layer `j`; column `i` is the shell
/// `[R_i, R_{i+1}]`. A ray never enters shells below its tangent layer, so
/// the matrix is triangular with zeros at `i < j`.
pub fn gomos_geometry(layer_radii: &[f64]) -> Result<DMatrix<f64>, BuildError> {
    if layer_radii.len() < 2 || layer_radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BuildError::RadiiNotAscending);
    }
    if layer_radii[0] <= 0.0 {
        return Err(BuildError::RadiiNotAscending);
    }
    let n = layer_radii.len() - 1;
    Ok(DMatrix::from_fn(n, n, |j, i| {
        let r = 0.5 * (layer_radii[j] + layer_radii[j + 1]);
        let outer = layer_radii[i + 1];
        let inner = layer_radii[i];
        if outer <= r {
            0.0
        } else {
            let hi = (outer * outer - r * r).sqrt();
            let lo = (inner * inner - r * r).max(0.0).sqrt();
            2.0 * (hi - lo)
        }
    }))
}

pub struct GomosModel {
    spec: GomosSpec,
    /// Geometry matrix, rays by shells.
    a: DMatrix<f64>,
    /// Cross-sections, wavelengths by gases.
    c: DMatrix<f64>,
}

impl GomosModel {
    pub fn new(spec: &GomosSpec) -> Result<Self, BuildError> {
        spec.validate()?;
        let a = gomos_geometry(&spec.layer_radii())?;
        let c = spec.cross_sections();
        Ok(GomosModel {
            spec: spec.clone(),
            a,
            c,
        })
    }

    pub fn spec(&self) -> &GomosSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn cross_sections(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn n_gas(&self) -> usize {
        self.spec.n_gas
    }

    pub fn n_alts(&self) -> usize {
        self.spec.n_alts
    }

    /// Indices of the parameter block for gas `i`.
    pub fn gas_range(&self, i: usize) -> std::ops::Range<usize> {
        i * self.spec.n_alts..(i + 1) * self.spec.n_alts
    }

    fn check_params(&self, x: &DVector<f64>) -> Result<(), ModelError> {
        if x.len() != self.dim_param() {
            return Err(ModelError::DimensionMismatch {
                context: format!(
                    "{} parameters for {} gases x {} layers",
                    x.len(),
                    self.spec.n_gas,
                    self.spec.n_alts
                ),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::ForwardSolveFailed {
                context: "non-finite log-density".into(),
            });
        }
        Ok(())
    }

    /// Densities as a gases-by-layers matrix, `D[i, a] = exp(x[i·n_alts + a])`.
    fn densities(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.spec.n_gas, self.spec.n_alts, |i, a| {
            x[i * self.spec.n_alts + a].clamp(-MAX_LOG_DENSITY, MAX_LOG_DENSITY).exp()
        })
    }

    /// Transmission matrix `exp(-C D Aᵀ)`, wavelengths by rays, with the
    /// optical depth clamped to keep outputs in `(0, 1]`.
    fn transmissions(&self, dens: &DMatrix<f64>) -> DMatrix<f64> {
        let mut tau = &self.c * dens * self.a.transpose();
        tau.apply(|t| *t = (-t.clamp(0.0, MAX_OPTICAL_DEPTH)).exp());
        tau
    }
}

impl ForwardModel for GomosModel {
    fn dim_param(&self) -> usize {
        self.spec.n_gas * self.spec.n_alts
    }

    fn dim_obs(&self) -> usize {
        self.spec.n_lambda * self.spec.n_alts
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_params(x)?;
        let t = self.transmissions(&self.densities(x));
        Ok(DVector::from_column_slice(t.as_slice()))
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<Box<dyn Linearization + '_>, ModelError> {
        self.check_params(x)?;
        let dens = self.densities(x);
        let t = self.transmissions(&dens);
        let obs = DVector::from_column_slice(t.as_slice());
        Ok(Box::new(GomosLin {
            model: self,
            dens,
            t,
            obs,
        }))
    }
}

struct GomosLin<'a> {
    model: &'a GomosModel,
    dens: DMatrix<f64>,
    t: DMatrix<f64>,
    obs: DVector<f64>,
}

impl Linearization for GomosLin<'_> {
    fn observation(&self) -> &DVector<f64> {
        &self.obs
    }

    fn jac_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.model;
        let (n_gas, n_alts) = (m.spec.n_gas, m.spec.n_alts);
        // W[i, a] = v[i·n_alts + a] · D[i, a], the density perturbation.
        let vm = DMatrix::from_column_slice(n_alts, n_gas, v.as_slice());
        let w = vm.transpose().component_mul(&self.dens);
        let dtau = &m.c * w * m.a.transpose();
        let out = -dtau.component_mul(&self.t);
        DVector::from_column_slice(out.as_slice())
    }

    fn jac_adjoint(&self, w: &DVector<f64>) -> DVector<f64> {
        let m = self.model;
        let (n_lambda, n_alts) = (m.spec.n_lambda, m.spec.n_alts);
        let z = DMatrix::from_column_slice(n_lambda, n_alts, w.as_slice());
        let weighted = -z.component_mul(&self.t);
        let g = m.c.transpose() * weighted * &m.a;
        let scaled = g.component_mul(&self.dens).transpose();
        DVector::from_column_slice(scaled.as_slice())
    }
}
