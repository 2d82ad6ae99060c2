//! Benchmark forward models and synthetic data generation.

pub mod elliptic;
pub mod gomos;
pub mod linear;

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::model::{ForwardModel, ModelError};
use crate::prior::PriorError;

/// Failures while assembling a benchmark problem, from either the prior
/// construction or the forward solve on the ground truth.
#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("layer radii must be positive and strictly ascending")]
    RadiiNotAscending,
}

/// Synthetic observations for a known truth: the clean forward image, the
/// noisy data, and the noise level implied by the signal-to-noise ratio.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub truth: DVector<f64>,
    pub clean: DVector<f64>,
    pub noisy: DVector<f64>,
    /// Noise standard deviation, `max|clean| / snr`.
    pub sigma: f64,
}

/// Push a truth through the model and perturb with iid Gaussian noise whose
/// standard deviation is set by the signal-to-noise ratio.
pub fn synth_data(
    model: &dyn ForwardModel,
    truth: &DVector<f64>,
    snr: f64,
    seed: u64,
) -> Result<SynthData, ModelError> {
    assert!(snr > 0.0, "signal-to-noise ratio must be positive");
    let clean = model.apply(truth)?;
    let sigma = clean.amax() / snr;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noisy = clean.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    Ok(SynthData {
        truth: truth.clone(),
        clean,
        noisy,
        sigma,
    })
}
