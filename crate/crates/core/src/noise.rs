//! Counter-based Gaussian noise.
//!
//! Each noise tensor reads its own ChaCha20 stream: the key comes from the
//! seed and the stream id is the sample index. ChaCha is a counter-mode
//! cipher, so no generator state is shared between tensors and they can be
//! produced in any order or on any thread and still come out bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f32),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Parameters of one noise draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation.
    pub sigma: f32,
    pub seed: u64,
    pub sample_index: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f32, seed: u64, sample_index: u64) -> Self {
        Self {
            sigma,
            seed,
            sample_index,
        }
    }
}

/// Draws a tensor of i.i.d. `Normal(0, sigma^2)` values.
pub fn gaussian_noise(shape: &[usize], spec: NoiseSpec) -> Result<Tensor, NoiseError> {
    if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() {
        return Err(NoiseError::InvalidSigma(spec.sigma));
    }
    if spec.sigma == 0.0 {
        return Ok(Tensor::zeros(shape.to_vec())?);
    }
    let sigma = f64::from(spec.sigma);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.sample_index);
    let len = shape.iter().product();
    let values = (0..len)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * sigma) as f32)
        .collect();
    Ok(Tensor::new(shape.to_vec(), values)?)
}
