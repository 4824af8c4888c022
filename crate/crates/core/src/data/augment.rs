//! Gaussian two-view augmentation: `view = x + epsilon * z` with standard
//! normal `z`, drawn independently for each view.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::CsiSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub epsilon: f64,
}

/// One noisy copy of `x`, drawing from `rng`.
pub fn perturb(x: &Tensor<f32>, epsilon: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if epsilon == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += (epsilon * z) as f32;
    }
    out
}

pub fn augment_view(x: &CsiSample, epsilon: f64, seed: u64) -> Result<ViewPair> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Invalid(format!("epsilon must be finite and nonnegative, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view1 = perturb(&x.values, epsilon, &mut rng);
    let view2 = perturb(&x.values, epsilon, &mut rng);
    Ok(ViewPair { view1, view2, epsilon })
}

/// Standard deviation over every value of every sample.
pub fn amplitude_std(samples: &[CsiSample]) -> f64 {
    let (mut n, mut sum, mut sq) = (0f64, 0f64, 0f64);
    for s in samples {
        for &v in s.values.data() {
            let v = v as f64;
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    if n == 0.0 {
        return 0.0;
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}
