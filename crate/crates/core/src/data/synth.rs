//! Synthetic face proxies whose pixels encode the age label.
//!
//! Each image is a dark field with a bright band along the bottom edge
//! whose height is `round(age / age_max · size)` rows, plus uniform noise.
//! Pixel values are multiples of 1/255 so images survive a PPM round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.2;
pub const BAND: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub seed: u64,
    /// Inclusive range of the integer ages drawn.
    pub age_range: (u32, u32),
    pub image_size: usize,
    /// Half-width of the uniform noise added to every channel.
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 50,
            seed: 0,
            age_range: (10, 80),
            image_size: 64,
            noise_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub age: f64,
    pub image: Tensor,
}

pub fn band_height(age: f64, age_max: f64, size: usize) -> usize {
    ((age / age_max * size as f64).round() as usize).min(size)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one image for `age`, drawing noise from `rng`.
pub fn render(age: f64, spec: &SynthSpec, rng: &mut impl Rng) -> Result<Tensor> {
    let size = spec.image_size;
    let band = band_height(age, spec.age_range.1 as f64, size);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let base = if y >= size - band { BAND } else { BACKGROUND };
        for _ in 0..size * 3 {
            let noise = if spec.noise_level > 0.0 {
                rng.random_range(-spec.noise_level..=spec.noise_level)
            } else {
                0.0
            };
            data.push(quantize(base + noise));
        }
    }
    Tensor::new([size, size, 3], data)
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    let (lo, hi) = spec.age_range;
    if spec.count == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one sample"));
    }
    if lo > hi || hi == 0 {
        return Err(Error::invalid(format!("bad age range [{lo}, {hi}]")));
    }
    if spec.image_size == 0 || !(0.0..=1.0).contains(&spec.noise_level) {
        return Err(Error::invalid(
            "image_size must be positive and noise_level in [0, 1]",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| {
            let age = rng.random_range(lo..=hi) as f64;
            Ok(SynthSample {
                age,
                image: render(age, spec, &mut rng)?,
            })
        })
        .collect()
}
