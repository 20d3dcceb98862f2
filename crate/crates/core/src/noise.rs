//! Speckle synthesis and the adaptive Gaussian noise mixture.
//!
//! Observations are synthesized as `y = m * s (+ a)` with a per-pixel
//! multiplicative field `m ~ N(1, alpha^2)`. During training the same
//! mixture form `m_hat * x + a_hat` is re-applied to images and latents with
//! an input-adapted sigma.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Real;

pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 0.5;
pub const DEFAULT_KAPPA: f64 = 0.25;

thread_local! {
    static DRAWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of noise fields sampled on the current thread so far.
pub fn draw_count() -> u64 {
    DRAWS.with(Cell::get)
}

fn count_draw() {
    DRAWS.with(|d| d.set(d.get() + 1));
}

/// Corruption parameters for synthesized observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Speckle strength: standard deviation of the multiplicative field.
    pub alpha_level: f64,
    /// Half-width of the per-image uniform jitter on `alpha_level`.
    pub alpha_jitter: f64,
    /// Standard deviation of an optional additive Gaussian component.
    pub add_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            alpha_level: 0.2,
            alpha_jitter: 0.05,
            add_sigma: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn new(alpha_level: f64, alpha_jitter: f64) -> Result<Self> {
        let spec = NoiseSpec {
            alpha_level,
            alpha_jitter,
            add_sigma: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Nominal standard deviation of the multiplicative field.
    pub fn mult_sigma(&self) -> f64 {
        self.alpha_level
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha_level, self.alpha_jitter, self.add_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("noise parameters must be finite".into()));
        }
        if self.alpha_level <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha_level must be positive, got {}",
                self.alpha_level
            )));
        }
        if self.alpha_jitter < 0.0 || self.add_sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "alpha_jitter and add_sigma must be nonnegative".into(),
            ));
        }
        if self.alpha_level - self.alpha_jitter <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha_level - alpha_jitter must stay positive ({} - {})",
                self.alpha_level, self.alpha_jitter
            )));
        }
        Ok(())
    }
}

/// A sampled i.i.d. Gaussian field.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub shape: [usize; 3],
    pub values: Vec<f32>,
    pub center: f64,
    pub sigma: f64,
    pub seed: u64,
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "field shape must have positive dimensions, got {shape:?}"
        )));
    }
    Ok(())
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    Ok(())
}

/// Samples a field of shape `[H, W, C]` with entries `~ N(center, sigma^2)`.
pub fn sample_field(shape: [usize; 3], center: f64, sigma: f64, seed: u64) -> Result<NoiseField> {
    validate_shape(&shape)?;
    validate_sigma(sigma)?;
    count_draw();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (center + sigma * z) as f32
        })
        .collect();
    Ok(NoiseField {
        shape,
        values,
        center,
        sigma,
        seed,
    })
}

/// Returns `m_hat * x + a_hat` with `m_hat ~ N(1, sigma^2)` and
/// `a_hat ~ N(0, sigma^2)` drawn independently per element.
///
/// Works on any flat tensor: images and latent maps alike.
pub fn noise_mixture<T: Real>(x: &[T], sigma: f64, seed: u64) -> Vec<T> {
    let mut out = x.to_vec();
    noise_mixture_in_place(&mut out, sigma, seed);
    out
}

/// In-place variant of [`noise_mixture`]; returns the multiplicative field,
/// which the backward pass needs.
pub fn noise_mixture_in_place<T: Real>(x: &mut [T], sigma: f64, seed: u64) -> Vec<T> {
    assert!(sigma >= 0.0 && sigma.is_finite(), "invalid mixture sigma {sigma}");
    count_draw();
    if sigma == 0.0 {
        return vec![T::one(); x.len()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mult = Vec::with_capacity(x.len());
    for v in x.iter_mut() {
        let zm: f64 = rng.sample(StandardNormal);
        let za: f64 = rng.sample(StandardNormal);
        let m = T::lit(1.0 + sigma * zm);
        *v = m * *v + T::lit(sigma * za);
        mult.push(m);
    }
    mult
}

/// Input-adapted mixture sigma: `clamp(kappa * std(image), SIGMA_MIN, SIGMA_MAX)`.
pub fn adaptive_sigma(image: &ImageTensor, kappa: f64) -> f64 {
    adaptive_sigma_of(&image.values, kappa)
}

pub fn adaptive_sigma_of(values: &[f32], kappa: f64) -> f64 {
    let std = population_std(values);
    if !std.is_finite() {
        return SIGMA_MAX;
    }
    (kappa * std).clamp(SIGMA_MIN, SIGMA_MAX)
}

fn population_std(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Draws the per-image speckle level uniformly from
/// `[alpha_level - alpha_jitter, alpha_level + alpha_jitter]`.
pub fn draw_alpha(spec: &NoiseSpec, seed: u64) -> f64 {
    if spec.alpha_jitter == 0.0 {
        return spec.alpha_level;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "alpha", &[]));
    let u: f64 = rng.random();
    spec.alpha_level - spec.alpha_jitter + 2.0 * spec.alpha_jitter * u
}

/// Synthesizes a speckled observation of `clean`. Returns the noisy image
/// (with `clean_ref` attached) and the drawn per-image alpha. Output is not
/// clipped.
pub fn synth_speckle(clean: &ImageTensor, spec: &NoiseSpec, seed: u64) -> Result<(ImageTensor, f64)> {
    spec.validate()?;
    let alpha = draw_alpha(spec, seed);
    let shape = [clean.height, clean.width, clean.channels];
    let mult = sample_field(shape, 1.0, alpha, seed::derive(seed, "speckle", &[]))?;
    let mut values: Vec<f32> = clean
        .values
        .iter()
        .zip(&mult.values)
        .map(|(&s, &m)| m * s)
        .collect();
    if spec.add_sigma > 0.0 {
        let add = sample_field(shape, 0.0, spec.add_sigma, seed::derive(seed, "additive", &[]))?;
        for (v, a) in values.iter_mut().zip(&add.values) {
            *v += a;
        }
    }
    let mut noisy = ImageTensor::new(clean.height, clean.width, clean.channels, values)?;
    noisy.source_path = clean.source_path.clone();
    noisy.clean_ref = Some(Box::new(clean.without_ref()));
    Ok((noisy, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_field_is_constant() {
        let f = sample_field([8, 8, 1], 1.0, 0.0, 3).unwrap();
        assert!(f.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn field_is_deterministic() {
        let a = sample_field([4, 4, 1], 1.0, 0.3, 7).unwrap();
        let b = sample_field([4, 4, 1], 1.0, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_field([4, 4, 1], 1.0, 0.3, 8).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn field_rejects_bad_shape_and_sigma() {
        assert!(sample_field([0, 4, 1], 0.0, 0.1, 1).is_err());
        assert!(sample_field([4, 4, 1], 0.0, -0.1, 1).is_err());
    }

    #[test]
    fn field_moments() {
        let f = sample_field([256, 256, 1], 0.0, 0.2, 11).unwrap();
        let n = f.values.len() as f64;
        let mean = f.values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let std = population_std(&f.values);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((std - 0.2).abs() < 0.01, "std {std}");
    }

    #[test]
    fn adaptive_sigma_clamps() {
        let flat = ImageTensor::filled(4, 4, 1, 0.7);
        assert_eq!(adaptive_sigma(&flat, 0.25), SIGMA_MIN);
        // alternating +-0.2 around 0.5 has population std exactly 0.2
        let vals: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 0.3 } else { 0.7 }).collect();
        let img = ImageTensor::new(4, 4, 1, vals).unwrap();
        assert!((adaptive_sigma(&img, 0.25) - 0.05).abs() < 1e-7);
        let wild: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { -10.0 } else { 10.0 }).collect();
        let img = ImageTensor::new(4, 4, 1, wild).unwrap();
        assert_eq!(adaptive_sigma(&img, 0.25), SIGMA_MAX);
    }

    #[test]
    fn zero_sigma_mixture_is_identity() {
        let x = vec![0.1f32, -2.0, 3.5, 0.0];
        assert_eq!(noise_mixture(&x, 0.0, 5), x);
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::new(0.2, 0.05).is_ok());
        assert!(NoiseSpec::new(0.0, 0.0).is_err());
        assert!(NoiseSpec::new(0.1, 0.1).is_err());
        assert!(NoiseSpec::new(0.1, -0.01).is_err());
    }

    #[test]
    fn vanishing_alpha_leaves_image_unchanged() {
        let vals: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        let clean = ImageTensor::new(8, 8, 1, vals).unwrap();
        let spec = NoiseSpec::new(1e-12, 0.0).unwrap();
        let (noisy, alpha) = synth_speckle(&clean, &spec, 9).unwrap();
        assert_eq!(alpha, 1e-12);
        assert_eq!(noisy.values, clean.values);
        assert_eq!(noisy.clean_ref.as_deref().unwrap().values, clean.values);
    }

    #[test]
    fn drawn_alpha_within_jitter() {
        let spec = NoiseSpec::new(0.2, 0.05).unwrap();
        for s in 0..200 {
            let a = draw_alpha(&spec, s);
            assert!((0.15..=0.25).contains(&a), "{a}");
        }
    }

    #[test]
    fn draw_counter_tracks_sampling() {
        let before = draw_count();
        let _ = noise_mixture(&[1.0f32; 4], 0.1, 1);
        let _ = sample_field([2, 2, 1], 0.0, 0.1, 1).unwrap();
        assert_eq!(draw_count(), before + 2);
    }
}
