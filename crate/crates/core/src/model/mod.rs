//! Encoder / reconstruction networks and their inference and training-mode
//! forward passes.

pub mod layers;
pub mod network;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::noise;
use crate::seed;
use crate::tensor::{Feature, Real};
pub use network::{Architecture, Init, ShapeRow};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub recon_blocks: usize,
    pub input_channels: usize,
    pub latent_channels: usize,
    /// Instance normalization inside every ConvBlock; without it the block
    /// convs carry a bias instead.
    pub block_norm: bool,
    /// Standardize each observation by its own mean and std before the
    /// encoder and map the reconstruction back to that scale.
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 32,
            stage_widths: vec![32, 64, 128, 256],
            stage_blocks: vec![1, 2, 2, 2],
            recon_blocks: 4,
            input_channels: 1,
            latent_channels: 32,
            block_norm: true,
            standardize: true,
        }
    }
}

impl ModelConfig {
    /// Same topology with the given stage widths; stem and latent follow the
    /// first stage width.
    pub fn with_widths(widths: [usize; 4]) -> Self {
        ModelConfig {
            base_width: widths[0],
            stage_widths: widths.to_vec(),
            latent_channels: widths[0],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_widths.len() != 4 || self.stage_blocks.len() != 4 {
            return bad("stage_widths and stage_blocks need exactly 4 entries".into());
        }
        if self.stage_widths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("stage widths must increase strictly: {:?}", self.stage_widths));
        }
        if self.stage_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if [self.base_width, self.input_channels, self.latent_channels, self.stage_widths[0]].contains(&0) {
            return bad("widths and channel counts must be positive".into());
        }
        Ok(())
    }
}

/// Where a latent map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    TrainPath1,
    TrainPath2,
    Inference,
}

/// Per-observation intensity scale removed before encoding and restored
/// after reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScale {
    pub mean: f64,
    pub std: f64,
}

impl ImageScale {
    pub const IDENTITY: ImageScale = ImageScale { mean: 0.0, std: 1.0 };
    pub const MIN_STD: f64 = 1e-3;

    pub fn of(image: &ImageTensor) -> Self {
        let mean = image.mean();
        let n = image.values.len() as f64;
        let var = image.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        ImageScale { mean, std: var.sqrt().max(Self::MIN_STD) }
    }

    pub fn for_model(config: &ModelConfig, image: &ImageTensor) -> Self {
        if config.standardize {
            Self::of(image)
        } else {
            Self::IDENTITY
        }
    }

    pub fn normalize<T: Real>(&self, data: &mut [T]) {
        let (m, inv) = (T::lit(self.mean), T::lit(1.0 / self.std));
        data.iter_mut().for_each(|v| *v = (*v - m) * inv);
    }

    pub fn restore<T: Real>(&self, data: &mut [T]) {
        let (m, s) = (T::lit(self.mean), T::lit(self.std));
        data.iter_mut().for_each(|v| *v = *v * s + m);
    }
}

/// Full-resolution encoder output, `latent_channels x H x W`, plus the
/// intensity scale of the observation it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap<T = f32> {
    pub values: Feature<T>,
    pub source_mode: LatentMode,
    pub scale: ImageScale,
}

impl<T: Real> LatentMap<T> {
    pub fn new(values: Feature<T>, source_mode: LatentMode) -> Self {
        LatentMap { values, source_mode, scale: ImageScale::IDENTITY }
    }

    pub fn with_scale(mut self, scale: ImageScale) -> Self {
        self.scale = scale;
        self
    }

    /// Total number of elements (feature dimension D).
    pub fn dim(&self) -> usize {
        self.values.data.len()
    }
}

/// Named parameter arrays of both networks in a fixed declaration order.
#[derive(Debug, Clone)]
pub struct ModelParameters<T = f32> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub values: Vec<Vec<T>>,
}

impl<T: Real> ModelParameters<T> {
    pub fn from_values(config: ModelConfig, values: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::build(&config);
        if values.len() != arch.decls.len()
            || values.iter().zip(&arch.decls).any(|(v, d)| v.len() != d.len())
        {
            return Err(Error::ShapeMismatch("parameter arrays do not match the configuration".into()));
        }
        Ok(ModelParameters { config, arch, values })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arch.decls.iter().map(|d| d.name.as_str())
    }

    /// Encoder parameters as `(name, values)` pairs.
    pub fn encoder_params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.named().take(self.arch.encoder_len)
    }

    /// Reconstruction parameters as `(name, values)` pairs.
    pub fn recon_params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.named().skip(self.arch.encoder_len)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.arch
            .decls
            .iter()
            .zip(&self.values)
            .map(|(d, v)| (d.name.as_str(), v.as_slice()))
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.values.iter().map(|v| vec![T::zero(); v.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            arch: self.arch.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|&x| U::lit(x.as_f64())).collect())
                .collect(),
        }
    }
}

/// He-initialized parameters; deterministic per seed.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters<f32>> {
    init_model_as(config, seed)
}

pub fn init_model_as<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParameters<T>> {
    config.validate()?;
    let arch = Architecture::build(config);
    let values = arch
        .decls
        .iter()
        .enumerate()
        .map(|(i, d)| match d.init {
            Init::Zeros => vec![T::zero(); d.len()],
            Init::Ones => vec![T::one(); d.len()],
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "init", &[i as u64]));
                (0..d.len())
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        T::lit(std * z)
                    })
                    .collect()
            }
        })
        .collect();
    Ok(ModelParameters {
        config: config.clone(),
        arch,
        values,
    })
}

pub(crate) fn check_input(config: &ModelConfig, image: &ImageTensor) -> Result<()> {
    if !image.height.is_multiple_of(8) || !image.width.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "image dimensions must be divisible by 8, got {}x{}",
            image.height, image.width
        )));
    }
    if image.channels != config.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} input channels, got {}",
            config.input_channels, image.channels
        )));
    }
    Ok(())
}

/// Encodes `image`. In training mode the adaptive noise mixture with the
/// given sigma and seed is applied before the stem; otherwise the pass is
/// deterministic and draws no random numbers.
pub fn encode<T: Real>(
    params: &ModelParameters<T>,
    image: &ImageTensor,
    train_mode: bool,
    sigma: f64,
    seed: u64,
) -> Result<LatentMap<T>> {
    check_input(&params.config, image)?;
    let scale = ImageScale::for_model(&params.config, image);
    let mut x = image.to_feature::<T>();
    if train_mode {
        noise::noise_mixture_in_place(&mut x.data, sigma, seed);
    }
    scale.normalize(&mut x.data);
    let (z, _) = params.arch.encoder.forward(&params.values, x, false, None);
    let mode = if train_mode { LatentMode::TrainPath1 } else { LatentMode::Inference };
    Ok(LatentMap::new(z, mode).with_scale(scale))
}

/// Maps a latent back to a single-channel image. Training mode applies the
/// latent noise mixture first. No output activation.
pub fn reconstruct<T: Real>(
    params: &ModelParameters<T>,
    latent: &LatentMap<T>,
    train_mode: bool,
    sigma: f64,
    seed: u64,
) -> Result<ImageTensor> {
    if latent.values.channels != params.config.latent_channels {
        return Err(Error::ShapeMismatch(format!(
            "latent has {} channels, model expects {}",
            latent.values.channels, params.config.latent_channels
        )));
    }
    let mut z = latent.values.clone();
    if train_mode {
        noise::noise_mixture_in_place(&mut z.data, sigma, seed);
    }
    let (mut out, _) = params.arch.recon.forward(&params.values, z, false, None);
    latent.scale.restore(&mut out.data);
    Ok(ImageTensor::from_feature(&out))
}

/// Inference: encode then reconstruct with both mixtures disabled.
pub fn denoise<T: Real>(params: &ModelParameters<T>, image: &ImageTensor) -> Result<ImageTensor> {
    let z = encode(params, image, false, 0.0, 0)?;
    let mut out = reconstruct(params, &z, false, 0.0, 0)?;
    out.source_path = image.source_path.clone();
    Ok(out)
}

/// Runs an inference forward pass and records every layer-table row.
pub fn probe_shapes<T: Real>(params: &ModelParameters<T>, image: &ImageTensor) -> Result<Vec<ShapeRow>> {
    check_input(&params.config, image)?;
    let mut rows = Vec::new();
    let mut x = image.to_feature::<T>();
    ImageScale::for_model(&params.config, image).normalize(&mut x.data);
    let (z, _) = params.arch.encoder.forward(&params.values, x, false, Some(&mut rows));
    params.arch.recon.forward(&params.values, z, false, Some(&mut rows));
    Ok(rows)
}

/// Convolution multiply-accumulate count of one inference pass, the figure
/// conventionally reported as "FLOPs" by model profilers.
pub fn forward_flops(config: &ModelConfig, height: usize, width: usize) -> Result<u64> {
    config.validate()?;
    Ok(Architecture::build(config).forward_macs(height, width))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize) -> ImageTensor {
        let vals = (0..n * n).map(|i| ((i * 31 % 97) as f32) / 97.0).collect();
        ImageTensor::new(n, n, 1, vals).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let cfg = ModelConfig::with_widths([8, 16, 32, 64]);
        let a = init_model(&cfg, 3).unwrap();
        let b = init_model(&cfg, 3).unwrap();
        assert_eq!(a.values, b.values);
        let big = init_model(&ModelConfig::default(), 3).unwrap();
        assert!(a.count() < big.count());
        assert!(a.encoder_params().count() > 0 && a.recon_params().count() > 0);
        assert!(a.names().all(|n| n.starts_with("encoder.") || n.starts_with("recon.")));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.stage_widths = vec![32, 32, 64, 128];
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::default();
        cfg.stage_blocks = vec![1, 2, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn latent_and_output_shapes() {
        let cfg = ModelConfig::with_widths([4, 8, 12, 16]);
        let p = init_model(&cfg, 1).unwrap();
        let z = encode(&p, &image(64), false, 0.0, 0).unwrap();
        assert_eq!((z.values.channels, z.values.height, z.values.width), (4, 64, 64));
        let out = reconstruct(&p, &z, false, 0.0, 0).unwrap();
        assert_eq!(out.shape(), [64, 64, 1]);
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = init_model(&ModelConfig::with_widths([2, 3, 4, 5]), 1).unwrap();
        let odd = ImageTensor::filled(12, 12, 1, 0.5);
        assert!(encode(&p, &odd, false, 0.0, 0).is_err());
        let z = LatentMap::new(Feature::<f32>::zeros(3, 8, 8), LatentMode::Inference);
        assert!(reconstruct(&p, &z, false, 0.0, 0).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_draws_no_noise() {
        let p = init_model(&ModelConfig::with_widths([2, 3, 4, 5]), 9).unwrap();
        let img = image(16);
        let before = noise::draw_count();
        let a = denoise(&p, &img).unwrap();
        let b = denoise(&p, &img).unwrap();
        assert_eq!(noise::draw_count(), before);
        assert_eq!(a.values, b.values);
        encode(&p, &img, true, 0.1, 4).unwrap();
        assert_eq!(noise::draw_count(), before + 1);
    }

    #[test]
    fn zero_latent_with_zero_output_conv_gives_zero_image() {
        let mut p = init_model(&ModelConfig::with_widths([2, 3, 4, 5]), 2).unwrap();
        let out = &p.arch.recon.out;
        let (w, b) = (out.weight, out.bias.unwrap());
        p.values[w].iter_mut().for_each(|v| *v = 0.0);
        p.values[b].iter_mut().for_each(|v| *v = 0.0);
        let z = LatentMap::new(Feature::zeros(2, 8, 8), LatentMode::Inference);
        let img = reconstruct(&p, &z, false, 0.0, 0).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn macs_match_conv_sum_for_small_model() {
        // stem 1->2 at 8x8: 64 * 9 * 2
        let cfg = ModelConfig::with_widths([2, 3, 4, 5]);
        let total = forward_flops(&cfg, 8, 8).unwrap();
        assert!(total > 64 * 9 * 2);
        assert_eq!(forward_flops(&cfg, 16, 16).unwrap(), 4 * total);
    }

    #[test]
    fn standardization_round_trips_and_floors_flat_images() {
        let img = image(8);
        let scale = ImageScale::of(&img);
        let mut v: Vec<f64> = img.values.iter().map(|&x| x as f64).collect();
        scale.normalize(&mut v);
        let (mean, var) = (v.iter().sum::<f64>() / 64.0, v.iter().map(|x| x * x).sum::<f64>() / 64.0);
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        scale.restore(&mut v);
        assert!(v.iter().zip(&img.values).all(|(a, &b)| (a - b as f64).abs() < 1e-6));
        assert_eq!(ImageScale::of(&ImageTensor::filled(4, 4, 1, 0.3)).std, ImageScale::MIN_STD);
        let cfg = ModelConfig { standardize: false, ..ModelConfig::default() };
        assert_eq!(ImageScale::for_model(&cfg, &img), ImageScale::IDENTITY);
    }

    #[test]
    fn restored_output_follows_input_gain() {
        // the encoder sees the standardized image, so a brighter copy only rescales the output
        let p = init_model(&ModelConfig::with_widths([2, 3, 4, 5]), 4).unwrap();
        let img = image(16);
        let mut bright = img.clone();
        bright.values.iter_mut().for_each(|v| *v = *v * 2.0 + 0.1);
        let a = denoise(&p, &img).unwrap();
        let b = denoise(&p, &bright).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(&x, &y)| (x * 2.0 + 0.1 - y).abs() < 1e-4));
    }
}
