//! PSNR reports, latent robustness statistics, classical baselines and the
//! sample-efficiency sweep.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSplit, ImageTensor};
use crate::error::{Error, Result};
use crate::model::{self, LatentMap, LatentMode, ModelConfig, ModelParameters};
use crate::noise::{self, NoiseSpec};
use crate::seed;
use crate::tensor::{Feature, Real};
use crate::train::{self, TrainConfig};

/// PSNR values at or above this are displayed as "> 99 dB".
pub const PSNR_DISPLAY_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    psnr_slices(&a.values, &b.values, max_val)
}

pub fn psnr_slices(a: &[f32], b: &[f32], max_val: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("max_val must be positive, got {max_val}")));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub fn format_db(v: f64) -> String {
    if v >= PSNR_DISPLAY_CAP {
        format!("> {PSNR_DISPLAY_CAP:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// JSON has no infinity; PSNR fields store `+inf` as the string "inf".
mod db_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid dB value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "db_serde")]
    pub psnr_noisy: f64,
    #[serde(with = "db_serde")]
    pub psnr_restored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Dataset or class label, used as the x-axis label in plots.
    pub name: String,
    pub seed: u64,
    pub per_image: Vec<ImageScore>,
    #[serde(with = "db_serde")]
    pub mean_noisy: f64,
    #[serde(with = "db_serde")]
    pub mean_restored: f64,
    #[serde(with = "db_serde")]
    pub delta: f64,
}

impl EvalReport {
    pub fn from_scores(name: impl Into<String>, seed: u64, per_image: Vec<ImageScore>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_noisy = per_image.iter().map(|s| s.psnr_noisy).sum::<f64>() / n;
        let mean_restored = per_image.iter().map(|s| s.psnr_restored).sum::<f64>() / n;
        EvalReport {
            name: name.into(),
            seed,
            per_image,
            mean_noisy,
            mean_restored,
            delta: mean_restored - mean_noisy,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_noisy,psnr_restored,delta\n");
        for s in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.id,
                format_db(s.psnr_noisy),
                format_db(s.psnr_restored),
                format_db(s.psnr_restored - s.psnr_noisy)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            format_db(self.mean_noisy),
            format_db(self.mean_restored),
            format_db(self.delta)
        ));
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Observation used for evaluation: the noisy input and its clean reference.
pub struct EvalPair {
    pub id: String,
    pub noisy: ImageTensor,
    pub clean: ImageTensor,
}

/// Builds the evaluation pairs. With `noise`, each test image is treated as
/// clean and corrupted with a per-image seed derived from `seed`; without,
/// test images must already carry their clean reference.
pub fn eval_pairs(split: &DatasetSplit, noise: Option<&NoiseSpec>, seed: u64) -> Result<Vec<EvalPair>> {
    if split.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    split
        .test
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let id = t.id(i);
            match noise {
                Some(spec) => {
                    let clean = t.clean().cloned().unwrap_or_else(|| t.without_ref());
                    let (noisy, _) =
                        noise::synth_speckle(&clean, spec, seed::derive(seed, "eval", &[i as u64]))?;
                    Ok(EvalPair { id, noisy, clean })
                }
                None => {
                    let clean = t
                        .clean()
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("test image {id} has no clean reference")))?;
                    Ok(EvalPair { id, noisy: t.without_ref(), clean })
                }
            }
        })
        .collect()
}

/// Scores an arbitrary denoiser on prepared pairs. Noisy and restored images
/// are both clipped to `[0, 1]` before PSNR, as they would be when written
/// to 8-bit files.
pub fn evaluate_pairs<F>(name: &str, seed: u64, pairs: &[EvalPair], denoiser: F) -> Result<EvalReport>
where
    F: Fn(&ImageTensor) -> Result<ImageTensor> + Sync,
{
    let scores: Vec<Result<ImageScore>> = pairs
        .par_iter()
        .map(|p| {
            let restored = denoiser(&p.noisy)?.clipped();
            Ok(ImageScore {
                id: p.id.clone(),
                psnr_noisy: psnr(&p.noisy.clipped(), &p.clean, 1.0)?,
                psnr_restored: psnr(&restored, &p.clean, 1.0)?,
            })
        })
        .collect();
    Ok(EvalReport::from_scores(name, seed, scores.into_iter().collect::<Result<_>>()?))
}

/// Corrupts (or reads) the test observations, denoises them with the model
/// and reports PSNR before and after.
pub fn evaluate(
    params: &ModelParameters<f32>,
    split: &DatasetSplit,
    noise: Option<&NoiseSpec>,
    seed: u64,
) -> Result<EvalReport> {
    let pairs = eval_pairs(split, noise, seed)?;
    evaluate_pairs("model", seed, &pairs, |y| model::denoise(params, y))
}

/// Population statistics of per-sample latent distances.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub z_ref: LatentMap<f64>,
    pub d: Vec<f64>,
    pub variance_d: f64,
    pub dim: usize,
}

#[derive(Debug, Serialize)]
pub struct LatentSummary<'a> {
    pub samples: usize,
    pub dim: usize,
    pub d: &'a [f64],
    pub mean_d: f64,
    pub variance_d: f64,
}

impl LatentStats {
    pub fn summary(&self) -> LatentSummary<'_> {
        LatentSummary {
            samples: self.d.len(),
            dim: self.dim,
            d: &self.d,
            mean_d: self.d.iter().sum::<f64>() / self.d.len() as f64,
            variance_d: self.variance_d,
        }
    }
}

fn check_latents<T: Real>(latents: &[LatentMap<T>]) -> Result<()> {
    let first = latents
        .first()
        .ok_or_else(|| Error::InvalidArgument("no latents given".into()))?;
    if latents.iter().any(|z| !z.values.same_shape(&first.values)) {
        return Err(Error::ShapeMismatch("latents differ in shape".into()));
    }
    Ok(())
}

/// Elementwise mean latent.
pub fn latent_reference<T: Real>(latents: &[LatentMap<T>]) -> Result<LatentMap<f64>> {
    check_latents(latents)?;
    let f = &latents[0].values;
    let mut acc = vec![0.0f64; f.data.len()];
    for z in latents {
        for (a, v) in acc.iter_mut().zip(&z.values.data) {
            *a += v.as_f64();
        }
    }
    let n = latents.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(LatentMap::new(
        Feature::from_vec(f.channels, f.height, f.width, acc),
        LatentMode::Inference,
    ))
}

/// RMS distance of each latent from `z_ref` and the population variance of
/// those distances.
pub fn latent_distances<T: Real>(latents: &[LatentMap<T>], z_ref: &LatentMap<f64>) -> Result<LatentStats> {
    check_latents(latents)?;
    let dim = z_ref.dim();
    if latents[0].dim() != dim {
        return Err(Error::ShapeMismatch("reference latent differs in size".into()));
    }
    let d: Vec<f64> = latents
        .iter()
        .map(|z| {
            let ss: f64 = z
                .values
                .data
                .iter()
                .zip(&z_ref.values.data)
                .map(|(&v, &r)| {
                    let e = v.as_f64() - r;
                    e * e
                })
                .sum();
            (ss / dim as f64).sqrt()
        })
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let variance_d = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(LatentStats {
        z_ref: z_ref.clone(),
        d,
        variance_d,
        dim,
    })
}

/// Corrupts each clean image at `noise`, encodes it in inference mode and
/// returns the latent distance statistics.
pub fn latent_analysis(
    params: &ModelParameters<f32>,
    clean: &[ImageTensor],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<LatentStats> {
    let latents: Vec<Result<LatentMap<f32>>> = clean
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (y, _) = noise::synth_speckle(s, noise, seed::derive(seed, "latent", &[i as u64]))?;
            model::encode(params, &y, false, 0.0, 0)
        })
        .collect();
    let latents = latents.into_iter().collect::<Result<Vec<_>>>()?;
    let z_ref = latent_reference(&latents)?;
    latent_distances(&latents, &z_ref)
}

/// Latent statistics for observations that are already noisy.
pub fn latent_analysis_observed(params: &ModelParameters<f32>, observed: &[ImageTensor]) -> Result<LatentStats> {
    let latents: Vec<Result<LatentMap<f32>>> = observed
        .par_iter()
        .map(|y| model::encode(params, y, false, 0.0, 0))
        .collect();
    let latents = latents.into_iter().collect::<Result<Vec<_>>>()?;
    let z_ref = latent_reference(&latents)?;
    latent_distances(&latents, &z_ref)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Gaussian,
    Median,
    Lee,
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(FilterKind::Gaussian),
            "median" => Ok(FilterKind::Median),
            "lee" => Ok(FilterKind::Lee),
            other => Err(Error::InvalidArgument(format!("unknown filter {other:?}"))),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

fn window_values(plane: &[f32], h: usize, w: usize, y: usize, x: usize, r: usize, buf: &mut Vec<f32>) {
    buf.clear();
    for dy in -(r as isize)..=r as isize {
        let yy = reflect(y as isize + dy, h);
        for dx in -(r as isize)..=r as isize {
            buf.push(plane[yy * w + reflect(x as isize + dx, w)]);
        }
    }
}

fn local_moments(plane: &[f32], h: usize, w: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; h * w];
    let mut var = vec![0.0; h * w];
    let mut buf = Vec::new();
    for y in 0..h {
        for x in 0..w {
            window_values(plane, h, w, y, x, r, &mut buf);
            let n = buf.len() as f64;
            let m = buf.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let v = buf.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / n;
            mean[y * w + x] = m;
            var[y * w + x] = v;
        }
    }
    (mean, var)
}

/// Classical local filters used as comparison rows. `window` must be odd
/// and at least 3. Borders are handled by reflection.
pub fn baseline_filter(image: &ImageTensor, kind: FilterKind, window: usize) -> Result<ImageTensor> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd and >= 3, got {window}")));
    }
    let (h, w) = (image.height, image.width);
    let p = h * w;
    let r = window / 2;
    let mut out = image.without_ref();
    for c in 0..image.channels {
        let plane = &image.values[c * p..(c + 1) * p];
        let dst = &mut out.values[c * p..(c + 1) * p];
        match kind {
            FilterKind::Gaussian => {
                // OpenCV's default sigma for a given aperture
                let sigma = 0.3 * ((window as f64 - 1.0) * 0.5 - 1.0) + 0.8;
                let taps: Vec<f64> = (-(r as isize)..=r as isize)
                    .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let norm: f64 = taps.iter().sum();
                let mut tmp = vec![0.0f64; p];
                for y in 0..h {
                    for x in 0..w {
                        tmp[y * w + x] = taps
                            .iter()
                            .enumerate()
                            .map(|(k, t)| t * f64::from(plane[y * w + reflect(x as isize + k as isize - r as isize, w)]))
                            .sum::<f64>()
                            / norm;
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = (taps
                            .iter()
                            .enumerate()
                            .map(|(k, t)| t * tmp[reflect(y as isize + k as isize - r as isize, h) * w + x])
                            .sum::<f64>()
                            / norm) as f32;
                    }
                }
            }
            FilterKind::Median => {
                let mut buf = Vec::with_capacity(window * window);
                for y in 0..h {
                    for x in 0..w {
                        window_values(plane, h, w, y, x, r, &mut buf);
                        buf.sort_by(f32::total_cmp);
                        dst[y * w + x] = buf[buf.len() / 2];
                    }
                }
            }
            FilterKind::Lee => {
                let (mean, var) = local_moments(plane, h, w, r);
                // squared noise coefficient of variation, estimated as the
                // median local CV^2 (flat regions dominate)
                let mut cv2: Vec<f64> = mean
                    .iter()
                    .zip(&var)
                    .filter(|(m, _)| **m > 1e-6)
                    .map(|(m, v)| v / (m * m))
                    .collect();
                let cu2 = if cv2.is_empty() {
                    0.0
                } else {
                    cv2.sort_by(f64::total_cmp);
                    cv2[cv2.len() / 2]
                };
                for i in 0..p {
                    let (m, v) = (mean[i], var[i]);
                    let k = if v > 0.0 {
                        ((v - m * m * cu2) / (v * (1.0 + cu2))).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    dst[i] = (m + k * (f64::from(plane[i]) - m)) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Sample-efficiency sweep: trains a fresh model on the first `n` training
/// observations for each `n` in `sizes` and evaluates on the shared test set.
pub fn sample_efficiency(
    clean: &DatasetSplit,
    sizes: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<(usize, EvalReport)>> {
    let noisy_train = synthesize_all(&clean.train, noise, seed::derive(seed, "synth", &[]))?;
    let pairs = eval_pairs(clean, Some(noise), seed::derive(seed, "eval", &[]))?;
    sizes
        .iter()
        .map(|&n| {
            if n == 0 || n > noisy_train.len() {
                return Err(Error::InvalidArgument(format!(
                    "sweep size {n} outside 1..={}",
                    noisy_train.len()
                )));
            }
            let subset = DatasetSplit {
                train: noisy_train[..n].to_vec(),
                test: Vec::new(),
                split_ratio: clean.split_ratio,
                seed: clean.seed,
            };
            let state = train::fit(&subset, model_cfg, train_cfg)?;
            let report = evaluate_pairs(&format!("{n} samples"), seed, &pairs, |y| model::denoise(&state.params, y))?;
            Ok((n, report))
        })
        .collect()
}

/// Synthesizes one fixed noisy observation per clean image.
pub fn synthesize_all(clean: &[ImageTensor], noise: &NoiseSpec, seed: u64) -> Result<Vec<ImageTensor>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| noise::synth_speckle(s, noise, seed::derive(seed, "image", &[i as u64])).map(|(y, _)| y))
        .collect()
}

/// Writes restored images as 8-bit PNGs named after their sources.
pub fn write_restored(images: &[ImageTensor], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        data::write_png(img, &dir.join(format!("{}.png", img.id(i))))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(4, 4, 1, 0.5);
        let b = ImageTensor::filled(4, 4, 1, 0.6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &ImageTensor::filled(4, 2, 1, 0.5), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn infinite_psnr_survives_json() {
        let r = EvalReport::from_scores(
            "x",
            1,
            vec![ImageScore { id: "a".into(), psnr_noisy: 20.0, psnr_restored: f64::INFINITY }],
        );
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(r.to_csv().contains("> 99"));
    }

    #[test]
    fn filters_keep_constants() {
        let img = ImageTensor::filled(9, 7, 1, 0.4);
        for kind in [FilterKind::Gaussian, FilterKind::Median, FilterKind::Lee] {
            let out = baseline_filter(&img, kind, 5).unwrap();
            for v in &out.values {
                assert!((v - 0.4).abs() < 1e-6, "{kind:?}");
            }
        }
        assert!(baseline_filter(&img, FilterKind::Median, 4).is_err());
        assert!(baseline_filter(&img, FilterKind::Median, 1).is_err());
    }

    #[test]
    fn median_removes_hot_pixel() {
        let mut img = ImageTensor::filled(7, 7, 1, 0.2);
        img.values[3 * 7 + 3] = 1.0;
        let out = baseline_filter(&img, FilterKind::Median, 3).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.2));
    }

    #[test]
    fn latent_reference_symmetry() {
        let z = LatentMap::new(Feature::from_vec(1, 1, 3, vec![1.0, -2.0, 0.5]), LatentMode::Inference);
        let mut neg = z.clone();
        neg.values.data.iter_mut().for_each(|v| *v = -*v);
        let r = latent_reference(&[z.clone(), neg]).unwrap();
        assert!(r.values.data.iter().all(|&v| v == 0.0));
        let single = latent_reference(std::slice::from_ref(&z)).unwrap();
        assert_eq!(single.values.data, z.values.data);
        assert!(latent_reference::<f64>(&[]).is_err());
    }

    #[test]
    fn distances_of_identical_and_symmetric_latents() {
        let z = LatentMap::new(Feature::from_vec(1, 1, 2, vec![0.25, 0.75]), LatentMode::Inference);
        let all = vec![z.clone(), z.clone(), z];
        let r = latent_reference(&all).unwrap();
        let s = latent_distances(&all, &r).unwrap();
        assert!(s.d.iter().all(|&d| d == 0.0));
        assert_eq!(s.variance_d, 0.0);

        let a = LatentMap::new(Feature::from_vec(1, 1, 2, vec![1.0, 0.0]), LatentMode::Inference);
        let b = LatentMap::new(Feature::from_vec(1, 1, 2, vec![-1.0, 0.0]), LatentMode::Inference);
        let pair = vec![a, b];
        let s = latent_distances(&pair, &latent_reference(&pair).unwrap()).unwrap();
        assert_eq!(s.d[0], s.d[1]);
        assert_eq!(s.variance_d, 0.0);
        assert_eq!(s.dim, 2);
    }

    #[test]
    fn stub_denoisers() {
        let clean: Vec<ImageTensor> = data::synthetic_shapes(4, 16, 2);
        let split = DatasetSplit { train: vec![], test: clean, split_ratio: 0.8, seed: 0 };
        let spec = NoiseSpec::new(0.2, 0.0).unwrap();
        let pairs = eval_pairs(&split, Some(&spec), 5).unwrap();
        let ident = evaluate_pairs("identity", 5, &pairs, |y| Ok(y.clone())).unwrap();
        assert_eq!(ident.mean_restored, ident.mean_noisy);
        assert_eq!(ident.delta, 0.0);
        let lookup = |y: &ImageTensor| {
            let p = pairs.iter().find(|p| p.noisy.values == y.values).unwrap();
            Ok(p.clean.clone())
        };
        let perfect = evaluate_pairs("perfect", 5, &pairs, lookup).unwrap();
        assert_eq!(perfect.mean_restored, f64::INFINITY);
        assert_eq!(perfect.per_image.len(), 4);
    }

    #[test]
    fn observed_mode_requires_clean_refs() {
        let split = DatasetSplit {
            train: vec![],
            test: vec![ImageTensor::filled(8, 8, 1, 0.5)],
            split_ratio: 0.8,
            seed: 0,
        };
        assert!(eval_pairs(&split, None, 0).is_err());
    }
}
