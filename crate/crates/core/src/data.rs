//! Image ingestion, splitting and batching.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Feature, Real};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const SPKT_MAGIC: &[u8; 4] = b"SPKT";

/// H x W x C image with values nominally in `[0, 1]`.
///
/// Values are stored channel-major (all of channel 0, then channel 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub source_path: Option<PathBuf>,
    /// Clean image this observation was synthesized from, if any.
    pub clean_ref: Option<Box<ImageTensor>>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite values".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            values,
            source_path: None,
            clean_ref: None,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageTensor::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid constant image")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len() as f64
    }

    /// Copy without the attached clean reference.
    pub fn without_ref(&self) -> ImageTensor {
        ImageTensor {
            clean_ref: None,
            ..self.clone()
        }
    }

    pub fn clean(&self) -> Option<&ImageTensor> {
        self.clean_ref.as_deref()
    }

    pub fn clipped(&self) -> ImageTensor {
        let mut out = self.without_ref();
        for v in &mut out.values {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn to_feature<T: Real>(&self) -> Feature<T> {
        Feature::from_vec(
            self.channels,
            self.height,
            self.width,
            self.values.iter().map(|&v| T::lit(f64::from(v))).collect(),
        )
    }

    pub fn from_feature<T: Real>(f: &Feature<T>) -> ImageTensor {
        ImageTensor {
            height: f.height,
            width: f.width,
            channels: f.channels,
            values: f.data.iter().map(|v| v.as_f64() as f32).collect(),
            source_path: None,
            clean_ref: None,
        }
    }

    /// File stem of the source path, or `fallback`.
    pub fn id(&self, fallback: usize) -> String {
        self.source_path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image_{fallback:04}"))
    }
}

/// Train/test partition of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImageTensor>,
    pub test: Vec<ImageTensor>,
    pub split_ratio: f64,
    pub seed: u64,
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || !resolution.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "resolution must be a positive multiple of 8, got {resolution}"
        )));
    }
    Ok(())
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "spkt")
    )
}

fn to_luminance(img: &DynamicImage) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    let (w, h) = (img.width(), img.height());
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => {
            let gray = img.to_luma32f();
            ImageBuffer::from_raw(w, h, gray.into_raw()).expect("luma buffer")
        }
        _ => {
            let rgb = img.to_rgb32f();
            let data = rgb
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    (LUMA_WEIGHTS[0] * f64::from(r)
                        + LUMA_WEIGHTS[1] * f64::from(g)
                        + LUMA_WEIGHTS[2] * f64::from(b)) as f32
                })
                .collect();
            ImageBuffer::from_raw(w, h, data).expect("luma buffer")
        }
    }
}

/// Loads one image file as a single-channel `resolution x resolution` tensor.
pub fn load_image(path: &Path, resolution: usize) -> Result<ImageTensor> {
    check_resolution(resolution)?;
    let is_raw = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("spkt"));
    let gray = if is_raw {
        let t = read_spkt(path)?;
        let plane: Vec<f32> = if t.channels == 1 {
            t.values.clone()
        } else {
            let p = t.height * t.width;
            (0..p)
                .map(|i| {
                    (0..t.channels.min(3))
                        .map(|c| LUMA_WEIGHTS[c] * f64::from(t.values[c * p + i]))
                        .sum::<f64>() as f32
                })
                .collect()
        };
        ImageBuffer::from_raw(t.width as u32, t.height as u32, plane).expect("luma buffer")
    } else {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        to_luminance(&img)
    };
    let r = resolution as u32;
    let gray = if gray.width() == r && gray.height() == r {
        gray
    } else {
        imageops::resize(&gray, r, r, FilterType::Triangle)
    };
    let mut t = ImageTensor::new(resolution, resolution, 1, gray.into_raw())?;
    t.source_path = Some(path.to_path_buf());
    Ok(t)
}

/// Lists supported image files in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every decodable image in `dir`, resized to `resolution` squared and
/// converted to luminance in `[0, 1]`. Undecodable files are skipped with a
/// warning.
pub fn load_folder(dir: &Path, resolution: usize) -> Result<Vec<ImageTensor>> {
    check_resolution(resolution)?;
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    let loaded: Vec<Result<ImageTensor>> = paths
        .par_iter()
        .map(|p| load_image(p, resolution))
        .collect();
    let mut out = Vec::with_capacity(loaded.len());
    for (path, res) in paths.iter().zip(loaded) {
        match res {
            Ok(t) => out.push(t),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "none of the {} files in {} could be decoded",
            paths.len(),
            dir.display()
        )));
    }
    Ok(out)
}

fn check_ratio(ratio: f64, n: usize) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 images to split, got {n}")));
    }
    Ok(())
}

fn train_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Seeded shuffle followed by a prefix/suffix split; `|train| = round(ratio * N)`.
pub fn split(dataset: Vec<ImageTensor>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    check_ratio(ratio, dataset.len())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(partition(dataset, &order, ratio, seed))
}

/// Split that keeps input order: the last `1 - ratio` fraction becomes the
/// test set.
pub fn split_contiguous(dataset: Vec<ImageTensor>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    check_ratio(ratio, dataset.len())?;
    let order: Vec<usize> = (0..dataset.len()).collect();
    Ok(partition(dataset, &order, ratio, seed))
}

fn partition(dataset: Vec<ImageTensor>, order: &[usize], ratio: f64, seed: u64) -> DatasetSplit {
    let n_train = train_count(ratio, dataset.len());
    let mut slots: Vec<Option<ImageTensor>> = dataset.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index used once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let test = order[n_train..].iter().map(|&i| take(i)).collect();
    DatasetSplit {
        train,
        test,
        split_ratio: ratio,
        seed,
    }
}

/// Epoch-seeded shuffled index batches over `n` items; the final partial
/// batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "batches", &[epoch]));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn make_batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<&ImageTensor>> {
    batch_indices(split.train.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|b| b.into_iter().map(|i| &split.train[i]).collect())
        .collect()
}

/// Writes an 8-bit PNG, clipping values to `[0, 1]`.
pub fn write_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let p = image.height * image.width;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (image.width as u32, image.height as u32);
    let dynimg = match image.channels {
        1 => DynamicImage::ImageLuma8(
            ImageBuffer::from_raw(w, h, image.values.iter().map(|&v| q(v)).collect())
                .expect("luma buffer"),
        ),
        3 => {
            let mut buf = Vec::with_capacity(p * 3);
            for i in 0..p {
                for c in 0..3 {
                    buf.push(q(image.values[c * p + i]));
                }
            }
            DynamicImage::ImageRgb8(ImageBuffer::from_raw(w, h, buf).expect("rgb buffer"))
        }
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNG output supports 1 or 3 channels, got {c}"
            )))
        }
    };
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes the lossless raw format: `"SPKT"`, u32 H, u32 W, u32 C (little
/// endian), then H*W*C little-endian f32 values in interleaved H, W, C order.
pub fn write_spkt(image: &ImageTensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * image.len());
    buf.extend_from_slice(SPKT_MAGIC);
    for d in [image.height, image.width, image.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let p = image.height * image.width;
    for i in 0..p {
        for c in 0..image.channels {
            buf.extend_from_slice(&image.values[c * p + i].to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_spkt(path: &Path) -> Result<ImageTensor> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..4] != SPKT_MAGIC {
        return Err(Error::Data(format!("{} is not an SPKT tensor", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if buf.len() != 16 + 4 * n {
        return Err(Error::Data(format!(
            "{}: header says {h}x{w}x{c} but payload has {} bytes",
            path.display(),
            buf.len() - 16
        )));
    }
    let p = h * w;
    let mut values = vec![0.0f32; n];
    for (k, chunk) in buf[16..].chunks_exact(4).enumerate() {
        let (i, ch) = (k / c, k % c);
        values[ch * p + i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    let mut t = ImageTensor::new(h, w, c, values)?;
    t.source_path = Some(path.to_path_buf());
    Ok(t)
}

/// Procedural grayscale scenes (smooth background plus a few flat ellipses
/// and rectangles), used for desk-scale training runs.
pub fn synthetic_shapes(count: usize, resolution: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "shapes", &[i as u64]));
            let r = resolution as f32;
            let base = rng.random_range(0.15..0.35f32);
            let (gx, gy) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
            let mut values: Vec<f32> = (0..resolution * resolution)
                .map(|k| {
                    let (y, x) = ((k / resolution) as f32 / r, (k % resolution) as f32 / r);
                    base + gx * (x - 0.5) + gy * (y - 0.5)
                })
                .collect();
            let n_shapes = rng.random_range(2..=4);
            for _ in 0..n_shapes {
                let level = rng.random_range(0.45..0.95f32);
                let (cx, cy) = (rng.random_range(0.2..0.8f32) * r, rng.random_range(0.2..0.8f32) * r);
                let (ax, ay) = (rng.random_range(0.08..0.25f32) * r, rng.random_range(0.08..0.25f32) * r);
                let ellipse = rng.random_bool(0.5);
                for (k, v) in values.iter_mut().enumerate() {
                    let (y, x) = ((k / resolution) as f32 + 0.5, (k % resolution) as f32 + 0.5);
                    let (dx, dy) = ((x - cx) / ax, (y - cy) / ay);
                    let inside = if ellipse {
                        dx * dx + dy * dy <= 1.0
                    } else {
                        dx.abs() <= 1.0 && dy.abs() <= 1.0
                    };
                    if inside {
                        *v = level;
                    }
                }
            }
            let mut t = ImageTensor::new(resolution, resolution, 1, values).expect("valid shape image");
            t.source_path = Some(PathBuf::from(format!("shape_{i:04}.png")));
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| {
                let mut t = ImageTensor::filled(8, 8, 1, i as f32 / n as f32);
                t.source_path = Some(PathBuf::from(format!("{i}.png")));
                t
            })
            .collect()
    }

    fn ids(v: &[ImageTensor]) -> Vec<String> {
        v.iter().enumerate().map(|(i, t)| t.id(i)).collect()
    }

    #[test]
    fn coil_sized_split() {
        let s = split(numbered(72), 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (58, 14));
        let train = ids(&s.train);
        assert!(ids(&s.test).iter().all(|t| !train.contains(t)));
    }

    #[test]
    fn smallest_split_and_determinism() {
        let s = split(numbered(2), 0.5, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
        let a = split(numbered(20), 0.8, 9).unwrap();
        let b = split(numbered(20), 0.8, 9).unwrap();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
    }

    #[test]
    fn split_rejects_bad_ratio() {
        assert!(split(numbered(10), 0.0, 1).is_err());
        assert!(split(numbered(10), 1.0, 1).is_err());
        assert!(split(numbered(1), 0.5, 1).is_err());
    }

    #[test]
    fn contiguous_split_keeps_tail_for_test() {
        let s = split_contiguous(numbered(10), 0.8, 0).unwrap();
        assert_eq!(ids(&s.test), vec!["8", "9"]);
    }

    #[test]
    fn batches_cover_train_set() {
        let b = batch_indices(58, 4, 1, 0);
        assert_eq!(b.len(), 15);
        assert_eq!(b.last().unwrap().len(), 2);
        assert_eq!(batch_indices(58, 58, 1, 0).len(), 1);

        let e0: Vec<usize> = batch_indices(58, 4, 1, 0).concat();
        let e1: Vec<usize> = batch_indices(58, 4, 1, 1).concat();
        assert_ne!(e0, e1);
        let (mut s0, mut s1) = (e0.clone(), e1.clone());
        s0.sort();
        s1.sort();
        assert_eq!(s0, (0..58).collect::<Vec<_>>());
        assert_eq!(s0, s1);
    }

    #[test]
    fn resolution_must_be_multiple_of_eight() {
        assert!(check_resolution(256).is_ok());
        assert!(check_resolution(100).is_err());
        assert!(check_resolution(0).is_err());
    }

    #[test]
    fn shapes_are_in_range_and_deterministic() {
        let a = synthetic_shapes(3, 32, 5);
        let b = synthetic_shapes(3, 32, 5);
        assert_eq!(a, b);
        for t in &a {
            assert!(t.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
