//! Dual-path agreement training: loss terms, AdamW with global-norm
//! clipping, and the epoch loop with checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, DatasetSplit, ImageTensor};
use crate::error::{Error, Result};
use crate::model::{self, ImageScale, LatentMap, ModelConfig, ModelParameters};
use crate::noise;
use crate::seed;
use crate::tensor::{Feature, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kappa: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Dual-path input mixture plus agreement loss.
    pub encoder_mixture: bool,
    /// Latent mixture in front of the reconstruction network.
    pub recon_mixture: bool,
    /// Replaces the adaptive mixture sigma when set.
    pub fixed_sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 3e-3,
            weight_decay: 5e-4,
            clip_norm: 1e-2,
            epochs: 500,
            batch_size: 4,
            kappa: noise::DEFAULT_KAPPA,
            seed: 0,
            checkpoint_every: 50,
            encoder_mixture: true,
            recon_mixture: true,
            fixed_sigma: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_init, self.clip_norm, self.kappa]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr_init, clip_norm and kappa must be positive, weight_decay nonnegative".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("epochs, batch_size and checkpoint_every must be at least 1".into()));
        }
        if let Some(s) = self.fixed_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("fixed_sigma must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }

    fn sigma_for(&self, y: &ImageTensor) -> f64 {
        self.fixed_sigma
            .unwrap_or_else(|| noise::adaptive_sigma(y, self.kappa))
    }
}

/// Loss terms of one step; `total` is always `agreement + reconstruction`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub agreement: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(agreement: f64, reconstruction: f64) -> Self {
        LossBundle {
            agreement,
            reconstruction,
            total: agreement + reconstruction,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.agreement.is_finite() && self.reconstruction.is_finite()
    }
}

fn mse<T: Real>(a: &[T], b: &[T]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Mean squared difference between two latent maps.
pub fn agreement_loss<T: Real>(z1: &LatentMap<T>, z2: &LatentMap<T>) -> Result<f64> {
    if !z1.values.same_shape(&z2.values) {
        return Err(Error::ShapeMismatch("latent maps differ in shape".into()));
    }
    Ok(mse(&z1.values.data, &z2.values.data))
}

/// Mean squared difference between an estimate and the noisy observation.
pub fn reconstruction_loss(s_hat: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if s_hat.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "restored {:?} vs observation {:?}",
            s_hat.shape(),
            y.shape()
        )));
    }
    Ok(mse(&s_hat.values, &y.values))
}

/// Batch-mean agreement loss over paired latents.
pub fn batch_agreement_loss<T: Real>(pairs: &[(LatentMap<T>, LatentMap<T>)]) -> Result<f64> {
    let mut acc = 0.0;
    for (a, b) in pairs {
        acc += agreement_loss(a, b)?;
    }
    Ok(acc / pairs.len().max(1) as f64)
}

/// Linear annealing from `lr_init` at epoch 0 to zero at `total_epochs`.
pub fn lr_schedule(epoch: usize, total_epochs: usize, lr_init: f64) -> f64 {
    assert!(epoch <= total_epochs && total_epochs > 0, "epoch {epoch} out of 0..={total_epochs}");
    lr_init * (1.0 - epoch as f64 / total_epochs as f64)
}

pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let v = g.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let decay = T::lit(1.0 - lr * weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(ADAM_EPS);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p *= decay;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// One epoch's averaged losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub agreement: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParameters<f32>,
    pub optimizer: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let params = model::init_model(model_cfg, seed::derive(seed, "init", &[]))?;
        let optimizer = AdamW::new(&params);
        Ok(TrainState {
            params,
            optimizer,
            epoch: 0,
            seed,
            history: Vec::new(),
        })
    }
}

/// Training-mode switches and the per-item noise draws of one objective
/// evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PathOptions {
    pub encoder_mixture: bool,
    pub recon_mixture: bool,
}

impl From<&TrainConfig> for PathOptions {
    fn from(c: &TrainConfig) -> Self {
        PathOptions {
            encoder_mixture: c.encoder_mixture,
            recon_mixture: c.recon_mixture,
        }
    }
}

/// Loss and gradient contribution of a single observation, with gradients
/// scaled by `weight` (1 / batch size).
pub fn item_objective<T: Real>(
    params: &ModelParameters<T>,
    y: &ImageTensor,
    sigma: f64,
    item_seed: u64,
    opts: PathOptions,
    weight: f64,
) -> Result<(LossBundle, Vec<Vec<T>>)> {
    model::check_input(&params.config, y)?;
    let p = &params.values;
    let enc = &params.arch.encoder;
    let target = y.to_feature::<T>();
    let scale = ImageScale::for_model(&params.config, y);

    let mixed = |k: Option<u64>| {
        let mut x = target.clone();
        if let Some(k) = k {
            noise::noise_mixture_in_place(&mut x.data, sigma, seed::derive(item_seed, "encoder", &[k]));
        }
        scale.normalize(&mut x.data);
        x
    };
    let (x1, x2) = if opts.encoder_mixture {
        (mixed(Some(1)), Some(mixed(Some(2))))
    } else {
        (mixed(None), None)
    };
    let (z1, c1) = enc.forward(p, x1, true, None);
    let c1 = c1.expect("cache requested");
    let second = x2.map(|x| {
        let (z2, c2) = enc.forward(p, x, true, None);
        (z2, c2.expect("cache requested"))
    });
    let agreement = second.as_ref().map_or(0.0, |(z2, _)| mse(&z1.data, &z2.data));

    let mut z_hat = z1.clone();
    let latent_mult = if opts.recon_mixture {
        Some(noise::noise_mixture_in_place(
            &mut z_hat.data,
            sigma,
            seed::derive(item_seed, "latent", &[]),
        ))
    } else {
        None
    };
    let (mut s_hat, rc) = params.arch.recon.forward(p, z_hat, true, None);
    let rc = rc.expect("cache requested");
    scale.restore(&mut s_hat.data);
    let reconstruction = mse(&s_hat.data, &target.data);

    let mut grads = params.zeros_like();
    let img_scale = T::lit(2.0 * weight * scale.std / s_hat.data.len() as f64);
    let ds = Feature::from_vec(
        s_hat.channels,
        s_hat.height,
        s_hat.width,
        s_hat.data.iter().zip(&target.data).map(|(&a, &b)| img_scale * (a - b)).collect(),
    );
    let mut dz1 = params.arch.recon.backward(p, &mut grads, &rc, &ds);
    if let Some(mult) = latent_mult {
        for (d, m) in dz1.data.iter_mut().zip(mult) {
            *d *= m;
        }
    }
    if let Some((z2, c2)) = second {
        let lat_scale = T::lit(2.0 * weight / z1.data.len() as f64);
        let diff: Vec<T> = z1.data.iter().zip(&z2.data).map(|(&a, &b)| lat_scale * (a - b)).collect();
        for (d, &g) in dz1.data.iter_mut().zip(&diff) {
            *d += g;
        }
        let dz2 = Feature::from_vec(z2.channels, z2.height, z2.width, diff.into_iter().map(|g| -g).collect());
        enc.backward(p, &mut grads, &c2, &dz2);
    }
    enc.backward(p, &mut grads, &c1, &dz1);
    Ok((LossBundle::new(agreement, reconstruction), grads))
}

/// Batch-mean loss and gradients of the overall objective.
pub fn batch_objective<T: Real>(
    params: &ModelParameters<T>,
    batch: &[&ImageTensor],
    item_seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<(LossBundle, Vec<Vec<T>>)> {
    assert_eq!(batch.len(), item_seeds.len());
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let opts = PathOptions::from(cfg);
    let results: Vec<Result<(LossBundle, Vec<Vec<T>>)>> = batch
        .par_iter()
        .zip(item_seeds.par_iter())
        .map(|(y, &s)| item_objective(params, y, cfg.sigma_for(y), s, opts, weight))
        .collect();
    let mut grads = params.zeros_like();
    let (mut agree, mut rec) = (0.0, 0.0);
    // fixed reduction order keeps results independent of thread count
    for r in results {
        let (l, g) = r?;
        agree += l.agreement * weight;
        rec += l.reconstruction * weight;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    Ok((LossBundle::new(agree, rec), grads))
}

/// Per-item noise seed for the given epoch and training-set index.
pub fn item_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    seed::derive(run_seed, "item", &[epoch as u64, index as u64])
}

/// One optimizer update on `batch`: objective, global-norm clipping, AdamW.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&ImageTensor],
    item_seeds: &[u64],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBundle> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be nonnegative, got {lr}")));
    }
    let (loss, mut grads) = batch_objective(&state.params, batch, item_seeds, cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss:?} at epoch {} step {}",
            state.epoch, state.optimizer.step
        )));
    }
    clip_grad_norm(&mut grads, cfg.clip_norm);
    state
        .optimizer
        .update(&mut state.params.values, &grads, lr, cfg.weight_decay);
    if !state.params.all_finite() {
        return Err(Error::NonFinite(format!(
            "parameters diverged at epoch {} step {}",
            state.epoch, state.optimizer.step
        )));
    }
    Ok(loss)
}

/// Where and how `fit` persists progress.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed epochs (the run can be resumed later).
    pub stop_after: Option<usize>,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,lr,agreement,reconstruction,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.lr, r.agreement, r.reconstruction, r.total
        ));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Trains on the noisy observations in `split.train`.
pub fn fit(split: &DatasetSplit, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainState> {
    fit_with(split, model_cfg, train_cfg, &FitOptions::default())
}

pub fn fit_with(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<TrainState> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut state = match &opts.resume_from {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.state.params.config != *model_cfg {
                return Err(Error::Checkpoint("checkpoint model config differs from the requested one".into()));
            }
            ck.state
        }
        None => TrainState::new(model_cfg, cfg.seed)?,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let batch_seed = seed::derive(cfg.seed, "batches", &[]);
    let noise_seed = seed::derive(cfg.seed, "train-noise", &[]);
    let last = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < last {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr_init);
        let (mut agree, mut rec, mut seen) = (0.0, 0.0, 0usize);
        for idx in data::batch_indices(split.train.len(), cfg.batch_size, batch_seed, epoch as u64) {
            let batch: Vec<&ImageTensor> = idx.iter().map(|&i| &split.train[i]).collect();
            let seeds: Vec<u64> = idx.iter().map(|&i| item_seed(noise_seed, epoch, i)).collect();
            let loss = match train_step(&mut state, &batch, &seeds, cfg, lr) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = &opts.out_dir {
                        let dump = dir.join("diverged.ckpt");
                        if let Err(de) = checkpoint::save(&dump, &state, cfg) {
                            log::error!("could not write diagnostic dump: {de}");
                        } else {
                            log::error!("wrote diagnostic state to {}", dump.display());
                        }
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            agree += loss.agreement * batch.len() as f64;
            rec += loss.reconstruction * batch.len() as f64;
            seen += batch.len();
        }
        let n = seen as f64;
        let (agreement, reconstruction) = (agree / n, rec / n);
        state.epoch += 1;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            lr,
            agreement,
            reconstruction,
            total: agreement + reconstruction,
        });
        log::info!(
            "epoch {}/{} lr {:.2e} agreement {:.6} reconstruction {:.6}",
            state.epoch,
            cfg.epochs,
            lr,
            agreement,
            reconstruction
        );
        if let Some(dir) = &opts.out_dir {
            if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
                checkpoint::save(&dir.join(checkpoint_name(state.epoch)), &state, cfg)?;
            }
            write_history(&dir.join(HISTORY_FILE), &state.history)?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        if state.epoch == cfg.epochs {
            checkpoint::save(&dir.join(FINAL_CHECKPOINT), &state, cfg)?;
        }
    }
    Ok(state)
}

/// Latest `epoch_*.ckpt` in a directory.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found.pop()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatentMode;

    fn lat(v: Vec<f64>) -> LatentMap<f64> {
        LatentMap::new(Feature::from_vec(1, 1, v.len(), v), LatentMode::Inference)
    }

    #[test]
    fn loss_examples() {
        assert_eq!(agreement_loss(&lat(vec![0.3, -1.0]), &lat(vec![0.3, -1.0])).unwrap(), 0.0);
        assert_eq!(agreement_loss(&lat(vec![0.0; 5]), &lat(vec![1.0; 5])).unwrap(), 1.0);
        assert!(agreement_loss(&lat(vec![0.0; 5]), &lat(vec![1.0; 4])).is_err());

        let a = ImageTensor::filled(4, 4, 1, 0.2);
        let b = ImageTensor::filled(4, 4, 1, 0.5);
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.09).abs() < 1e-7);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert!(reconstruction_loss(&a, &ImageTensor::filled(4, 8, 1, 0.0)).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 500, 3e-3), 3e-3);
        assert_eq!(lr_schedule(500, 500, 3e-3), 0.0);
        assert!((lr_schedule(250, 500, 3e-3) - 1.5e-3).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0f64, 4.0], vec![12.0]];
        let before = clip_grad_norm(&mut g, 1e-2);
        assert_eq!(before, 13.0);
        assert!((global_norm(&g) - 1e-2).abs() < 1e-9);
        let mut small = vec![vec![1e-4f64]];
        clip_grad_norm(&mut small, 1e-2);
        assert_eq!(small[0][0], 1e-4);
    }

    #[test]
    fn adamw_zero_lr_is_frozen() {
        let cfg = ModelConfig::with_widths([2, 3, 4, 5]);
        let mut p = model::init_model(&cfg, 1).unwrap();
        let before = p.values.clone();
        let mut opt = AdamW::new(&p);
        let grads: Vec<Vec<f32>> = p.values.iter().map(|v| vec![0.5; v.len()]).collect();
        opt.update(&mut p.values, &grads, 0.0, 5e-4);
        assert_eq!(p.values, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr_init: -1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
