//! Command line front end: argument parsing, config merging and the
//! subcommands wiring the pipeline end to end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{RunConfig, OUT_ENV};
use crate::data::{self, DatasetSplit, ImageTensor};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{self, ModelParameters};
use crate::noise;
use crate::plot;
use crate::seed;
use crate::train::{self, FitOptions, TrainState};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Parser)]
#[command(name = "despeckle", version, about = "Self-supervised speckle noise removal without clean targets")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt clean images with synthetic speckle and write a manifest.
    Synth,
    /// Train the encoder and reconstruction networks on noisy observations.
    Train,
    /// Restore every image in the input folder with a trained checkpoint.
    Denoise,
    /// PSNR of noisy vs restored test images, plus classical baselines.
    Eval,
    /// Latent distance statistics of encoded noisy observations.
    Latent,
    /// Bar and line chart of one or more evaluation reports.
    Plot {
        /// report.json files, one group per file.
        reports: Vec<PathBuf>,
    },
    /// Retrain on growing training subsets and evaluate each.
    Sweep {
        /// Comma separated training-set sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
}

/// Flags shared by all subcommands; each overrides the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON config file with sections data, noise, model, train, eval.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Speckle strength (std of the multiplicative field).
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub alpha_jitter: Option<f64>,
    /// Scale of the input-adapted mixture sigma.
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Output root (default: $DESPECKLE_OUT, then ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub clean_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub noisy_dir: Option<PathBuf>,
    /// Use N procedural shape images as the clean dataset.
    #[arg(long, global = true)]
    pub shapes: Option<usize>,
    /// Input folder for `denoise`.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub no_encoder_mixture: bool,
    #[arg(long, global = true)]
    pub no_recon_mixture: bool,
    /// Keep file order and hold out the last fraction for testing.
    #[arg(long, global = true)]
    pub split_contiguous: bool,
}

impl Overrides {
    /// Config file (if any), then flags, then derived fields.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.noise.alpha_level = v;
        }
        if let Some(v) = self.alpha_jitter {
            cfg.noise.alpha_jitter = v;
        }
        if let Some(v) = self.kappa {
            cfg.train.kappa = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.resolution {
            cfg.data.resolution = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.clean_dir {
            cfg.data.clean_dir = Some(v.clone());
        }
        if let Some(v) = &self.noisy_dir {
            cfg.data.noisy_dir = Some(v.clone());
        }
        if let Some(v) = self.shapes {
            cfg.data.shapes = Some(v);
        }
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if self.no_encoder_mixture {
            cfg.train.encoder_mixture = false;
        }
        if self.no_recon_mixture {
            cfg.train.recon_mixture = false;
        }
        if self.split_contiguous {
            cfg.data.split_contiguous = true;
        }
        cfg.resolve()
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Plot { reports } = &cli.command {
        let out = cli
            .overrides
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(crate::config::DEFAULT_OUT));
        return cmd_plot(reports, &out.join("plot")).map(|_| ());
    }
    let cfg = cli.overrides.resolve()?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg).map(|_| ()),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Denoise => cmd_denoise(&cfg).map(|_| ()),
        Command::Eval => cmd_eval(&cfg).map(|_| ()),
        Command::Latent => cmd_latent(&cfg).map(|_| ()),
        Command::Sweep { sizes } => {
            let mut cfg = cfg;
            if let Some(s) = sizes {
                cfg.eval.sweep_sizes = s.clone();
            }
            cmd_sweep(&cfg).map(|_| ())
        }
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_name(cfg: &RunConfig) -> String {
    let dir = cfg.data.noisy_dir.as_ref().or(cfg.data.clean_dir.as_ref());
    match (dir, cfg.data.shapes) {
        (Some(d), _) => d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        (None, Some(_)) => "shapes".into(),
        (None, None) => "dataset".into(),
    }
}

/// Clean images from the configured source (procedural shapes or a folder).
pub fn load_clean(cfg: &RunConfig) -> Result<Vec<ImageTensor>> {
    match (&cfg.data.clean_dir, cfg.data.shapes) {
        (Some(dir), _) => data::load_folder(dir, cfg.data.resolution),
        (None, Some(n)) => Ok(data::synthetic_shapes(
            n,
            cfg.data.resolution,
            seed::derive(cfg.seed, "shapes", &[]),
        )),
        (None, None) => Err(Error::Config(
            "no data source: set data.clean_dir, data.noisy_dir or data.shapes".into(),
        )),
    }
}

/// Noisy observations for training/evaluation. With `data.noisy_dir` they
/// are read from disk (paired with clean references when a manifest exists);
/// otherwise clean images are corrupted in memory with the synthesis seed.
pub fn load_observations(cfg: &RunConfig) -> Result<Vec<ImageTensor>> {
    if let Some(dir) = &cfg.data.noisy_dir {
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            return read_manifest_pairs(&manifest, cfg.data.resolution);
        }
        return data::load_folder(dir, cfg.data.resolution);
    }
    let clean = load_clean(cfg)?;
    eval::synthesize_all(&clean, &cfg.noise, cfg.synth_seed())
}

fn read_manifest_pairs(manifest: &Path, resolution: usize) -> Result<Vec<ImageTensor>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            return Err(Error::Data(format!("{}:{}: malformed row", manifest.display(), lineno + 1)));
        }
        let mut noisy = data::load_image(&dir.join(cols[1]), resolution)?;
        noisy.source_path = Some(PathBuf::from(cols[0]));
        let clean = data::load_image(&dir.join(cols[2]), resolution)?;
        noisy.clean_ref = Some(Box::new(clean));
        out.push(noisy);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no images", manifest.display())));
    }
    Ok(out)
}

pub fn make_split(cfg: &RunConfig, images: Vec<ImageTensor>) -> Result<DatasetSplit> {
    if cfg.data.split_contiguous {
        data::split_contiguous(images, cfg.data.split_ratio, cfg.split_seed())
    } else {
        data::split(images, cfg.data.split_ratio, cfg.split_seed())
    }
}

fn load_params(cfg: &RunConfig) -> Result<ModelParameters<f32>> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir().join("train").join(train::FINAL_CHECKPOINT));
    Ok(checkpoint::load(&path)?.state.params)
}

pub struct SynthOutput {
    pub dir: PathBuf,
    pub alphas: Vec<f64>,
}

/// Writes 8-bit noisy PNGs plus `manifest.csv` to `synth/noisy`, lossless
/// noisy copies to `synth/noisy_raw` and clean references to `synth/clean`.
/// Manifest columns: noisy, noisy_raw, clean, source, alpha.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    let clean = load_clean(cfg)?;
    let root = cfg.out_dir().join("synth");
    let noisy_dir = root.join("noisy");
    let raw_dir = root.join("noisy_raw");
    let clean_dir = root.join("clean");
    for d in [&noisy_dir, &raw_dir, &clean_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    cfg.persist(&root)?;
    let synth_seed = cfg.synth_seed();
    let rows: Vec<Result<(String, f64)>> = clean
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let id = s.id(i);
            let (y, alpha) = noise::synth_speckle(s, &cfg.noise, seed::derive(synth_seed, "image", &[i as u64]))?;
            data::write_png(&y, &noisy_dir.join(format!("{id}.png")))?;
            data::write_spkt(&y, &raw_dir.join(format!("{id}.spkt")))?;
            data::write_spkt(&s.without_ref(), &clean_dir.join(format!("{id}.spkt")))?;
            let source = s.source_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            Ok((
                format!("{id}.png,../noisy_raw/{id}.spkt,../clean/{id}.spkt,{source},{alpha}\n"),
                alpha,
            ))
        })
        .collect();
    let mut manifest = String::from("noisy,noisy_raw,clean,source,alpha\n");
    let mut alphas = Vec::with_capacity(rows.len());
    for r in rows {
        let (line, alpha) = r?;
        manifest.push_str(&line);
        alphas.push(alpha);
    }
    write_text(&noisy_dir.join(MANIFEST_FILE), &manifest)?;
    log::info!("wrote {} noisy observations to {}", alphas.len(), noisy_dir.display());
    Ok(SynthOutput { dir: noisy_dir, alphas })
}

/// Trains on the training split; resumes when `checkpoint` is set.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainState> {
    let split = make_split(cfg, load_observations(cfg)?)?;
    let dir = cfg.out_dir().join("train");
    cfg.persist(&dir)?;
    log::info!(
        "training on {} observations ({} held out), {} parameters",
        split.train.len(),
        split.test.len(),
        model::init_model(&cfg.model, 0)?.count()
    );
    let opts = FitOptions {
        out_dir: Some(dir),
        resume_from: cfg.checkpoint.clone(),
        stop_after: None,
    };
    train::fit_with(&split, &cfg.model, &cfg.train, &opts)
}

/// Restores every image in `input` (or `data.noisy_dir`) to PNG.
pub fn cmd_denoise(cfg: &RunConfig) -> Result<Vec<ImageTensor>> {
    let params = load_params(cfg)?;
    let input = cfg
        .input
        .clone()
        .or_else(|| cfg.data.noisy_dir.clone())
        .ok_or_else(|| Error::Config("denoise needs --input or data.noisy_dir".into()))?;
    let images = data::load_folder(&input, cfg.data.resolution)?;
    let restored: Vec<ImageTensor> = images
        .par_iter()
        .map(|y| model::denoise(&params, y))
        .collect::<Result<_>>()?;
    let dir = cfg.out_dir().join("denoise");
    cfg.persist(&dir)?;
    eval::write_restored(&restored, &dir)?;
    Ok(restored)
}

/// Evaluates the checkpoint on the test split. Returns `None` for real data
/// without clean references (restored images are still written).
pub fn cmd_eval(cfg: &RunConfig) -> Result<Option<EvalReport>> {
    let params = load_params(cfg)?;
    let split = make_split(cfg, load_observations(cfg)?)?;
    let dir = cfg.out_dir().join("eval");
    cfg.persist(&dir)?;
    if split.test.iter().any(|t| t.clean().is_none()) {
        log::warn!("test observations have no clean references; writing restored images only");
        let restored: Vec<ImageTensor> = split
            .test
            .par_iter()
            .map(|y| model::denoise(&params, y))
            .collect::<Result<_>>()?;
        eval::write_restored(&restored, &dir.join("restored"))?;
        return Ok(None);
    }
    let pairs = eval::eval_pairs(&split, None, cfg.eval_seed())?;
    let name = dataset_name(cfg);
    let report = eval::evaluate_pairs(&name, cfg.eval_seed(), &pairs, |y| model::denoise(&params, y))?;
    report.write(&dir)?;
    let baselines: Vec<EvalReport> = cfg
        .eval
        .baselines
        .iter()
        .map(|&kind| {
            let label = serde_json::to_value(kind)?.as_str().unwrap_or("filter").to_string();
            eval::evaluate_pairs(&label, cfg.eval_seed(), &pairs, |y| eval::baseline_filter(y, kind, cfg.eval.window))
        })
        .collect::<Result<_>>()?;
    let path = dir.join("baselines.json");
    write_text(&path, &serde_json::to_string_pretty(&baselines)?)?;
    if cfg.eval.write_images {
        let restored: Vec<ImageTensor> = pairs
            .par_iter()
            .map(|p| {
                let mut r = model::denoise(&params, &p.noisy)?;
                r.source_path = Some(PathBuf::from(format!("{}.png", p.id)));
                Ok(r)
            })
            .collect::<Result<_>>()?;
        eval::write_restored(&restored, &dir.join("restored"))?;
    }
    log::info!(
        "{name}: noisy {} dB -> restored {} dB ({:+.2} dB)",
        eval::format_db(report.mean_noisy),
        eval::format_db(report.mean_restored),
        report.delta
    );
    Ok(Some(report))
}

#[derive(Debug, Serialize)]
struct LatentFile<'a> {
    alpha_level: f64,
    alpha_jitter: f64,
    #[serde(flatten)]
    stats: eval::LatentSummary<'a>,
}

/// Encodes every observation and writes `latent.json`.
pub fn cmd_latent(cfg: &RunConfig) -> Result<eval::LatentStats> {
    let params = load_params(cfg)?;
    let observations = load_observations(cfg)?;
    let stats = eval::latent_analysis_observed(&params, &observations)?;
    let dir = cfg.out_dir().join("latent");
    cfg.persist(&dir)?;
    let file = LatentFile {
        alpha_level: cfg.noise.alpha_level,
        alpha_jitter: cfg.noise.alpha_jitter,
        stats: stats.summary(),
    };
    write_text(&dir.join("latent.json"), &serde_json::to_string_pretty(&file)?)?;
    log::info!("variance of latent distances over {} samples: {:.6}", stats.d.len(), stats.variance_d);
    Ok(stats)
}

/// Reads the given reports and writes `plot.svg` / `plot.png` into `dir`.
pub fn cmd_plot(reports: &[PathBuf], dir: &Path) -> Result<Vec<EvalReport>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one report file".into()));
    }
    let loaded: Vec<EvalReport> = reports.iter().map(|p| EvalReport::read(p)).collect::<Result<_>>()?;
    plot::write_plot(&loaded, dir, "plot")?;
    Ok(loaded)
}

/// Sample-efficiency sweep over `eval.sweep_sizes`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<(usize, EvalReport)>> {
    let split = make_split(cfg, load_clean(cfg)?)?;
    let sizes: Vec<usize> = cfg
        .eval
        .sweep_sizes
        .iter()
        .copied()
        .filter(|&n| n <= split.train.len())
        .collect();
    if sizes.is_empty() {
        return Err(Error::Config(format!(
            "no sweep size fits the {} training images",
            split.train.len()
        )));
    }
    let results = eval::sample_efficiency(&split, &sizes, &cfg.model, &cfg.train, &cfg.noise, cfg.seed)?;
    let dir = cfg.out_dir().join("sweep");
    cfg.persist(&dir)?;
    let reports: Vec<EvalReport> = results.iter().map(|(_, r)| r.clone()).collect();
    write_text(&dir.join("sweep.json"), &serde_json::to_string_pretty(&results)?)?;
    plot::write_plot(&reports, &dir, "sweep")?;
    Ok(results)
}
