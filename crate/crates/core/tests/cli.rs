use std::fs;
use std::path::Path;
use std::process::Command;

use despeckle::cli::main_with_args;
use despeckle::eval::EvalReport;

const TINY_CONFIG: &str = r#"{
  "seed": 5,
  "data": {"shapes": 6, "resolution": 16},
  "noise": {"alpha_level": 0.2, "alpha_jitter": 0.05},
  "model": {"base_width": 4, "stage_widths": [4, 8, 12, 16], "latent_channels": 4},
  "train": {"epochs": 2, "batch_size": 2, "checkpoint_every": 1},
  "eval": {"baselines": ["lee", "median"], "window": 3}
}"#;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["despeckle"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

#[test]
fn full_pipeline_from_synthesis_to_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("out");
    let out_s = out.display().to_string();

    assert_eq!(run(&["--config", &cfg, "--out", &out_s, "synth"]), 0);
    let noisy = out.join("synth/noisy");
    let manifest = fs::read_to_string(noisy.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        let alpha: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.15..=0.25).contains(&alpha), "alpha {alpha}");
    }
    assert!(out.join("synth/run_config.json").exists());
    assert_eq!(fs::read_dir(&noisy).unwrap().count(), 7);

    // rerun is byte-identical
    let before = fs::read(noisy.join("manifest.csv")).unwrap();
    let raw = fs::read(out.join("synth/noisy_raw/shape_0000.spkt")).unwrap();
    assert_eq!(run(&["--config", &cfg, "--out", &out_s, "synth"]), 0);
    assert_eq!(fs::read(noisy.join("manifest.csv")).unwrap(), before);
    assert_eq!(fs::read(out.join("synth/noisy_raw/shape_0000.spkt")).unwrap(), raw);

    let noisy_s = noisy.display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out", &out_s, "--noisy-dir", &noisy_s, "train"]), 0);
    let history = fs::read_to_string(out.join("train/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,lr,agreement,reconstruction,total"));
    for f in ["final.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt", "run_config.json"] {
        assert!(out.join("train").join(f).exists(), "{f}");
    }

    assert_eq!(run(&["--config", &cfg, "--out", &out_s, "--noisy-dir", &noisy_s, "eval"]), 0);
    let report = EvalReport::read(&out.join("eval/report.json")).unwrap();
    assert_eq!(report.per_image.len(), 1);
    assert_eq!(report.delta, report.mean_restored - report.mean_noisy);
    assert!(out.join("eval/report.csv").exists());
    let baselines: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval/baselines.json")).unwrap()).unwrap();
    assert_eq!(baselines.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_dir(out.join("eval/restored")).unwrap().count(), 1);

    assert_eq!(run(&["--config", &cfg, "--out", &out_s, "--noisy-dir", &noisy_s, "latent"]), 0);
    let latent: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("latent/latent.json")).unwrap()).unwrap();
    assert!(latent["variance_d"].as_f64().unwrap() >= 0.0);

    assert_eq!(run(&["--config", &cfg, "--out", &out_s, "--input", &noisy_s, "denoise"]), 0);
    assert_eq!(fs::read_dir(out.join("denoise")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    }).count(), 6);

    let report_path = out.join("eval/report.json").display().to_string();
    assert_eq!(run(&["--out", &out_s, "plot", &report_path, &report_path]), 0);
    let svg = fs::read_to_string(out.join("plot/plot.svg")).unwrap();
    assert_eq!(svg.matches("class=\"bar noisy\"").count(), 2);
    assert!(out.join("plot/plot.png").exists());
}

#[test]
fn in_memory_synthesis_matches_the_synth_folder() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a").display().to_string();
    let b = tmp.path().join("b").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out", &a, "synth"]), 0);
    let noisy = format!("{a}/synth/noisy");
    assert_eq!(run(&["--config", &cfg, "--out", &a, "--noisy-dir", &noisy, "train"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out", &b, "train"]), 0);
    let h = |d: &str| fs::read(format!("{d}/train/history.csv")).unwrap();
    assert_eq!(h(&a), h(&b));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("out").display().to_string();
    assert_eq!(run(&["--out", &out, "plot"]), 2);
    assert_eq!(run(&["--config", &cfg, "--out", &out, "--resolution", "12", "synth"]), 2);
    assert_eq!(run(&["--config", &cfg, "--out", &out, "--alpha=-1", "synth"]), 2);
    assert_eq!(run(&["--bogus-flag", "synth"]), 2);
    assert_eq!(run(&["--config", "/nonexistent/config.json", "synth"]), 2);
    let missing = tmp.path().join("missing").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out", &out, "--clean-dir", &missing, "synth"]), 3);
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["--config", &cfg, "--out", &out, "--clean-dir", &empty.display().to_string(), "synth"]), 3);

    let diverge = tmp.path().join("diverge.json");
    fs::write(&diverge, TINY_CONFIG.replace("\"epochs\": 2", "\"epochs\": 2, \"lr_init\": 1e30")).unwrap();
    let diverge_out = tmp.path().join("div");
    let code = run(&["--config", &diverge.display().to_string(), "--out", &diverge_out.display().to_string(), "train"]);
    assert_eq!(code, 4);
    assert!(diverge_out.join("train/diverged.ckpt").exists());
}

#[test]
fn binary_reports_usage_errors() {
    let status = Command::new(env!("CARGO_BIN_EXE_despeckle")).arg("plot").env("DESPECKLE_OUT", std::env::temp_dir()).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let help = Command::new(env!("CARGO_BIN_EXE_despeckle")).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for cmd in ["synth", "train", "denoise", "eval", "latent", "plot", "sweep"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
