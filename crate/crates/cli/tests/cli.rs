use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use garmenttrack::config::{ModelConfig, RunConfig};
use garmenttrack::synth::{Category, Script};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_garmenttrack"));
    c.env_remove("GT_DATA_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::scaled(16, 8);
    cfg.model.encoder.voxel_size = 0.03;
    cfg.data.categories = vec![Category::Shirt];
    cfg.data.scripts = vec![Script::FoldLr];
    cfg.data.instances = 3;
    cfg.data.sequences_per_instance = 1;
    cfg.data.frames = 8;
    cfg.data.template_resolution = 8;
    cfg.data.generator.points_per_frame = 96;
    cfg.data.generator.image_resolution = 32;
    cfg.train.pc_samples = 48;
    cfg.train.mesh_samples = 48;
    cfg.train.warp_queries = 32;
    cfg.train.batch_size = 2;
    cfg.train.epochs = 1;
    cfg.track.pc_samples = 48;
    cfg.track.mesh_samples = 48;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "json")).collect();
    v.sort();
    v
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root, &tiny_config());
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");

    assert!(run(&["--config", s(&cfg), "generate", "--out", s(&data)]).status.success());
    assert!(data.join("splits.json").exists() || fs::read_dir(&data).unwrap().count() > 1);

    let out = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("epoch 1"));
    assert!(ckpt.exists());

    for init in ["ground_truth", "perturbed"] {
        let preds = root.join(format!("pred_{init}"));
        let out = run(&["track", "--checkpoint", s(&ckpt), "--data", s(&data), "--init", init, "--out", s(&preds)]);
        assert!(out.status.success(), "track with {init} init failed");
        assert!(fs::read_dir(&preds).unwrap().count() > 0);
    }

    let reports = root.join("reports");
    let preds = root.join("pred_perturbed");
    let out = run(&["eval", "--data", s(&data), "--predictions", s(&preds), "--thresholds", "3,5,10", "--out", s(&reports)]);
    assert!(out.status.success());
    assert!(reports.join("summary.json").exists());
    assert!(reports.join("metrics.svg").exists());

    let per_seq: Vec<PathBuf> = json_files(&reports).into_iter().filter(|p| !p.ends_with("summary.json")).collect();
    assert!(!per_seq.is_empty());
    let svg = root.join("plot.svg");
    let mut args = vec!["plot", "--out", s(&svg), "--input"];
    args.extend(per_seq.iter().map(|p| s(p)));
    assert!(run(&args).status.success());
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));

    let sweeps = root.join("sweeps");
    let out = run(&["eval", "--data", s(&data), "--sweep", "noise", "--checkpoint", s(&ckpt), "--out", s(&sweeps)]);
    assert!(out.status.success());
    let sweep_json = sweeps.join("sweep_noise.json");
    assert!(sweep_json.exists());
    assert!(sweeps.join("sweep_noise.svg").exists());

    let svg = root.join("sweep.svg");
    assert!(run(&["plot", "--out", s(&svg), "--input", s(&sweep_json)]).status.success());
    assert!(svg.exists());
}

#[test]
fn generate_is_deterministic_in_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.data.frames = 4;
    let cfg = write_config(tmp.path(), &cfg);
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();
    for (d, seed) in dirs.iter().zip(["5", "5", "6"]) {
        assert!(run(&["--config", s(&cfg), "--seed", seed, "generate", "--out", s(d)]).status.success());
    }
    let manifest = |d: &Path| {
        let index = garmenttrack::dataset::SplitIndex::read(d).unwrap();
        let first = &index.split("train")[0];
        let seq = garmenttrack::dataset::read_dataset(&d.join(first)).unwrap();
        seq.frames[1].points.clone()
    };
    assert_eq!(manifest(&dirs[0]), manifest(&dirs[1]));
    assert_ne!(manifest(&dirs[0]), manifest(&dirs[2]));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let bad = root.join("bad.json");
    fs::write(&bad, "{\"bins\": 7}").unwrap();
    let out = run(&["--config", s(&bad), "generate", "--out", s(&root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["train", "--data", s(&root.join("missing")), "--out", s(&root.join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));

    let mut cfg = tiny_config();
    cfg.data.frames = 4;
    cfg.train.learning_rate = 1e300;
    let cfg = write_config(root, &cfg);
    let data = root.join("data");
    assert!(run(&["--config", s(&cfg), "generate", "--out", s(&data)]).status.success());
    let out = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&root.join("m.ckpt")), "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_data_root_is_reported() {
    let out = bin().args(["generate"]).output().unwrap();
    assert!(!out.status.success());
}
