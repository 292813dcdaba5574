use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tealeaf_cli::RunConfig;
use tealeaf_core::adversarial::SweepReport;
use tealeaf_core::dataset::read_manifest;
use tealeaf_core::models::{load_checkpoint, ArchitectureId};
use tealeaf_core::trainer::load_history;
use tealeaf_testkit::data::write_png_dataset;

fn tealeaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tealeaf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn shipped_presets_match_the_builtin_ones() {
    for arch in ArchitectureId::ALL {
        let path = repo_root().join(format!("configs/{arch}.toml"));
        let file = RunConfig::load(&path).unwrap().finalize().unwrap();
        assert_eq!(file, RunConfig::preset(arch).finalize().unwrap(), "{}", path.display());
    }
    let d = RunConfig::preset(ArchitectureId::Densenet201).train;
    assert_eq!(
        (d.batch_size, d.learning_rate, d.max_epochs, d.patience),
        (32, 1e-4, 50, 10)
    );
    let m = RunConfig::preset(ArchitectureId::MobilenetV2).train;
    assert_eq!(
        (m.batch_size, m.learning_rate, m.max_epochs, m.patience),
        (32, 1e-4, 50, 5)
    );
    let i = RunConfig::preset(ArchitectureId::InceptionV3).train;
    assert_eq!(
        (i.batch_size, i.learning_rate, i.max_epochs, i.patience),
        (32, 1e-5, 50, 10)
    );
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    let o = tealeaf(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
    assert_eq!(code(&tealeaf(&["--help"])), 0);
    assert_eq!(code(&tealeaf(&["train", "--help"])), 0);
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(
        &path,
        "dataset_root = \"d\"\noutput_dir = \"o\"\narchitecture = \"densenet201\"\n[train]\nlearning_rate = -1.0\n",
    )
    .unwrap();
    let o = tealeaf(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    fs::write(
        &path,
        "dataset_root = \"d\"\noutput_dir = \"o\"\narchitecture = \"densenet201\"\n[train]\nlearnin_rate = 0.1\n",
    )
    .unwrap();
    let o = tealeaf(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&tealeaf(&["evaluate", "--output-dir", out])), 1);
    assert_eq!(
        code(&tealeaf(&[
            "ingest",
            "--output-dir",
            out,
            "--dataset-root",
            "/nonexistent/leaves"
        ])),
        1
    );
    assert_eq!(code(&tealeaf(&["plot", "--output-dir", out])), 1);
}

#[test]
fn corrupt_checkpoint_stops_serve() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    fs::write(&ckpt, b"TLCKPT\0\0 definitely not a checkpoint").unwrap();
    let o = tealeaf(&["serve", "--checkpoint", ckpt.to_str().unwrap(), "--port", "0"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("corrupt checkpoint"), "{}", stderr(&o));
}

fn small_config(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    write_png_dataset(
        &data,
        &[("Brown Blight", 10), ("Healthy leaf", 10), ("Red spider", 10)],
        24,
        3,
    );
    let mut cfg = RunConfig::preset(ArchitectureId::MobilenetV2);
    cfg.dataset_root = data;
    cfg.output_dir = dir.join("run");
    cfg.seed = 7;
    cfg.model.pretrained = false;
    cfg.model.scale = tealeaf_core::models::ModelScale::Compact;
    cfg.preprocess = tealeaf_core::preprocess::PreprocessConfig::square(16);
    cfg.train.max_epochs = 2;
    cfg.train.patience = 2;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 1e-3;
    cfg.explain.occlusion.patch_size = 8;
    cfg.explain.occlusion.stride = 4;
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    let ok = |args: &[&str]| {
        let o = tealeaf(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };

    ok(&["ingest", "--config", c]);
    let split = read_manifest(&run.join("manifest.jsonl")).unwrap();
    assert_eq!(split.registry.names(), ["Brown Blight", "Healthy leaf", "Red spider"]);
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (21, 6, 3));
    assert_eq!(code(&tealeaf(&["ingest", "--config", c])), 1, "refuses to clobber");

    ok(&["train", "--config", c]);
    let ckpt = run.join("model.ckpt");
    let first = fs::read(&ckpt).unwrap();
    let history = load_history(&run.join("history.jsonl")).unwrap();
    assert_eq!(history.records.len(), 2);
    let (model, registry) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(registry, split.registry);
    assert_eq!(model.input_size(), (16, 16));

    let o = tealeaf(&["train", "--config", c]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--overwrite"));
    ok(&["train", "--config", c, "--overwrite"]);
    assert_eq!(fs::read(&ckpt).unwrap(), first, "same seed, same weights");

    let table = ok(&["evaluate", "--config", c]);
    assert!(table.contains("Accuracy:"));
    assert!(run.join("model_test_metrics.json").exists() && run.join("model_test_metrics.txt").exists());

    let image = split.test[0].path.to_str().unwrap().to_string();
    ok(&["explain", "--config", c, "--image", &image, "--target", "Healthy leaf"]);
    let stem = split.test[0].path.file_stem().unwrap().to_string_lossy().into_owned();
    for suffix in ["gradcam", "gradcam_overlay", "occlusion", "occlusion_overlay"] {
        let p = run.join("explain").join(format!("{stem}_{suffix}.png"));
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16), "{}", p.display());
    }

    ok(&["adv-train", "--config", c, "--max-epochs", "1", "--patience", "1"]);
    assert_eq!(load_history(&run.join("adv_history.jsonl")).unwrap().records.len(), 1);

    ok(&["sweep", "--config", c, "--max-epochs", "1", "--patience", "1"]);
    let report = SweepReport::load(&run.join("sweep.jsonl")).unwrap();
    assert_eq!(
        report.rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
        [0.0, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2]
    );

    ok(&["plot", "--config", c]);
    for name in ["history", "adv_history", "sweep", "model_test_metrics"] {
        let svg = fs::read_to_string(run.join("plots").join(format!("{name}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"), "{name}");
    }
    assert_eq!(code(&tealeaf(&["plot", "--config", c])), 1);
    ok(&["plot", "--config", c, "--overwrite"]);
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let elsewhere = dir.path().join("elsewhere");
    let o = tealeaf(&[
        "ingest",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        elsewhere.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_manifest(&elsewhere.join("manifest.jsonl")).unwrap().seed, 99);
    assert!(!dir.path().join("run").exists());
}
