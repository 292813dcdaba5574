use std::fs;
use std::path::{Path, PathBuf};

use tealeaf_core::adversarial::{adversarial_train, epsilon_sweep};
use tealeaf_core::dataset::{
    oversample_training, read_manifest, scan_dataset_with_report, stratified_split, write_manifest, SplitRole, SplitSet,
};
use tealeaf_core::evaluator::evaluate_items;
use tealeaf_core::explainers::{grad_cam, occlusion_sensitivity, overlay, Heatmap};
use tealeaf_core::models::{build_model_with, load_checkpoint, save_checkpoint, Classifier, ClassifierModel};
use tealeaf_core::preprocess::load_and_preprocess;
use tealeaf_core::trainer::{export_history, train, FileSource, TrainingHistory};
use tealeaf_service::ServiceConfig;

use crate::config::{ExplainMethod, RunConfig};
use crate::{plot, Cli, CliError, Command, CommonArgs, SplitArg, TrainArgs};

pub const MANIFEST: &str = "manifest.jsonl";
pub const MODEL: &str = "model.ckpt";
pub const HISTORY: &str = "history.jsonl";
pub const ADV_MODEL: &str = "adv_model.ckpt";
pub const ADV_HISTORY: &str = "adv_history.jsonl";
pub const SWEEP: &str = "sweep.jsonl";
pub const SWEEP_TABLE: &str = "sweep.txt";

/// Effective configuration after applying the command-line overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(common.arch.unwrap_or(tealeaf_core::models::ArchitectureId::Densenet201)),
    };
    if let (Some(arch), Some(_)) = (common.arch, &common.config) {
        cfg.architecture = arch;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(root) = &common.dataset_root {
        cfg.dataset_root = root.clone();
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(v) = args.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.patience {
        cfg.train.patience = v;
    }
}

/// Fails if any of `paths` exists and overwriting was not requested.
fn guard(paths: &[PathBuf], overwrite: bool) -> Result<(), CliError> {
    if overwrite {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::OutputExists(p.clone())),
        None => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Train(a) | Command::AdvTrain { train: a, .. } | Command::Sweep { train: a, .. } => {
            apply_train_args(&mut cfg, a)
        }
        _ => {}
    }
    match &cli.command {
        Command::AdvTrain { epsilon, fraction, .. } => {
            if let Some(e) = epsilon {
                cfg.adversarial.epsilon = *e;
            }
            if let Some(f) = fraction {
                cfg.adversarial.adversarial_fraction = *f;
            }
        }
        Command::Sweep { epsilons, fraction, .. } => {
            if let Some(list) = epsilons {
                cfg.adversarial.sweep_epsilons = list.clone();
            }
            if let Some(f) = fraction {
                cfg.adversarial.adversarial_fraction = *f;
            }
        }
        Command::Explain { method: Some(m), .. } => cfg.explain.method = *m,
        Command::Serve { host, port, .. } => {
            if let Some(h) = host {
                cfg.serve.host = h.clone();
            }
            if let Some(p) = port {
                cfg.serve.port = *p;
            }
        }
        _ => {}
    }
    let cfg = cfg.finalize()?;
    let overwrite = cli.common.overwrite;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Ingest => ingest(&cfg, overwrite),
        Command::Train(_) => train_cmd(&cfg, overwrite),
        Command::AdvTrain { .. } => adv_train_cmd(&cfg, overwrite),
        Command::Sweep { .. } => sweep_cmd(&cfg, overwrite),
        Command::Evaluate {
            checkpoint,
            split,
            batch_size,
        } => evaluate_cmd(
            &cfg,
            checkpoint.clone().unwrap_or_else(|| out.join(MODEL)),
            *split,
            *batch_size,
            overwrite,
        ),
        Command::Explain {
            checkpoint,
            image,
            target,
            ..
        } => explain_cmd(
            &cfg,
            &checkpoint.clone().unwrap_or_else(|| out.join(MODEL)),
            image,
            target.as_deref(),
            overwrite,
        ),
        Command::Serve { checkpoint, .. } => serve_cmd(&cfg, checkpoint.clone().unwrap_or_else(|| out.join(MODEL))),
        Command::Plot { input } => plot_cmd(&cfg, input, overwrite),
    }
}

fn build_split(cfg: &RunConfig) -> Result<SplitSet, CliError> {
    let (index, skipped) = scan_dataset_with_report(&cfg.dataset_root)?;
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let split = stratified_split(&index, cfg.split.ratios(), cfg.seed)?;
    let split = if cfg.split.oversample {
        oversample_training(&split, cfg.seed)?
    } else {
        split
    };
    for role in [SplitRole::Train, SplitRole::Val, SplitRole::Test] {
        log::info!("{}: {:?}", role.as_str(), split.class_counts(role));
    }
    Ok(split)
}

fn ingest(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let path = cfg.output_dir.join(MANIFEST);
    guard(std::slice::from_ref(&path), overwrite)?;
    let split = build_split(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    write_manifest(&split, &path)?;
    println!(
        "{} classes, {} train / {} val / {} test items -> {}",
        split.registry.count(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        path.display()
    );
    Ok(())
}

/// The manifest in output_dir, created from the dataset when missing.
fn load_or_create_split(cfg: &RunConfig) -> Result<SplitSet, CliError> {
    let path = cfg.output_dir.join(MANIFEST);
    if path.exists() {
        let split = read_manifest(&path)?;
        if split.seed != cfg.seed {
            log::warn!(
                "{} was split with seed {}, config seed is {}",
                path.display(),
                split.seed,
                cfg.seed
            );
        }
        return Ok(split);
    }
    let split = build_split(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    write_manifest(&split, &path)?;
    Ok(split)
}

fn fresh_model(cfg: &RunConfig, classes: usize) -> Result<ClassifierModel, CliError> {
    Ok(build_model_with(cfg.architecture, classes, &cfg.build_options())?)
}

fn summarize(history: &TrainingHistory) {
    if let Some(best) = history.best() {
        println!(
            "best epoch {} of {}: val_loss {:.4}, val_acc {:.4}{}",
            history.best_epoch,
            history.records.len(),
            best.val_loss,
            best.val_accuracy,
            if history.stopped_early { " (stopped early)" } else { "" }
        );
    }
}

fn train_cmd(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let (ckpt, hist, used) = (
        cfg.output_dir.join(MODEL),
        cfg.output_dir.join(HISTORY),
        cfg.output_dir.join("train_config.toml"),
    );
    guard(&[ckpt.clone(), hist.clone(), used.clone()], overwrite)?;
    let split = load_or_create_split(cfg)?;
    let mut model = fresh_model(cfg, split.registry.count())?;
    let train_src = FileSource::new(&split.train, &cfg.preprocess);
    let val_src = FileSource::new(&split.val, &cfg.preprocess);
    let history = train(&mut model, &train_src, &val_src, &cfg.train, &cfg.augment)?;
    save_checkpoint(&model, &split.registry, &ckpt)?;
    export_history(&history, &hist)?;
    write_text(&used, &cfg.to_toml())?;
    summarize(&history);
    println!("wrote {} and {}", ckpt.display(), hist.display());
    Ok(())
}

fn adv_train_cmd(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let (ckpt, hist, used) = (
        cfg.output_dir.join(ADV_MODEL),
        cfg.output_dir.join(ADV_HISTORY),
        cfg.output_dir.join("adv_train_config.toml"),
    );
    guard(&[ckpt.clone(), hist.clone(), used.clone()], overwrite)?;
    let split = load_or_create_split(cfg)?;
    let mut model = fresh_model(cfg, split.registry.count())?;
    let train_src = FileSource::new(&split.train, &cfg.preprocess);
    let val_src = FileSource::new(&split.val, &cfg.preprocess);
    let history = adversarial_train(
        &mut model,
        &train_src,
        &val_src,
        &cfg.train,
        &cfg.augment,
        &cfg.adversarial,
    )?;
    save_checkpoint(&model, &split.registry, &ckpt)?;
    export_history(&history, &hist)?;
    write_text(&used, &cfg.to_toml())?;
    summarize(&history);
    println!("wrote {} and {}", ckpt.display(), hist.display());
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let (report_path, table, used) = (
        cfg.output_dir.join(SWEEP),
        cfg.output_dir.join(SWEEP_TABLE),
        cfg.output_dir.join("sweep_config.toml"),
    );
    guard(&[report_path.clone(), table.clone(), used.clone()], overwrite)?;
    let split = load_or_create_split(cfg)?;
    let classes = split.registry.count();
    let train_src = FileSource::new(&split.train, &cfg.preprocess);
    let val_src = FileSource::new(&split.val, &cfg.preprocess);
    let report = epsilon_sweep(
        || build_model_with(cfg.architecture, classes, &cfg.build_options()),
        &train_src,
        &val_src,
        &cfg.train,
        &cfg.augment,
        &cfg.adversarial,
    )?;
    report.save(&report_path)?;
    let text = report.render_text();
    write_text(&table, &text)?;
    write_text(&used, &cfg.to_toml())?;
    print!("{text}");
    Ok(())
}

fn load_model(path: &Path) -> Result<(ClassifierModel, tealeaf_core::dataset::ClassRegistry), CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into())
}

fn evaluate_cmd(
    cfg: &RunConfig,
    ckpt: PathBuf,
    split_arg: SplitArg,
    batch: usize,
    overwrite: bool,
) -> Result<(), CliError> {
    let role = match split_arg {
        SplitArg::Train => SplitRole::Train,
        SplitArg::Val => SplitRole::Val,
        SplitArg::Test => SplitRole::Test,
    };
    let base = format!("{}_{}_metrics", stem(&ckpt), role.as_str());
    let (json, text) = (
        cfg.output_dir.join(format!("{base}.json")),
        cfg.output_dir.join(format!("{base}.txt")),
    );
    guard(&[json.clone(), text.clone()], overwrite)?;
    let manifest = cfg.output_dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(CliError::Input(format!(
            "{} not found; run `tealeaf ingest` first",
            manifest.display()
        )));
    }
    let split = read_manifest(&manifest)?;
    let (model, registry) = load_model(&ckpt)?;
    if registry != split.registry {
        return Err(CliError::Input(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            registry.names(),
            split.registry.names()
        )));
    }
    // Duplicates only ever come from oversampling, which touches train alone.
    let items: Vec<_> = split.role(role).iter().filter(|i| !i.duplicated).cloned().collect();
    let report = evaluate_items(&model, &items, model.preprocess(), &registry, batch.max(1))?;
    let title = format!("{} on {} ({} images)", model.architecture(), role.as_str(), items.len());
    report.save_json(&json)?;
    report.save_text(&text, &title)?;
    print!("{}", tealeaf_core::evaluator::render_table(&title, &report.metrics));
    Ok(())
}

fn parse_target(
    target: Option<&str>,
    registry: &tealeaf_core::dataset::ClassRegistry,
) -> Result<Option<usize>, CliError> {
    let Some(t) = target else { return Ok(None) };
    if let Some(i) = registry.index_of(t) {
        return Ok(Some(i));
    }
    match t.parse::<usize>() {
        Ok(i) if i < registry.count() => Ok(Some(i)),
        _ => Err(CliError::Input(format!(
            "unknown target class {t:?}; known: {:?}",
            registry.names()
        ))),
    }
}

fn save_map(
    map: &Heatmap,
    img: &tealeaf_core::preprocess::ImageTensor,
    alpha: f32,
    dir: &Path,
    name: &str,
) -> Result<(), CliError> {
    map.save_png(&dir.join(format!("{name}.png")))?;
    let path = dir.join(format!("{name}_overlay.png"));
    overlay(map, img, alpha)?
        .to_rgb8()
        .save(&path)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn explain_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    images: &[PathBuf],
    target: Option<&str>,
    overwrite: bool,
) -> Result<(), CliError> {
    let (model, registry) = load_model(ckpt)?;
    let target = parse_target(target, &registry)?;
    let dir = cfg.output_dir.join("explain");
    let method = cfg.explain.method;
    let mut outputs = Vec::new();
    for img in images {
        let s = stem(img);
        if method != ExplainMethod::Occlusion {
            outputs.push(dir.join(format!("{s}_gradcam.png")));
            outputs.push(dir.join(format!("{s}_gradcam_overlay.png")));
        }
        if method != ExplainMethod::GradCam {
            outputs.push(dir.join(format!("{s}_occlusion.png")));
            outputs.push(dir.join(format!("{s}_occlusion_overlay.png")));
        }
    }
    guard(&outputs, overwrite)?;
    ensure_dir(&dir)?;
    let (h, w) = model.input_size();
    cfg.explain
        .occlusion
        .validate_for(h, w)
        .map_err(|e| CliError::Input(format!("explain.occlusion: {e}")))?;
    for path in images {
        let img = load_and_preprocess(path, model.preprocess())?;
        let probs = model.predict_image(&img);
        let predicted = tealeaf_core::nn::argmax(&probs);
        let class = target.unwrap_or(predicted);
        let s = stem(path);
        if method != ExplainMethod::Occlusion {
            let map = grad_cam(&model, &img, Some(class))?;
            save_map(&map, &img, cfg.explain.overlay_alpha, &dir, &format!("{s}_gradcam"))?;
        }
        if method != ExplainMethod::GradCam {
            let map = occlusion_sensitivity(&model, &img, &cfg.explain.occlusion, Some(class))?;
            save_map(&map, &img, cfg.explain.overlay_alpha, &dir, &format!("{s}_occlusion"))?;
        }
        println!(
            "{}: predicted {} ({:.3}), explained {}",
            path.display(),
            registry.names()[predicted],
            probs[predicted],
            registry.names()[class]
        );
    }
    Ok(())
}

fn serve_cmd(cfg: &RunConfig, ckpt: PathBuf) -> Result<(), CliError> {
    if !ckpt.exists() {
        return Err(CliError::Input(format!("checkpoint {} not found", ckpt.display())));
    }
    let service = ServiceConfig {
        checkpoint: ckpt,
        host: cfg.serve.host.clone(),
        port: cfg.serve.port,
        max_payload: cfg.serve.max_payload_bytes,
        overlay_alpha: cfg.serve.overlay_alpha,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(format!("cannot start runtime: {e}")))?;
    rt.block_on(tealeaf_service::run(&service))?;
    Ok(())
}

fn plot_cmd(cfg: &RunConfig, inputs: &[PathBuf], overwrite: bool) -> Result<(), CliError> {
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        plot::discover(&cfg.output_dir)
    } else {
        inputs.to_vec()
    };
    if inputs.is_empty() {
        return Err(CliError::Input(format!(
            "nothing to plot in {}",
            cfg.output_dir.display()
        )));
    }
    let dir = cfg.output_dir.join("plots");
    let outputs: Vec<PathBuf> = inputs.iter().map(|p| dir.join(format!("{}.svg", stem(p)))).collect();
    guard(&outputs, overwrite)?;
    ensure_dir(&dir)?;
    for (input, output) in inputs.iter().zip(&outputs) {
        let svg = plot::render_file(input)?;
        write_text(output, &svg)?;
        println!("{} -> {}", input.display(), output.display());
    }
    Ok(())
}
