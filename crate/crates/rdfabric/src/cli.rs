//! Command layer behind the `rdfabric` binary: train, eval, infer, bench,
//! and the synthetic acceptance runner. Commands are plain functions
//! returning an exit code so integration tests can drive them directly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::accept::{load_scenario, run_scenario};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{build_teacher, teacher_from_meta, Overrides, RunConfig};
use crate::data::{load_image, scan_mvtec_layout, split_train_val, stack_batch, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    benchmark_throughput, evaluate_class, write_eval_csv, write_eval_json, BenchConfig,
    ClassEvaluation,
};
use crate::model::{ModelMode, RdModel};
use crate::scoring::{
    anomaly_maps, image_score, normalization_bounds, score_whole_image, write_heatmap_png,
    write_npy, write_score_sidecar, ImageScore,
};
use crate::teacher::Teacher;
use crate::trainer::{fit, write_jsonl};

#[derive(Debug, Parser)]
#[command(name = "rdfabric", version, about = "Reverse-distillation anomaly detection for fabric")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train student checkpoints from a run configuration.
    Train(TrainArgs),
    /// Evaluate checkpoints against a labeled test split.
    Eval(EvalArgs),
    /// Score an image or folder and export heatmaps.
    Infer(InferArgs),
    /// Measure patch throughput for a checkpoint.
    Bench(BenchArgs),
    /// Run a self-contained synthetic acceptance scenario.
    Accept(AcceptArgs),
}

fn parse_mode(s: &str) -> std::result::Result<ModelMode, String> {
    match s {
        "standard" => Ok(ModelMode::Standard),
        "domain_generalized" => Ok(ModelMode::DomainGeneralized),
        _ => Err(format!("unknown mode {s:?}; use standard or domain_generalized")),
    }
}

/// Config file plus the flags that override its keys.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Class to process; repeat the flag for several.
    #[arg(long = "class")]
    pub classes: Vec<String>,
    /// Model mode: standard or domain_generalized.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ModelMode>,
    /// Input side length images are resized to.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size for training and evaluation.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Gaussian smoothing sigma for anomaly maps.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Replace existing outputs instead of refusing to clobber them.
    #[arg(long)]
    pub overwrite: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let ov = Overrides {
            root: self.root.clone(),
            classes: if self.classes.is_empty() { None } else { Some(self.classes.clone()) },
            mode: self.mode,
            input_size: self.input_size,
            out: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            sigma: self.sigma,
        };
        RunConfig::resolve(self.config.as_deref(), &ov)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint file, or a directory holding `<class>.ckpt` /
    /// `pooled.ckpt` files; defaults to the configured output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also compute pixel-level AUROC from ground-truth masks.
    #[arg(long)]
    pub pixel: bool,
    /// Print the coverage triple per class.
    #[arg(long)]
    pub coverage: bool,
    /// Write a per-image score CSV per class.
    #[arg(long)]
    pub scores: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or a folder of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "infer_out")]
    pub out: PathBuf,
    /// Gaussian smoothing sigma (defaults to the checkpoint's training-time
    /// value semantics: the scoring default).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Patch batch size for tiled scoring.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patches per timed run.
    #[arg(long, default_value_t = 96)]
    pub patches: usize,
    /// Batch size; repeat for several runs. Defaults to 16 and 32.
    #[arg(long = "batch")]
    pub batches: Vec<usize>,
    /// Untimed warmup batches before measuring.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value = "bench_out")]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct AcceptArgs {
    /// Built-in scenario name (plain, zero_magnitude, domain_generalized)
    /// or a path to a scenario TOML.
    #[arg(long)]
    pub scenario: String,
    /// Artifact directory; defaults to accept_out/<scenario>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

/// Dispatch a parsed command line; the return value is the process exit code.
pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Accept(args) => cmd_accept(args),
    }
}

/// Refuse to overwrite any existing target unless `--overwrite` was given.
fn ensure_writable(targets: &[PathBuf], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    for t in targets {
        if t.exists() {
            return Err(Error::Clobber { path: t.clone() });
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<u8> {
    let cfg = args.cfg.resolve()?;
    cfg.require_classes()?;
    let model_config = cfg.model.model_config();
    let out = cfg.output.dir.clone();
    create_dir(&out)?;

    // Standard mode trains one student per class; domain-generalized mode
    // pools every class into a single student.
    let units: Vec<(String, Vec<String>)> = match model_config.mode {
        ModelMode::Standard => {
            cfg.dataset.classes.iter().map(|c| (c.clone(), vec![c.clone()])).collect()
        }
        ModelMode::DomainGeneralized => vec![("pooled".into(), cfg.dataset.classes.clone())],
    };
    let mut targets = vec![out.join("config_resolved.toml")];
    for (name, _) in &units {
        targets.push(out.join(format!("{name}.ckpt")));
        targets.push(out.join(format!("{name}_epochs.jsonl")));
    }
    ensure_writable(&targets, args.cfg.overwrite)?;

    let (teacher, weight_source) = build_teacher(&cfg)?;
    let plan = teacher.plan();
    cfg.write_resolved(&out)?;

    for (name, unit_classes) in &units {
        let mut train_images = Vec::new();
        let mut val_images = Vec::new();
        for class in unit_classes {
            let records = scan_mvtec_layout(&cfg.dataset.root, class)?;
            let train_records: Vec<_> =
                records.into_iter().filter(|r| r.split == Split::Train).collect();
            let (tr, va) = split_train_val(&train_records, &cfg.split)?;
            for r in &tr {
                train_images.push(load_image(
                    &r.image_path,
                    cfg.model.input_size,
                    &teacher.spec().normalization,
                )?);
            }
            for r in &va {
                val_images.push(load_image(
                    &r.image_path,
                    cfg.model.input_size,
                    &teacher.spec().normalization,
                )?);
            }
        }
        if val_images.is_empty() {
            return Err(Error::Dataset(format!(
                "classes {unit_classes:?} leave no validation images; lower split.train_fraction"
            )));
        }
        let mut model = RdModel::<f32>::seeded(&plan, &model_config, cfg.train.seed)?;
        let report = fit(&train_images, &val_images, &mut model, &teacher, &cfg.loss, &cfg.train)?;
        write_jsonl(&out.join(format!("{name}_epochs.jsonl")), &report.epoch_log)?;
        let meta = CheckpointMeta {
            model_config: model_config.clone(),
            plan: plan.clone(),
            backbone: teacher.spec().clone(),
            train_config: cfg.train.clone(),
            epoch: report.best_epoch,
            val_loss: report.best_val_loss,
            teacher_checksum: teacher.checksum().to_string(),
            weight_source: weight_source.clone(),
        };
        let ckpt = out.join(format!("{name}.ckpt"));
        save_checkpoint(&ckpt, &mut model, &meta)?;
        println!(
            "trained {name}: {} epochs, best val loss {:.6} at epoch {}, wrote {}",
            report.epochs_run,
            report.best_val_loss,
            report.best_epoch,
            ckpt.display()
        );
    }
    Ok(0)
}

/// Pick the checkpoint for `class`: an explicit file serves every class;
/// a directory is searched for `<class>.ckpt`, then `pooled.ckpt`.
fn resolve_checkpoint(base: &Path, class: &str) -> Result<PathBuf> {
    if base.is_file() {
        return Ok(base.to_path_buf());
    }
    for cand in [base.join(format!("{class}.ckpt")), base.join("pooled.ckpt")] {
        if cand.is_file() {
            return Ok(cand);
        }
    }
    Err(Error::Config(format!("no checkpoint for class {class:?} under {}", base.display())))
}

fn write_scores_csv(path: &Path, eval: &ClassEvaluation) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Eval(e.to_string()))?;
    writer
        .write_record(["image", "label", "score", "argmax_row", "argmax_col"])
        .map_err(|e| Error::Eval(e.to_string()))?;
    for img in &eval.images {
        let label = match img.record.label {
            crate::data::Label::Good => "good",
            crate::data::Label::Defective => "defective",
        };
        writer
            .write_record([
                img.record.image_path.display().to_string(),
                label.to_string(),
                format!("{:.6}", img.score),
                img.argmax.0.to_string(),
                img.argmax.1.to_string(),
            ])
            .map_err(|e| Error::Eval(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::Eval(e.to_string()))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let cfg = args.cfg.resolve()?;
    cfg.require_classes()?;
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    let ckpt_base = args.checkpoint.clone().unwrap_or_else(|| cfg.output.dir.clone());

    let mut targets = vec![out.join("reports.csv")];
    for class in &cfg.dataset.classes {
        targets.push(out.join(format!("{class}.json")));
        if args.scores {
            targets.push(out.join(format!("{class}_scores.csv")));
        }
    }
    ensure_writable(&targets, args.cfg.overwrite)?;

    // The same teacher usually serves every class; rebuild it once per
    // distinct weight/geometry pair.
    let mut teachers: HashMap<String, Teacher> = HashMap::new();
    let mut reports = Vec::new();
    for class in &cfg.dataset.classes {
        let ckpt_path = resolve_checkpoint(&ckpt_base, class)?;
        let (model, meta) = load_checkpoint(&ckpt_path)?;
        let key = format!("{}@{}", meta.teacher_checksum, meta.backbone.input_size);
        let teacher = match teachers.entry(key) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => v.insert(teacher_from_meta(&meta)?),
        };
        let records = scan_mvtec_layout(&cfg.dataset.root, class)?;
        let eval = evaluate_class(
            teacher,
            &model,
            class,
            &records,
            cfg.sigma,
            cfg.train.batch_size,
            args.pixel,
        )?;
        write_eval_json(&out.join(format!("{class}.json")), &eval.report)?;
        if args.scores {
            write_scores_csv(&out.join(format!("{class}_scores.csv")), &eval)?;
        }
        match eval.report.pixel_auroc {
            Some(p) => println!(
                "{class}: image AUROC {:.4}, pixel AUROC {p:.4}",
                eval.report.image_auroc
            ),
            None => println!("{class}: image AUROC {:.4}", eval.report.image_auroc),
        }
        if args.coverage {
            let c = &eval.report.coverage;
            println!(
                "{class}: coverage tol 0/0.02/0.05 = {:.4} / {:.4} / {:.4}",
                c.tol_0, c.tol_0_02, c.tol_0_05
            );
        }
        reports.push(eval.report);
    }
    write_eval_csv(&out.join("reports.csv"), &reports)?;
    Ok(0)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Input {
            path: input.to_path_buf(),
            message: "no such file or directory".into(),
        });
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_lowercase();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn max_location(map: &Array2<f32>) -> ImageScore {
    let mut best = f32::NEG_INFINITY;
    let mut loc = (0usize, 0usize);
    for ((y, x), &v) in map.indexed_iter() {
        if v > best {
            best = v;
            loc = (y, x);
        }
    }
    ImageScore { score: best, argmax_location: loc }
}

pub fn cmd_infer(args: &InferArgs) -> Result<u8> {
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let teacher = teacher_from_meta(&meta)?;
    let patch = meta.backbone.input_size;
    let sigma = args.sigma.unwrap_or(crate::scoring::DEFAULT_SIGMA);
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let batch = args.batch.unwrap_or(meta.train_config.batch_size).max(1);

    let inputs = collect_inputs(&args.input)?;
    if inputs.is_empty() {
        eprintln!("warning: no images under {}", args.input.display());
        return Ok(0);
    }
    create_dir(&args.out)?;
    let stems: Vec<String> = inputs
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut targets = Vec::new();
    for stem in &stems {
        targets.push(args.out.join(format!("{stem}_heatmap.png")));
        targets.push(args.out.join(format!("{stem}_map.npy")));
        targets.push(args.out.join(format!("{stem}_scores.json")));
    }
    ensure_writable(&targets, args.overwrite)?;

    for (path, stem) in inputs.iter().zip(&stems) {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w < patch || h < patch {
            return Err(Error::Input {
                path: path.clone(),
                message: format!("{w}x{h} is smaller than the {patch}x{patch} patch"),
            });
        }
        // A patch-sized image is scored directly; anything larger is tiled,
        // scored patch by patch, and stitched.
        let (map, score, patch_scores) = if (w, h) == (patch, patch) {
            let tensor = load_image(path, patch, &meta.backbone.normalization)?;
            let batch_arr = stack_batch(std::slice::from_ref(&tensor))?;
            let anomaly = anomaly_maps(&teacher, &model, &batch_arr, sigma)?
                .into_iter()
                .next()
                .expect("one map per batch sample");
            let score = image_score(&anomaly);
            (anomaly.map, score, None)
        } else {
            let whole = score_whole_image(
                &teacher,
                &model,
                &img.to_rgb8(),
                patch,
                &meta.backbone.normalization,
                sigma,
                batch,
            )?;
            let score = max_location(&whole.stitched);
            (whole.stitched, score, Some(whole.patch_scores))
        };
        write_heatmap_png(&args.out.join(format!("{stem}_heatmap.png")), &map)?;
        write_npy(&args.out.join(format!("{stem}_map.npy")), &map)?;
        write_score_sidecar(
            &args.out.join(format!("{stem}_scores.json")),
            &score,
            normalization_bounds(&map),
            patch_scores.as_deref(),
        )?;
        match &patch_scores {
            Some(ps) => println!(
                "{}: score {:.4} over {} patches, wrote 3 files",
                path.display(),
                score.score,
                ps.len()
            ),
            None => println!("{}: score {:.4}, wrote 3 files", path.display(), score.score),
        }
    }
    Ok(0)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<u8> {
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let teacher = teacher_from_meta(&meta)?;
    let batches = if args.batches.is_empty() { vec![16, 32] } else { args.batches.clone() };
    create_dir(&args.out)?;
    let target = args.out.join("bench.json");
    ensure_writable(&[target.clone()], args.overwrite)?;

    let mut reports = Vec::new();
    for &batch in &batches {
        let bench_cfg = BenchConfig::new(args.patches, batch, args.warmup);
        let report = benchmark_throughput(&teacher, &model, &bench_cfg)?;
        println!(
            "batch {batch}: {:.2} ms/patch, {:.1} patches/s, whole image {:.1} ms, {} batches on {}",
            report.ms_per_patch,
            report.patches_per_second,
            report.whole_image_ms,
            report.n_batches,
            report.hardware
        );
        reports.push(report);
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    fs::write(&target, json).map_err(|e| Error::io(&target, e))?;
    Ok(0)
}

pub fn cmd_accept(args: &AcceptArgs) -> Result<u8> {
    let spec = load_scenario(&args.scenario)?;
    let out =
        args.out.clone().unwrap_or_else(|| PathBuf::from("accept_out").join(&spec.name));
    if !args.overwrite && out.is_dir() {
        let occupied =
            fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.next().is_some();
        if occupied {
            return Err(Error::Clobber { path: out });
        }
    }
    let report = run_scenario(&spec, &out)?;
    for check in &report.checks {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {} — {}", check.name, check.detail);
    }
    println!(
        "scenario {}: {} ({} epochs, {:.1}s)",
        report.scenario,
        if report.passed { "PASS" } else { "FAIL" },
        report.epochs_run,
        report.wall_clock_secs
    );
    Ok(if report.passed { 0 } else { 1 })
}
