//! Command-line front end: data generation, stage-wise training, evaluation
//! and prediction with overlay rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dasnet::data::netpbm;
use dasnet::data::{
    generate_corpus, make_split, read_dataset, write_dataset, DatasetConfig, SplitConfig,
    SynthSample,
};
use dasnet::harness::eval::{
    eval_map_r, eval_miou, ground_truth_masks, instance_predictions, semantic_predictions,
};
use dasnet::harness::render::{render_instances, render_semantic, write_overlay, OverlayInstance};
use dasnet::harness::train::TrainReport;
use dasnet::harness::{
    load_checkpoint, save_checkpoint, train_detector, train_instance, train_semantic, Checkpoint,
    Stage, TrainConfig,
};
use dasnet::model::{Model, ModelConfig};
use dasnet::{decoder, instance, Error};

#[derive(Parser)]
#[command(
    name = "dasnet",
    version,
    about = "Box-attention detection and segmentation on synthetic shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes split
    GenData(GenData),
    /// Train the detection module on boxes
    TrainDetector(TrainDetector),
    /// Train the semantic head with the detector frozen
    TrainSemantic(TrainSemantic),
    /// Train the instance head with the detector frozen
    TrainInstance(TrainInstance),
    /// Per-class IoU and mIoU of a semantic checkpoint
    EvalSemantic(EvalArgs),
    /// mAP^r of an instance checkpoint
    EvalInstance(EvalInstance),
    /// Segment one PPM image and render an overlay
    Predict(Predict),
}

/// Every subcommand's flags are optional so a `--config` JSON file (keys in
/// kebab-case) can supply them; flags win over the file.
#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct GenData {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct TrainDetector {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct TrainSemantic {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct TrainInstance {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    score_thresh: Option<f32>,
    #[arg(long)]
    nms_thresh: Option<f32>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct EvalInstance {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated mask IoU thresholds
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    score_thresh: Option<f32>,
    #[arg(long)]
    nms_thresh: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Semantic,
    Instance,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct Predict {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    render: Option<PathBuf>,
    #[arg(long)]
    score_thresh: Option<f32>,
    #[arg(long)]
    nms_thresh: Option<f32>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Fills every unset flag of `flags` from the JSON file at `config`.
fn merge_config<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(
            serde_json::from_value(serde_json::to_value(flags).expect("flags serialize"))
                .expect("round trip"),
        );
    };
    let cfg_err = |msg: String| CliError::Config {
        path: path.to_path_buf(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| cfg_err(e.to_string()))?;
    let mut merged: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| cfg_err(e.to_string()))?;
    let obj = merged
        .as_object_mut()
        .ok_or_else(|| cfg_err("expected a JSON object".into()))?;
    if let serde_json::Value::Object(set) = serde_json::to_value(flags).expect("flags serialize") {
        for (k, v) in set {
            if !v.is_null() {
                obj.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| cfg_err(e.to_string()))
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn load_stage(path: &Path, want: Stage) -> CliResult<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.stage != want {
        return Err(CliError::Usage(format!(
            "{}: expected stage {want}, found {}",
            path.display(),
            ckpt.meta.stage
        )));
    }
    Ok(ckpt)
}

fn load_data(dir: &Path) -> CliResult<Vec<SynthSample>> {
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{}: no samples", dir.display())).into());
    }
    Ok(samples)
}

/// Saves the checkpoint and a `<out>.loss.tsv` log; returns the summary.
fn finish_training(ckpt: &Checkpoint, report: &TrainReport, out: &Path) -> CliResult<String> {
    save_checkpoint(ckpt, out)?;
    let mut log = String::from("step\tloss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(log, "{i}\t{l}").expect("string write");
    }
    let log_path = PathBuf::from(format!("{}.loss.tsv", out.display()));
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    let last = report.losses.last().copied().unwrap_or(f32::NAN);
    Ok(format!(
        "stage={}\nsteps={}\nfinal_loss={last}\ncheckpoint={}\n",
        ckpt.meta.stage,
        report.losses.len(),
        out.display()
    ))
}

fn train_config(
    stage: Stage,
    steps: Option<usize>,
    lr: Option<f32>,
    batch: Option<usize>,
    seed: Option<u64>,
) -> TrainConfig {
    let base = TrainConfig::for_stage(stage);
    TrainConfig {
        steps: steps.unwrap_or(base.steps),
        lr: lr.unwrap_or(base.lr),
        batch: batch.unwrap_or(base.batch),
        seed: seed.unwrap_or(base.seed),
        ..base
    }
}

fn gen_data(a: GenData) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let out = required(a.out, "out")?;
    let n = required(a.n, "n")?;
    let seed = a.seed.unwrap_or(0);
    let cfg = DatasetConfig {
        classes: a.classes.unwrap_or(3),
        ..DatasetConfig::default()
    };
    let mut samples = generate_corpus(seed, n, &cfg)?;
    let split = SplitConfig {
        n_total: n,
        mask_fraction: a.mask_fraction.unwrap_or(1.0),
        seed,
    };
    let classes: Vec<Vec<usize>> = samples.iter().map(SynthSample::classes).collect();
    let flags = make_split(&split, &classes, cfg.classes)?;
    for (s, f) in samples.iter_mut().zip(&flags) {
        s.has_mask_annotation = *f;
    }
    write_dataset(&samples, &out)?;
    let masks = flags.iter().filter(|&&f| f).count();
    Ok(format!(
        "samples={n}\nmasks={masks}\nout={}\n",
        out.display()
    ))
}

fn cmd_train_detector(a: TrainDetector) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let samples = load_data(&required(a.data, "data")?)?;
    let out = required(a.out, "out")?;
    let classes = samples.iter().flat_map(|s| s.classes()).max().unwrap_or(1);
    let cfg = train_config(Stage::Detector, a.steps, a.lr, a.batch, a.seed);
    let (ckpt, report) = train_detector(&samples, &ModelConfig::with_classes(classes), &cfg)?;
    finish_training(&ckpt, &report, &out)
}

fn cmd_train_semantic(a: TrainSemantic) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let samples = load_data(&required(a.data, "data")?)?;
    let det = load_stage(&required(a.detector, "detector")?, Stage::Detector)?;
    let out = required(a.out, "out")?;
    let cfg = train_config(Stage::Semantic, a.steps, a.lr, a.batch, a.seed);
    let (ckpt, report) = train_semantic(&samples, &det, &cfg)?;
    finish_training(&ckpt, &report, &out)
}

fn cmd_train_instance(a: TrainInstance) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let samples = load_data(&required(a.data, "data")?)?;
    let det = load_stage(&required(a.detector, "detector")?, Stage::Detector)?;
    let out = required(a.out, "out")?;
    let mut cfg = train_config(Stage::Instance, a.steps, a.lr, a.batch, a.seed);
    cfg.ps.k = a.k.unwrap_or(cfg.ps.k);
    cfg.ps.p = a.p.unwrap_or(cfg.ps.p);
    cfg.ps.n = a.n.unwrap_or(cfg.ps.n);
    let (ckpt, report) = train_instance(&samples, &det, &cfg)?;
    finish_training(&ckpt, &report, &out)
}

/// The checkpoint's model with inference thresholds overridden by flags.
fn inference_model(ckpt: &Checkpoint, score: Option<f32>, nms: Option<f32>) -> CliResult<Model> {
    let mut cfg = ckpt.meta.model.clone();
    cfg.detector.score_thresh = score.unwrap_or(cfg.detector.score_thresh);
    cfg.detector.nms_thresh = nms.unwrap_or(cfg.detector.nms_thresh);
    Ok(Model::new(cfg)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

fn eval_semantic(a: EvalArgs) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let samples = load_data(&required(a.data, "data")?)?;
    let ckpt = load_stage(&required(a.ckpt, "ckpt")?, Stage::Semantic)?;
    let model = inference_model(&ckpt, a.score_thresh, a.nms_thresh)?;
    let pred = semantic_predictions(&model, &ckpt.params, &samples)?;
    let gt: Vec<Vec<u8>> = samples.iter().map(SynthSample::label_map).collect();
    let r = eval_miou(&pred, &gt, model.classes())?;
    let mut out = String::new();
    for (c, v) in r.per_class.iter().enumerate() {
        writeln!(out, "iou.{c}={}", fmt_opt(*v)).expect("string write");
    }
    writeln!(out, "miou={:.6}", r.mean).expect("string write");
    Ok(out)
}

fn parse_thresholds(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad threshold `{t}`")))
        })
        .collect()
}

fn eval_instance(a: EvalInstance) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let samples = load_data(&required(a.data, "data")?)?;
    let ckpt = load_stage(&required(a.ckpt, "ckpt")?, Stage::Instance)?;
    let thresholds = parse_thresholds(a.thresholds.as_deref().unwrap_or("0.5,0.7"))?;
    let model = inference_model(&ckpt, a.score_thresh, a.nms_thresh)?;
    let preds = instance_predictions(&model, &ckpt.params, &samples)?;
    let results = eval_map_r(
        &preds,
        &ground_truth_masks(&samples),
        model.classes(),
        &thresholds,
    )?;
    let mut out = String::new();
    for r in &results {
        for (c, v) in r.per_class.iter().enumerate().skip(1) {
            writeln!(out, "ap@{}.{c}={}", r.threshold, fmt_opt(*v)).expect("string write");
        }
        writeln!(out, "map_r@{}={:.6}", r.threshold, r.map).expect("string write");
    }
    Ok(out)
}

fn predict(a: Predict) -> CliResult<String> {
    let a = merge_config(&a, a.config.as_deref())?;
    let image_path = required(a.image, "image")?;
    let mode = required(a.mode, "mode")?;
    let want = match mode {
        Mode::Semantic => Stage::Semantic,
        Mode::Instance => Stage::Instance,
    };
    let ckpt = load_stage(&required(a.ckpt, "ckpt")?, want)?;
    let model = inference_model(&ckpt, a.score_thresh, a.nms_thresh)?;
    let img = netpbm::read(&image_path)?;
    if img.channels != 3 || img.maxval != 255 {
        return Err(Error::format(&image_path, 0, "expected an 8-bit P6 image").into());
    }
    let (w, h) = (img.width, img.height);
    let planar: Vec<u8> = (0..3 * w * h)
        .map(|j| img.data[3 * (j % (w * h)) + j / (w * h)])
        .collect();
    let tensor = dasnet::Tensor::new(
        vec![1, 3, h, w],
        planar.iter().map(|&v| v as f32 / 255.0).collect(),
    )?;
    let mut out = String::new();
    let overlay = match mode {
        Mode::Semantic => {
            let labels =
                decoder::semantic_infer(&model.detector, &model.decoder, &ckpt.params, &tensor)?;
            for c in 1..=model.classes() {
                let px = labels.iter().filter(|&&l| l as usize == c).count();
                writeln!(out, "pixels.{c}={px}").expect("string write");
            }
            render_semantic(&planar, w, h, &labels)?
        }
        Mode::Instance => {
            let preds = instance::instance_infer(
                &model.detector,
                &model.decoder,
                &ckpt.params,
                model.cfg.k,
                &tensor,
            )?;
            for (i, p) in preds.iter().enumerate() {
                let b = &p.bbox;
                writeln!(
                    out,
                    "instance.{i}=class:{} score:{:.6} box:{:.4},{:.4},{:.4},{:.4} pixels:{}",
                    p.label,
                    p.score,
                    b.x_min,
                    b.y_min,
                    b.x_max,
                    b.y_max,
                    p.mask.iter().filter(|&&m| m).count()
                )
                .expect("string write");
            }
            let shown: Vec<OverlayInstance> = preds
                .into_iter()
                .map(|p| OverlayInstance {
                    class: p.label,
                    bbox: p.bbox,
                    mask: p.mask,
                })
                .collect();
            render_instances(&planar, w, h, &shown)?
        }
    };
    if let Some(path) = a.render {
        write_overlay(&overlay, &path)?;
        writeln!(out, "render={}", path.display()).expect("string write");
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDetector(a) => cmd_train_detector(a),
        Command::TrainSemantic(a) => cmd_train_semantic(a),
        Command::TrainInstance(a) => cmd_train_instance(a),
        Command::EvalSemantic(a) => eval_semantic(a),
        Command::EvalInstance(a) => eval_instance(a),
        Command::Predict(a) => predict(a),
    }
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error kind=usage msg={:?}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
