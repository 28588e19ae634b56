//! `camforge` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 I/O or image
//! decoding error, 4 model error (bad manifest, weights or layer name),
//! 5 numeric failure (non-finite map, no sample evaluated).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::cam::{explain, CamError, ClassSelection, ExplainConfig, Method, SaliencyMap};
use crate::eval::{batch_evaluate, Annotation, EvalError, EvalSettings, Metric, Report};
use crate::imageio::{self, ImageIoError};
use crate::model::{blob, Model, ModelError};
use crate::noise::NoiseError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MODEL: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Model(_) => EXIT_MODEL,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::Io(e.to_string()),
            ModelError::ClassIndex { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<CamError> for CliError {
    fn from(e: CamError) -> Self {
        match e {
            CamError::Model(m) => m.into(),
            CamError::Config(_) | CamError::Noise(NoiseError::InvalidSigma(_)) => CliError::Usage(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        match e {
            ImageIoError::Shape(_) => CliError::Model(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "camforge", version, about = "Score-CAM family saliency maps and their evaluation")]
pub struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "CAMFORGE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one image and write the map blob, its metadata, a heatmap and an overlay
    Explain(ExplainArgs),
    /// Run methods and metrics over an annotated dataset and write a JSON report
    Evaluate(EvaluateArgs),
    /// Print the layers, shapes and parameter counts of a model
    ModelInfo(ModelArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model manifest (JSON), or a directory holding model.json and model.bin
    #[arg(long)]
    pub model: PathBuf,
    /// Weight blob; defaults to the manifest path with a .bin extension
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Colormap {
    /// Piecewise-linear blue, cyan, green, yellow, red
    BlueRed,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image (PNG or binary PPM/PGM)
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "ss-cam1")]
    pub method: Method,
    /// Target layer; defaults to the last conv2d layer
    #[arg(long)]
    pub layer: Option<String>,
    /// Class to explain: `auto` (predicted class) or an index
    #[arg(long, default_value = "auto")]
    pub class: ClassSelection,
    /// Noise samples per channel for the smoothed methods
    #[arg(long = "n", default_value_t = 35)]
    pub n_samples: usize,
    /// Noise standard deviation for the smoothed methods
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Heatmap weight in the overlay, in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
    #[arg(long, value_enum, default_value_t = Colormap::BlueRed)]
    pub colormap: Colormap,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON array of {image_id, file, class_index, bbox?}
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory image paths are relative to; defaults to the annotation file's directory
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "grad-cam,score-cam,ss-cam1,ss-cam2")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "faithfulness,insertion,deletion,pointing")]
    pub metrics: Vec<Metric>,
    /// Target layer; defaults to the last conv2d layer
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long = "n", default_value_t = 10)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points on the insertion and deletion curves
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    /// Report path
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    /// Directory for per-sample insertion/deletion curve CSVs
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Explain(a) => explain_command(&a),
        Command::Evaluate(a) => evaluate_command(&a),
        Command::ModelInfo(a) => model_info_command(&a),
    })
}

/// Resolves `--model`/`--weights` into manifest and weight paths.
pub fn model_paths(args: &ModelArgs) -> (PathBuf, PathBuf) {
    let manifest = if args.model.is_dir() {
        args.model.join("model.json")
    } else {
        args.model.clone()
    };
    let weights = args
        .weights
        .clone()
        .unwrap_or_else(|| manifest.with_extension("bin"));
    (manifest, weights)
}

fn load_model(args: &ModelArgs) -> Result<Model, CliError> {
    let (manifest, weights) = model_paths(args);
    Ok(Model::load(&manifest, &weights)?)
}

fn resolve_layer(model: &Model, layer: &Option<String>) -> Result<String, CliError> {
    match layer {
        Some(l) => {
            model.layer_index(l)?;
            Ok(l.clone())
        }
        None => model
            .last_conv_layer()
            .map(str::to_string)
            .ok_or_else(|| CliError::Model("model has no conv2d layer; pass --layer".into())),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

fn explain_command(a: &ExplainArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::Usage(format!("--alpha must be in [0, 1], got {}", a.alpha)));
    }
    let model = load_model(&a.model)?;
    let layer = resolve_layer(&model, &a.layer)?;
    let cfg = ExplainConfig {
        class: a.class,
        ..ExplainConfig::new(a.method, layer).with_smoothing(a.n_samples, a.sigma, a.seed)
    };
    cfg.validate()?;

    let (h, w) = model.input_hw();
    let rgb = imageio::load_rgb(&a.image)?;
    let input = imageio::preprocess_rgb(&rgb, h, w, model.preprocessing())?;
    let map = explain(&model, &input, &cfg)?;
    if !map.values.all_finite() {
        return Err(CliError::Numeric(format!(
            "{} produced a non-finite saliency map",
            a.method
        )));
    }

    create_dir(&a.out)?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let base = a.out.join(format!("{stem}.{}", a.method));
    let paths = write_map(&map, &base)?;

    let heatmap = imageio::render_heatmap(&map.values, None, a.alpha)?;
    let base_img = imageio::resize_rgb(&rgb, h, w)?;
    let overlay = imageio::render_heatmap(&map.values, Some(&base_img), a.alpha)?;
    let heat_path = suffixed(&base, "heatmap.png");
    let overlay_path = suffixed(&base, "overlay.png");
    write_file(&heat_path, &imageio::encode_png(&heatmap)?)?;
    write_file(&overlay_path, &imageio::encode_png(&overlay)?)?;

    println!("class {} ({})", map.class_index, a.method);
    for p in paths.iter().chain([&heat_path, &overlay_path]) {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<base>.map.bin` (float blob) and `<base>.map.json` (metadata).
pub fn write_map(map: &SaliencyMap, base: &Path) -> Result<[PathBuf; 2], CliError> {
    let blob_path = suffixed(base, "map.bin");
    let meta_path = suffixed(base, "map.json");
    write_file(&blob_path, &blob::encode(map.values.data()))?;
    let mut meta = serde_json::to_string_pretty(&map.metadata()).expect("metadata serializes");
    meta.push('\n');
    write_file(&meta_path, meta.as_bytes())?;
    Ok([blob_path, meta_path])
}

/// Reads and parses an annotation file.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed annotation file {}: {e}", path.display())))
}

fn evaluate_command(a: &EvaluateArgs) -> Result<(), CliError> {
    let annotations = read_annotations(&a.annotations)?;
    let model = load_model(&a.model)?;
    let layer = resolve_layer(&model, &a.layer)?;
    let settings = EvalSettings {
        methods: dedup(&a.methods),
        metrics: a.metrics.iter().copied().collect::<BTreeSet<_>>(),
        layer,
        n_samples: a.n_samples,
        sigma: a.sigma,
        seed: a.seed,
        steps: a.steps,
    };
    ExplainConfig::new(Method::SsCam1, settings.layer.clone())
        .with_smoothing(settings.n_samples, settings.sigma, settings.seed)
        .validate()?;

    let root = match &a.dataset_root {
        Some(r) => r.clone(),
        None => a
            .annotations
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let (h, w) = model.input_hw();
    let prep = model.preprocessing().clone();
    let report = batch_evaluate(
        &model,
        &annotations,
        |ann| imageio::preprocess(&root.join(&ann.file), h, w, &prep).map_err(|e| e.to_string()),
        &settings,
    )?;

    for f in &report.failures {
        eprintln!("warning: sample {} skipped: {}", f.image_id, f.error);
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.report, report.to_json().as_bytes())?;
    if let Some(dir) = &a.curves_dir {
        write_curves(&report, dir)?;
    }
    print!("{}", report.table());
    if report.per_sample.is_empty() {
        return Err(CliError::Numeric("no sample was evaluated successfully".into()));
    }
    Ok(())
}

fn dedup(methods: &[Method]) -> Vec<Method> {
    let mut out = Vec::new();
    for &m in methods {
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out
}

fn write_curves(report: &Report, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    for s in &report.per_sample {
        for m in &s.methods {
            for (kind, curve) in [("insertion", &m.insertion), ("deletion", &m.deletion)] {
                if let Some(c) = curve {
                    let name = format!("{}.{}.{}.csv", s.image_id, m.method, kind);
                    write_file(&dir.join(name), c.to_csv().as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn model_info_command(a: &ModelArgs) -> Result<(), CliError> {
    let model = load_model(a)?;
    let m = model.manifest();
    println!("input shape: {:?}", m.input_shape);
    println!("classes: {}", m.class_count);
    println!("preprocessing: mean {:?} std {:?}", m.preprocessing.mean, m.preprocessing.std);
    println!("upsampling: {}", m.upsampling);
    println!("{:<16} {:<15} {:<20} {:>10}", "layer", "kind", "output", "params");
    for l in model.layers() {
        let shape = model.output_shape(&l.name)?;
        println!(
            "{:<16} {:<15} {:<20} {:>10}",
            l.name,
            l.kind.name(),
            format!("{shape:?}"),
            l.kind.param_count()
        );
    }
    println!("parameters: {}", model.flat_params().len());
    if let Some(l) = model.last_conv_layer() {
        println!("default target layer: {l}");
    }
    Ok(())
}
