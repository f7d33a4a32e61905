//! Command-line front end for the segmentation stack.
//!
//! Subcommands: `synth` draws a synthetic camouflage dataset, `train` fits a
//! model and writes a checkpoint plus a CSV log, `predict` runs inference
//! from a checkpoint, `eval` scores predictions against ground truth, and
//! `gradcheck` verifies analytic gradients against finite differences.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::env::VarError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use znext_core::data::checkpoint::{apply_tensors, load_checkpoint, save_checkpoint};
use znext_core::data::netpbm::{read_mask, read_pgm, write_pgm};
use znext_core::data::synth::{write_dataset, SyntheticSpec};
use znext_core::data::load_samples;
use znext_core::losses::{ScheduleKind, UalChoice, UalForm};
use znext_core::metrics::{aggregate, curves_csv, evaluate_pair, report_csv, ImageMetrics};
use znext_core::model::{predict_to_gt_size, Fusion, Model, ModelConfig};
use znext_core::pyramid::{DownsampleMode, Scale};
use znext_core::tensor::{run_registry, Tensor, TensorError};
use znext_core::train::{train, TrainConfig, TrainError};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "znext",
    version,
    about = "Multi-scale camouflaged-object segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic camouflage dataset with pixel-exact masks.
    Synth(SynthArgs),
    /// Train a model on a manifest and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Run inference from a checkpoint and write one PGM map per frame.
    Predict(PredictArgs),
    /// Score prediction maps against ground-truth masks.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory that receives images, masks, and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples (images, or clips in video mode) [default: 16].
    #[arg(long)]
    count: Option<usize>,
    /// Square image side; at least 32 and divisible by 4 [default: 64].
    #[arg(long)]
    side: Option<usize>,
    /// Object/background mean-intensity gap in (0, 0.5] [default: 0.3].
    #[arg(long)]
    contrast: Option<f64>,
    /// Frames per sample; 1 selects image mode [default: 1].
    #[arg(long = "clip-len")]
    clip_len: Option<usize>,
    /// RNG seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest listing training samples.
    #[arg(long)]
    data: PathBuf,
    /// Optional `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path; the CSV log lands next to it as <out>.log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Auxiliary objective: pow2, exp1 (any powA/expA), wbce, or off.
    #[arg(long)]
    ual: Option<String>,
    /// Coefficient ramp: cosine, linear, or constant.
    #[arg(long)]
    schedule: Option<String>,
    /// Scale-integration head count.
    #[arg(long)]
    heads: Option<usize>,
    /// Refinement group count; must be at least 2.
    #[arg(long)]
    groups: Option<usize>,
    /// Comma-separated pyramid scales, e.g. 0.5,1.0,1.5.
    #[arg(long)]
    scales: Option<String>,
    /// Finer-than-target alignment operator: hybrid, max, avg, or bilinear.
    #[arg(long)]
    downsample: Option<String>,
    /// Frames per clip; 1 selects image mode.
    #[arg(long = "clip-len")]
    clip_len: Option<usize>,
    /// RNG seed for initialization, shuffling, and augmentation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest listing input samples (masks supply the output size).
    #[arg(long)]
    data: PathBuf,
    /// Directory that receives one PGM probability map per frame.
    #[arg(long)]
    out: PathBuf,
    /// Proceed even if the stored config digest disagrees with the config text.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted PGM maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth PGM masks; stems must match --pred exactly.
    #[arg(long)]
    gt: PathBuf,
    /// CSV report path: one row per image plus a mean row.
    #[arg(long)]
    out: PathBuf,
    /// Optional directory for 256-point PR, F-measure, and E-measure curves.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Registry slice to run: all, tensor, mhsiu, rgpu, or model.
    #[arg(long, default_value = "all")]
    module: String,
    /// Seed for the randomized check inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure with its process exit code.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

/// Core errors surfacing outside config resolution are data problems,
/// except non-finite arithmetic, which is a numerical failure.
fn from_tensor(e: TensorError) -> CliError {
    match e {
        TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => run_synth(&a),
        Cmd::Train(a) => run_train(&a),
        Cmd::Predict(a) => run_predict(&a),
        Cmd::Eval(a) => run_eval(&a),
        Cmd::Gradcheck(a) => run_gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Validate the optional ZNEXT_THREADS cap and report the worker count.
/// Compute is sequential, so any positive cap resolves to one worker.
fn worker_count() -> Result<usize, CliError> {
    let cap = match std::env::var("ZNEXT_THREADS") {
        Err(VarError::NotPresent) => None,
        Err(VarError::NotUnicode(_)) => {
            return Err(CliError::Usage(
                "ZNEXT_THREADS must be a positive integer".into(),
            ))
        }
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|n| *n >= 1).ok_or_else(
            || CliError::Usage(format!("ZNEXT_THREADS must be a positive integer, got {v:?}")),
        )?),
    };
    let workers = cap.unwrap_or(1).min(1);
    match cap {
        Some(n) => println!("threads: cap {n}, using {workers} (sequential compute)"),
        None => println!("threads: using {workers} (sequential compute)"),
    }
    Ok(workers)
}

// ---------------------------------------------------------------------------
// Configuration resolution: defaults, then config file, then flags.
// ---------------------------------------------------------------------------

/// Fully resolved run settings for `train`.
#[derive(Clone)]
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_ual(value: &str) -> Result<UalChoice, String> {
    let v = value.trim().to_ascii_lowercase();
    let alpha_of = |rest: &str, what: &str| -> Result<f64, String> {
        let a: f64 = rest
            .parse()
            .map_err(|_| format!("bad {what} exponent {rest:?}"))?;
        if !a.is_finite() || a <= 0.0 {
            return Err(format!("{what} exponent must be positive and finite, got {rest}"));
        }
        Ok(a)
    };
    match v.as_str() {
        "off" => Ok(UalChoice::Off),
        "wbce" => Ok(UalChoice::WeightedBce),
        s if s.starts_with("pow") => Ok(UalChoice::Form(UalForm::Pow {
            alpha: alpha_of(&s[3..], "pow")?,
        })),
        s if s.starts_with("exp") => Ok(UalChoice::Form(UalForm::Exp {
            alpha: alpha_of(&s[3..], "exp")?,
        })),
        _ => Err(format!(
            "ual must be off, wbce, pow<alpha>, or exp<alpha>, got {value:?}"
        )),
    }
}

fn ual_label(c: UalChoice) -> String {
    match c {
        UalChoice::Off => "off".into(),
        UalChoice::WeightedBce => "wbce".into(),
        UalChoice::Form(UalForm::Pow { alpha }) => format!("pow{alpha}"),
        UalChoice::Form(UalForm::Exp { alpha }) => format!("exp{alpha}"),
    }
}

fn parse_schedule_kind(value: &str) -> Result<ScheduleKind, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "cosine" => Ok(ScheduleKind::Cosine),
        "linear" => Ok(ScheduleKind::Linear),
        "constant" => Ok(ScheduleKind::Constant),
        _ => Err(format!(
            "schedule must be cosine, linear, or constant, got {value:?}"
        )),
    }
}

fn schedule_kind_label(k: ScheduleKind) -> &'static str {
    match k {
        ScheduleKind::Cosine => "cosine",
        ScheduleKind::Linear => "linear",
        ScheduleKind::Constant => "constant",
    }
}

fn parse_scales(value: &str) -> Result<Vec<Scale>, String> {
    value
        .split(',')
        .map(|s| {
            Scale::from_label(s).ok_or_else(|| format!("bad scale {s:?}; use 0.5, 1.0, or 1.5"))
        })
        .collect()
}

impl Settings {
    /// Apply one `key = value` pair; the error is a bare description the
    /// caller prefixes with its source (config-file line or flag name).
    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |what: &str| format!("bad value {value:?} for {key} ({what})");
        let parse_usize = |raw: &str| raw.trim().parse::<usize>().map_err(|_| bad("integer"));
        let parse_f64 = |raw: &str| {
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad("finite number"))
        };
        let parse_bool = |raw: &str| raw.trim().parse::<bool>().map_err(|_| bad("true/false"));
        match key {
            "channels" => self.model.channels = parse_usize(value)?,
            "levels" => self.model.levels = parse_usize(value)?,
            "heads" => self.model.heads = parse_usize(value)?,
            "groups" => self.model.groups = parse_usize(value)?,
            "clip_len" => self.model.clip_len = parse_usize(value)?,
            "scales" => self.model.set_scales(&parse_scales(value)?),
            "downsample" => {
                self.model.downsample = DownsampleMode::from_name(value)
                    .ok_or_else(|| bad("hybrid, max, avg, or bilinear"))?
            }
            "fusion" => {
                self.model.fusion =
                    Fusion::from_name(value).ok_or_else(|| bad("mhsiu or addition"))?
            }
            "intraframe_attention" => self.model.use_intraframe_attention = parse_bool(value)?,
            "temporal_diffusion" => self.model.use_temporal_diffusion = parse_bool(value)?,
            "temporal_shift" => self.model.use_temporal_shift = parse_bool(value)?,
            "ual" => self.train.ual = parse_ual(value)?,
            "schedule" => self.train.schedule.kind = parse_schedule_kind(value)?,
            "t_min" => self.train.schedule.t_min = parse_f64(value)?,
            "t_max" => self.train.schedule.t_max = parse_f64(value)?,
            "lambda_min" => self.train.schedule.lambda_min = parse_f64(value)?,
            "lambda_max" => self.train.schedule.lambda_max = parse_f64(value)?,
            "lr" => self.train.lr = parse_f64(value)?,
            "epochs" => self.train.epochs = parse_usize(value)?,
            "batch_size" => self.train.batch_size = parse_usize(value)?,
            "augment" => self.train.augment = parse_bool(value)?,
            "seed" => {
                self.train.seed = value.trim().parse::<u64>().map_err(|_| bad("integer"))?
            }
            _ => return Err(format!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    /// Read a `key = value` file; `#` starts a comment, blank lines are
    /// skipped, and unknown keys are rejected.
    fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Usage(format!("{}:{}: {msg}", path.display(), idx + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {raw:?}")))?;
            self.apply(key.trim(), value.trim()).map_err(at)?;
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(CliError::Usage(format!(
                "lr must be positive and finite, got {}",
                t.lr
            )));
        }
        if t.epochs == 0 {
            return Err(CliError::Usage("epochs must be at least 1".into()));
        }
        if t.batch_size == 0 {
            return Err(CliError::Usage("batch_size must be at least 1".into()));
        }
        let s = &t.schedule;
        if !(0.0 <= s.t_min && s.t_min <= s.t_max && s.t_max <= 1.0) {
            return Err(CliError::Usage(format!(
                "schedule window must satisfy 0 <= t_min <= t_max <= 1, got [{}, {}]",
                s.t_min, s.t_max
            )));
        }
        Ok(())
    }

    /// Echo every resolved setting in config-file syntax.
    fn echo(&self) {
        println!("resolved configuration:");
        for line in self.model.digest_string().lines() {
            println!("  {line}");
        }
        let s = &self.train.schedule;
        println!("  ual={}", ual_label(self.train.ual));
        println!("  schedule={}", schedule_kind_label(s.kind));
        println!("  t_min={}", s.t_min);
        println!("  t_max={}", s.t_max);
        println!("  lambda_min={}", s.lambda_min);
        println!("  lambda_max={}", s.lambda_max);
        println!("  lr={}", self.train.lr);
        println!("  epochs={}", self.train.epochs);
        println!("  batch_size={}", self.train.batch_size);
        println!("  augment={}", self.train.augment);
        println!("  seed={}", self.train.seed);
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        count: args.count.unwrap_or(d.count),
        side: args.side.unwrap_or(d.side),
        contrast: args.contrast.unwrap_or(d.contrast),
        clip_len: args.clip_len.unwrap_or(d.clip_len),
        seed: args.seed.unwrap_or(d.seed),
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    worker_count()?;
    println!("resolved configuration:");
    println!("  count={}", spec.count);
    println!("  side={}", spec.side);
    println!("  contrast={}", spec.contrast);
    println!("  clip_len={}", spec.clip_len);
    println!("  seed={}", spec.seed);
    let manifest = write_dataset(&spec, &args.out).map_err(from_tensor)?;
    println!(
        "wrote {} samples under {}",
        spec.count,
        args.out.display()
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_file(path)?;
    }
    let flag = |name: &str, msg: String| CliError::Usage(format!("--{name}: {msg}"));
    if let Some(v) = &args.ual {
        s.apply("ual", v).map_err(|m| flag("ual", m))?;
    }
    if let Some(v) = &args.schedule {
        s.apply("schedule", v).map_err(|m| flag("schedule", m))?;
    }
    if let Some(v) = args.heads {
        s.model.heads = v;
    }
    if let Some(v) = args.groups {
        s.model.groups = v;
    }
    if let Some(v) = &args.scales {
        s.apply("scales", v).map_err(|m| flag("scales", m))?;
    }
    if let Some(v) = &args.downsample {
        s.apply("downsample", v).map_err(|m| flag("downsample", m))?;
    }
    if let Some(v) = args.clip_len {
        s.model.clip_len = v;
    }
    if let Some(v) = args.seed {
        s.train.seed = v;
    }
    s.validate()?;
    worker_count()?;
    s.echo();

    let video = s.model.clip_len > 1;
    let samples = load_samples::<f32>(&args.data, video).map_err(from_tensor)?;
    println!(
        "loaded {} {} from {}",
        samples.len(),
        if video { "clips" } else { "images" },
        args.data.display()
    );
    let (mut store, model) = Model::build::<f32>(&s.model, s.train.seed).map_err(from_tensor)?;
    println!("trainable parameters: {}", store.trainable_scalars());

    let report = train(&model, &mut store, &samples, &s.train).map_err(|e| match e {
        TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        TrainError::Other(t) => from_tensor(t),
    })?;
    for row in &report.epoch_logs {
        println!(
            "epoch {:>4}  loss {:.6}  lambda {:.4}  lr {:.3e}",
            row.epoch, row.loss, row.lambda, row.lr
        );
    }

    save_checkpoint(&args.out, &store, &s.model.digest_string()).map_err(from_tensor)?;
    let log_path = PathBuf::from(format!("{}.log.csv", args.out.display()));
    std::fs::write(&log_path, report.to_csv())
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    println!("checkpoint: {}", args.out.display());
    println!("training log: {}", log_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn run_predict(args: &PredictArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<f32>(&args.ckpt).map_err(from_tensor)?;
    if !ckpt.digest_consistent() {
        if !args.force {
            return Err(CliError::Data(format!(
                "{}: stored config digest does not match the config text; pass --force to proceed",
                args.ckpt.display()
            )));
        }
        println!("warning: config digest mismatch overridden by --force");
    }
    let cfg = ModelConfig::from_digest_string(&ckpt.config_text).map_err(from_tensor)?;
    worker_count()?;
    println!("resolved configuration:");
    for line in cfg.digest_string().lines() {
        println!("  {line}");
    }

    let (mut store, model) = Model::build::<f32>(&cfg, 0).map_err(from_tensor)?;
    apply_tensors(&mut store, &ckpt).map_err(from_tensor)?;

    let video = cfg.clip_len > 1;
    let samples = load_samples::<f32>(&args.data, video).map_err(from_tensor)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;

    let mut written = 0usize;
    for sample in &samples {
        let images = sample.image_stack().map_err(from_tensor)?;
        let clip = sample.frames.len() > 1;
        let probs = model.predict(&mut store, &images, clip).map_err(from_tensor)?;
        let (h, w) = (probs.shape()[2], probs.shape()[3]);
        for (t, stem) in sample.frame_names.iter().enumerate() {
            let plane = &probs.data()[t * h * w..(t + 1) * h * w];
            let frame =
                Tensor::new(&[1, 1, h, w], plane.to_vec()).map_err(from_tensor)?;
            let mask_shape = sample.frames[t].mask.shape();
            let (gt_h, gt_w) = (mask_shape[1], mask_shape[2]);
            let sized = predict_to_gt_size(&frame, gt_h, gt_w).map_err(from_tensor)?;
            let path = args.out.join(format!("{stem}.pgm"));
            write_pgm(&path, &sized).map_err(from_tensor)?;
            written += 1;
        }
    }
    println!(
        "wrote {written} prediction maps to {}",
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Map of file stem to path for every `.pgm` directly inside `dir`.
fn pgm_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        out.insert(stem, path);
    }
    Ok(out)
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let preds = pgm_stems(&args.pred)?;
    let gts = pgm_stems(&args.gt)?;
    let missing_pred: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    let missing_gt: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut msg = String::from("prediction and ground-truth sets disagree;");
        if !missing_pred.is_empty() {
            msg.push_str(&format!(
                " missing predictions for {:?};",
                missing_pred.iter().take(10).collect::<Vec<_>>()
            ));
        }
        if !missing_gt.is_empty() {
            msg.push_str(&format!(
                " predictions without ground truth {:?};",
                missing_gt.iter().take(10).collect::<Vec<_>>()
            ));
        }
        return Err(CliError::Data(msg));
    }
    if preds.is_empty() {
        return Err(CliError::Data(format!(
            "no .pgm files found in {}",
            args.pred.display()
        )));
    }
    worker_count()?;
    println!("scoring {} prediction/ground-truth pairs", preds.len());

    let mut names = Vec::with_capacity(preds.len());
    let mut items: Vec<ImageMetrics> = Vec::with_capacity(preds.len());
    for (stem, pred_path) in &preds {
        let pred = read_pgm::<f64>(pred_path).map_err(from_tensor)?;
        let gt = read_mask::<f64>(&gts[stem]).map_err(from_tensor)?;
        let m = evaluate_pair(&pred, &gt).map_err(|e| {
            CliError::Data(format!("{stem}: {e}"))
        })?;
        names.push(stem.clone());
        items.push(m);
    }
    let report = aggregate(&items);
    let csv = report_csv(&names, &items, &report);
    std::fs::write(&args.out, csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    println!("report: {}", args.out.display());

    if let Some(dir) = &args.curves {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let (pr, f, e) = curves_csv(&report);
        for (name, text) in [("pr_curve.csv", pr), ("f_curve.csv", f), ("e_curve.csv", e)] {
            let path = dir.join(name);
            std::fs::write(&path, text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        }
        println!("curves: {}", dir.display());
    }

    println!(
        "mean over {} images: s_measure {:.4}  weighted_f {:.4}  mae {:.4}  max_f {:.4}  mean_e {:.4}  dice {:.4}  iou {:.4}",
        report.count,
        report.s_measure,
        report.weighted_f,
        report.mae,
        report.max_f,
        report.mean_e,
        report.m_dice,
        report.m_iou
    );
    if report.empty_gt_count > 0 {
        println!(
            "warning: {} ground-truth masks are empty; their weighted F-measure is reported as 0",
            report.empty_gt_count
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    const MODULES: [&str; 5] = ["all", "tensor", "mhsiu", "rgpu", "model"];
    if !MODULES.contains(&args.module.as_str()) {
        return Err(CliError::Usage(format!(
            "--module must be one of {}, got {:?}",
            MODULES.join(", "),
            args.module
        )));
    }
    let corrupt = match std::env::var("ZNEXT_GRADCHECK_CORRUPT") {
        Ok(v) => !v.is_empty() && v != "0",
        Err(_) => false,
    };
    worker_count()?;
    println!("module={} seed={}", args.module, args.seed);
    if corrupt {
        println!("warning: ZNEXT_GRADCHECK_CORRUPT is set; analytic gradients are deliberately corrupted");
    }
    let report = run_registry(&args.module, args.seed, corrupt);
    let mut failed = 0usize;
    for o in &report.outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{:<24} {:<8} max_rel_err {:>12.4e}  tol {:>7.0e}  {}",
            o.name, o.module, o.max_rel_err, o.tol, verdict
        );
        if let Some(err) = &o.error {
            println!("{:<24} {:<8} error: {err}", "", "");
        }
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "{} of {} gradient checks passed",
        report.outcomes.len() - failed,
        report.outcomes.len()
    );
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "{failed} of {} gradient checks failed",
            report.outcomes.len()
        )))
    }
}
