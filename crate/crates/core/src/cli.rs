//! The `dfcr` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command itself
//! fails (including a failed gradient or oracle check).

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ctc::{oracle_sweep, OracleLimits};
use crate::data::{generate_dataset, load_dataset, render_sample, DatasetSpec, Distortion, GrayImage};
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::{parse_deformable_set, parse_size, Model, ModelConfig};
use crate::nn::{trace_sampling_locations, write_trace_csv, TraceLayer, TraceUnit};
use crate::settings::{parse_config, Settings};
use crate::tensor::Tensor;
use crate::train::{
    ablation_csv, component_grid, evaluate, grad_check, model_probe, operator_suite,
    placement_grid, run_ablation, train, AblationData, GradCheckOptions, TrainConfig,
    TrainOptions,
};

#[derive(Parser, Debug)]
#[command(name = "dfcr", version, about = "Deformable-convolution CRNN text recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of regular, curved and tilted text.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep deformable placements and architecture components.
    Ablate(AblateArgs),
    /// Export the input sampling locations behind one feature unit.
    Trace(TraceArgs),
    /// Check the CTC loss against brute-force path enumeration.
    CtcOracle(OracleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full-width network; lr 5e-5, batch 64, 8 epochs.
    Full,
    /// Narrow network and fast SGD settings for CPU runs.
    Toy,
    /// Three-layer network for smoke tests.
    Tiny,
}

/// Model and optimizer options shared by the commands that build a model.
/// Values are layered as preset, then `--config` file, then flags.
#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Starting point for every setting.
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// `key = value` settings file applied over the preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for weights, shuffling and data.
    #[arg(long)]
    seed: Option<u64>,
    /// Deformable conv indices, e.g. `4,5`, or `none`.
    #[arg(long, value_name = "LIST")]
    deform: Option<String>,
    /// Insert residual blocks.
    #[arg(long, conflicts_with = "no_residual")]
    residual: bool,
    /// Remove residual blocks.
    #[arg(long)]
    no_residual: bool,
    /// Network input size `WxH`.
    #[arg(long, value_name = "WxH")]
    input: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fixed number of optimizer steps (0 runs whole epochs).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Any other setting, `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ModelFlags {
    fn settings(&self) -> Result<Settings> {
        let base = match self.preset {
            Preset::Full => Settings::new(ModelConfig::default(), TrainConfig::default()),
            Preset::Toy => Settings::new(ModelConfig::default().with_toy_widths(), TrainConfig::toy()),
            Preset::Tiny => Settings::new(ModelConfig::tiny(), TrainConfig::toy()),
        };
        let mut s = match &self.config {
            Some(path) => parse_config(path, base)?,
            None => base,
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            s.apply(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            s.set_seed(seed);
        }
        if let Some(d) = &self.deform {
            s.model.deformable_set = if d.trim() == "none" { Default::default() } else { parse_deformable_set(d)? };
        }
        if self.residual {
            s.model.use_residual = true;
        }
        if self.no_residual {
            s.model.use_residual = false;
        }
        if let Some(size) = &self.input {
            s.model.input_size = parse_size(size)?;
        }
        let t = &mut s.train;
        t.learning_rate = self.lr.unwrap_or(t.learning_rate);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.steps = self.steps.unwrap_or(t.steps);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.momentum = self.momentum.unwrap_or(t.momentum);
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (receives `manifest.tsv` and `images/`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    regular: usize,
    #[arg(long, default_value_t = 0)]
    curved: usize,
    #[arg(long, default_value_t = 0)]
    tilted: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Symbols labels are drawn from.
    #[arg(long, default_value = "0123456789")]
    charset: String,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Rendering canvas `WxH`.
    #[arg(long, default_value = "200x64")]
    canvas: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset evaluated during and after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Receives checkpoints, `loss.csv` and `settings.cfg`.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Evaluate every this many steps (needs --eval-data).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Suppress progress lines.
    #[arg(long, short)]
    quiet: bool,
    /// Print the merged settings and exit.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Write per-sample predictions as CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per operator.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative-error tolerance for single operators.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Relative-error tolerance for the whole-model probe.
    #[arg(long, default_value_t = 1e-2)]
    model_tolerance: f64,
    /// Skip the whole-model probe.
    #[arg(long)]
    skip_model: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    Placement,
    Component,
    Both,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum, default_value_t = Grid::Both)]
    grid: Grid,
    /// Receives `placement.csv` and/or `component.csv`.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train_size: usize,
    #[arg(long, default_value_t = 600)]
    test_size: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Suppress progress lines.
    #[arg(long, short)]
    quiet: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// Trained model; a freshly initialized one is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PGM image to trace on; a synthetic sample is rendered when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Text of the rendered sample.
    #[arg(long, default_value = "2024")]
    text: String,
    #[arg(long, value_enum, default_value_t = DistortionArg::Curved)]
    distortion: DistortionArg,
    /// 1-based conv layer of the unit (defaults to the last deformable one).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Unit position; defaults to the center of the layer.
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    col: Option<usize>,
    /// Convolution levels to recurse through.
    #[arg(long, default_value_t = 2)]
    levels: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DistortionArg {
    Regular,
    Curved,
    Tilted,
}

impl From<DistortionArg> for Distortion {
    fn from(d: DistortionArg) -> Self {
        match d {
            DistortionArg::Regular => Distortion::Regular,
            DistortionArg::Curved => Distortion::Curved,
            DistortionArg::Tilted => Distortion::Tilted,
        }
    }
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    max_frames: usize,
    #[arg(long, default_value_t = 4)]
    max_symbols: usize,
    #[arg(long, default_value_t = 4)]
    max_label: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code. Results go to stdout, diagnostics to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", one_line(&e));
            2
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

/// Invalid settings are usage errors; everything else is a runtime failure.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<bool, Failure>;

/// `Ok(false)` means the command ran but its check failed.
fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Trace(a) => trace(a),
        Command::CtcOracle(a) => ctc_oracle(a),
    }
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let spec = DatasetSpec {
        regular: a.regular,
        curved: a.curved,
        tilted: a.tilted,
        charset: a.charset,
        length: (a.min_len, a.max_len),
        canvas: parse_size(&a.canvas).map_err(Failure::Usage)?,
        seed: a.seed,
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} images to {} (regular {}, curved {}, tilted {})",
        manifest.records.len(),
        a.out.display(),
        manifest.count(Distortion::Regular),
        manifest.count(Distortion::Curved),
        manifest.count(Distortion::Tilted)
    );
    Ok(true)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut s = a.model.settings().map_err(Failure::Usage)?;
    if let Some(every) = a.eval_every {
        s.train.eval_every = every;
    }
    if a.dry_run {
        print!("{}", s.to_text());
        return Ok(true);
    }
    let cfg = &s.model;
    let charset = cfg.charset()?;
    let data = load_dataset(&a.data, cfg.input_size, cfg.input_channels, &charset)?;
    let eval_set = match &a.eval_data {
        Some(p) => Some(load_dataset(p, cfg.input_size, cfg.input_channels, &charset)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("settings.cfg"), s.to_text())?;
    let mut model = Model::<f32>::new(s.model.clone())?;
    if !a.quiet {
        eprintln!(
            "training {} parameters on {} samples ({} frames per image)",
            model.num_params(),
            data.len(),
            model.frames()
        );
    }
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        eval_set: eval_set.as_ref(),
        verbose: !a.quiet,
    };
    let report = train(&mut model, &data, &s.train, &opts)?;
    match report.tail_mean(50) {
        Some(l) => println!("final loss {l:.4} over {} steps", report.curve.len()),
        None => println!("no step produced a loss"),
    }
    if let Some((_, eval)) = report.evals.last() {
        print!("{eval}");
    }
    if let Some(ckpt) = report.checkpoints.last() {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(true)
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let mut model = Model::<f32>::load(&a.checkpoint)?;
    let cfg = model.config().clone();
    let data = load_dataset(&a.data, cfg.input_size, cfg.input_channels, model.charset())?;
    let report = evaluate(&mut model, &data, a.batch.max(1))?;
    print!("{report}");
    if let Some(p) = &a.predictions {
        write_file(p, report.predictions_csv().as_bytes())?;
    }
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        seed: a.seed,
        ..Default::default()
    };
    let mut report = grad_check(&operator_suite(a.instances, a.seed), &opts);
    if !a.skip_model {
        let probe = model_probe(&ModelConfig::tiny(), a.seed)?;
        let model_opts = GradCheckOptions { tolerance: a.model_tolerance, ..opts };
        report.merge(grad_check(&[Box::new(probe)], &model_opts));
    }
    print!("{report}");
    let ok = report.passed() && !report.is_empty();
    println!("{}", if ok { "all operators pass" } else { "gradient check FAILED" });
    Ok(ok)
}

fn ablate(a: AblateArgs) -> Outcome {
    let s = a.model.settings().map_err(Failure::Usage)?;
    let spec = |total, seed| DatasetSpec {
        length: (a.min_len, a.max_len),
        charset: s.model.charset.clone(),
        ..DatasetSpec::balanced(total, seed)
    };
    let mut data = AblationData::new(&spec(a.train_size, s.seed), &spec(a.test_size, s.seed.wrapping_add(1000)))?;
    let mut grids = Vec::new();
    if a.grid != Grid::Component {
        grids.push(("placement", placement_grid(&s.model)));
    }
    if a.grid != Grid::Placement {
        grids.push(("component", component_grid(&s.model)));
    }
    std::fs::create_dir_all(&a.out)?;
    let mut complete = true;
    for (name, rows) in grids {
        let results = run_ablation(&rows, &mut data, &s.train, !a.quiet);
        complete &= results.iter().all(|r| !r.failed());
        let csv = ablation_csv(&results);
        let path = a.out.join(format!("{name}.csv"));
        write_file(&path, csv.as_bytes())?;
        println!("{name} -> {}", path.display());
        print!("{csv}");
    }
    Ok(complete)
}

fn trace(a: TraceArgs) -> Outcome {
    let mut model = match &a.checkpoint {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::<f32>::new(a.model.settings().map_err(Failure::Usage)?.model)?,
    };
    let cfg = model.config().clone();
    let (w, h) = cfg.input_size;
    let pixels = match &a.image {
        Some(p) => {
            let img = GrayImage::read(p)?;
            resize_bilinear(&img.unit(), (img.width, img.height), (w, h))
        }
        None => {
            let canvas = if w >= 200 { (w, h) } else { (200, 64) };
            let sample = render_sample(&a.text, a.distortion.into(), cfg.seed, canvas)?;
            let unit = GrayImage::from_signed(canvas.0, canvas.1, sample.image.data()).unit();
            resize_bilinear(&unit, canvas, (w, h))
        }
    };
    let c = cfg.input_channels;
    let image = Tensor::from_data(&[c, h, w], pixels.iter().cycle().take(c * w * h).copied().collect())?;
    let stack = model.trace_stack(&image)?;
    let layer_id = a
        .layer
        .or_else(|| cfg.deformable_set.iter().next_back().copied())
        .unwrap_or(cfg.conv_widths.len());
    let (index, (lh, lw)) = stack
        .iter()
        .enumerate()
        .find_map(|(i, l)| match l {
            TraceLayer::Conv { id, out_extent, .. } if *id == layer_id => Some((i, *out_extent)),
            _ => None,
        })
        .ok_or_else(|| Error::Config(format!("no conv layer {layer_id}")))?;
    let unit = TraceUnit {
        layer: index,
        channel: a.channel,
        row: a.row.unwrap_or(lh / 2),
        col: a.col.unwrap_or(lw / 2),
    };
    let points = trace_sampling_locations(&stack, unit, a.levels)?;
    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &points)?;
    match &a.out {
        Some(p) => {
            write_file(p, &csv)?;
            println!("{} sampling locations of conv{layer_id} ({}, {}) -> {}", points.len(), unit.row, unit.col, p.display());
        }
        None => std::io::stdout().write_all(&csv)?,
    }
    Ok(true)
}

fn ctc_oracle(a: OracleArgs) -> Outcome {
    let limits = OracleLimits {
        max_frames: a.max_frames,
        max_symbols: a.max_symbols,
        max_label: a.max_label,
    };
    let r = oracle_sweep(a.instances, a.seed, limits).map_err(Failure::Usage)?;
    let ok = r.max_abs_diff < a.tolerance;
    println!(
        "{} {} instances, max |loss - brute force| = {:.3e} (tol {:.0e}); worst T={} K={} label {:?}",
        if ok { "PASS" } else { "FAIL" },
        r.instances,
        r.max_abs_diff,
        a.tolerance,
        r.worst.0,
        r.worst.1,
        r.worst.2
    );
    Ok(ok)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
