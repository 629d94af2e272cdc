//! The `bnn` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime or numeric
//! error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::arch::{
    build_densenet, build_lenet, build_resnet, DenseNetSpec, ModelGraph, ResNetSpec, ResNetWidth,
    CIFAR_INPUT, IMAGENET_INPUT,
};
use crate::bench;
use crate::data::{load_cifar10, load_mnist, Augment, Dataset};
use crate::error::BnnError;
use crate::layers::{QKernel, ScalingMode};
use crate::modelio;
use crate::train::{self, LrSchedule, Optimizer, TrainConfig, DEFAULT_TCLIP_GRID};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(BnnError),
    #[error("{0}")]
    Runtime(BnnError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<BnnError> for CliError {
    fn from(e: BnnError) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "bnn",
    version,
    about = "Train, evaluate, size and benchmark binary neural networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write model.bnn, report.csv and config.json.
    Train(TrainCmd),
    /// Score a saved model on a test split.
    Eval(EvalCmd),
    /// Time the binary GEMM against float GEMMs.
    Bench(BenchCmd),
    /// Report parameter count and file sizes of a model spec.
    Size(SizeCmd),
    /// Re-encode a saved model file.
    Export(ExportCmd),
    /// Run a t_clip sweep or a scaling-mode comparison.
    Sweep(SweepCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelName {
    /// Bit-packed XNOR/popcount.
    Packed,
    /// Float GEMM over the ±1 values.
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Tclip,
    Scaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StorageName {
    /// Binary layers as packed sign bits.
    Packed,
    /// Every tensor as float32.
    Fp,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset to load.
    #[arg(long, value_enum)]
    pub dataset: DatasetName,
    /// Directory holding the dataset files [default: data/<dataset>].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Model spec: name[:key=value,...], e.g. lenet, resnet18:width=wide,
    /// densenet:k=128,b=2.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Base learning rate; decays by 0.1 at 60% and 90% of the epochs.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerName::Adam)]
    pub optimizer: OptimizerName,
    /// Momentum of the SGD optimizer.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// L2 penalty on full-precision conv and dense weights.
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Straight-through estimator threshold.
    #[arg(long, default_value_t = 0.5)]
    pub t_clip: f64,
    /// Scaling mode of binary layers: N, B or FB.
    #[arg(long, default_value_t = ScalingMode::N)]
    pub scaling: ScalingMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable flip and crop augmentation (on by default for cifar10).
    #[arg(long)]
    pub no_augment: bool,
    /// Train on the first N items only.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Evaluate on the first N test items only.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Batch size of evaluation.
    #[arg(long, default_value_t = 500)]
    pub eval_batch: usize,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output directory [default: runs/<model name>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    /// Saved model file.
    #[arg(long)]
    pub model_file: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = KernelName::Packed)]
    pub kernel: KernelName,
    /// Evaluate on the first N test items only.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    /// Square matrix sizes.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum measuring time per kernel and size, in milliseconds.
    #[arg(long, default_value_t = 200)]
    pub min_time_ms: u64,
    /// Also write the results as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SizeCmd {
    /// Model spec; ResNet and DenseNet default to 3×224×224 input and 1000
    /// classes.
    #[arg(long)]
    pub model: String,
    /// Print the layer table as text.
    #[arg(long)]
    pub layers: bool,
    /// Write the layer table as JSON.
    #[arg(long)]
    pub summary_json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportCmd {
    /// Saved model file.
    #[arg(long)]
    pub model_file: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StorageName::Fp)]
    pub storage: StorageName,
}

#[derive(Args, Debug)]
pub struct SweepCmd {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    pub train: TrainArgs,
    /// t_clip values of a tclip sweep.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TCLIP_GRID)]
    pub grid: Vec<f64>,
    /// Output directory [default: runs/sweep-<kind>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model names accepted in a spec string.
pub const MODEL_NAMES: [&str; 7] = [
    "lenet", "resnet18", "resnet26", "resnet34", "resnet50", "resnet68", "densenet",
];

/// Input shape and class count a spec is built for unless it overrides them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecContext {
    pub input_shape: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

fn parse_kv(rest: &str) -> CliResult<Vec<(String, String)>> {
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    rest.split(',')
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                usage(format!("model option {kv:?} is not of the form key=value"))
            })?;
            Ok((k.trim().to_ascii_lowercase(), v.trim().to_string()))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| usage(format!("model option {key}={v} is not a valid number")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!(
            "model option {key}={v} must be true or false"
        ))),
    }
}

fn parse_input(v: &str) -> CliResult<Vec<usize>> {
    match v.to_ascii_lowercase().as_str() {
        "imagenet" => Ok(IMAGENET_INPUT.to_vec()),
        "cifar" | "cifar10" => Ok(CIFAR_INPUT.to_vec()),
        "mnist" => Ok(vec![1, 28, 28]),
        other => {
            let dims: Option<Vec<usize>> = other.split('x').map(|d| d.parse().ok()).collect();
            match dims {
                Some(d) if d.len() == 3 && d.iter().all(|&x| x > 0) => Ok(d),
                _ => Err(usage(format!(
                    "input={v} must be imagenet, cifar, mnist or CxHxW such as 3x32x32"
                ))),
            }
        }
    }
}

fn check_keys(name: &str, kv: &[(String, String)], allowed: &[&str]) -> CliResult<()> {
    for (k, _) in kv {
        if !allowed.contains(&k.as_str()) {
            return Err(usage(format!(
                "unknown option {k:?} for model {name}; valid options: {}",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Builds the graph named by `spec` (`name[:key=value,...]`).
pub fn parse_model_spec(spec: &str, ctx: &SpecContext) -> CliResult<ModelGraph> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let name = name.trim().to_ascii_lowercase();
    let kv = parse_kv(rest)?;
    let get = |key: &str| {
        kv.iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    };
    let mut classes = ctx.num_classes;
    if let Some(v) = get("classes") {
        classes = Some(parse_num("classes", v)?);
    }
    let mut input = ctx.input_shape.clone();
    if let Some(v) = get("input") {
        input = Some(parse_input(v)?);
    }
    let binary = get("binary")
        .map(|v| parse_bool("binary", v))
        .transpose()?
        .unwrap_or(true);
    let g = match name.as_str() {
        "lenet" => {
            check_keys(&name, &kv, &["classes", "binary", "input"])?;
            if let Some(i) = &input {
                if i[..] != [1, 28, 28] {
                    return Err(usage(format!("lenet takes 1x28x28 input, not {i:?}")));
                }
            }
            build_lenet(binary, classes.unwrap_or(10))
        }
        n if n.starts_with("resnet") && MODEL_NAMES.contains(&n) => {
            check_keys(&name, &kv, &["width", "classes", "binary", "input"])?;
            let depth: usize = n["resnet".len()..].parse().expect("listed name");
            let width = match get("width").map(str::to_ascii_lowercase).as_deref() {
                None | Some("thin") => ResNetWidth::Thin,
                Some("wide") => ResNetWidth::Wide,
                Some(other) => return Err(usage(format!("width={other} must be thin or wide"))),
            };
            let mut s = ResNetSpec::preset(depth, width).map_err(|e| usage(e.to_string()))?;
            s.binary = binary;
            if let Some(c) = classes {
                s.num_classes = c;
            }
            if let Some(i) = input {
                s.input_shape = i;
            }
            build_resnet(&s)
        }
        "densenet" => {
            check_keys(
                &name,
                &kv,
                &[
                    "k",
                    "b",
                    "reduction",
                    "bottleneck",
                    "classes",
                    "binary",
                    "input",
                ],
            )?;
            let k = get("k")
                .map(|v| parse_num("k", v))
                .transpose()?
                .unwrap_or(128);
            let b = get("b")
                .map(|v| parse_num("b", v))
                .transpose()?
                .unwrap_or(2);
            let mut s = DenseNetSpec::new(k, b);
            s.binary = binary;
            if let Some(r) = get("reduction") {
                s.reduction = parse_num("reduction", r)?;
            }
            if let Some(v) = get("bottleneck") {
                s.bottleneck = parse_bool("bottleneck", v)?;
            }
            if let Some(c) = classes {
                s.num_classes = c;
            }
            if let Some(i) = input {
                s.input_shape = i;
            }
            build_densenet(&s)
        }
        other => {
            return Err(usage(format!(
                "unknown model {other:?}; valid models: {}",
                MODEL_NAMES.join(", ")
            )))
        }
    };
    g.map_err(|e| usage(format!("cannot build {spec}: {e}")))
}

fn data_dir(args: &DataArgs) -> PathBuf {
    args.data_dir
        .clone()
        .unwrap_or_else(|| Path::new("data").join(args.dataset.dir_name()))
}

/// Loads `(train, test)` of the named dataset.
pub fn load_dataset(args: &DataArgs) -> CliResult<(Dataset, Dataset)> {
    let dir = data_dir(args);
    let r = match args.dataset {
        DatasetName::Mnist => load_mnist(&dir),
        DatasetName::Cifar10 => {
            let nested = dir.join("cifar-10-batches-bin");
            load_cifar10(if nested.is_dir() { nested } else { dir.clone() })
        }
    };
    r.map_err(CliError::Data)
}

fn dataset_context(ds: &Dataset) -> SpecContext {
    SpecContext {
        input_shape: Some(ds.item_shape().to_vec()),
        num_classes: Some(ds.class_count),
    }
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let optimizer = match a.optimizer {
        OptimizerName::Adam => Optimizer::ADAM,
        OptimizerName::Sgd => Optimizer::SgdMomentum {
            momentum: a.momentum,
        },
    };
    let augment =
        (a.data.dataset == DatasetName::Cifar10 && !a.no_augment).then_some(Augment::CIFAR);
    let cfg = TrainConfig {
        optimizer,
        lr: a.lr,
        schedule: LrSchedule::step_decay(a.epochs),
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        t_clip: a.t_clip,
        scaling_mode: a.scaling,
        seed: a.seed,
        augment,
        eval_batch: a.eval_batch,
        train_limit: a.train_limit,
        test_limit: a.test_limit,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.into()))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(e.into()))
}

fn prepare(a: &TrainArgs) -> CliResult<(TrainConfig, Dataset, Dataset, ModelGraph)> {
    let cfg = train_config(a)?;
    // Validate the spec before the (slow) data load.
    parse_model_spec(
        &a.model,
        &SpecContext {
            input_shape: None,
            num_classes: None,
        },
    )?;
    let (train_ds, test_ds) = load_dataset(&a.data)?;
    let graph = parse_model_spec(&a.model, &dataset_context(&train_ds))?;
    if graph.input_shape[..] != *train_ds.item_shape() {
        return Err(usage(format!(
            "model {} takes {:?} input but {:?} items are {:?}",
            a.model,
            graph.input_shape,
            a.data.dataset,
            train_ds.item_shape()
        )));
    }
    if graph.num_classes < train_ds.class_count {
        return Err(usage(format!(
            "model {} outputs {} classes but {:?} has {}",
            a.model, graph.num_classes, a.data.dataset, train_ds.class_count
        )));
    }
    Ok((cfg, train_ds, test_ds, graph))
}

fn cmd_train(c: &TrainCmd) -> CliResult<()> {
    let (cfg, train_ds, test_ds, graph) = prepare(&c.train)?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&graph.name));
    log::info!(
        "model={} params={} train_items={} test_items={} out={}",
        graph.name,
        graph.count_params(),
        train_ds.len(),
        test_ds.len(),
        out.display()
    );
    write_file(
        &out.join("config.json"),
        serde_json::to_vec_pretty(&cfg).expect("config serializes"),
    )?;
    let (model, report) = train::train(&graph, &train_ds, &test_ds, &cfg)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    let path = out.join("model.bnn");
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.into()))?;
    modelio::save(&model, &path)?;
    let last = report.last().expect("at least one epoch");
    println!(
        "test_top1={:.4} test_top5={} model={} report={}",
        last.test_top1,
        last.test_top5
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        path.display(),
        out.join("report.csv").display()
    );
    Ok(())
}

fn cmd_eval(c: &EvalCmd) -> CliResult<()> {
    let (model, storage) = modelio::load(&c.model_file).map_err(CliError::Data)?;
    let (_, test) = load_dataset(&c.data)?;
    if test.item_shape() != model.input_shape() {
        return Err(usage(format!(
            "model takes {:?} input but {:?} items are {:?}",
            model.input_shape(),
            c.data.dataset,
            test.item_shape()
        )));
    }
    let test = match c.test_limit {
        Some(n) if n < test.len() => test.subset(&(0..n).collect::<Vec<_>>())?,
        _ => test,
    };
    // Inputs are normalized with the statistics stored in the model file.
    let test = if test.norm != model.norm {
        Dataset::from_pixels(
            &test.denormalized_pixels(),
            [
                test.item_shape()[0],
                test.item_shape()[1],
                test.item_shape()[2],
            ],
            test.labels.clone(),
            test.split,
            test.class_count,
            model.norm.clone(),
        )?
    } else {
        test
    };
    let kernel = match c.kernel {
        KernelName::Packed => QKernel::Packed,
        KernelName::Float => QKernel::FloatReference,
    };
    let r = train::evaluate_with(&model, &test, kernel, 500)?;
    println!(
        "items={} storage={storage:?} top1={:.4} top5={} loss={:.6}",
        test.len(),
        r.top1,
        r.top5
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        r.loss
    );
    Ok(())
}

fn cmd_bench(c: &BenchCmd) -> CliResult<()> {
    if c.sizes.is_empty() || c.sizes.contains(&0) {
        return Err(usage("--sizes needs positive sizes"));
    }
    let rows = bench::run(&c.sizes, c.seed, Duration::from_millis(c.min_time_ms))?;
    println!("equality check passed: binary, naive and blocked GEMM agree at every size");
    print!("{}", bench::format_table(&rows));
    if let Some(p) = &c.csv {
        write_file(p, bench::to_csv(&rows))?;
    }
    Ok(())
}

fn cmd_size(c: &SizeCmd) -> CliResult<()> {
    let g = parse_model_spec(
        &c.model,
        &SpecContext {
            input_shape: None,
            num_classes: None,
        },
    )?;
    let params = g.count_params();
    let bin = modelio::predicted_size(&g, true);
    let fp = modelio::predicted_size(&g, false);
    println!("model={}", g.name);
    println!("input={:?} classes={}", g.input_shape, g.num_classes);
    println!("counted_depth={}", g.counted_depth());
    println!("params={params}");
    println!("binary_bytes={bin}");
    println!("fp_bytes={fp}");
    println!("fp_overhead_bytes={}", modelio::format_overhead_bytes(&g));
    println!("ratio={:.3}", fp as f64 / bin as f64);
    if c.layers {
        print!("{}", g.summary_text());
    }
    if let Some(p) = &c.summary_json {
        write_file(
            p,
            serde_json::to_vec_pretty(&g.summary_json()).expect("summary serializes"),
        )?;
    }
    Ok(())
}

fn cmd_export(c: &ExportCmd) -> CliResult<()> {
    let (model, _) = modelio::load(&c.model_file).map_err(CliError::Data)?;
    match c.storage {
        StorageName::Fp => modelio::export_fp(&model, &c.out)?,
        StorageName::Packed => modelio::save(&model, &c.out)?,
    }
    let size = fs::metadata(&c.out)
        .map_err(|e| CliError::Runtime(e.into()))?
        .len();
    println!("wrote {} ({size} bytes)", c.out.display());
    Ok(())
}

fn cmd_sweep(c: &SweepCmd) -> CliResult<()> {
    let (cfg, train_ds, test_ds, graph) = prepare(&c.train)?;
    let out = c.out.clone().unwrap_or_else(|| {
        Path::new("runs").join(match c.kind {
            SweepKind::Tclip => "sweep-tclip",
            SweepKind::Scaling => "sweep-scaling",
        })
    });
    let summary = match c.kind {
        SweepKind::Tclip => {
            if c.grid.is_empty() {
                return Err(usage("--grid needs at least one threshold"));
            }
            if let Some(bad) = c.grid.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
                return Err(usage(format!("threshold {bad} must be positive")));
            }
            let s = train::sweep_tclip(&graph, &train_ds, &test_ds, &c.grid, &cfg)?;
            write_file(&out.join("tclip.csv"), s.to_csv())?;
            let best = s.best().expect("non-empty grid");
            format!(
                "kind=tclip model={} rows={} best_t_clip={} best_top1={:.6}\n",
                graph.name,
                s.rows.len(),
                best.t_clip,
                best.test_top1
            )
        }
        SweepKind::Scaling => {
            let s = train::compare_scaling_modes(&graph, &train_ds, &test_ds, &cfg)?;
            write_file(&out.join("scaling.csv"), s.to_csv())?;
            let finals: Vec<String> = ScalingMode::ALL
                .iter()
                .zip(&s.reports)
                .map(|(m, r)| format!("{m}={:.6}", r.last().expect("at least one epoch").test_top1))
                .collect();
            format!(
                "kind=scaling model={} smoke_max_rel_err={:e} final_top1 {}\n",
                graph.name,
                s.smoke_max_rel_err,
                finals.join(" ")
            )
        }
    };
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Bench(c) => cmd_bench(c),
        Command::Size(c) => cmd_size(c),
        Command::Export(c) => cmd_export(c),
        Command::Sweep(c) => cmd_sweep(c),
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    run_from(std::env::args_os())
}
