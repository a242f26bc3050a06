//! The `convmlp` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use convmlp_core::analysis::{count_macs, export_feature_maps, summarize, Reduce};
use convmlp_core::train::{
    evaluate, metrics_csv, synthetic_dataset, train_model, Dataset, Hyper, OptimizerKind, TrainOptions,
};
use convmlp_core::{Error, Model, ModelConfig};

use crate::cifar::{load_cifar10, Split};
use crate::config_text::read_config;
use crate::error::FormatError;
use crate::image::{read_image, write_pgm};
use crate::persist::{load_checkpoint, save_checkpoint, write_tensor_file};
use crate::selftest::{run_selftest, Level};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const EXIT_HELP: &str = "Exit codes:\n  0  success\n  1  usage error (bad flags, unknown variant)\n  2  data or format error (missing/corrupt file, bad image extents)\n  3  numerical check failure (tolerance exceeded, non-finite loss)";

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => CliError::Numerical(e.to_string()),
            Error::UnknownPreset(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Core(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

type CliResult = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "convmlp", version, about = "ConvMLP vision backbones: accounting, training and inspection", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-stage table (or per-layer CSV) of shapes, parameters and MACs.
    #[command(after_help = EXIT_HELP)]
    Summary(SummaryArgs),
    /// Compare parameter and MAC counts against the reference tables.
    #[command(after_help = EXIT_HELP)]
    Count(CountArgs),
    /// Train a model and write a checkpoint and metrics CSV.
    #[command(after_help = EXIT_HELP)]
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    #[command(after_help = EXIT_HELP)]
    Eval(EvalArgs),
    /// Top-k classes for one image.
    #[command(after_help = EXIT_HELP)]
    Infer(InferArgs),
    /// Write normalized feature maps of one pyramid level as PGM and tensor files.
    #[command(after_help = EXIT_HELP)]
    ExportFeatures(ExportArgs),
    /// Run the convolution oracle and gradient-check suites.
    #[command(after_help = EXIT_HELP)]
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Preset name: S, M, L, A0-A5, pure_mlp_baseline or tiny.
    #[arg(long, conflicts_with = "config")]
    variant: Option<String>,
    /// Config file in the `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self, default: &str) -> Result<ModelConfig, CliError> {
        match (&self.variant, &self.config) {
            (_, Some(path)) => Ok(read_config(path)?),
            (Some(v), None) => Ok(ModelConfig::preset(v)?),
            (None, None) => Ok(ModelConfig::preset(default)?),
        }
    }
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected HxW (e.g. 224x224) or a single size, got `{s}`");
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

#[derive(Args, Debug)]
struct SummaryArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input resolution HxW.
    #[arg(long, default_value = "224x224", value_parser = parse_res)]
    res: (usize, usize),
    /// Emit one CSV row per layer (name,kind,out_shape,params,macs).
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input resolution HxW; MAC targets are only compared at 224x224.
    #[arg(long, default_value = "224x224", value_parser = parse_res)]
    res: (usize, usize),
    /// Reference table: 2 (ablation ladder) or 3 (model sizes).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=3))]
    table: u8,
    /// Row to compare against (A0-A5 or S/M/L); defaults to the row of the
    /// same configuration.
    #[arg(long)]
    row: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// `synthetic` or `cifar10:DIR`.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Synthetic class count.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Synthetic image side length.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Keep at most this many CIFAR-10 records.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl DataArgs {
    fn load(&self, seed: u64, split: SplitArg) -> Result<Dataset, CliError> {
        if self.data == "synthetic" {
            return Ok(synthetic_dataset(seed, self.samples, self.classes, self.image_size)?);
        }
        let Some(dir) = self.data.strip_prefix("cifar10:") else {
            return Err(CliError::Usage(format!("--data must be `synthetic` or `cifar10:DIR`, got `{}`", self.data)));
        };
        let split = match split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        Ok(load_cifar10(Path::new(dir), split, self.limit)?)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Seeds the model, the shuffle order and synthetic data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adamw)]
    optimizer: OptimizerArg,
    /// Peak learning rate.
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Fraction of steps spent in linear warmup.
    #[arg(long, default_value_t = 0.05)]
    warmup: f64,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV output path (epoch,loss,top1,lr).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// CIFAR-10 split.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Seed of synthetic data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PGM/PPM (P5/P6) file or tensor file; sides must be multiples of 32.
    #[arg(long)]
    image: PathBuf,
    /// Number of classes to list.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PGM/PPM (P5/P6) file or tensor file; sides must be multiples of 32.
    #[arg(long)]
    image: PathBuf,
    /// Pyramid level 1-4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    stage: u8,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Also export the first K individual channels.
    #[arg(long, default_value_t = 0)]
    channels: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
    level: LevelArg,
}

/// Parses `args` (program name first) and runs the command, returning the
/// exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Summary(a) => summary(a, out),
        Command::Count(a) => count(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer(a, out),
        Command::ExportFeatures(a) => export(a, out),
        Command::Selftest(a) => selftest(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn summary(a: SummaryArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.model.resolve("S")?;
    let (h, w) = a.res;
    if a.csv {
        write!(out, "{}", count_macs(&cfg, h, w)?.to_csv()).map_err(io_err)?;
    } else {
        let model = Model::<f32>::new(&cfg, 0)?;
        write!(out, "{}", summarize(&model, h, w)?).map_err(io_err)?;
    }
    Ok(())
}

/// (row label, preset, params in M, GMACs at 224x224).
const TABLE2: [(&str, &str, f64, f64); 6] = [
    ("A0", "A0", 7.88, 1.47),
    ("A1", "A1", 7.89, 1.59),
    ("A2", "A2", 8.71, 1.65),
    ("A3", "A3", 7.91, 1.59),
    ("A4", "A4", 8.73, 1.65),
    ("A5", "A5", 9.02, 2.40),
];
const TABLE3: [(&str, &str, f64, f64); 3] = [("ConvMLP-S", "S", 9.0, 2.4), ("ConvMLP-M", "M", 17.4, 3.9), ("ConvMLP-L", "L", 42.7, 9.9)];
const PARAM_TOL: f64 = 0.03;
const MAC_TOL: f64 = 0.05;
const DELTA_TOL: f64 = 0.20;

fn count(a: CountArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.model.resolve("S")?;
    let table: &[(&str, &str, f64, f64)] = if a.table == 2 { &TABLE2 } else { &TABLE3 };
    let row = match &a.row {
        Some(label) => table
            .iter()
            .find(|r| r.0.eq_ignore_ascii_case(label) || r.1.eq_ignore_ascii_case(label))
            .ok_or_else(|| CliError::Usage(format!("table {} has no row `{label}`", a.table)))?,
        None => table
            .iter()
            .find(|r| ModelConfig::preset(r.1).is_ok_and(|c| c == cfg))
            .ok_or_else(|| CliError::Usage(format!("this configuration has no row in table {}; pick one with --row", a.table)))?,
    };
    let (h, w) = a.res;
    let report = count_macs(&cfg, h, w)?;
    let mut failed = Vec::new();
    let mut line = |out: &mut dyn Write, what: &str, measured: f64, target: f64, tol: f64, unit: &str, compare: bool| -> CliResult {
        let rel = (measured - target) / target;
        let verdict = if !compare {
            "not compared (target is for 224x224)"
        } else if rel.abs() <= tol {
            "ok"
        } else {
            failed.push(what.to_string());
            "FAIL"
        };
        writeln!(
            out,
            "{what:<7} measured {measured:>8.3}{unit}  target {target:>6.2}{unit}  error {:>+7.2}%  tolerance {:.0}%  {verdict}",
            rel * 100.0,
            tol * 100.0
        )
        .map_err(io_err)
    };
    writeln!(out, "table {} row {} at {h}x{w}", a.table, row.0).map_err(io_err)?;
    line(out, "params", report.mparams(), row.2, PARAM_TOL, "M", true)?;
    line(out, "MACs", report.gmacs(), row.3, MAC_TOL, "G", (h, w) == (224, 224))?;
    if a.table == 2 && row.0 != "A1" {
        let base = count_macs(&ModelConfig::ablation(1)?, h, w)?;
        let base_row = &TABLE2[1];
        let dp = report.mparams() - base.mparams();
        let dm = report.gmacs() - base.gmacs();
        let (tp, tm) = (row.2 - base_row.2, row.3 - base_row.3);
        writeln!(out, "delta vs A1: params {dp:+.3}M (target {tp:+.2}M), MACs {dm:+.3}G (target {tm:+.2}G)").map_err(io_err)?;
        // the two deltas the ladder pins down
        if matches!(row.0, "A2" | "A3") {
            line(out, "delta", dp, tp, DELTA_TOL, "M", true)?;
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("outside tolerance: {}", failed.join(", "))))
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.model.resolve("tiny")?;
    let data = a.data.load(a.seed, SplitArg::Train)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch,
        optimizer: match a.optimizer {
            OptimizerArg::Adamw => OptimizerKind::AdamW,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        },
        hyper: Hyper { lr: a.lr, weight_decay: a.weight_decay, momentum: a.momentum, ..Hyper::default() },
        warmup_fraction: a.warmup,
        seed: a.seed,
    };
    if a.batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let mut model = Model::<f32>::new(&cfg, a.seed)?;
    writeln!(out, "training on {} ({} samples, {} classes)", data.split, data.len(), data.num_classes).map_err(io_err)?;
    let mut write_err = None;
    let history = train_model(&mut model, &data, &opts, |m| {
        if let Err(e) = writeln!(out, "epoch {:>3}  loss {:.6}  top1 {:.4}  lr {:.3e}", m.epoch, m.loss, m.top1, m.lr) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    if let Some(path) = &a.metrics {
        std::fs::write(path, metrics_csv(&history)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &a.out {
        save_checkpoint(&model, path)?;
        writeln!(out, "checkpoint written to {}", path.display()).map_err(io_err)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let model: Model<f32> = load_checkpoint(&a.ckpt, None)?;
    let data = a.data.load(a.seed, a.split)?;
    let top1 = evaluate(&model, &data, a.batch)?;
    writeln!(out, "top1 {top1:.6} ({} samples)", data.len()).map_err(io_err)?;
    Ok(())
}

/// Ranks classes by probability, lowest index first among equals.
pub fn top_k(logits: &[f32], k: usize) -> Vec<(usize, f64)> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exp: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let mut ranked: Vec<(usize, f64)> = exp.iter().map(|e| e / z).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(k);
    ranked
}

fn infer(a: InferArgs, out: &mut dyn Write) -> CliResult {
    let model: Model<f32> = load_checkpoint(&a.ckpt, None)?;
    let x = read_image(&a.image)?;
    let logits = model.infer(&x)?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("non-finite logits".into()));
    }
    writeln!(out, "rank class probability").map_err(io_err)?;
    for (rank, (class, p)) in top_k(logits.data(), a.top).into_iter().enumerate() {
        writeln!(out, "{:>4} {class:>5} {p:.6}", rank + 1).map_err(io_err)?;
    }
    Ok(())
}

fn export(a: ExportArgs, out: &mut dyn Write) -> CliResult {
    let model: Model<f32> = load_checkpoint(&a.ckpt, None)?;
    let x = read_image(&a.image)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let stage = a.stage as usize;
    let mut maps = vec![(format!("stage{stage}_mean"), export_feature_maps(&model, &x, stage, Reduce::Mean)?.remove(0))];
    if a.channels > 0 {
        for (i, m) in export_feature_maps(&model, &x, stage, Reduce::PerChannel(a.channels))?.into_iter().enumerate() {
            maps.push((format!("stage{stage}_ch{i:03}"), m));
        }
    }
    for (name, map) in &maps {
        write_pgm(&a.out.join(format!("{name}.pgm")), map)?;
        write_tensor_file(&a.out.join(format!("{name}.cmlt")), name, map)?;
        writeln!(out, "{name} {}x{}", map.shape()[0], map.shape()[1]).map_err(io_err)?;
    }
    Ok(())
}

fn selftest(a: SelftestArgs, out: &mut dyn Write) -> CliResult {
    let level = match a.level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let start = std::time::Instant::now();
    let mut write_err = None;
    let lines = run_selftest(level, |l| {
        let verdict = if l.passed() { "PASS" } else { "FAIL" };
        if let Err(e) = writeln!(out, "{verdict} {:<32} max rel error {:.3e} (tol {:.0e})", l.name, l.error, l.tol) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    writeln!(out, "{} checks, {} failed, {:.1}s", lines.len(), failed.len(), start.elapsed().as_secs_f64()).map_err(io_err)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("failed checks: {}", failed.join(", "))))
    }
}
