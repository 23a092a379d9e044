//! Command-line driver: `train`, `infer`, `eval`, `gradcheck`, `synth`.
//!
//! Every command also accepts `--config <path>`, a file of `key=value` lines
//! using the long flag names (`lr=0.0002`, `non-saturating=true`). Flags on
//! the command line win over the file.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pdt_core::data::{split_dataset, tensor_to_rgb, PairedDataset, Split};
use pdt_core::gradcheck::{self, CheckOptions};
use pdt_core::metrics::{self, evaluate_model, retrieval_accuracy};
use pdt_core::networks::convert_eval;
use pdt_core::optim::OptimizerKind;
use pdt_core::synthetic::{self, SyntheticConfig};
use pdt_core::training::{Trainer, TrainingConfig, TrainingMode};
use pdt_core::Tensor;

use crate::checkpoint::{self, Checkpoint, SplitSpec};
use crate::images::{load_image, save_tensor_png};
use crate::lookbook::{load_lookbook, read_colors, write_synthetic};
use crate::report::{loss_line, metric_report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Flags that take no value; in a config file they are written `flag=true`.
const SWITCHES: [&str; 3] = ["non-saturating", "retrieval", "inject-fault"];

#[derive(Parser, Debug)]
#[command(name = "pdt", version, about = "Pixel-level domain transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the converter (and discriminators) on a dataset directory.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Convert source images with a trained checkpoint.
    #[command(args_override_self = true)]
    Infer(InferArgs),
    /// Score a checkpoint on one split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Write a synthetic paired dataset.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Rf,
    Mse,
    #[value(name = "rf_dd")]
    RfDd,
    #[value(name = "rf_dd_noneg")]
    RfDdNoneg,
}

impl From<ModeArg> for TrainingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rf => TrainingMode::Rf,
            ModeArg::Mse => TrainingMode::Mse,
            ModeArg::RfDd => TrainingMode::RfDd,
            ModeArg::RfDdNoneg => TrainingMode::RfDdNoNeg,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GalleryArg {
    /// Targets of every product in the dataset.
    All,
    /// Targets of training products only.
    Train,
}

#[derive(Args, Debug)]
struct Common {
    /// File of key=value lines with the same keys as the long flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Arithmetic width.
    #[arg(long, default_value_t = 32)]
    bits: u32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "rf_dd")]
    mode: ModeArg,
    #[arg(long, default_value_t = 30)]
    epochs: u32,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Last epoch at the initial rate [default: min(25, epochs)].
    #[arg(long)]
    lr_drop_epoch: Option<u32>,
    #[arg(long, default_value_t = 2e-5)]
    lr_after: f64,
    #[arg(long, default_value_t = 0.5)]
    momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerArg,
    /// Converter maximizes log D on its outputs instead of minimizing log(1 - D).
    #[arg(long)]
    non_saturating: bool,
    #[arg(long, default_value_t = 0.05)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    test_frac: f64,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// An image file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    /// Output file (single input) or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also measure retrieval by domain-discriminator score.
    #[arg(long)]
    retrieval: bool,
    #[arg(long, value_enum, default_value = "all")]
    gallery: GalleryArg,
    /// Report path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0x9e37)]
    seed: u64,
    /// Precision of the analytic gradients.
    #[arg(long, default_value_t = 64)]
    bits: u32,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Add a case with a deliberately wrong gradient.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    products: usize,
    #[arg(long, default_value_t = 6)]
    colors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Expand `--config <path>` into flags placed before the command-line
/// flags, so the latter override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, Failure> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("cannot read config {path}: {e}")))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("{path}:{}: expected key=value", n + 1));
        };
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        if k == "config" {
            return usage(format!("{path}:{}: config files cannot include other config files", n + 1));
        }
        if SWITCHES.contains(&k.as_str()) {
            match v {
                "true" => injected.push(format!("--{k}")),
                "false" => {}
                _ => return usage(format!("{path}:{}: {k} must be true or false", n + 1)),
            }
        } else {
            injected.push(format!("--{k}"));
            injected.push(v.to_string());
        }
    }
    // Program name and subcommand come first.
    let split = args.len().min(2);
    let mut out = args[..split].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[split..]);
    Ok(out)
}

/// Run the driver on full argv (program name first); returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    match dispatch(args) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(args: Vec<String>) -> Result<(), Failure> {
    let args = expand_config(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return if code == EXIT_OK { Ok(()) } else { Err(Failure::Usage("invalid arguments".into())) };
        }
    };
    match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
    }
}

fn require_32(bits: u32, cmd: &str) -> Result<(), Failure> {
    match bits {
        32 => Ok(()),
        64 => usage(format!("{cmd} runs in 32-bit; 64-bit mode is for gradcheck")),
        b => usage(format!("--bits must be 32 or 64, got {b}")),
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    require_32(a.common.bits, "train")?;
    let config = TrainingConfig {
        mode: a.mode.into(),
        batch_size: a.batch,
        lr: a.lr,
        lr_drop_epoch: a.lr_drop_epoch.unwrap_or(a.epochs.min(25)),
        lr_after_drop: a.lr_after,
        total_epochs: a.epochs,
        momentum: a.momentum,
        seed: a.common.seed,
        width: a.width,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => OptimizerKind::SgdMomentum,
            OptimizerArg::Adam => OptimizerKind::adam(),
        },
        non_saturating: a.non_saturating,
    };
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let split = SplitSpec {
        val_frac: a.val_frac,
        test_frac: a.test_frac,
        seed: a.common.seed,
    };
    println!("train {config:?}");
    println!("split {split:?} data {}", a.data.display());

    let ds = load_split(&a.data, &split)?;
    println!(
        "products train={} val={} test={}, train sources={}",
        ds.products_in(Split::Train).len(),
        ds.products_in(Split::Val).len(),
        ds.products_in(Split::Test).len(),
        ds.pairs(Split::Train).len()
    );
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let log_path = a.out.join("loss.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?);
    let mut trainer = Trainer::new(config).map_err(anyhow::Error::from)?;
    for _ in 0..trainer.config.total_epochs {
        let mut io_err = None;
        let res = trainer.train_epoch(&ds, &mut |r| {
            if let Err(e) = writeln!(log, "{}", loss_line(r)) {
                io_err.get_or_insert(e);
            }
        });
        log.flush().context("cannot write loss log")?;
        if let Some(e) = io_err {
            return Err(anyhow::Error::from(e).context("cannot write loss log").into());
        }
        res.map_err(anyhow::Error::from)?;
        let path = a.out.join(format!("epoch_{:03}.ckpt", trainer.epoch));
        checkpoint::from_trainer(&trainer, &split).save(&path)?;
        println!("epoch {} done, step {}, checkpoint {}", trainer.epoch, trainer.step, path.display());
    }
    let path = a.out.join("final.ckpt");
    checkpoint::from_trainer(&trainer, &split).save(&path)?;
    println!("final checkpoint {}", path.display());
    Ok(())
}

fn load_split(root: &Path, split: &SplitSpec) -> Result<PairedDataset> {
    let ds = load_lookbook(root)?;
    Ok(split_dataset(ds, split.val_frac, split.test_frac, split.seed)?)
}

fn infer(a: InferArgs) -> Result<(), Failure> {
    require_32(a.common.bits, "infer")?;
    let (trainer, _) = checkpoint::to_trainer(&Checkpoint::load(&a.ckpt)?)?;
    let nets = &trainer.nets;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
            .with_context(|| format!("cannot read {}", a.input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        inputs.sort();
        fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
        inputs
            .into_iter()
            .map(|p| {
                let out = a.out.join(p.file_name().unwrap());
                (p, out)
            })
            .collect()
    } else if a.input.is_file() {
        let out = if a.out.is_dir() { a.out.join(a.input.file_name().unwrap()) } else { a.out.clone() };
        vec![(a.input.clone(), out)]
    } else {
        return Err(anyhow::anyhow!("input {} does not exist", a.input.display()).into());
    };
    for (input, out) in jobs {
        let x = load_image(&input)?;
        let batch = x.reshape([1, 3, 64, 64]).map_err(anyhow::Error::from)?;
        let y = convert_eval(&nets.encoder, &nets.decoder, &batch).map_err(anyhow::Error::from)?;
        let y: Tensor<f32> = y.reshape([3, 64, 64]).map_err(anyhow::Error::from)?;
        save_tensor_png(&y, &out)?;
        println!("{} -> {}", input.display(), out.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    require_32(a.common.bits, "eval")?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let (trainer, split) = checkpoint::to_trainer(&ck)?;
    let which: Split = a.split.into();
    println!("eval ckpt {} split {which} mode {} {split:?}", a.ckpt.display(), trainer.config.mode);
    let ds = load_split(&a.data, &split)?;
    if ds.pairs(which).is_empty() {
        return Err(anyhow::anyhow!("split {which} is empty").into());
    }
    let nets = &trainer.nets;
    let report = evaluate_model(&nets.encoder, &nets.decoder, &ds, which, trainer.config.mode.label()).map_err(anyhow::Error::from)?;
    let retrieval = if a.retrieval {
        let gallery: Vec<usize> = match a.gallery {
            GalleryArg::All => (0..ds.len()).collect(),
            GalleryArg::Train => ds.products_in(Split::Train),
        };
        Some(retrieval_accuracy(&nets.domain, &ds, which, &gallery).map_err(anyhow::Error::from)?)
    } else {
        None
    };
    let mut text = metric_report(&report, retrieval.as_ref());
    if let Some(colors) = read_colors(&a.data)? {
        let (hit, total) = color_matches(&trainer, &ds, which, &colors)?;
        text.push_str(&format!("color_match correct={hit} total={total} accuracy={:.6}\n", hit as f64 / total as f64));
    }
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Converted sources whose dominant color equals their product's color.
fn color_matches(
    trainer: &Trainer,
    ds: &PairedDataset,
    split: Split,
    colors: &std::collections::BTreeMap<String, usize>,
) -> Result<(usize, usize)> {
    let palette = colors.values().max().map_or(0, |m| m + 1).max(2);
    let pairs = ds.pairs(split);
    let mut hit = 0;
    for chunk in pairs.chunks(metrics::EVAL_BATCH) {
        let out = metrics::convert_pairs(&trainer.nets.encoder, &trainer.nets.decoder, ds, chunk)?;
        for (i, &(p, _)) in chunk.iter().enumerate() {
            let rgb = tensor_to_rgb(&out.select_item(i))?;
            let want = colors.get(&ds.products()[p].id).copied();
            if want.is_some() && synthetic::dominant_color(&rgb, palette) == want {
                hit += 1;
            }
        }
    }
    Ok((hit, pairs.len()))
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let opts = CheckOptions {
        eps: a.eps,
        seed: a.seed,
        ..CheckOptions::default()
    };
    println!("gradcheck bits={} eps={:e} seed={} tolerance={:e}", a.bits, opts.eps, opts.seed, gradcheck::TOLERANCE);
    let results = match a.bits {
        64 => gradcheck::run_suite::<f64>(&opts, a.inject_fault),
        32 => gradcheck::run_suite::<f32>(&opts, a.inject_fault),
        b => return usage(format!("--bits must be 32 or 64, got {b}")),
    }
    .map_err(anyhow::Error::from)?;
    println!("{:<44} {:>14} {:>7} {:>10}  result", "case", "max_rel_error", "coords", "straddled");
    let mut all = true;
    for r in &results {
        let ok = r.passed();
        all &= ok;
        println!(
            "{:<44} {:>14.3e} {:>7} {:>10}  {}",
            r.name,
            r.max_rel_error,
            r.coords,
            r.straddled,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if all {
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradient check failed").into())
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let config = SyntheticConfig {
        n_products: a.products,
        colors: a.colors,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    println!("synth {config:?} out {}", a.out.display());
    if !(2..=synthetic::PALETTE.len()).contains(&a.colors) {
        return usage(format!("--colors must lie in 2..={}", synthetic::PALETTE.len()));
    }
    let products = synthetic::generate_synthetic(&config).map_err(anyhow::Error::from)?;
    write_synthetic(&a.out, &products)?;
    let sources: usize = products.iter().map(|p| p.sources.len()).sum();
    println!("wrote {} products, {} sources", products.len(), sources);
    Ok(())
}
