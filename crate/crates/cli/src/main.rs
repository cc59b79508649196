//! `liconv`: training, evaluation, verification, benchmarking and feature
//! dumps for LI-Conv segmenters.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use liconv::{Error, Result};

use crate::config::{RunConfig, SyntheticSpec};

#[derive(Parser)]
#[command(name = "liconv", version, about = "Dilated convolutions with lateral inhibition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training: all weights, then LI weights only.
    Train(TrainArgs),
    /// mIoU and per-class IoU of a checkpoint at one or more scale sets.
    Eval(EvalArgs),
    /// Oracle, gradient and invariant battery.
    Verify(VerifyArgs),
    /// Conv vs. LI-Conv timings and whole-model overhead.
    Bench(BenchArgs),
    /// Channel activations before and after one LI layer.
    DumpFeatures(DumpArgs),
    /// Library kernels against the literal reference implementations.
    OracleDiff(OracleArgs),
    /// Prints one LI filter as a text grid.
    KernelDump(KernelArgs),
    /// Writes a synthetic contour dataset to disk.
    Gen(GenArgs),
    /// Parameter and multiply-accumulate counts.
    Count(CountArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory with `manifest.txt`, `images/` and `masks/`.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Synthetic contour data: `seed=<n> [classes=4] [train=64] [val=16] [size=33]`.
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    synthetic: Option<Vec<String>>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Model config TOML (default: the toy segmenter).
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// LI layers on, or the matched baseline.
    #[arg(long, value_enum)]
    li: Option<Switch>,
    /// Phase-1 epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Phase-2 epochs (LI weights only).
    #[arg(long)]
    li_finetune: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated scale set; repeat for several sets.
    #[arg(long = "scales", value_name = "S1,S2,...", value_parser = parse_scale_set)]
    scales: Vec<Vec<f64>>,
    /// `train`, `val`, or `all`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    /// Write predicted masks (first scale set) under `<out>/masks/`.
    #[arg(long)]
    dump_masks: bool,
    /// Debug: score the labels themselves as one-hot logits.
    #[arg(long, hide = true)]
    perfect_oracle: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// About a quarter of the randomized instances.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: flips the surround sign of every LI filter.
    #[arg(long, hide = true)]
    inject_kernel_sign_bug: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    dilations: Option<Vec<usize>>,
    /// Zone half sizes `t`.
    #[arg(long, value_delimiter = ',')]
    zones: Option<Vec<usize>>,
    /// LI rates `e`.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Model config TOML for the whole-model rows (default: toy, 4 classes).
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 129)]
    model_size: usize,
    #[arg(long, default_value_t = 1)]
    model_batch: usize,
    /// Skip the whole-model rows.
    #[arg(long, conflicts_with = "model_only")]
    grid_only: bool,
    /// Skip the operator grid.
    #[arg(long)]
    model_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input image (PNG or PGM/PPM).
    #[arg(long)]
    image: PathBuf,
    /// LI layer name, e.g. `head.branch1.li`.
    #[arg(long)]
    layer: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    DilatedConv,
    Depthwise,
    LiLayer,
    LiConv,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    /// Randomized cases per suite (default: 100, 50, 50, 200).
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct KernelArgs {
    /// Zone half size `t`.
    #[arg(short = 't', long, default_value_t = 1)]
    zone_half_size: usize,
    /// LI rate `e` (sets only the sampling dilation).
    #[arg(short = 'e', long, default_value_t = 1)]
    li_rate: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// LI intensity `w` in [0, 1].
    #[arg(short = 'w', long, default_value_t = 1.0)]
    intensity: f64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    synthetic: Option<Vec<String>>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Classes of the default toy model.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    li: Switch,
    /// Square input side for the MAC count.
    #[arg(long, default_value_t = 129)]
    size: usize,
    /// Per-layer CSV instead of the summary.
    #[arg(long)]
    csv: bool,
}

fn parse_scale_set(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("{v:?} is not a number"))).collect()
}

impl Common {
    fn apply(&self, c: &mut RunConfig) {
        c.output.dir.clone_from(&self.out);
    }
}

impl DataArgs {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        c.data.dataset.clone_from(&self.dataset);
        c.data.synthetic = self.synthetic.as_deref().map(SyntheticSpec::parse).transpose()?;
        Ok(())
    }
}

impl TrainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig { command: Some("train".into()), ..Default::default() };
        self.common.apply(&mut c);
        self.data.apply(&mut c)?;
        c.model.config.clone_from(&self.model_config);
        c.model.li = self.li.map(|s| s == Switch::On);
        let s = &mut c.schedule;
        (s.epochs, s.li_finetune, s.batch) = (self.epochs, self.li_finetune, self.batch);
        (s.lr, s.epsilon, s.l2, s.seed) = (self.lr, self.epsilon, self.l2, self.seed);
        c.over(self.common.config.as_deref())
    }
}

impl EvalArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig { command: Some("eval".into()), ..Default::default() };
        self.common.apply(&mut c);
        self.data.apply(&mut c)?;
        c.model.checkpoint.clone_from(&self.checkpoint);
        c.eval.scales = (!self.scales.is_empty()).then(|| self.scales.clone());
        c.eval.split.clone_from(&self.split);
        c.eval.batch = self.batch;
        c.over(self.common.config.as_deref())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => commands::train(a.run_config()?).map(|_| true),
        Command::Eval(a) => {
            let opts = commands::EvalOptions { dump_masks: a.dump_masks, perfect_oracle: a.perfect_oracle };
            commands::eval(a.run_config()?, opts).map(|_| true)
        }
        Command::Verify(a) => Ok(commands::verify(a.quick, a.seed, a.inject_kernel_sign_bug)),
        Command::Bench(a) => {
            let d = liconv::bench::BenchGrid::default();
            let grid = liconv::bench::BenchGrid {
                channels: a.channels.unwrap_or(d.channels),
                sizes: a.sizes.unwrap_or(d.sizes),
                dilations: a.dilations.unwrap_or(d.dilations),
                zone_half_sizes: a.zones.unwrap_or(d.zone_half_sizes),
                li_rates: a.rates.unwrap_or(d.li_rates),
            };
            let opts = commands::BenchOptions {
                grid: (!a.model_only).then_some(grid),
                reps: liconv::bench::Repetitions { warmup: a.warmup, reps: a.reps },
                model: (!a.grid_only).then_some((a.model_config, a.model_size, a.model_batch)),
                seed: a.seed,
                out: a.out,
            };
            commands::bench(opts).map(|_| true)
        }
        Command::DumpFeatures(a) => {
            let mut c = RunConfig { command: Some("dump-features".into()), ..Default::default() };
            a.common.apply(&mut c);
            c.model.checkpoint = a.checkpoint;
            let c = c.over(a.common.config.as_deref())?;
            commands::dump_features(c, &a.image, &a.layer).map(|_| true)
        }
        Command::OracleDiff(a) => commands::oracle_diff(a.suite_names(), a.cases, a.seed),
        Command::KernelDump(a) => {
            let spec = liconv::LIKernelSpec::new(a.zone_half_size, a.li_rate, a.sigma);
            print!("{}", commands::kernel_dump(&spec, a.intensity)?);
            Ok(true)
        }
        Command::Gen(a) => {
            let mut c = RunConfig { command: Some("gen".into()), ..Default::default() };
            a.common.apply(&mut c);
            c.data.synthetic = a.synthetic.as_deref().map(SyntheticSpec::parse).transpose()?;
            commands::gen(c.over(a.common.config.as_deref())?).map(|_| true)
        }
        Command::Count(a) => {
            print!("{}", commands::count(a.model_config.as_deref(), a.classes, a.li == Switch::On, a.size, a.csv)?);
            Ok(true)
        }
    }
}

impl OracleArgs {
    fn suite_names(&self) -> Vec<&'static str> {
        match self.suite {
            Suite::All => vec!["dilated-conv", "depthwise", "li-layer", "li-conv"],
            Suite::DilatedConv => vec!["dilated-conv"],
            Suite::Depthwise => vec!["depthwise"],
            Suite::LiLayer => vec!["li-layer"],
            Suite::LiConv => vec!["li-conv"],
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
