use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lomo_core::estimator::{self, ArchSpec, MemPrecision};
use lomo_core::trainer::{self, LrSchedule, RunConfig, RunReport};
use lomo_core::{Category, ClipMode, LossScalerState, OptimizerKind, Precision};

#[derive(Parser)]
#[command(name = "lomo", version, about = "Fused-update training on toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write a report.
    Train(RunArgs),
    /// Closed-form memory table for a full-size architecture.
    Estimate(EstimateArgs),
    /// Run LOMO and SGD on the same config and compare final parameters.
    Equivalence(RunArgs),
    /// Divergence between two sequential steps and one step on both samples.
    ImplicitBatch(RunArgs),
    /// Train, then print the memory ledger.
    Profile(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OptArg {
    Sgd,
    Lomo,
    Adamw,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Full,
    Half,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config. Flags below override its fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    optimizer: Option<OptArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Model initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, overrides_with = "no_checkpointing")]
    checkpointing: bool,
    #[arg(long)]
    no_checkpointing: bool,
    #[arg(long, conflicts_with_all = ["max_norm", "no_clip"])]
    clip_value: Option<f64>,
    #[arg(long, conflicts_with = "no_clip")]
    max_norm: Option<f64>,
    /// With --max-norm: clip per window of this many layers.
    #[arg(long, requires = "max_norm")]
    group_window: Option<usize>,
    #[arg(long)]
    no_clip: bool,
    /// Enable dynamic loss scaling with default settings.
    #[arg(long, conflicts_with = "no_scaler")]
    scaler: bool,
    #[arg(long)]
    no_scaler: bool,
    #[arg(long)]
    constant_lr: bool,
    /// Overrides both the config and LOMO_REPORT_DIR.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Print the JSON result instead of a summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, default_value = "llama-7b")]
    preset: String,
    #[arg(long, value_enum, default_value = "mixed16")]
    precision: EstPrecision,
    #[arg(long, default_value_t = 512)]
    seq_len: u64,
    #[arg(long, default_value_t = 8)]
    batch: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstPrecision {
    Mixed16,
    Full32,
}

/// Used when no config file is given: the shipped LOMO defaults on the
/// regression task.
fn default_config() -> RunConfig {
    let mut c = RunConfig::regression(OptimizerKind::Lomo { lr: 5e-2 }, 100, 0);
    c.clip = ClipMode::ByGlobalNorm { max_norm: 1.0 };
    c.lr_schedule = LrSchedule::LinearDecay { warmup_ratio: 0.0 };
    c
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                RunConfig::from_toml(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => default_config(),
        };
        if let Some(o) = self.optimizer {
            let lr = c.optimizer.lr();
            c.optimizer = match o {
                OptArg::Sgd => OptimizerKind::Sgd { lr },
                OptArg::Lomo => OptimizerKind::Lomo { lr },
                OptArg::Adamw => OptimizerKind::adamw(lr),
            };
        }
        if let Some(lr) = self.lr {
            c.optimizer = c.optimizer.with_lr(lr);
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        if let Some(b) = self.batch {
            c.batch = b;
        }
        if let Some(s) = self.seed {
            c.model.seed = s;
        }
        if let Some(s) = self.data_seed {
            c.task.dataset_seed = s;
        }
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::Full => Precision::Full,
                PrecisionArg::Half => Precision::HalfEmulated,
            };
        }
        if self.checkpointing {
            c.checkpointing = true;
        }
        if self.no_checkpointing {
            c.checkpointing = false;
        }
        if self.no_clip {
            c.clip = ClipMode::None;
        }
        if let Some(threshold) = self.clip_value {
            c.clip = ClipMode::ByValue { threshold };
        }
        if let Some(max_norm) = self.max_norm {
            c.clip = match self.group_window {
                Some(window) => ClipMode::ByGroupNorm { max_norm, window },
                None => ClipMode::ByGlobalNorm { max_norm },
            };
        }
        if self.scaler {
            c.scaler = Some(LossScalerState::default());
        }
        if self.no_scaler {
            c.scaler = None;
        }
        if self.constant_lr {
            c.lr_schedule = LrSchedule::Constant;
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    fn report_dir(&self, c: &RunConfig) -> PathBuf {
        self.report_dir.clone().unwrap_or_else(|| trainer::report_dir(c))
    }
}

fn train_and_emit(args: &RunArgs) -> Result<(RunReport, PathBuf), String> {
    let cfg = args.resolve()?;
    let report = trainer::run(&cfg).map_err(|e| e.to_string())?;
    let path = trainer::emit_into(&report, &args.report_dir(&cfg)).map_err(|e| e.to_string())?;
    Ok((report, path))
}

fn cmd_train(args: &RunArgs) -> Result<(), String> {
    let (r, path) = train_and_emit(args)?;
    if args.json {
        println!("{}", r.to_json());
        return Ok(());
    }
    println!(
        "{} steps, loss {:.6} -> {:.6}",
        r.losses.len(),
        r.initial_loss(),
        r.final_loss()
    );
    println!("digest {}", r.final_digest);
    println!("report {}", path.display());
    println!("curve  {}", trainer::curve_path(&path).display());
    Ok(())
}

fn cmd_profile(args: &RunArgs) -> Result<(), String> {
    let (r, path) = train_and_emit(args)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r.memory).map_err(|e| e.to_string())?);
        return Ok(());
    }
    println!("{:<14}{:>14}{:>14}{:>9}", "category", "peak bytes", "current", "share");
    for cat in Category::ALL {
        let u = r.memory.categories[&cat];
        println!(
            "{:<14}{:>14}{:>14}{:>8.1}%",
            format!("{cat:?}"),
            u.peak_bytes,
            u.current_bytes,
            u.peak_share_percent
        );
    }
    let p = r.passes;
    println!(
        "forward passes {}, backward passes {}, forward ops {} ({} recomputed), backward ops {}",
        p.forward_passes, p.backward_passes, p.forward_ops, p.recomputed_ops, p.backward_ops
    );
    println!("report {}", path.display());
    Ok(())
}

fn cmd_equivalence(args: &RunArgs) -> Result<bool, String> {
    let mut cfg = args.resolve()?;
    cfg.precision = Precision::Full;
    cfg.clip = ClipMode::None;
    cfg.scaler = None;
    let lr = cfg.optimizer.lr();
    let mut sgd = cfg.clone();
    sgd.optimizer = OptimizerKind::Sgd { lr };
    let mut lomo = cfg;
    lomo.optimizer = OptimizerKind::Lomo { lr };
    let a = trainer::run(&sgd).map_err(|e| e.to_string())?;
    let b = trainer::run(&lomo).map_err(|e| e.to_string())?;
    let same = a.final_digest == b.final_digest;
    if args.json {
        let v = serde_json::json!({
            "steps": a.losses.len(),
            "sgd_digest": a.final_digest,
            "lomo_digest": b.final_digest,
            "identical": same,
        });
        println!("{v:#}");
    } else {
        println!("sgd  {}", a.final_digest);
        println!("lomo {}", b.final_digest);
        println!("{}", if same { "identical" } else { "DIFFERENT" });
    }
    Ok(same)
}

fn cmd_implicit(args: &RunArgs) -> Result<(), String> {
    let cfg = args.resolve()?;
    let model = lomo_core::build_model(&cfg.model).map_err(|e| e.to_string())?;
    let d_i = cfg.task.sample_batch(1, 0).map_err(|e| e.to_string())?;
    let d_j = cfg.task.sample_batch(1, 1).map_err(|e| e.to_string())?;
    let r = trainer::implicit_batch_experiment(&model, &d_i, &d_j, cfg.optimizer.lr())
        .map_err(|e| e.to_string())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r).map_err(|e| e.to_string())?);
    } else {
        println!("lr {:e}: divergence {:.6e}", r.lr, r.divergence);
        println!("lr {:e}: divergence {:.6e}", r.lr / 2.0, r.divergence_half_lr);
        println!("ratio {:.4}", r.shrink_ratio);
    }
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> Result<(), String> {
    let arch = ArchSpec::preset(&args.preset).ok_or_else(|| format!("unknown preset {}", args.preset))?;
    let precision = match args.precision {
        EstPrecision::Mixed16 => MemPrecision::Mixed16,
        EstPrecision::Full32 => MemPrecision::Full32,
    };
    let rows = estimator::table(&arch, precision, args.seq_len, args.batch).map_err(|e| e.to_string())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows).map_err(|e| e.to_string())?);
    } else {
        println!("{} parameters", arch.param_count());
        print!("{}", estimator::render_table(&rows));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::ImplicitBatch(a) => cmd_implicit(a),
        Command::Equivalence(a) => match cmd_equivalence(a) {
            Ok(false) => return ExitCode::from(2),
            other => other.map(|_| ()),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
