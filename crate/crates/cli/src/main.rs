//! `vat`: train, evaluate and query the few-shot segmentation network.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vat_core::harness::config::RunConfig;
use vat_core::harness::container::TensorContainer;
use vat_core::harness::eval::evaluate;
use vat_core::harness::model::VatModel;
use vat_core::harness::predict::{mask_container, PredictRequest};
use vat_core::harness::selfcheck::{bench_attn_table, run_selfcheck};
use vat_core::harness::train::{held_out_episodes, load_model, training_episodes, Trainer};
use vat_core::nn::ParamSet;

#[derive(Parser, Debug)]
#[command(
    name = "vat",
    version,
    about = "Few-shot segmentation by 4D correlation aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synthetic episodes, writing checkpoints and a loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a sorted `key: value` report.
    Eval(EvalArgs),
    /// Predict a query mask from a request container.
    Predict(PredictArgs),
    /// Print windowed vs dense attention-score counts.
    BenchAttn(BenchArgs),
    /// Run the built-in oracle and invariant checks.
    Selfcheck(SelfcheckArgs),
}

/// Run configuration. Precedence, lowest first: profile, `--config` file,
/// individual flags, then the `VAT_SEED` environment variable.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Base profile: desk (64×64, D = 32) or full.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated appearance widths.
    #[arg(long)]
    appearance: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    train_episodes: Option<String>,
    #[arg(long)]
    eval_episodes: Option<String>,
    #[arg(long)]
    freeze_backbone: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    cosine_decay: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 21] {
        [
            ("appearance", &self.appearance),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("checkpoint_every", &self.checkpoint_every),
            ("cosine_decay", &self.cosine_decay),
            ("depth", &self.depth),
            ("dim", &self.dim),
            ("eval_episodes", &self.eval_episodes),
            ("freeze_backbone", &self.freeze_backbone),
            ("heads", &self.heads),
            ("image_size", &self.image_size),
            ("levels", &self.levels),
            ("lr", &self.lr),
            ("mlp_ratio", &self.mlp_ratio),
            ("seed", &self.seed),
            ("shots", &self.shots),
            ("steps", &self.steps),
            ("tau", &self.tau),
            ("train_episodes", &self.train_episodes),
            ("weight_decay", &self.weight_decay),
            ("window", &self.window),
        ]
    }

    /// Whether anything beyond the default profile was given.
    fn is_explicit(&self) -> bool {
        self.profile != "desk"
            || self.config.is_some()
            || self.overrides().iter().any(|(_, v)| v.is_some())
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::profile(&self.profile)?;
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .with_context(|| format!("reading {}", path.display()))?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint; flags may change non-architecture fields such as `steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the running loss every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    /// The run's training episodes.
    Train,
    /// Episodes of shape/colour combinations never seen in training.
    HeldOut,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "held-out")]
    split: EvalSplit,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Request container holding images or precomputed backbone features.
    #[arg(long)]
    input: PathBuf,
    /// Response container with a u8 `mask` entry.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Grid sides of the 4D volumes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8, 12, 16])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    window: usize,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_param_count(params: &ParamSet) {
    println!(
        "parameters: {} total, {} trainable",
        params.num_elements(),
        params.num_trainable()
    );
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let cfg = args
                .config
                .is_explicit()
                .then(|| args.config.resolve())
                .transpose()?;
            Trainer::resume(path, cfg)
                .with_context(|| format!("resuming from {}", path.display()))?
        }
        None => Trainer::new(args.config.resolve()?)?,
    };
    let cfg = trainer.config().clone();
    print_param_count(trainer.params());
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    let mut curve = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(args.out.join("loss.txt"))?;
    let start = Instant::now();
    let out = args.out.clone();
    let log_every = args.log_every.max(1);
    let mut window = Vec::new();
    trainer.run(|t, loss| {
        let step = t.step_count();
        writeln!(curve, "{step} {loss:.17e}")?;
        window.push(loss);
        if step % log_every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "step {step:>6}  loss {mean:.5}  {:.1}s",
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            t.save(&out.join(format!("step_{step:06}.vat")))?;
        }
        Ok(())
    })?;
    let final_path = args.out.join("final.vat");
    trainer.save(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn load(path: &Path, args: &ConfigArgs) -> Result<(RunConfig, VatModel, ParamSet)> {
    let container =
        TensorContainer::read(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = args.is_explicit().then(|| args.resolve()).transpose()?;
    let loaded = load_model(&container, cfg.as_ref())?;
    print_param_count(&loaded.2);
    Ok(loaded)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (cfg, model, params) = load(&args.checkpoint, &args.config)?;
    let episodes = match args.split {
        EvalSplit::Train => training_episodes(&cfg)?,
        EvalSplit::HeldOut => held_out_episodes(&cfg)?,
    };
    let report = evaluate(&model, &params, &episodes, cfg.tau, cfg.seed)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        fs::write(path, report.to_text())?;
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let (cfg, model, params) = load(&args.checkpoint, &args.config)?;
    let input = TensorContainer::read(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let request = PredictRequest::from_container(&input)?;
    let mask = request.run(&model, &params, cfg.tau)?;
    mask_container(&mask)?.write(&args.output)?;
    println!("foreground pixels: {}", mask.sum());
    Ok(())
}

fn selfcheck(args: &SelfcheckArgs) -> Result<bool> {
    let mut ok = true;
    for c in run_selfcheck(args.seed) {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::BenchAttn(a) => {
            if a.window == 0 || a.grid.contains(&0) {
                Err(anyhow::anyhow!("grid sides and window must be positive"))
            } else {
                print!("{}", bench_attn_table(&a.grid, a.window));
                Ok(true)
            }
        }
        Command::Selfcheck(a) => selfcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
