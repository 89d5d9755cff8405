use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use domac::checkpoint::{param_hash, Checkpoint};
use domac::config::{AlgorithmVariant, OmFrozen, Preset, TrainConfig};
use domac::env::write_trajectory;
use domac::selftest;
use domac::trainer::{self, TrainOptions, Trainer};

#[derive(Parser)]
#[command(name = "domac", version, about = "Opponent-model-aided distributional actor-critic on predator-prey")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a team of predators and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
    /// Run the gradient and oracle checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// domac, maac, omac, dmac or ub.
    #[arg(long)]
    variant: Option<AlgorithmVariant>,
    #[arg(long)]
    episodes: Option<usize>,
    /// pp2v1 or pp4v2. Replaces the grid and team sizes of the config.
    #[arg(long)]
    preset: Option<Preset>,
    /// Run directory. Defaults to runs/<variant>_seed<seed>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Hide every prey from the predators' observations.
    #[arg(long)]
    mask_obs: bool,
    /// Output width of the opponent models.
    #[arg(long)]
    om_dim: Option<usize>,
    /// off, random or trained.
    #[arg(long)]
    om_frozen: Option<OmFrozen>,
    /// Checkpoint providing the models for --om-frozen trained.
    #[arg(long)]
    om_checkpoint: Option<PathBuf>,
    /// Number of critic quantiles; 1 gives a scalar critic.
    #[arg(long)]
    quantiles: Option<usize>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the evaluation size stored in the checkpoint's config.
    #[arg(long)]
    episodes: Option<usize>,
    /// Defaults to the seed used by evaluations during training.
    #[arg(long)]
    seed: Option<u64>,
    /// Write one JSON record per step to this file.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args).map_err(Failure::Runtime),
        Command::Inspect(args) => run_inspect(args).map_err(Failure::Runtime),
        Command::Selftest => run_selftest().map_err(Failure::Runtime),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn build_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = args.preset {
        cfg.set_preset(p);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(e) = args.episodes {
        cfg.episodes = e;
    }
    if args.mask_obs {
        cfg.ablation.mask_opponent_obs = true;
    }
    if let Some(d) = args.om_dim {
        cfg.ablation.om_dim = d;
    }
    if let Some(f) = args.om_frozen {
        cfg.ablation.om_frozen = f;
    }
    if let Some(p) = &args.om_checkpoint {
        cfg.ablation.om_checkpoint = p.display().to_string();
    }
    if let Some(k) = args.quantiles {
        cfg.quantiles = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = build_config(&args).map_err(Failure::Usage)?;
    let out = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_seed{}", cfg.variant, cfg.seed)));
    let opts = TrainOptions { resume: args.resume, max_updates: None };
    let summary = trainer::train(&cfg, &out, &opts)
        .with_context(|| format!("training into {}", out.display()))
        .map_err(Failure::Runtime)?;
    println!("run directory: {}", out.display());
    println!("episodes {} update steps {}", summary.episodes, summary.update_steps);
    if let (Some(m), Some(s)) = (summary.final_eval_mean_return, summary.final_eval_std_return) {
        println!("final evaluation return {m:.4} ± {s:.4}");
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let t = Trainer::from_checkpoint(&ck)?;
    let n = args.episodes.unwrap_or(t.config.eval.episodes);
    let seed = args.seed.unwrap_or_else(|| trainer::training_eval_seed(t.config.seed));
    let (rec, trace) = trainer::evaluate_with_trace(&t.agents, &t.config, n, seed, args.dump.is_some())?;
    println!("{} episodes: return {:.4} ± {:.4}", n, rec.mean_return, rec.std_return);
    for i in 0..rec.diagnostics.len() {
        if rec.diagnostics[i].is_empty() {
            continue;
        }
        let show = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "agent {i}: model kld {} entropy {} accuracy {}",
            show(rec.agent_mean(i, |d| d.kld)),
            show(rec.agent_mean(i, |d| d.entropy)),
            show(rec.agent_mean(i, |d| d.accuracy)),
        );
    }
    if let Some(path) = &args.dump {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_trajectory(&mut w, &trace)?;
        w.flush()?;
        println!("wrote {} steps to {}", trace.len(), path.display());
    }
    Ok(())
}

fn run_inspect(args: InspectArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    println!("variant: {}", ck.variant);
    println!("episode: {}", ck.episode);
    println!("update step: {}", ck.update_step);
    println!("parameter hash: {}", param_hash(&ck.blocks));
    let total: usize = ck.blocks.iter().map(|b| b.values.len()).sum();
    println!("parameter blocks: {} ({total} values)", ck.blocks.len());
    for b in &ck.blocks {
        println!("  {} {:?}", b.name, b.shape);
    }
    println!("optimizers: {}", ck.optimizers.len());
    for o in &ck.optimizers {
        println!("  {}", o.name);
    }
    println!("rng streams: {}", ck.rngs.len());
    for r in &ck.rngs {
        println!("  {}", r.name);
    }
    println!("worker environments: {}", ck.envs.len());
    println!("config:\n{}", ck.config_toml.trim_end());
    Ok(())
}

fn run_selftest() -> anyhow::Result<()> {
    let checks = selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
