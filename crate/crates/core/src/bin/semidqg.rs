use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use semidqg::config::{Config, Scenario};
use semidqg::pipeline::{default_run_root, Manifest, Pipeline, Stage};
use semidqg::{Error, Result};

#[derive(Parser)]
#[command(name = "semidqg", version, about = "Semi-supervised dialogue search-query generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file. Without one, every required key must come
    /// from flags or `--set`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    scenario: Option<ScenarioArg>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Last training stage of `pipeline` and `eval`.
    #[arg(long, global = true, value_enum)]
    stage: Option<StageArg>,

    /// Reopen the newest run of the same configuration and reuse its
    /// completed stages. Implied by every command except `pipeline`.
    #[arg(long, global = true)]
    resume: bool,

    /// Configuration override, e.g. `--set stage2.alpha=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Root of run directories. Defaults to $SEMIDQG_RUN_DIR, then `runs`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate (or load) the corpus.
    Synth,
    /// Train QP and RA on labeled data.
    Stage1,
    /// Pseudo-label, select and train.
    Stage2,
    /// RA-guided reinforcement learning.
    Stage3,
    /// Self-training and distillation baselines.
    Baseline,
    /// Evaluate every model of the run on the test split.
    Eval,
    /// Ranking analysis of the Stage-1 models on dev.
    Analyze,
    /// Stage 1 through the last stage, then evaluation.
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    CrossDomain,
    LowResource,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
    Stage3,
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.scenario {
        let s = match s {
            ScenarioArg::CrossDomain => Scenario::CrossDomain,
            ScenarioArg::LowResource => Scenario::LowResource,
        };
        overrides.push(format!("scenario=\"{s}\""));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(cli.overrides.iter().cloned());
    match &cli.config {
        Some(path) => Config::load(path, &overrides),
        None => Config::parse("", &overrides),
    }
}

fn execute(cli: &Cli) -> Result<Manifest> {
    let cfg = effective_config(cli)?;
    let root = cli.run_dir.clone().unwrap_or_else(default_run_root);
    let resume = cli.resume || cli.command != Command::Pipeline;
    let through = match cli.stage {
        Some(StageArg::Stage1) => Stage::Stage1,
        Some(StageArg::Stage2) => Stage::Stage2,
        Some(StageArg::Stage3) | None => Stage::Stage3,
    };
    let mut p = Pipeline::open(cfg, &root, resume)?;
    match cli.command {
        Command::Synth => {
            p.corpus()?;
        }
        Command::Stage1 => p.stage1()?,
        Command::Stage2 => p.stage2()?,
        Command::Stage3 => {
            if !p.config().stage3.enabled {
                return Err(Error::Config("stage3.enabled is false".into()));
            }
            p.stage3()?
        }
        Command::Baseline => {
            p.baselines()?;
            p.evaluate()?;
        }
        Command::Analyze => {
            let a = p.analyze()?;
            eprintln!(
                "pearson qp {:.4} ra {:.4}; top-1 F1 qp {:.2} ra {:.2} gold {:.2}",
                a.by_qp.pearson_qp, a.by_qp.pearson_ra, a.by_qp.top1_f1_qp, a.by_qp.top1_f1_ra, a.by_qp.top1_f1_gold
            );
        }
        Command::Eval | Command::Pipeline => return p.run(through),
    }
    p.write_manifest()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(manifest) => {
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingKeys(_) | Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
