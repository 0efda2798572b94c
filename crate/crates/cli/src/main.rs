//! Operator surface: config loading, subcommand dispatch, and exit codes
//! (0 success, 1 validation error, 2 runtime failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avchase_core::config::EvalSplit;
use avchase_core::policy::FusionKind;
use avchase_core::runner::{
    self, CliOverrides, RunnerError,
};

#[derive(Parser, Debug)]
#[command(
    name = "avchase",
    about = "Gridworld pursuit lab: moving-sound-source navigation with a differentiable audio-visual policy",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "avchase-out")]
    out: PathBuf,
    #[arg(long = "seed-env", global = true)]
    seed_env: Option<u64>,
    #[arg(long = "seed-init", global = true)]
    seed_init: Option<u64>,
    #[arg(long = "seed-action", global = true)]
    seed_action: Option<u64>,
    #[arg(long = "seed-noise", global = true)]
    seed_noise: Option<u64>,
    /// Fusion strategy: concat, emul, em, or fsa.
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// Number of training updates.
    #[arg(long, global = true)]
    updates: Option<usize>,
    /// Store raw observations and hidden states during eval.
    #[arg(long = "record-obs", global = true)]
    record_obs: bool,
    /// Evaluation sound split: train, val, or test.
    #[arg(long = "eval-split", global = true)]
    eval_split: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the configured grid and print its ASCII map.
    GenEnv,
    /// Train a policy (optionally resuming from a checkpoint).
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run argmax evaluation episodes from a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Re-execute a logged trajectory and verify it bitwise.
    Replay {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Recompute the metric report from an episode-summary JSONL file.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Modality-impact probe over a recorded observation log.
    Impact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// Noise draws averaged per step and modality.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Export intermediate activations for the first recorded observation.
    ExportActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// Layer names (all when omitted).
        #[arg(long)]
        layer: Vec<String>,
    },
    /// Finite-difference check of the full policy gradient.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    if let Err(msg) = init_logging() {
        eprintln!("{msg}");
        return ExitCode::from(1);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with status 0.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("AVCHASE_LOG_LEVEL") {
        Err(_) => "warn".to_string(),
        Ok(v) => {
            let v = v.to_lowercase();
            if !["error", "warn", "info", "debug"].contains(&v.as_str()) {
                return Err(format!(
                    "invalid AVCHASE_LOG_LEVEL '{v}' (expected error, warn, info, or debug)"
                ));
            }
            v
        }
    };
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .try_init()
        .ok();
    Ok(())
}

fn overrides(common: &Common) -> Result<CliOverrides, RunnerError> {
    let fusion = match &common.fusion {
        None => None,
        Some(s) => Some(FusionKind::parse(s).ok_or_else(|| {
            RunnerError::Validation(format!(
                "unknown fusion '{s}' (expected concat, emul, em, or fsa)"
            ))
        })?),
    };
    let eval_split = match common.eval_split.as_deref() {
        None => None,
        Some("train") => Some(EvalSplit::Train),
        Some("val") => Some(EvalSplit::Val),
        Some("test") => Some(EvalSplit::Test),
        Some(other) => {
            return Err(RunnerError::Validation(format!(
                "unknown eval split '{other}' (expected train, val, or test)"
            )))
        }
    };
    Ok(CliOverrides {
        out: Some(common.out.clone()),
        seed_env: common.seed_env,
        seed_init: common.seed_init,
        seed_action: common.seed_action,
        seed_noise: common.seed_noise,
        fusion,
        updates: common.updates,
        eval_split,
    })
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    let ov = overrides(&cli.common)?;
    let out = cli.common.out.clone();
    match cli.cmd {
        Cmd::GenEnv => {
            let cfg = runner::load_config(cli.common.config.as_deref(), &ov)?;
            let ascii = runner::run_gen_env(&cfg, &out)?;
            print!("{ascii}");
            println!(
                "{}x{} grid written to {}",
                cfg.env.width,
                cfg.env.height,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { resume } => {
            let cfg = runner::load_config(cli.common.config.as_deref(), &ov)?;
            let outcome = runner::run_train(&cfg, &out, resume.as_deref())?;
            println!(
                "trained {} update(s), {} env step(s), {} episode(s) completed",
                outcome.updates_run, outcome.env_steps, outcome.episodes_completed
            );
            if let Some((update, report)) = outcome.evals.last() {
                println!(
                    "final eval @ update {update}: srt {:.3} splt {:.3} ssplt {:.3}",
                    report.srt, report.splt, report.ssplt
                );
            }
            println!("checkpoint: {}", outcome.final_checkpoint.display());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            episodes,
        } => {
            let arts = runner::run_eval(
                &checkpoint,
                &out,
                episodes,
                cli.common.record_obs,
                ov.eval_split,
            )?;
            println!(
                "evaluated {} episode(s), {} step(s)",
                arts.episodes, arts.steps
            );
            println!("{}", serde_json::to_string_pretty(&arts.report)?);
            Ok(())
        }
        Cmd::Replay { input } => {
            let outcome = runner::run_replay(&input)?;
            println!(
                "replayed {} episode(s), {} step(s), zero divergent steps",
                outcome.episodes, outcome.steps
            );
            Ok(())
        }
        Cmd::Metrics { input } => {
            let report = runner::run_metrics(&input, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Cmd::Impact {
            checkpoint,
            obs,
            repeats,
        } => {
            let scores =
                runner::run_impact(&checkpoint, &obs, &out, cli.common.seed_noise, repeats)?;
            println!(
                "probed {} step(s); impact written to {}",
                scores.len(),
                out.join("impact.csv").display()
            );
            Ok(())
        }
        Cmd::ExportActivations {
            checkpoint,
            obs,
            layer,
        } => {
            let count = runner::run_export_activations(&checkpoint, &obs, &out, &layer)?;
            println!(
                "exported {} activation(s) to {}",
                count,
                out.join("activations.json").display()
            );
            Ok(())
        }
        Cmd::GradCheck { seed } => {
            let results = runner::run_grad_check(seed)?;
            let mut worst: f64 = 0.0;
            for (kind, err) in &results {
                println!("{}: max rel error {:.3e}", kind.as_str(), err);
                worst = worst.max(*err);
            }
            println!("max rel error {worst:.3e}");
            if worst <= 1e-4 {
                Ok(())
            } else {
                Err(RunnerError::Validation(format!(
                    "gradient check failed: {worst:.3e} > 1e-4"
                )))
            }
        }
    }
}
