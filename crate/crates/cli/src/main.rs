use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use attnrl_cli::commands::{
    print_ablation_summary, print_inspect_report, print_oracle_reports, run_ablation, run_eval,
    run_grad_check, run_reward_inspect, run_rollout, run_train,
};
use attnrl_cli::config::RunConfig;
use attnrl_cli::CliError;

/// Attention-guided self-supervised reward RL engine.
#[derive(Parser)]
#[command(name = "attnrl", version, about)]
struct Cli {
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; relative paths in [paths] are placed under it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run PPO training iterations, writing metrics and checkpoints.
    Train,
    /// Roll out episodes and write dump directories.
    Rollout {
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Start from a fresh initialization when no checkpoint exists.
        #[arg(long)]
        fresh_init: bool,
    },
    /// Evaluate a checkpoint with greedy decoding.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
    },
    /// Recompute per-turn rewards from an episode dump.
    RewardInspect {
        /// Episode dump directory (tokens.txt + attn.bin).
        #[arg(long)]
        dump: PathBuf,
    },
    /// Run the brute-force verification suite.
    GradCheck,
    /// Paired base-vs-ablated training runs with matched seeds.
    Ablate {
        #[arg(long)]
        ablation: String,
        #[arg(long, default_value_t = 32)]
        eval_episodes: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_vars: Vec<(String, String)> = std::env::vars().collect();
    let config = RunConfig::load(
        cli.config.as_deref(),
        &env_vars,
        cli.seed,
        cli.out.as_deref(),
    )?;
    if cli.dump_config {
        print!("{}", config.dump());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config(
            "no subcommand given (try train, rollout, eval, reward-inspect, grad-check, ablate)"
                .into(),
        ));
    };
    match command {
        Command::Train => {
            let outcome = run_train(&config)?;
            eprintln!(
                "trained {} iterations; checkpoint {}, metrics {}",
                outcome.iterations_run,
                outcome.checkpoint.display(),
                outcome.metrics.display()
            );
            if let Some(m) = outcome.final_metrics {
                eprintln!(
                    "final: mean_reward {:+.4} cov {:.4} foc {:+.4} rep {:.4}",
                    m.mean_reward, m.cov, m.foc, m.rep
                );
            }
            Ok(())
        }
        Command::Rollout {
            episodes,
            fresh_init,
        } => {
            let dirs = run_rollout(&config, episodes, fresh_init)?;
            for dir in dirs {
                println!("{}", dir.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
        } => {
            let summary = run_eval(&config, &checkpoint, episodes)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            Ok(())
        }
        Command::RewardInspect { dump } => {
            let report = run_reward_inspect(&config, &dump)?;
            print_inspect_report(&report);
            Ok(())
        }
        Command::GradCheck => {
            let reports = run_grad_check()?;
            if print_oracle_reports(&reports) {
                Ok(())
            } else {
                Err(CliError::OracleFailure(
                    "one or more oracle checks failed".into(),
                ))
            }
        }
        Command::Ablate {
            ablation,
            eval_episodes,
        } => {
            let summary = run_ablation(&config, &ablation, eval_episodes)?;
            print_ablation_summary(&summary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
