//! `spatial-lab`: forge preference data, train the reward model and policy,
//! run GRPO and evaluate.

mod commands;
mod run;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run::CliError;

#[derive(Parser, Debug)]
#[command(name = "spatial-lab", version, about = "Spatial preference rewards and GRPO for a toy scene generator")]
struct Cli {
    /// JSON config file; its keys override the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build train/eval preference pairs and a manifest.
    Forge(commands::ForgeArgs),
    /// Flow-matching pretraining of the scene policy.
    Pretrain(commands::PretrainArgs),
    /// Train the Gaussian-head reward model.
    TrainReward(commands::TrainRewardArgs),
    /// Pairwise accuracy of a reward model on the eval split.
    EvalReward(commands::EvalRewardArgs),
    /// Fine-tune the policy adapter with group-relative policy optimization.
    Grpo(commands::GrpoArgs),
    /// Oracle satisfaction of one or more policy checkpoints.
    EvalPolicy(commands::EvalPolicyArgs),
    /// Count high-quality samples penalized with and without top-k filtering.
    Diagnose(commands::DiagnoseArgs),
}

fn dispatch(cli: Cli) -> run::CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Forge(a) => commands::forge(a, config),
        Command::Pretrain(a) => commands::pretrain(a, config),
        Command::TrainReward(a) => commands::train_reward(a, config),
        Command::EvalReward(a) => commands::eval_reward(a, config),
        Command::Grpo(a) => commands::grpo(a, config),
        Command::EvalPolicy(a) => commands::eval_policy(a, config),
        Command::Diagnose(a) => commands::diagnose(a, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
