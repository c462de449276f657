use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spider::cli::{self, Ablation};
use spider::config::RunConfig;

/// Prompt-conditioned segmentation on procedural tasks.
#[derive(Parser)]
#[command(name = "spider", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint and loss.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write K-means representative prompt lists for every task.
    ClusterPrompts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict masks for PPM images with one filter per prompt source.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prompt list files or prompt directories.
        #[arg(long = "prompts", required = true, num_args = 1..)]
        prompts: Vec<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate every task on its test split; writes metrics.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one ablation: strategy, prompts, robustness or joint-vs-separate.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        which: String,
    },
    /// Sequentially fine-tune a pretrained checkpoint on new tasks.
    Continual {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the synthetic datasets as PPM images and PGM masks.
    Export {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(config: &PathBuf, checkpoint: Option<PathBuf>) -> spider::Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if checkpoint.is_some() {
        cfg.checkpoint = checkpoint;
    }
    Ok(cfg)
}

fn run(command: Command) -> spider::Result<()> {
    match command {
        Command::Train { config } => {
            let cfg = load(&config, None)?;
            let s = cli::cmd_train(&cfg)?;
            println!(
                "trained: checkpoint={} loss_csv={} final_loss={:e} digest={}",
                s.checkpoint.display(),
                s.loss_csv.display(),
                s.final_loss,
                s.digest
            );
        }
        Command::ClusterPrompts { config, checkpoint } => {
            for p in cli::cmd_cluster_prompts(&load(&config, checkpoint)?)? {
                println!("{}", p.display());
            }
        }
        Command::Infer {
            config,
            checkpoint,
            prompts,
            images,
        } => {
            for p in cli::cmd_infer(&load(&config, checkpoint)?, &images, &prompts)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { config, checkpoint } => {
            println!("{}", cli::cmd_eval(&load(&config, checkpoint)?)?.display());
        }
        Command::Ablate { config, which } => {
            let which = Ablation::parse(&which)?;
            println!("{}", cli::cmd_ablate(&load(&config, None)?, which)?.display());
        }
        Command::Continual { config, checkpoint } => {
            for p in cli::cmd_continual(&load(&config, checkpoint)?)? {
                println!("{}", p.display());
            }
        }
        Command::Export { config } => {
            let n = cli::cmd_export(&load(&config, None)?)?.len();
            println!("exported {n} scenes");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            eprintln!("error[config]: {}", e.to_string().lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
