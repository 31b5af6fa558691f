use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rob::cli::{
    cmd_ablate, cmd_distill, cmd_evaluate, cmd_train_teacher, AblationAxis, Overrides, RunConfig,
};
use rob::Result;

#[derive(Parser)]
#[command(
    name = "rob",
    version,
    about = "Self-supervised distillation into compact students"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Starting configuration (default: desk-dino).
    #[arg(long)]
    preset: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(&Overrides {
            preset: self.preset.clone(),
            config: self.config.clone(),
            seed: self.seed,
            output: self.output.clone(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher with the EMA/centering baseline and register it.
    TrainTeacher(Common),
    /// Distill the registered teacher into a student and evaluate it.
    Distill(Common),
    /// Evaluate a checkpoint on frozen features.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One distillation per value of an axis: head_variant, multicrop or view_policy.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
    /// Print the resolved configuration.
    ShowConfig(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let out = cmd_train_teacher(&c.resolve()?)?;
            println!(
                "teacher {} -> {} ({})",
                out.entry.name,
                out.checkpoint.display(),
                out.digest
            );
        }
        Command::Distill(c) => {
            let out = cmd_distill(&c.resolve()?)?;
            println!("student -> {} ({})", out.checkpoint.display(), out.digest);
            if let Some(r) = out.report {
                println!("{}", r.to_pretty_json());
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let report = cmd_evaluate(&common.resolve()?, &checkpoint)?;
            println!("{}", report.to_pretty_json());
        }
        Command::Ablate { common, axis } => {
            let axis = AblationAxis::parse(&axis)?;
            let report = cmd_ablate(&common.resolve()?, axis)?;
            print!("{}", report.table());
        }
        Command::ShowConfig(c) => print!("{}", c.resolve()?.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(2);
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
