use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collapse_cert::cli::{self, Command, RunOptions};

#[derive(Parser)]
#[command(name = "collapse-cert", version, about = "Teacher-witness collapse certificates for Gaussian VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's output_dir, then $COLLAPSE_CERT_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit and rank PCA-GMM teachers, freeze the best one.
    SearchTeacher(Common),
    /// Certificate for a means file or a trained model.
    Certify(Common),
    /// Scaled-target path and minimum margin-achieving scale.
    Feasibility(Common),
    Train(Common),
    /// Train under multiplied KL weights.
    Stress(Common),
    /// Escape runs from a near-collapsed encoder.
    Escape(Common),
    /// Aggregate earlier outputs into one JSON.
    Report(Common),
    /// Print config violations, one per line.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let (cmd, common) = match args.command {
        Cmd::Validate { config } => {
            return match cli::validate_file(&config) {
                Ok(v) if v.is_empty() => {
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Ok(v) => {
                    for line in v {
                        println!("{line}");
                    }
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            };
        }
        Cmd::SearchTeacher(c) => (Command::SearchTeacher, c),
        Cmd::Certify(c) => (Command::Certify, c),
        Cmd::Feasibility(c) => (Command::Feasibility, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Stress(c) => (Command::Stress, c),
        Cmd::Escape(c) => (Command::Escape, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    let opts = RunOptions {
        out: common.out,
        seeds: common.seeds,
    };
    match cli::run(cmd, &common.config, &opts) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
