use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nearfar_cli::{run, Command, Options, Profile, Status};

#[derive(Parser)]
#[command(name = "nearfar", version, about = "Near/far-field channel estimation and outage experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a scenario and write channel samples plus ground truth
    Generate(Common),
    /// Fit the proposed estimator and the baselines to the stored samples
    Fit(Common),
    /// Compute outage curves from the stored truth and fits
    Op(Common),
    /// Run generate, fit and op over a sweep axis
    Sweep(Common),
    /// Re-check the hashes and provenance of an output directory
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed, overriding `seed`
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Default set the configuration is layered over
    #[arg(long, value_parser = ["paper", "desk"])]
    profile: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Generate(c) => (Command::Generate, c),
        Cmd::Fit(c) => (Command::Fit, c),
        Cmd::Op(c) => (Command::Op, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Verify(c) => (Command::Verify, c),
    };
    let opts = Options {
        config: common.config,
        out: common.out,
        seed: common.seed,
        profile: common.profile.map(|p| p.parse::<Profile>().expect("validated by clap")),
    };
    match run(cmd, &opts) {
        Ok((status, messages)) => {
            for m in &messages {
                eprintln!("{}: {m}", if status == Status::Partial { "scheme failed" } else { "ok" });
            }
            ExitCode::from(status.code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
