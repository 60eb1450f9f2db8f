//! Configuration-driven experiment runner.
//!
//! The `nearfar` binary wraps [`run`]; the modules are public so tests and
//! other tools can drive the pipeline without spawning a process.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;
pub mod provenance;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Profile, Scheme};
pub use error::{CliError, CliResult};

/// Subcommand selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Fit,
    Op,
    Sweep,
    Verify,
}

/// Parsed command-line options.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    Partial,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::Partial => 2,
        }
    }
}

/// Resolves the configuration: `--config` if given, else `config.toml` in
/// the output directory if present, else the profile defaults. `--seed`
/// overrides the file.
pub fn resolve_config(opts: &Options) -> CliResult<ExperimentConfig> {
    let stored = opts.out.as_ref().map(|o| o.join(provenance::CONFIG_FILE)).filter(|p| p.exists());
    let mut cfg = match (&opts.config, stored) {
        (Some(path), _) => ExperimentConfig::load(path, opts.profile)?,
        (None, Some(path)) if opts.profile.is_none() => ExperimentConfig::load(&path, None)?,
        _ => ExperimentConfig::for_profile(opts.profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cmd: Command, opts: &Options) -> CliResult<(Status, Vec<String>)> {
    if cmd == Command::Verify {
        let root = match (&opts.out, &opts.config) {
            (Some(o), _) => o.clone(),
            (None, _) => resolve_config(opts)?.output_dir,
        };
        let n = provenance::verify(&root)?;
        return Ok((Status::Success, vec![format!("verified {n} files in {}", root.display())]));
    }
    let cfg = resolve_config(opts)?;
    let mut out = provenance::OutputDir::open(&cfg.output_dir, &cfg)?;
    let outcome = match cmd {
        Command::Generate => {
            pipeline::cmd_generate(&cfg, &mut out)?;
            pipeline::Outcome::default()
        }
        Command::Fit => pipeline::cmd_fit(&cfg, &mut out)?,
        Command::Op => pipeline::cmd_op(&cfg, &mut out)?,
        Command::Sweep => pipeline::cmd_sweep(&cfg, &mut out)?.1,
        Command::Verify => unreachable!(),
    };
    let messages = outcome.failures.iter().map(|(w, m)| format!("{w}: {m}")).collect();
    let status = if outcome.is_complete() { Status::Success } else { Status::Partial };
    Ok((status, messages))
}
