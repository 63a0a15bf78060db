//! Experiment runner for the `frglab` pipeline.
//!
//! Every command computes its full result in memory and only then writes
//! files, so a failing run leaves the output directory untouched.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

pub use commands::{cmd_audit, cmd_correlate, cmd_flow, cmd_lsz, cmd_sample};
pub use config::{ExperimentConfig, Format};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical breakdown: {0}")]
    Numerical(frglab::Error),

    #[error("oracle scale exceeded: {0}")]
    Scale(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Scale(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<frglab::Error> for CliError {
    fn from(e: frglab::Error) -> Self {
        match e {
            frglab::Error::ScaleExceeded { .. } => CliError::Scale(e.to_string()),
            frglab::Error::Io(io) => CliError::Io(io),
            other => CliError::Numerical(other),
        }
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub format: Option<Format>,
}

impl RunOptions {
    pub fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.outputs.directory.clone())
    }

    pub fn formats(&self, cfg: &ExperimentConfig) -> Vec<Format> {
        match self.format {
            Some(f) => vec![f],
            None if cfg.outputs.formats.is_empty() => vec![Format::Csv],
            None => cfg.outputs.formats.clone(),
        }
    }
}

/// Files produced by a command, held until the run has succeeded.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(String, Vec<u8>)>,
    /// Error to report after the files are written.
    pub deferred: Option<CliError>,
}

impl Staged {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_json<T: serde::Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = frglab::export::to_json_string(value)?;
        s.push('\n');
        self.add(name, s.into_bytes());
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Flow,
    Sample,
    Correlate,
    Lsz,
    Audit,
}

/// Run one command end to end: compute, write, and report.
pub fn run(command: Command, config_path: &Path, options: &RunOptions) -> Result<Vec<String>, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let work = || -> Result<Staged, CliError> {
        match command {
            Command::Flow => cmd_flow(&cfg, options),
            Command::Sample => cmd_sample(&cfg, options),
            Command::Correlate => cmd_correlate(&cfg, options),
            Command::Lsz => cmd_lsz(&cfg, options),
            Command::Audit => cmd_audit(&cfg, options),
        }
    };
    let staged = match options.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    staged.write(&options.out_dir(&cfg))?;
    let names = staged.names().into_iter().map(String::from).collect();
    match staged.deferred {
        Some(e) => Err(e),
        None => Ok(names),
    }
}
