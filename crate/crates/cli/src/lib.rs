//! `vk-homog`: runs corrector, effective-density, decomposition and plate
//! experiments from a JSON configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::error::CliError;
use crate::report::{Output, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Effective,
    Properties,
    Griso,
    Plate,
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Effective => "effective",
            Command::Properties => "properties",
            Command::Griso => "griso",
            Command::Plate => "plate",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vk-homog", version, about = "Effective von Karman plate densities and diagnostics")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration field, e.g. `--set mesh.nz=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "VK_HOMOG_JOBS", default_value_t = 0)]
    pub jobs: usize,
    /// Output directory (overrides `output` in the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status: all checks passed.
pub const EXIT_PASS: i32 = 0;
/// Exit status: the run completed but some check failed.
pub const EXIT_FAIL: i32 = 1;
/// Exit status: configuration or runtime error.
pub const EXIT_ERROR: i32 = 2;

pub fn execute(args: &Args) -> Result<RunReport, CliError> {
    let loaded = config::load(&args.config, &args.overrides)?;
    let dir = args.out.clone().unwrap_or_else(|| loaded.resolve_path(&loaded.config.output));
    let out = Output::new(dir)?;
    let mut report = RunReport::new(args.command.name());
    let body = |report: &mut RunReport| match args.command {
        Command::Effective => commands::effective(&loaded, &out, report).map(drop),
        Command::Properties => commands::properties(&loaded, &out, report),
        Command::Griso => commands::griso(&loaded, &out, report),
        Command::Plate => commands::plate(&loaded, &out, report, None),
        Command::Pipeline => commands::pipeline(&loaded, &out, report),
    };
    let result = if args.jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()
            .map_err(|e| CliError::config("--jobs", e.to_string()))?;
        pool.install(|| body(&mut report))
    } else {
        body(&mut report)
    };
    result?;
    out.finish(&report, &loaded)?;
    Ok(report)
}

/// Parses `argv`, runs, prints a summary and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {} (value {:e}, tolerance {:e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
            }
            for f in &report.flags {
                println!("FLAG {f}");
            }
            if report.all_passed() {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
