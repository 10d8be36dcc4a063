//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{execute, report, DataSource, ExperimentConfig, HarnessError, Mode};
use crate::inverse::DenominatorSign;
use crate::problem::{self, DerivativeSource, Discretization, LoadedProblem};

#[derive(Debug, Parser)]
#[command(name = "kernrec", version, about = "Recover a memory kernel from an integral measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate with the exact kernel and write the measurement t,M,m_prime.
    Forward(RunArgs),
    /// Reconstruct the kernel from measurement data.
    Reconstruct(RunArgs),
    /// Forward run then reconstruction on the same grid.
    Roundtrip(RunArgs),
    /// Time-refinement study with EOC table.
    Convergence(RunArgs),
    /// Reconstruction error under measurement noise.
    NoiseSweep(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Built-in problem: manufactured1d, contaminant, zero.
    #[arg(long)]
    preset: Option<String>,
    /// Configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Time steps (comma-separated list for convergence).
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Cells in x (comma-separated list for convergence).
    #[arg(long, value_delimiter = ',')]
    mx: Vec<usize>,
    /// Cells in y for 2D problems.
    #[arg(long)]
    my: Option<usize>,
    /// Final time.
    #[arg(long = "T", value_name = "T")]
    horizon: Option<f64>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
    #[arg(long, value_parser = ["analytic", "discrete"])]
    derivative: Option<String>,
    /// Measurement source: analytic, synthetic or file.
    #[arg(long, value_parser = ["analytic", "synthetic", "file"])]
    data: Option<String>,
    /// Time refinement of synthetic data.
    #[arg(long)]
    fine_factor: Option<usize>,
    /// Noise levels (comma-separated).
    #[arg(long, value_delimiter = ',')]
    noise: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue past a step-size threshold violation.
    #[arg(long)]
    force: bool,
    /// Log every reconstruction step.
    #[arg(long)]
    trace: bool,
    /// Denominator variant of the kernel update (debugging).
    #[arg(long, value_parser = ["plus", "minus"])]
    kernel_denominator_sign: Option<String>,
}

fn init_logging(trace: bool) {
    let env = env_logger::Env::default().filter_or("KERNREC_LOG", "warn");
    let mut builder = env_logger::Builder::from_env(env);
    if trace {
        builder.filter_module("kernrec", log::LevelFilter::Info);
    }
    let _ = builder.try_init();
}

fn usage(msg: impl Into<String>) -> HarnessError {
    HarnessError::Usage(msg.into())
}

fn build_config(mode: Mode, a: RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => return Err(usage("give either --config or --preset, not both")),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
                path: path.clone(),
                source,
            })?;
            let mut cfg = ExperimentConfig::from_config_text(&text, Some(mode))?;
            resolve_measurement_path(&mut cfg, path);
            cfg
        }
        (None, Some(name)) => ExperimentConfig::new(
            mode,
            LoadedProblem {
                spec: problem::preset(name)?,
                discretization: Discretization::default(),
            },
        ),
        (None, None) => return Err(usage("no problem given: use --preset NAME or --config PATH")),
    };
    if !a.n.is_empty() {
        cfg.n_list = a.n;
    }
    if !a.mx.is_empty() {
        cfg.mx_list = a.mx;
    }
    if a.my.is_some() {
        cfg.my = a.my;
    }
    if let Some(t) = a.horizon {
        if !(t.is_finite() && t > 0.0) {
            return Err(usage("--T must be positive"));
        }
        cfg.problem.horizon = t;
    }
    if let Some(d) = a.derivative {
        cfg.derivative = Some(d.parse::<DerivativeSource>().map_err(usage)?);
    }
    if let Some(d) = a.data {
        cfg.data = Some(d.parse::<DataSource>().map_err(usage)?);
    }
    if let Some(f) = a.fine_factor {
        cfg.fine_time = f;
    }
    if !a.noise.is_empty() {
        cfg.noise = a.noise;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if let Some(s) = a.kernel_denominator_sign {
        cfg.sign = s.parse::<DenominatorSign>().map_err(usage)?;
    }
    cfg.out = a.out.or(cfg.out);
    cfg.json = a.json.or(cfg.json);
    cfg.force |= a.force;
    cfg.trace |= a.trace;
    cfg.problem.validate()?;
    Ok(cfg)
}

/// Relative measurement files are taken relative to the config file.
fn resolve_measurement_path(cfg: &mut ExperimentConfig, config_path: &Path) {
    if let Some(p) = &cfg.problem.measurement_file {
        if p.is_relative() {
            if let Some(dir) = config_path.parent() {
                cfg.problem.measurement_file = Some(dir.join(p));
            }
        }
    }
}

fn run(mode: Mode, args: RunArgs) -> Result<String, HarnessError> {
    let cfg = build_config(mode, args)?;
    let output = execute(&cfg)?;
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
    match &cfg.out {
        Some(path) => report::write(path, &output.csv).map_err(io(path))?,
        None => print!("{}", output.csv),
    }
    if let Some(path) = &cfg.json {
        let text = serde_json::to_string_pretty(&output.report)
            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
        report::write(path, &(text + "\n")).map_err(io(path))?;
    }
    Ok(output.summary)
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (mode, args) = match cli.command {
        Command::Forward(a) => (Mode::Forward, a),
        Command::Reconstruct(a) => (Mode::Reconstruct, a),
        Command::Roundtrip(a) => (Mode::Roundtrip, a),
        Command::Convergence(a) => (Mode::Convergence, a),
        Command::NoiseSweep(a) => (Mode::NoiseSweep, a),
    };
    init_logging(args.trace);
    match run(mode, args) {
        Ok(summary) => {
            eprintln!("{summary}");
            0
        }
        Err(e) => {
            let kind = match e {
                HarnessError::Usage(_) => "usage error",
                HarnessError::Validation(_) => "validation failed",
                _ => "error",
            };
            eprintln!("kernrec: {kind}: {e}");
            e.exit_code()
        }
    }
}
