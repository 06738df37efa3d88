use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use icl_core::experiment::{
    emit_results, run_experiment_partial, write_rows, ExperimentConfig, ExperimentKind, OutputFormat, ResultRow,
};
use icl_core::Error;

const OUT_DIR_ENV: &str = "ICL_GMM_OUT_DIR";

/// Scaling experiments for linear-attention in-context classifiers of
/// Gaussian mixtures.
#[derive(Parser, Debug)]
#[command(name = "icl-gmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inference error over a grid of training (N) and test (M) prompt lengths.
    SweepNm(Common),
    /// Inference error over class counts at fixed N and M.
    SweepC(Common),
    /// Distance of the estimated population minimizer from cΛ⁻¹, and its
    /// log-log slope in N.
    MinimizerGap(Common),
    /// Error on tasks violating the training assumptions, and distance to the
    /// predicted large-prompt limit.
    Mismatch(Common),
    /// Transformer vs LDA vs softmax regression vs the Bayes posterior.
    BaselineCompare(Common),
    /// Linear convergence rate of full-batch gradient descent.
    RateFit(Common),
    /// Moment checks of multinomial class-count deviations.
    MomentSuite(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file. Defaults to `$ICL_GMM_OUT_DIR/<kind>.<ext>` when the
    /// variable is set, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads (1 gives the reference single-threaded run).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    c_grid: Option<Vec<usize>>,
    #[arg(long)]
    d: Option<usize>,
    /// Append to the output file instead of replacing it.
    #[arg(long)]
    append: bool,
    /// RFC 3339 stamp for the rows, or `now`.
    #[arg(long)]
    timestamp: Option<String>,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::SweepNm(c) => (ExperimentKind::SweepNm, c),
            Command::SweepC(c) => (ExperimentKind::SweepC, c),
            Command::MinimizerGap(c) => (ExperimentKind::MinimizerGap, c),
            Command::Mismatch(c) => (ExperimentKind::Mismatch, c),
            Command::BaselineCompare(c) => (ExperimentKind::BaselineCompare, c),
            Command::RateFit(c) => (ExperimentKind::RateFit, c),
            Command::MomentSuite(c) => (ExperimentKind::MomentSuite, c),
        }
    }
}

fn build_config(kind: ExperimentKind, args: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.kind != kind {
                return Err(Error::Config(format!(
                    "config is for {} but the {} subcommand was used",
                    cfg.kind, kind
                )));
            }
            cfg
        }
        None => ExperimentConfig::for_kind(kind),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(g) = &args.n_grid {
        cfg.n_grid = g.clone();
    }
    if let Some(g) = &args.m_grid {
        cfg.m_grid = g.clone();
    }
    if let Some(g) = &args.c_grid {
        cfg.c_grid = g.clone();
    }
    if let Some(d) = args.d {
        cfg.d = Some(d);
        // a sampled or identity covariance follows d; an explicit diagonal must match it
    }
    if let Some(f) = args.format {
        cfg.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Jsonl => OutputFormat::Jsonl,
        };
    }
    if let Some(t) = &args.timestamp {
        cfg.timestamp = Some(t.clone());
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    } else if cfg.output.is_none() {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            let ext = match cfg.format {
                OutputFormat::Csv => "csv",
                OutputFormat::Jsonl => "jsonl",
            };
            cfg.output = Some(PathBuf::from(dir).join(format!("{}.{ext}", kind)));
        }
    }
    Ok(cfg)
}

fn emit(rows: &[ResultRow], cfg: &ExperimentConfig, append: bool) -> Result<(), Error> {
    match &cfg.output {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            emit_results(rows, path, cfg.format, append)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_rows(&mut lock, rows, cfg.format, true)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_validation() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.split();
    let cfg = match build_config(kind, &args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let out = match run_experiment_partial(&cfg) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Err(e) = emit(&out.rows, &cfg, args.append) {
        eprintln!("error: cannot write results: {e}");
        return ExitCode::from(3);
    }
    match out.error {
        Some(e) => {
            eprintln!("error: {e} ({} rows from completed cells were written)", out.rows.len());
            exit_code(&e)
        }
        None => ExitCode::SUCCESS,
    }
}
