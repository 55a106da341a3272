use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccd_core::config::{AblationFlag, Method, RunConfig};
use ccd_core::engine::{prepare_stream, run_stream};
use ccd_core::eval::Metric;
use ccd_core::report::{
    ablation_table, compare_table, gain_series, gain_tsv, losses_tsv, reports_table, reports_tsv, timings_tsv, RunOutput,
};
use ccd_core::CcdError;
use clap::{Parser, Subcommand};

const DEFAULT_CONFIG: &str = include_str!("../../../config/default.toml");

#[derive(Parser)]
#[command(name = "ccd", version, about = "Continual teacher-student recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over the stream.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `method` from the config file.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run several methods on the same data and seed.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: ccd, fine_tune, full_batch.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full method plus one run per disabled component.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ablation flags, e.g. disable_replay,disable_s_to_t.
        #[arg(long, value_delimiter = ',', default_value = "")]
        flags: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the documented default configuration.
    DefaultConfig,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<CcdError> for Failure {
    fn from(e: CcdError) -> Self {
        match e {
            CcdError::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

/// Joins a fixed file name onto the run directory; names never contain
/// separators, so every write stays inside `dir`.
fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    debug_assert!(!name.contains('/') && !name.contains(".."));
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_failure(&path, e))
}

fn manifest(cfg: &RunConfig) -> String {
    format!(
        "# ccd {} run manifest; re-usable as a config file\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.to_toml()
    )
}

fn write_run(dir: &Path, cfg: &RunConfig, run: &RunOutput) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    write(dir, "manifest.toml", &manifest(cfg))?;
    write(dir, "reports.tsv", &reports_tsv(run.method, &run.reports))?;
    write(dir, "reports.txt", &reports_table(run.method, &run.reports))?;
    write(dir, "losses.tsv", &losses_tsv(run.method, &run.losses))?;
    write(dir, "timings.tsv", &timings_tsv(run.method, &run.timings))?;
    Ok(())
}

fn headline_k(cfg: &RunConfig) -> usize {
    cfg.eval.ks.iter().copied().max().unwrap_or(20)
}

fn cmd_run(cfg: RunConfig, method: Option<String>) -> Result<(), Failure> {
    let mut cfg = cfg;
    if let Some(m) = method {
        cfg.method = m.parse::<Method>()?;
    }
    let stream = prepare_stream(&cfg)?;
    let run = run_stream(&cfg, &stream, cfg.method)?;
    write_run(&cfg.output_dir, &cfg, &run)?;
    print!("{}", reports_table(run.method, &run.reports));
    Ok(())
}

fn cmd_compare(cfg: RunConfig, methods: Vec<String>) -> Result<(), Failure> {
    let methods: Vec<Method> = methods
        .iter()
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<Method>())
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(Failure::Config("methods: at least one method is required".into()));
    }
    let stream = prepare_stream(&cfg)?;
    let mut runs = Vec::new();
    for &method in &methods {
        let mut c = cfg.clone();
        c.method = method;
        c.output_dir = cfg.output_dir.join(method.as_str());
        let run = run_stream(&c, &stream, method)?;
        write_run(&c.output_dir, &c, &run)?;
        runs.push(run);
    }
    let k = headline_k(&cfg);
    let table = compare_table(&runs, Metric::Recall, k);
    write(&cfg.output_dir, "compare.txt", &table)?;
    if runs.iter().any(|r| r.method == Method::Ccd) {
        write(&cfg.output_dir, "gain.tsv", &gain_tsv(&gain_series(&runs, Metric::Recall, k)))?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_ablate(cfg: RunConfig, flags: Vec<String>) -> Result<(), Failure> {
    let flags: Vec<AblationFlag> = flags
        .iter()
        .filter(|f| !f.trim().is_empty())
        .map(|f| f.parse::<AblationFlag>())
        .collect::<Result<_, _>>()?;
    let stream = prepare_stream(&cfg)?;
    let mut base_cfg = cfg.clone();
    base_cfg.method = Method::Ccd;
    base_cfg.output_dir = cfg.output_dir.join("baseline");
    let baseline = run_stream(&base_cfg, &stream, Method::Ccd)?;
    write_run(&base_cfg.output_dir, &base_cfg, &baseline)?;
    let mut rows = Vec::new();
    for flag in flags {
        let mut c = base_cfg.clone();
        flag.apply(&mut c.ablation);
        c.output_dir = cfg.output_dir.join(flag.name());
        let run = run_stream(&c, &stream, Method::Ccd)?;
        write_run(&c.output_dir, &c, &run)?;
        rows.push((flag.label().to_owned(), run));
    }
    let table = ablation_table(&baseline, &rows, Metric::Recall, headline_k(&cfg));
    write(&cfg.output_dir, "ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            method,
        } => load_config(&config, seed, out).and_then(|c| cmd_run(c, method)),
        Command::Compare {
            config,
            methods,
            seed,
            out,
        } => load_config(&config, seed, out).and_then(|c| cmd_compare(c, methods)),
        Command::Ablate {
            config,
            flags,
            seed,
            out,
        } => load_config(&config, seed, out).and_then(|c| cmd_ablate(c, flags)),
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
