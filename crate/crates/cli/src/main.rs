//! `poolcs` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use poolcs::harness::{records_to_csv, summaries_to_csv, Preset};
use poolcs::simulate::read_vector;
use poolcs::validate::{
    tail_reports_to_csv, validate_auxiliary, validate_bernstein, validate_c1, validate_gaussian_concentration,
    validate_lambda_hat, validate_surrogate_identities, validate_trends, GaussianSetup, TailReport,
};
use poolcs::weights::{check_assumptions, WeightContext, WeightParams};
use poolcs::{
    cross_validate_gamma, emit_aggregate_csv, emit_csv, run_sweep, run_trial, CellConfig, Error, ExperimentConfig,
    NoiseParams, PoolingMatrix, TrialOutcome, VERSION,
};

#[derive(Parser)]
#[command(name = "poolcs", about = "Pooled-testing compressed sensing experiments", disable_version_flag = true)]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file overriding fields of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration: `paper` or `desk`.
    #[arg(long, default_value = "paper")]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full grid and write trials.csv and aggregate.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate γ for one cell and run a single main trial.
    Trial {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated `key=value` list; keys n, q, fs, p, sigma, qa.
        #[arg(long)]
        cell: String,
        #[arg(long)]
        index: usize,
    },
    /// Print the weights, Λ̂, W and the assumption report for a design and measurements.
    Weights {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Monte-Carlo validation reports.
    Validate {
        #[arg(value_enum)]
        check: Check,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trials: Option<usize>,
        /// Cell override, same syntax as `trial --cell`.
        #[arg(long)]
        cell: Option<String>,
        /// Confidence level for the bernstein and gaussian checks.
        #[arg(long, default_value_t = 2.0)]
        theta: f64,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    C1,
    Lambda,
    Bernstein,
    Gaussian,
    Trends,
    Auxiliary,
    Identities,
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let base = Preset::from_name(&args.preset)?.config();
    let config = match &args.config {
        None => base,
        Some(path) => ExperimentConfig::load(path, &base).map_err(|e| match e {
            Error::Io { path, source } => Failure::Config(format!("cannot read config {}: {source}", path.display())),
            other => Failure::from(other),
        })?,
    };
    config.validate()?;
    Ok(config)
}

/// Parses `n=..,q=..,fs=..`; missing keys come from `base`.
fn parse_cell(spec: &str, base: CellConfig) -> Result<CellConfig, Failure> {
    let mut cell = base;
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("cell entry '{part}' is not key=value")))?;
        let bad = || Failure::Usage(format!("cell entry '{part}' has an invalid value"));
        let real = || value.trim().parse::<f64>().map_err(|_| bad());
        let count = || value.trim().parse::<usize>().map_err(|_| bad());
        match key.trim() {
            "n" => cell.n = count()?,
            "p" => cell.p = count()?,
            "q" => cell.q = real()?,
            "fs" | "f_s" => cell.f_s = real()?,
            "sigma" => cell.sigma = real()?,
            "qa" | "q_a" => cell.q_a = real()?,
            other => return Err(Failure::Usage(format!("unknown cell key '{other}'"))),
        }
    }
    Ok(cell)
}

fn default_cell(config: &ExperimentConfig, n: usize, q: f64, f_s: f64) -> CellConfig {
    CellConfig { n, p: config.p, q, f_s, sigma: config.sigma, q_a: config.q_a }
}

fn cell_or(spec: &Option<String>, base: CellConfig) -> Result<CellConfig, Failure> {
    match spec {
        Some(s) => parse_cell(s, base),
        None => Ok(base),
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn sweep(cfg: &ConfigArgs, out: &Path) -> Outcome {
    let config = load_config(cfg)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let table = run_sweep(&config)?;
    emit_csv(&table.records, &out.join("trials.csv"))?;
    emit_aggregate_csv(&table.cells, &out.join("aggregate.csv"))?;
    write_file(&out.join("config.json"), &config.to_json())?;
    for s in &table.cells {
        println!(
            "{} {} gamma {} mean rrmse {} ({} trials, {} skipped){}",
            s.cell.describe(),
            s.estimator.as_str(),
            s.gamma.map_or("NA".into(), |g| g.to_string()),
            s.rrmse.mean.map_or("NA".into(), |m| format!("{m:.4}")),
            s.trials,
            s.skipped,
            s.note.as_ref().map_or(String::new(), |n| format!(" note: {n}"))
        );
    }
    println!("wrote {} rows to {}", table.records.len(), out.display());
    Ok(())
}

fn trial(cfg: &ConfigArgs, spec: &str, index: usize) -> Outcome {
    let config = load_config(cfg)?;
    let base = default_cell(&config, config.n_list[0], config.q_list[0], config.f_s_list[0]);
    let cell = parse_cell(spec, base)?;
    let cv = cross_validate_gamma(&config, &cell)?;
    let mut gammas = Vec::new();
    for (e, choice) in &cv {
        match choice {
            Ok(c) => gammas.push((*e, c.gamma)),
            Err(reason) => eprintln!("{}: cross-validation skipped: {reason}", e.as_str()),
        }
    }
    let outcomes = run_trial(&config, &cell, index, &gammas)?;
    let mut records = Vec::new();
    for o in outcomes {
        match o {
            TrialOutcome::Completed(r) => records.push(r),
            TrialOutcome::Skipped { estimator, reason } => eprintln!("{}: skipped: {reason}", estimator.as_str()),
        }
    }
    print!("{}", records_to_csv(&records));
    Ok(())
}

fn weights(cfg: &ConfigArgs, matrix: &Path, measurements: &Path) -> Outcome {
    let config = load_config(cfg)?;
    let a = PoolingMatrix::read(matrix)?;
    let y = read_vector(measurements)?;
    let noise = NoiseParams::new(config.sigma, config.q_a)?;
    let mut params = WeightParams::for_matrix(&a, noise)
        .with_c(config.c_const)
        .forced(config.force_assumptions);
    if let Some(t) = config.theta {
        params = params.with_theta(t);
    }
    println!("assumptions");
    print!("{}", check_assumptions(&params));
    let ctx = WeightContext::new(&a, &y, &params)?;
    let fmt_opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
    println!("lambda_hat = {}", fmt_opt(ctx.lambda_hat()));
    match ctx.lasso() {
        Ok(ws) => {
            println!("W = {}", fmt_opt(ws.w_stat));
            println!("beta = {}", ws.expand(a.p())[0]);
        }
        Err(e) => println!("beta unavailable: {e}"),
    }
    match ctx.wlasso() {
        Ok(ws) => {
            println!("beta_k");
            for (k, b) in ws.expand(a.p()).iter().enumerate() {
                println!("{k} {b}");
            }
        }
        Err(e) => println!("beta_k unavailable: {e}"),
    }
    Ok(())
}

fn emit_tails(reports: &[&TailReport], out: &Option<PathBuf>) -> Outcome {
    for r in reports {
        println!("{r}");
    }
    if let Some(path) = out {
        write_file(path, &tail_reports_to_csv(reports))?;
    }
    Ok(())
}

fn key_values(rows: &[(&str, String)]) -> String {
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn validate(check: Check, cfg: &ConfigArgs, trials: Option<usize>, cell: &Option<String>, theta: f64, out: &Option<PathBuf>) -> Outcome {
    let config = load_config(cfg)?;
    let seed = config.seed;
    match check {
        Check::C1 => {
            let cell = cell_or(cell, default_cell(&config, 300, 0.5, 0.02))?;
            let r = validate_c1(&config, &cell, trials.unwrap_or(200))?;
            print!("{r}");
            if let Some(path) = out {
                write_file(path, &tail_reports_to_csv(&[&r.lasso.trials, &r.wlasso.trials]))?;
            }
        }
        Check::Lambda => {
            let cell = cell_or(cell, default_cell(&config, 500, 0.5, 0.04))?;
            let r = validate_lambda_hat(&config, &cell, trials.unwrap_or(1000))?;
            print!("{r}");
            if let Some(path) = out {
                let o = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
                let rows = [
                    ("trials", r.trials.to_string()),
                    ("invalid", r.invalid.to_string()),
                    ("mean_l1_norm", o(r.l1_norm.mean)),
                    ("std_l1_norm", o(r.l1_norm.std)),
                    ("mean_lambda_hat", o(r.lambda_hat.mean)),
                    ("std_lambda_hat", o(r.lambda_hat.std)),
                    ("mean_ratio", o(r.ratio.mean)),
                    ("min_ratio", o(r.ratio_min)),
                    ("max_ratio", o(r.ratio_max)),
                    ("undercoverage", o(r.undercoverage)),
                    ("above_two", o(r.above_two)),
                ];
                write_file(path, &key_values(&rows))?;
            }
        }
        Check::Bernstein => {
            let c = cell_or(cell, default_cell(&config, 100, 0.5, 0.0))?;
            let r = validate_bernstein(c.n, c.q, theta, trials.unwrap_or(1_000_000), seed)?;
            emit_tails(&[&r], out)?;
        }
        Check::Gaussian => {
            let c = cell_or(cell, default_cell(&config, 50, 0.5, 0.04))?;
            let setup = GaussianSetup {
                f_s: c.f_s,
                seed,
                ..GaussianSetup::new(c.n, c.q, c.sigma, c.q_a, theta, trials.unwrap_or(100_000))
            };
            let r = validate_gaussian_concentration(&setup)?;
            emit_tails(&r.reports(), out)?;
        }
        Check::Trends => {
            let mut config = config;
            if let Some(t) = trials {
                config.trials = t;
            }
            let r = validate_trends(&config, &[1.0, 4.0, 16.0])?;
            print!("{r}");
            if let Some(path) = out {
                write_file(path, &summaries_to_csv(&r.summaries))?;
            }
        }
        Check::Auxiliary => {
            let r = validate_auxiliary(trials.unwrap_or(10_000), seed)?;
            println!("{r}");
            if let Some(path) = out {
                let rows = [
                    ("instances", r.instances.to_string()),
                    ("violations", r.violations.to_string()),
                    ("max_relative_excess", r.max_relative_excess.to_string()),
                ];
                write_file(path, &key_values(&rows))?;
            }
        }
        Check::Identities => {
            let c = cell_or(cell, CellConfig { p: 50, ..default_cell(&config, 40, 0.3, 0.1) })?;
            let r = validate_surrogate_identities(c.n, c.p, c.q, trials.unwrap_or(10_000), seed)?;
            println!("{r}");
            if let Some(path) = out {
                let rows = [
                    ("draws", r.draws.to_string()),
                    ("max_gram_deviation", r.max_gram_deviation.to_string()),
                    ("max_mean_gradient", r.max_mean_gradient.to_string()),
                    ("max_gradient_magnitude", r.max_gradient_magnitude.to_string()),
                    ("gradient_ratio", r.gradient_ratio().to_string()),
                ];
                write_file(path, &key_values(&rows))?;
            }
        }
    }
    Ok(())
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Sweep { cfg, out } => sweep(&cfg, &out),
        Command::Trial { cfg, cell, index } => trial(&cfg, &cell, index),
        Command::Weights { cfg, matrix, measurements } => weights(&cfg, &matrix, &measurements),
        Command::Validate { check, cfg, trials, cell, theta, out } => validate(check, &cfg, trials, &cell, theta, &out),
        Command::Version => {
            println!("poolcs {VERSION}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.threads {
        None => dispatch(cli.command),
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            pool.install(|| dispatch(cli.command))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
