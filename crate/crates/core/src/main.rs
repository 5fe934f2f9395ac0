use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use selfmine::economics::{self, AttackParams, EconomicsError, EconomicsRow};
use selfmine::sim::metrics::{write_forks_csv, write_miner_csv, write_sweep_csv};
use selfmine::sim::{self, presets, ConfigError, RunMetrics, ScenarioConfig, SimError};

#[derive(Parser)]
#[command(name = "selfmine", version, about = "Selfish-mining simulator and attack economics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Scenario file (.toml or .json) or bundled preset name.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output file. Defaults to a file in SELFMINE_OUTPUT_DIR, else standard output.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[arg(long, env = "SELFMINE_OUTPUT_DIR", hide_env_values = true, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Simulate {
        /// Check chain invariants after every event.
        #[arg(long)]
        audit: bool,
    },
    /// Run a scenario once per value of one parameter.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Attack cost and profit per coin.
    Economics(EconomicsArgs),
    /// Probability that a private chain overtakes the public one.
    Probability {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        z: u32,
        /// Also estimate by Monte Carlo with this many races.
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Parse and validate a scenario without running it.
    ValidateConfig,
    /// List bundled scenarios.
    Presets,
}

#[derive(Args)]
struct EconomicsArgs {
    /// `table1` or `table1-<coin>`.
    #[arg(long, conflicts_with_all = ["r", "b", "c"])]
    fixture: Option<String>,
    /// Block reward.
    #[arg(long, requires_all = ["b", "c"])]
    r: Option<f64>,
    /// Block time in minutes.
    #[arg(long)]
    b: Option<f64>,
    /// Rent cost per hour.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, default_value_t = 2)]
    z: u32,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Emit rows for z = 1..=N instead of a single z.
    #[arg(long, value_name = "Z_MAX")]
    curve: Option<u32>,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<EconomicsError> for Failure {
    fn from(e: EconomicsError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { audit } => {
            let mut cfg = load_config(g)?;
            cfg.audit |= *audit;
            if g.verbose > 0 {
                eprintln!("running {} (seed {})", cfg.name, cfg.seed);
            }
            let metrics = sim::run(&cfg)?;
            let default = format!("{}-{}.{}", file_stem(&cfg.name), cfg.seed, g.format.ext());
            match output_path(g, &default) {
                Some(path) => write_run(&metrics, &path, g.format)?,
                None => {
                    let out = io::stdout().lock();
                    match g.format {
                        Format::Csv => write_miner_csv(&metrics, out).context("writing csv")?,
                        Format::Json => write_json(&metrics, out)?,
                    }
                }
            }
            eprintln!("{}", metrics.summary());
            if g.verbose > 0 {
                eprintln!("{} events in {:.2?}", metrics.events, metrics.wall_time);
            }
            Ok(())
        }
        Command::Sweep { axis, values, jobs } => {
            let base = load_config(g)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .context("building worker pool")?;
            let runs = pool.install(|| sim::run_sweep(&base, axis, values))?;
            let rows: Vec<(f64, RunMetrics)> = values.iter().copied().zip(runs).collect();
            if g.verbose > 0 {
                for (v, m) in &rows {
                    eprintln!("{axis}={v}: {}", m.summary());
                }
            }
            let default = format!("{}-sweep-{axis}.{}", file_stem(&base.name), g.format.ext());
            let out = open_output(output_path(g, &default).as_deref())?;
            match g.format {
                Format::Csv => write_sweep_csv(axis, &rows, out).context("writing csv")?,
                Format::Json => {
                    #[derive(Serialize)]
                    struct Point<'a> {
                        axis: &'a str,
                        value: f64,
                        metrics: &'a RunMetrics,
                    }
                    let points: Vec<Point> = rows
                        .iter()
                        .map(|(value, metrics)| Point {
                            axis,
                            value: *value,
                            metrics,
                        })
                        .collect();
                    write_json(&points, out)?;
                }
            }
            eprintln!("{} runs over {axis}", rows.len());
            Ok(())
        }
        Command::Economics(args) => {
            let rows = economics_rows(args)?;
            // the table always goes to stdout; a file is written only when asked
            write_rows(&rows, io::stdout().lock(), g.format)?;
            if let Some(path) = &g.output {
                write_rows(&rows, create(path)?, g.format)?;
            }
            Ok(())
        }
        Command::Probability { alpha, z, trials } => {
            let params = AttackParams {
                alpha: *alpha,
                z: *z,
                block_time_minutes: 0.0,
                block_reward: 0.0,
                rent_cost_per_hour: 0.0,
            };
            params.validate()?;
            let p = economics::success_probability(*alpha, *z);
            println!("alpha={alpha} z={z} probability={p}");
            if let Some(trials) = trials {
                let seed = g.seed.unwrap_or(0);
                let est = economics::race_monte_carlo(*alpha, *z, *trials, seed);
                println!(
                    "monte_carlo trials={} successes={} frequency={} half_width={}",
                    est.trials, est.successes, est.frequency, est.half_width
                );
            }
            Ok(())
        }
        Command::ValidateConfig => {
            let cfg = load_config(g)?;
            println!("{}: ok", if cfg.name.is_empty() { "config" } else { &cfg.name });
            Ok(())
        }
        Command::Presets => {
            for name in presets::names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn load_config(g: &Global) -> Result<ScenarioConfig, Failure> {
    let source = g
        .config
        .as_deref()
        .ok_or_else(|| Failure::Validation(anyhow::anyhow!("--config is required")))?;
    let path = Path::new(source);
    let mut cfg = if path.exists() {
        ScenarioConfig::load(path)?
    } else {
        presets::preset(source)?
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file_stem(name: &str) -> &str {
    if name.is_empty() {
        "scenario"
    } else {
        name
    }
}

fn output_path(g: &Global, default: &str) -> Option<PathBuf> {
    g.output
        .clone()
        .or_else(|| g.output_dir.as_ref().map(|d| d.join(default)))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<(), Failure> {
    serde_json::to_writer_pretty(&mut out, value).context("writing json")?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Miner table at `path`; for CSV the fork log goes next to it as `<stem>.forks.csv`.
fn write_run(metrics: &RunMetrics, path: &Path, format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => write_json(metrics, create(path)?),
        Format::Csv => {
            write_miner_csv(metrics, create(path)?).context("writing csv")?;
            write_forks_csv(metrics, create(&forks_path(path))?).context("writing fork csv")?;
            Ok(())
        }
    }
}

fn forks_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    path.with_file_name(format!("{stem}.forks.csv"))
}

fn economics_rows(args: &EconomicsArgs) -> Result<Vec<EconomicsRow>, Failure> {
    let coins: Vec<(String, AttackParams)> = match (&args.fixture, args.r) {
        (Some(name), _) => economics::fixture(name)?
            .into_iter()
            .map(|c| {
                let params = c.params(args.alpha, args.z);
                (c.name, params)
            })
            .collect(),
        (None, Some(r)) => vec![(
            "custom".to_string(),
            AttackParams {
                alpha: args.alpha,
                z: args.z,
                block_time_minutes: args.b.unwrap_or_default(),
                block_reward: r,
                rent_cost_per_hour: args.c.unwrap_or_default(),
            },
        )],
        (None, None) => economics::table1()
            .into_iter()
            .map(|c| {
                let params = c.params(args.alpha, args.z);
                (c.name, params)
            })
            .collect(),
    };
    let mut rows = Vec::new();
    for (coin, params) in coins {
        params.validate()?;
        match args.curve {
            Some(z_max) => rows.extend(economics::profit_curve(&coin, &params, z_max)),
            None => rows.push(EconomicsRow::new(&coin, &params)),
        }
    }
    Ok(rows)
}

fn write_rows<W: Write>(rows: &[EconomicsRow], mut out: W, format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => write_json(&rows, out),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for row in rows {
                w.serialize(row).context("writing csv")?;
            }
            w.flush()?;
            Ok(())
        }
    }
}
