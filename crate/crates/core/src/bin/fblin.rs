use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fblin::scenario::{self, ExperimentConfig, ScenarioId};
use fblin::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "fblin", version, about = "Feedback-linearisation experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, schema "experiment/1").
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's out_dir, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the config's full-scale realisation and period counts.
    #[arg(long)]
    full_scale: bool,
    /// Shipped scenario to take the config from when --config is absent.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Design the multisine realisations and export them.
    Excite(Common),
    /// Open-loop runs of every realisation.
    Simulate(Common),
    /// Linearised closed-loop runs of every realisation.
    Linearise(Common),
    /// Distortion analysis of measured CSV records.
    Analyse {
        #[command(flatten)]
        common: Common,
        /// Records with columns t, u and y_meas (or y), one per realisation.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run a named scenario end to end.
    Scenario {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 if any acceptance check fails.
        #[arg(long)]
        check: bool,
    },
    /// Compare two distortion reports (JSON written by analyse or scenario).
    Compare {
        before: PathBuf,
        after: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3.8,7.6")]
        centres: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        half_width: f64,
    },
}

fn load(c: &Common) -> fblin::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.scenario) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::shipped(name.parse::<ScenarioId>()?),
        (None, None) => return Err(Error::Config("give --config or --scenario".into())),
    };
    if let Some(name) = &c.scenario {
        let id: ScenarioId = name.parse()?;
        if id != cfg.scenario {
            return Err(Error::Config(format!("config is for {} but --scenario is {id}", cfg.scenario)));
        }
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.full_scale {
        cfg.use_full_scale()?;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> fblin::Result<u8> {
    match cli.command {
        Command::Excite(c) => {
            let cfg = load(&c)?;
            print_paths(&scenario::excite(&cfg, &out_dir(&c, &cfg))?)
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            print_paths(&scenario::simulate(&cfg, &out_dir(&c, &cfg))?)
        }
        Command::Linearise(c) => {
            let cfg = load(&c)?;
            let (m, paths) = scenario::linearise(&cfg, &out_dir(&c, &cfg))?;
            print_paths(&paths);
            println!("MPC error {:.4}%  UKF error {:.3}%", m.mpc_percent, m.ukf_percent);
        }
        Command::Analyse { common, inputs } => {
            let cfg = load(&common)?;
            let (summary, paths) = scenario::analyse(&cfg, &inputs, &out_dir(&common, &cfg))?;
            print_paths(&paths);
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Scenario { common, check } => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg);
            let res = scenario::run_scenario(&cfg, &out)?;
            for c in &res.checks {
                println!("{} {}: {:.4}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
            }
            println!("summary: {}", out.join("summary.json").display());
            if let Some(msg) = &res.diverged {
                eprintln!("diverged: {msg}");
                return Ok(EXIT_DIVERGENCE);
            }
            if check && !res.passed() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Compare {
            before,
            after,
            out,
            centres,
            half_width,
        } => {
            let (bands, paths) = scenario::compare(&before, &after, &centres, half_width, &out)?;
            print_paths(&paths);
            println!("{}", serde_json::to_string_pretty(&bands)?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { EXIT_DIVERGENCE } else { EXIT_VALIDATION })
        }
    }
}
