use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bridgebench::config::ScenarioConfig;
use bridgebench::presets::load_preset;
use bridgebench::report::report;
use bridgebench::runner::{self, Cell, RunReport};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bridgebench",
    version,
    about = "Benchmark client-side MQTT bridge deployments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in preset: paper, desk or lossless.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario and print its derived counts.
    Validate(ScenarioArgs),
    /// Run the scenario's single configuration cell.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all nine AUT × topic size × QoS cells.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild table.txt and results.json from raw CSVs.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &ScenarioArgs) -> Result<ScenarioConfig, String> {
    let mut cfg = match (&args.config, &args.profile) {
        (Some(path), _) => ScenarioConfig::load(path).map_err(|e| e.to_string())?,
        (None, Some(name)) => load_preset(name).map_err(|e| e.to_string())?,
        (None, None) => load_preset("desk").map_err(|e| e.to_string())?,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.repetitions {
        cfg.repetitions = r;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn out_dir(cfg: &ScenarioConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name))
}

fn finish(result: Result<RunReport, runner::RunError>, out: &Path) -> ExitCode {
    match result {
        Ok(r) => {
            print!("{}", r.report.render_table());
            println!("\nresults written to {}", out.display());
            if r.all_ok() {
                ExitCode::SUCCESS
            } else {
                eprintln!("some repetitions failed; see results.csv");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "bridgebench=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let scenario = match &cli.command {
        Command::Validate(s) | Command::Run { scenario: s, .. } | Command::Sweep { scenario: s, .. } => Some(load(s)),
        Command::Report { .. } => None,
    };
    let cfg = match scenario.transpose() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid scenario: {e}");
            return ExitCode::FAILURE;
        }
    };

    match cli.command {
        Command::Validate(_) => {
            let cfg = cfg.expect("scenario loaded");
            let providers = cfg.provider_specs().expect("validated");
            println!("scenario {:?} (digest {})", cfg.name, cfg.digest());
            println!("  messages per repetition: {}", cfg.total_messages());
            for cell in Cell::full_matrix() {
                match bridgebench::bridge::plan_deployment(&providers, cell.aut, cell.scheme) {
                    Ok(plan) if cell.qos.level() == 0 => println!(
                        "  AUT{}-{}B: {} bridges, bridge topic size {} bytes",
                        cell.aut.number(),
                        cell.topic_size(),
                        plan.bridges.len(),
                        plan.bridge_topic_size
                    ),
                    Ok(_) => {}
                    Err(e) => println!("  {}: {e}", cell.column()),
                }
            }
            ExitCode::SUCCESS
        }
        Command::Run { out, .. } => {
            let cfg = cfg.expect("scenario loaded");
            let out = out_dir(&cfg, out);
            finish(runtime().block_on(runner::run(&cfg, &out)), &out)
        }
        Command::Sweep { out, .. } => {
            let cfg = cfg.expect("scenario loaded");
            let out = out_dir(&cfg, out);
            finish(
                runtime().block_on(runner::sweep(&cfg, &Cell::full_matrix(), &out)),
                &out,
            )
        }
        Command::Report { out } => match report(&out) {
            Ok(r) => match r.write(&out) {
                Ok(()) => {
                    print!("{}", r.render_table());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            },
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
