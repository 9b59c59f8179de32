use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use qsnet::config::{DeploymentConfig, Script};
use qsnet::core::NodeId;
use qsnet::netsim::TraceRecord;
use qsnet::scenario::World;

#[derive(Parser)]
#[command(
    name = "qsnet",
    about = "Run multi-domain quantum-safe key distribution scenarios over a simulated network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a deployment config (and optionally a script) for errors.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Run a scripted scenario and print the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Pace the virtual clock against the wall clock.
        #[arg(long)]
        wall_clock: bool,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the delivery trace here, one record per line.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print the report as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run a scenario, then list one node's key store.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Node to inspect, as domain/name.
        #[arg(long)]
        node: String,
    },
    /// Validate and pretty-print a saved delivery trace.
    ReplayTrace {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn build_world(
    config_path: &PathBuf,
    script_path: &PathBuf,
    seed: Option<u64>,
) -> anyhow::Result<World> {
    let mut config = DeploymentConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let script = Script::load(script_path)?;
    Ok(World::build(config, script)?)
}

fn real_main() -> anyhow::Result<u8> {
    env_logger::init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config, script } => {
            let cfg = DeploymentConfig::load(&config)?;
            cfg.validate(&qsnet::crypto::SuiteRegistry::with_test_suites())?;
            if let Some(script) = script {
                Script::load(&script)?.validate(&cfg)?;
            }
            println!("ok");
            Ok(0)
        }
        Command::Run {
            config,
            script,
            seed,
            wall_clock,
            report,
            trace,
            json,
        } => {
            let mut world = build_world(&config, &script, seed)?;
            world.wall_clock = wall_clock;
            let result = world.run();
            if json {
                println!("{}", result.to_json());
            } else {
                print!("{}", result.human_table());
            }
            if let Some(path) = report {
                std::fs::write(&path, result.to_json())
                    .with_context(|| format!("writing report to {}", path.display()))?;
            }
            if let Some(path) = trace {
                let mut lines = world.trace_lines().join("\n");
                lines.push('\n');
                std::fs::write(&path, lines)
                    .with_context(|| format!("writing trace to {}", path.display()))?;
            }
            let failed_e2e = result.e2e.iter().any(|rec| rec.status != "delivered");
            let unreconciled = !result.reconcile().is_empty();
            Ok(u8::from(failed_e2e || unreconciled))
        }
        Command::Inspect {
            config,
            script,
            seed,
            node,
        } => {
            let node: NodeId = node
                .parse()
                .map_err(|e| anyhow::anyhow!("bad --node: {e}"))?;
            let mut world = build_world(&config, &script, seed)?;
            let _ = world.run();
            let listing = world.listing(&node)?;
            println!(
                "{:<38} {:<24} {:<52} {:>8} {:>5}  label",
                "key_id", "peer", "supplier", "consumed", "live"
            );
            for row in &listing {
                println!(
                    "{:<38} {:<24} {:<52} {:>8} {:>5}  {}",
                    row.key_id.to_string(),
                    row.peer.to_string(),
                    row.supplier,
                    row.consumed,
                    row.live,
                    row.label
                );
            }
            println!("{} entries", listing.len());
            Ok(0)
        }
        Command::ReplayTrace { trace } => {
            let raw = std::fs::read_to_string(&trace)
                .with_context(|| format!("reading {}", trace.display()))?;
            let mut count = 0usize;
            for (i, line) in raw.lines().enumerate() {
                let rec = TraceRecord::parse_line(line)
                    .map_err(|e| anyhow::anyhow!("line {}: {e}", i + 1))?;
                println!(
                    "{:>14.6}s  {:<24} {}  {:>6} B  {}",
                    rec.at_ns as f64 / 1e9,
                    rec.channel,
                    match rec.to_end {
                        qsnet::netsim::End::B => "a>b",
                        qsnet::netsim::End::A => "b>a",
                    },
                    rec.size,
                    rec.payload_hash
                );
                count += 1;
            }
            println!("{count} records");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            // Input and config problems exit 2; scenario failures exit 1
            // via real_main's return value.
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
