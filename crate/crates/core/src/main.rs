use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use authchain_core::harness::{self, ScenarioConfig};

#[derive(Parser)]
#[command(name = "authchain", version, about = "Simulated ledger-backed IoT authorization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write transcript.ndjson, chain.ndjson and metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "AUTHCHAIN_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Honest runs of both flows side by side.
    Compare {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Optional scenario file supplying everything but the seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Recompute commitments from a transcript against a chain dump.
    Audit {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        chain: PathBuf,
    },
}

type Fail = Box<dyn std::error::Error>;

fn load(path: &PathBuf) -> Result<ScenarioConfig, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(ScenarioConfig::from_toml(&text)?)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool, Fail> {
    match Cli::parse().cmd {
        Cmd::Run { config, out } => {
            let cfg = load(&config)?;
            let result = harness::run(&cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("transcript.ndjson"), result.transcript.to_ndjson())?;
            std::fs::write(out.join("chain.ndjson"), result.chain_dump())?;
            std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&result.metrics)?)?;
            let m = &result.metrics;
            println!(
                "model {} seed {}: {:?}, {} txs, {} gas, {} blocks",
                m.model, m.seed, m.outcome, m.tx_count, m.total_gas, m.delay_blocks
            );
            for c in &m.invariants {
                println!("  {:<20} {} {}", c.name, if c.passed { "ok" } else { "VIOLATED" }, c.detail);
            }
            Ok(m.invariants_hold())
        }
        Cmd::Compare { seed, config, json } => {
            let base = match &config {
                Some(p) => load(p)?,
                None => ScenarioConfig::default(),
            };
            let cmp = harness::compare(&ScenarioConfig { seed, ..base })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cmp)?);
            } else {
                print!("{}", cmp.render());
            }
            Ok(cmp.model1.invariants_hold() && cmp.model2.invariants_hold())
        }
        Cmd::Audit { transcript, chain } => {
            let report = harness::audit(&std::fs::read_to_string(transcript)?, &std::fs::read_to_string(chain)?)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
    }
}
