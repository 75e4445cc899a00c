// SPDX-License-Identifier: Apache-2.0

//! `xine` — run, validate and inspect enclave simulator scenarios.
//!
//! Output is machine-readable: traces are JSON lines, everything else is a
//! single JSON object on stdout. Exit codes for `run`: 0 ok, 1 bad input,
//! 2 boot failed, 3 enclave killed, 4 step budget exhausted, 5 assertion
//! failed.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use xine_core::boot::{self, BootImage, BootLayer};
use xine_core::crypto;
use xine_core::scenario::trace::read_trace;
use xine_core::scenario::{self, Assertion, ConfigError, ScenarioConfig, Verdict};

/// Environment variable that overrides a config's TRNG seed.
const SEED_ENV: &str = "XINE_SEED";

#[derive(Parser)]
#[command(name = "xine", version, about = "Deterministic enclave TEE simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot and run a scenario, streaming its trace.
    Run {
        config: PathBuf,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Load a scenario and report every validation error.
    Validate { config: PathBuf },
    /// Print the measurement of a boot image.
    Measure {
        image: PathBuf,
        /// Measure as the first boot layer, folding in this scenario's memory map.
        #[arg(long)]
        memory_map_of: Option<PathBuf>,
    },
    /// Check a saved trace against a list of assertions.
    TraceCheck { trace: PathBuf, assertions: PathBuf },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { config, trace } => run(config, trace),
        Command::Validate { config } => validate(config),
        Command::Measure { image, memory_map_of } => measure(image, memory_map_of),
        Command::TraceCheck { trace, assertions } => trace_check(trace, assertions),
    }
}

fn load(path: &PathBuf) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        config.seed = seed.trim().parse().with_context(|| format!("{SEED_ENV}={seed} is not a u64"))?;
    }
    Ok(config)
}

fn run(config: PathBuf, trace: Option<PathBuf>) -> Result<u8> {
    let config = load(&config)?;
    let sink: Box<dyn Write> = match &trace {
        Some(path) => Box::new(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)),
        None => Box::new(io::stdout()),
    };
    let outcome = scenario::run(&config, Some(sink))?;
    let summary = json!({
        "scenario": config.name,
        "status": outcome.status.code(),
        "events": outcome.trace.len(),
        "cloud": outcome.cloud,
        "failures": outcome.failures,
    });
    eprintln!("{summary}");
    Ok(outcome.status.code() as u8)
}

fn validate(config: PathBuf) -> Result<u8> {
    match ScenarioConfig::load(&config) {
        Ok(c) => {
            println!("{}", json!({"valid": true, "name": c.name, "enclaves": c.enclaves.len()}));
            Ok(0)
        }
        Err(e @ ConfigError::Validation(_)) => {
            let errors: Vec<String> = e.issues().iter().map(ToString::to_string).collect();
            println!("{}", json!({"valid": false, "errors": errors}));
            Ok(1)
        }
        Err(e) => {
            println!("{}", json!({"valid": false, "errors": [e.to_string()]}));
            Ok(1)
        }
    }
}

fn measure(image: PathBuf, memory_map_of: Option<PathBuf>) -> Result<u8> {
    let code = std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
    let digest = match memory_map_of {
        None => crypto::digest(&code),
        Some(cfg) => {
            let config = load(&cfg)?;
            let img = BootImage::new(BootLayer::Epa, code, [0; 32], [0; 64], "")?;
            boot::measure_layer(&img, &crypto::digest(&boot::memory_map_bytes(&config.memory)))
        }
    };
    println!("{}", json!({"image": image.display().to_string(), "measurement": hex::encode(digest)}));
    Ok(0)
}

fn trace_check(trace: PathBuf, assertions: PathBuf) -> Result<u8> {
    let file = File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
    let events = read_trace(BufReader::new(file)).map_err(anyhow::Error::msg)?;
    let text = std::fs::read_to_string(&assertions).with_context(|| format!("reading {}", assertions.display()))?;
    let value: Value = serde_json::from_str(&text)?;
    // Either a bare list or any object with an `assertions` field (such as a scenario config).
    let list = match value {
        Value::Array(_) => value,
        Value::Object(mut o) => match o.remove("assertions") {
            Some(v) => v,
            None => bail!("{} has no `assertions` field", assertions.display()),
        },
        _ => bail!("{} must hold a list of assertions", assertions.display()),
    };
    let list: Vec<Assertion> = serde_json::from_value(list)?;
    let mut failed = false;
    for a in &list {
        let (result, detail) = match a.check_trace(&events) {
            Verdict::Pass => ("pass", String::new()),
            Verdict::Skipped => ("skipped", "needs live memory".to_string()),
            Verdict::Fail(msg) => {
                failed = true;
                ("fail", msg)
            }
        };
        println!("{}", json!({"assertion": a, "result": result, "detail": detail}));
    }
    Ok(if failed { 5 } else { 0 })
}
