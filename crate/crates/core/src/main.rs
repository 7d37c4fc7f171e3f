use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ecasim::cli::{execute, parse_spec, parse_spec_file};

/// Batch runner for the contention simulator.
#[derive(Parser, Debug)]
#[command(name = "ecasim", version, about)]
struct Args {
    /// Run specification (`key = value` lines).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// single_ap, scenario_a, scenario_b or hew.
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated protocol list, e.g. `dcf,eca,eca_hyst_sr`.
    #[arg(long = "protocol")]
    protocol: Option<String>,
    #[arg(long)]
    iterations: Option<u32>,
    /// Base seed; iteration i runs with seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds per run.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any specification key, e.g. `--set stations=5,10,20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn overrides(args: &Args) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("scenario", args.scenario.clone());
    push("protocols", args.protocol.clone());
    push("iterations", args.iterations.map(|v| v.to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("duration", args.duration.map(|v| v.to_string()));
    push("out", args.out.as_ref().map(|p| p.display().to_string()));
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = match overrides(&args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let spec = match &args.spec {
        Some(path) => parse_spec_file(path, &overrides),
        None => parse_spec(None, &overrides),
    };
    let spec = match spec {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&spec) {
        Ok(report) => {
            println!(
                "{} runs, {} files written to {}",
                report.runs,
                report.written.len(),
                spec.output_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
