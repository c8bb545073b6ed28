use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use uts_core::config::{resolve, with_value, ResolvedConfig, SweepAxis};
use uts_core::harness::{mean_sd, run_experiment, write_outputs, Experiment, RunConfig};
use uts_core::selftest;
use uts_core::Error;

const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Parser)]
#[command(
    name = "uts-sim",
    version,
    about = "Trap-image CAPTCHA and learning-attack simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all replicates of one configuration.
    Run(RunArgs),
    /// Run one configuration per value of the declared sweep axis.
    Sweep(RunArgs),
    /// Run the embedded oracle suites.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file with flat keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key; applied after the file, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_name = "DIR", default_value = "results")]
    out: PathBuf,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<u32>,
    /// Suppress per-block progress lines.
    #[arg(long)]
    quiet: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(args: &RunArgs) -> Result<ResolvedConfig, Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("master_seed={seed}"));
    }
    if let Some(n) = args.replicates {
        overrides.push(format!("replicates={n}"));
    }
    Ok(resolve(args.config.as_deref(), &overrides)?)
}

fn print_progress(label: &str, exp: &Experiment) {
    let total = exp.summary.len();
    for b in &exp.summary {
        println!(
            "{label}block {}/{total}: success {:.4} (sd {:.4}), |TI| {:.1}, eTIs {:.1}, flags tp {:.1} fp {:.1}",
            b.block_index + 1,
            b.success_rate_mean,
            b.success_rate_sd,
            b.true_ti_size_mean,
            b.eti_size_mean,
            b.flags_tp_mean,
            b.flags_fp_mean,
        );
    }
}

fn execute(
    config: &RunConfig,
    out: &Path,
    quiet: bool,
    label: &str,
) -> Result<Experiment, Failure> {
    let exp = run_experiment(config)?;
    write_outputs(out, &exp)?;
    if !quiet {
        print_progress(label, &exp);
    }
    Ok(exp)
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let resolved = load(args)?;
    if let Some(axis) = resolved.sweep {
        return Err(Failure::Config(format!(
            "config declares a sweep over `{}`; use the `sweep` subcommand",
            axis.key
        )));
    }
    execute(&resolved.run, &args.out, args.quiet, "")?;
    Ok(())
}

fn value_label(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dir_name(index: usize, axis: &SweepAxis, value: &Value) -> String {
    let raw = format!("{index:02}_{}-{}", axis.key, value_label(value));
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn sweep(args: &RunArgs) -> Result<(), Failure> {
    let resolved = load(args)?;
    let axis = resolved.sweep.ok_or_else(|| {
        Failure::Config("no sweep axis declared (expected `sweep: {KEY: [values]}`)".into())
    })?;
    // Every point is validated before anything is written.
    let points = axis
        .values
        .iter()
        .map(|v| {
            with_value(&resolved.run, &axis.key, v)
                .map_err(|e| Failure::Config(format!("{}={v}: {e}", axis.key)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut summary = String::from(
        "key,value,directory,final_success_mean,final_success_sd,realized_beta_mean\n",
    );
    for (i, (value, config)) in axis.values.iter().zip(&points).enumerate() {
        let dir = dir_name(i, &axis, value);
        let label = format!("[{}={}] ", axis.key, value_label(value));
        let exp = execute(config, &args.out.join(&dir), args.quiet, &label)?;
        let last = exp.summary.last().expect("at least one block");
        let betas: Vec<f64> = exp.replicates.iter().map(|r| r.realized_beta).collect();
        let (beta, _) = mean_sd(&betas);
        writeln!(
            summary,
            "{},{},{},{:.6},{:.6},{:.6}",
            csv_field(&axis.key),
            csv_field(&value_label(value)),
            dir,
            last.success_rate_mean,
            last.success_rate_sd,
            beta
        )
        .expect("write to string");
    }
    fs::write(args.out.join(SWEEP_SUMMARY_FILE), summary)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(())
}

fn run_selftest() -> ExitCode {
    let reports = selftest::run_all();
    let mut ok = true;
    for r in &reports {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        println!("[{tag}] {} ({} cases)", r.name, r.cases);
        for f in r.failures.iter().take(5) {
            println!("    {f}");
        }
        ok &= r.passed();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn report(result: Result<(), Failure>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => report(run(&args)),
        Command::Sweep(args) => report(sweep(&args)),
        Command::Selftest => run_selftest(),
    }
}
