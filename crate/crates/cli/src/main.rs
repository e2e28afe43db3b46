//! Command-line harness: generate instances, run simulations, and verify the acceptance
//! suite. Exit status is 0 on success, 1 when a criterion fails, 2 on configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use oracle_sim::exec::Exec;
use oracle_sim::harness::instance::{generate_instance, reverse_instances};
use oracle_sim::harness::{run, verify_all, Mode, RunConfig, SimulationReport};
use oracle_sim::sim_quadratic::Fault;

const OUT_ENV: &str = "ORACLE_SIM_OUT";
const DEFAULT_OUT: &str = "oracle-sim-out";

#[derive(Parser)]
#[command(name = "oracle-sim", version, about = "Simulate long-context transformers with a length-capped oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured mode(s) and write report.json and errors.csv.
    Simulate(ConfigArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
    /// Write the generated instance(s) as JSON.
    Gen(ConfigArgs),
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Flags mirror the run config; unset flags take the mode's defaults.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// quadratic, quadratic-causal, average, window, sink, reverse or all.
    #[arg(long, value_parser = parse_kebab::<Mode>)]
    mode: Option<Mode>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    m_cap: Option<usize>,
    #[arg(long)]
    h_small: Option<usize>,
    #[arg(long)]
    l_small: Option<usize>,
    #[arg(long)]
    d_small: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    window_r: Option<usize>,
    #[arg(long)]
    sink_s: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon_target: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    pure_oracle_recombination: bool,
    /// One instance per oracle call instead of filling every slot.
    #[arg(long)]
    no_pack: bool,
    /// sequential or parallel.
    #[arg(long, value_parser = parse_kebab::<Exec>)]
    exec: Option<Exec>,
    #[arg(long)]
    reverse_target: Option<f64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    output_path: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print structured results instead of one line per criterion.
    #[arg(long)]
    json: bool,
    /// Corrupt the simulations to check that the suite notices.
    #[arg(long, hide = true)]
    inject_swapped_weights: bool,
}

/// Failure modes that map to distinct exit codes.
enum Failure {
    Criteria,
    Config(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<oracle_sim::Error>() {
            Some(oracle_sim::Error::Config(msg)) => Failure::Config(msg.clone()),
            _ => Failure::Other(e),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

impl ConfigArgs {
    fn resolve(&self) -> std::result::Result<RunConfig, Failure> {
        let mode = self.mode.unwrap_or(Mode::Quadratic);
        let base = RunConfig::for_mode(mode);
        let cfg = RunConfig {
            mode,
            n: self.n.unwrap_or(base.n),
            d: self.d.unwrap_or(base.d),
            h: self.h.unwrap_or(base.h),
            l: self.l.unwrap_or(base.l),
            m_cap: self.m_cap.unwrap_or(base.m_cap),
            h_small: self.h_small.unwrap_or(base.h_small),
            l_small: self.l_small.unwrap_or(base.l_small),
            d_small: self.d_small.or(base.d_small),
            chunk: self.chunk.or(base.chunk),
            window_r: self.window_r.unwrap_or(base.window_r),
            sink_s: self.sink_s.unwrap_or(base.sink_s),
            seed: self.seed.unwrap_or(base.seed),
            epsilon_target: self.epsilon_target.unwrap_or(base.epsilon_target),
            trials: self.trials.unwrap_or(base.trials),
            pure_oracle_recombination: self.pure_oracle_recombination,
            pack: !self.no_pack,
            exec: self.exec.unwrap_or(base.exec),
            reverse_target: self.reverse_target.unwrap_or(base.reverse_target),
            output_path: self.output_path.clone(),
        };
        let Some(path) = &self.config else { return Ok(cfg) };
        let text =
            fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let overrides: Value =
            serde_json::from_str(&text).map_err(|e| config_error(format!("{} is not JSON: {e}", path.display())))?;
        let Value::Object(overrides) = overrides else {
            return Err(config_error(format!("{} must hold a JSON object", path.display())));
        };
        let mut merged = serde_json::to_value(&cfg).expect("configs serialize");
        let fields = merged.as_object_mut().expect("configs serialize to objects");
        for (k, v) in overrides {
            fields.insert(k, v);
        }
        serde_json::from_value(merged).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_path.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write_reports(dir: &Path, reports: &[SimulationReport]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let passed = reports.iter().all(|r| r.passed);
    let body = json!({ "passed": passed, "reports": reports });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    let mut csv = csv::Writer::from_path(dir.join("errors.csv"))?;
    for row in reports.iter().flat_map(|r| &r.rows) {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

fn simulate(args: &ConfigArgs) -> std::result::Result<(), Failure> {
    let cfg = args.resolve()?;
    let reports = run(&cfg).map_err(anyhow::Error::from)?;
    let dir = output_dir(&cfg);
    write_reports(&dir, &reports)?;
    for r in &reports {
        for c in &r.criteria {
            println!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, r.mode.name(), c.name, c.detail);
        }
        for note in &r.notes {
            println!("note {}: {note}", r.mode.name());
        }
    }
    println!("wrote {} and {}", dir.join("report.json").display(), dir.join("errors.csv").display());
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Criteria)
    }
}

fn generate(args: &ConfigArgs) -> std::result::Result<(), Failure> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for c in cfg.expand() {
        c.validate().map_err(anyhow::Error::from)?;
        let body = if c.mode == Mode::Reverse {
            let instances = reverse_instances(c.n / c.m_cap, c.m_cap, c.d, c.seed).map_err(anyhow::Error::from)?;
            json!({ "config": c, "instances": instances })
        } else {
            json!({ "config": c, "instance": generate_instance(&c).map_err(anyhow::Error::from)? })
        };
        let path = dir.join(format!("instance-{}.json", c.mode.name()));
        fs::write(&path, serde_json::to_string(&body).map_err(anyhow::Error::from)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> std::result::Result<(), Failure> {
    let fault = args.inject_swapped_weights.then_some(Fault::SwapRecombineWeights);
    let v = verify_all(args.seed, fault);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&v).map_err(anyhow::Error::from)?);
    } else {
        for c in &v.criteria {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    if v.passed {
        Ok(())
    } else {
        Err(Failure::Criteria)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Verify(args) => verify(args),
        Command::Gen(args) => generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Criteria) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
