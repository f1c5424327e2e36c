//! Command-line front end: validate scenario algebroids, integrate
//! geodesics, compare against closed forms, and print connection
//! diagnostics.
//!
//! Exit codes: 0 success / within tolerance, 1 tolerance failure,
//! 2 configuration error, 3 numerical failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use algeo::algebroid::AXIOM_TOL;
use algeo::error::Error;
use algeo::flow::Trajectory;
use algeo::scenarios::{self, Scenario};

mod output;

const EXIT_OK: u8 = 0;
const EXIT_TOLERANCE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "algeo",
    about = "Geodesics and connection diagnostics for driftless optimal control on Lie algebroids",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structure-equation residuals of a scenario's algebroid.
    Validate(ScenarioArgs),
    /// Integrate the Hamilton equations and export the trajectory.
    Geodesic(GeodesicArgs),
    /// Integrate and compare against the scenario's closed-form geodesic.
    Compare(CompareArgs),
    /// Print connection diagnostics at an evaluation point.
    Connection(ConnectionArgs),
    /// List the registered scenarios and their parameters.
    ListScenarios,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario name (see `list-scenarios`).
    #[arg(long)]
    scenario: String,
    /// Parameter override `key=value`; repeatable, wins over `--config`.
    #[arg(long = "param", value_name = "K=V")]
    params: Vec<String>,
    /// File of `key=value` parameter lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the validation sampler.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct GeodesicArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Integration horizon in seconds.
    #[arg(long = "t-end", default_value_t = std::f64::consts::PI)]
    t_end: f64,
    /// Fixed integrator step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Output file; trajectory data goes to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Integration horizon; defaults to the scenario's reference horizon.
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
}

#[derive(Args)]
struct ConnectionArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Base point, comma-separated (defaults to the scenario's diagnostic
    /// point).
    #[arg(long)]
    point: Option<String>,
    /// Fiber vector (velocity on the Lagrangian side, covector on the dual
    /// side), comma-separated.
    #[arg(long)]
    fiber: Option<String>,
    #[arg(long, default_value = "text", value_parser = ["text", "json"])]
    format: String,
}

fn exit_code_for(err: &Error) -> u8 {
    if err.is_configuration() {
        EXIT_CONFIG
    } else {
        EXIT_NUMERICAL
    }
}

fn parse_params(args: &ScenarioArgs) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = parse_kv(line)?;
            out.insert(k, v);
        }
    }
    for spec in &args.params {
        let (k, v) = parse_kv(spec)?;
        out.insert(k, v);
    }
    Ok(out)
}

fn parse_kv(spec: &str) -> Result<(String, f64), String> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{spec}`"))?;
    let value: f64 = v
        .trim()
        .parse()
        .map_err(|_| format!("parameter `{k}` has non-numeric value `{v}`"))?;
    Ok((k.trim().to_string(), value))
}

fn parse_vector(spec: &str, what: &str) -> Result<Vec<f64>, String> {
    spec.split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| format!("{what}: non-numeric component `{c}`"))
        })
        .collect()
}

fn build_scenario(args: &ScenarioArgs) -> Result<Scenario, u8> {
    let params = parse_params(args).map_err(|msg| {
        eprintln!("error: {msg}");
        EXIT_CONFIG
    })?;
    scenarios::build(&args.scenario, &params).map_err(|e| {
        eprintln!("error: {e}");
        exit_code_for(&e)
    })
}

fn cmd_validate(args: &ScenarioArgs) -> u8 {
    let scenario = match build_scenario(args) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let report = scenario.algebroid.validate(args.seed, 64);
    println!("scenario:              {}", scenario.name());
    println!("samples:               64 (seed {})", args.seed);
    println!("max jacobi residual:   {:.3e}", report.max_jacobi);
    println!("max anchor residual:   {:.3e}", report.max_anchor_compat);
    println!("tolerance:             {AXIOM_TOL:.1e}");
    if report.passes(AXIOM_TOL) {
        println!("result:                PASS");
        EXIT_OK
    } else {
        println!("result:                FAIL");
        EXIT_TOLERANCE
    }
}

fn write_trajectory(
    args: &GeodesicArgs,
    scenario: &Scenario,
    traj: &Trajectory,
    truncated: bool,
) -> std::io::Result<()> {
    let body = match args.format.as_str() {
        "json" => output::trajectory_json(scenario, traj, args.dt, truncated),
        _ => output::trajectory_csv(scenario, traj, truncated),
    };
    match &args.output {
        Some(path) => std::fs::write(path, body),
        None => std::io::stdout().write_all(body.as_bytes()),
    }
}

fn cmd_geodesic(args: &GeodesicArgs) -> u8 {
    let scenario = match build_scenario(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if !(args.dt > 0.0) || args.t_end < args.dt {
        eprintln!("error: need 0 < dt <= t-end");
        return EXIT_CONFIG;
    }
    let (traj, truncated, code) = match scenario.run(args.t_end, args.dt) {
        Ok(t) => (t, false, EXIT_OK),
        Err(Error::IntegrationDiverged {
            t_last,
            cause,
            partial,
        }) => {
            eprintln!("error: integration aborted at t = {t_last}: {cause}");
            (*partial, true, EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    if let Err(e) = write_trajectory(args, &scenario, &traj, truncated) {
        eprintln!("error: cannot write output: {e}");
        return EXIT_NUMERICAL;
    }
    let end = traj.endpoint();
    let summary = format!(
        "endpoint: t = {:.6}, x = {}, energy drift = {:.3e}",
        traj.end_time(),
        output::vector_text(&end.x),
        traj.energy_drift()
    );
    if args.output.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    code
}

fn cmd_compare(args: &CompareArgs) -> u8 {
    let scenario = match build_scenario(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if scenario.oracle().is_none() {
        eprintln!(
            "error: scenario `{}` has no closed-form oracle for these parameters",
            scenario.name()
        );
        return EXIT_CONFIG;
    }
    let t_end = args.t_end.unwrap_or(scenario.default_t_end);
    let traj = match scenario.run(t_end, args.dt) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let report = match scenarios::compare(&scenario, &traj) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let (checked, label) = if scenario.compare_relative {
        (report.max_rel_err, "max rel err")
    } else {
        (report.max_abs_err, "max abs err")
    };
    println!("scenario:      {}", scenario.name());
    println!("t-end, dt:     {}, {}", t_end, args.dt);
    println!("max abs err:   {:.3e}", report.max_abs_err);
    println!("max rel err:   {:.3e}", report.max_rel_err);
    println!("energy drift:  {:.3e}", report.energy_drift);
    println!(
        "tolerance:     {:.1e} ({label})",
        scenario.compare_tolerance
    );
    if checked <= scenario.compare_tolerance {
        println!("result:        PASS");
        EXIT_OK
    } else {
        println!("result:        FAIL");
        EXIT_TOLERANCE
    }
}

fn cmd_connection(args: &ConnectionArgs) -> u8 {
    let scenario = match build_scenario(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let (default_x, default_fiber) = scenario.diagnostic_state();
    let x = match &args.point {
        Some(spec) => match parse_vector(spec, "--point") {
            Ok(v) => v,
            Err(msg) => {
                eprintln!("error: {msg}");
                return EXIT_CONFIG;
            }
        },
        None => default_x,
    };
    let fiber = match &args.fiber {
        Some(spec) => match parse_vector(spec, "--fiber") {
            Ok(v) => v,
            Err(msg) => {
                eprintln!("error: {msg}");
                return EXIT_CONFIG;
            }
        },
        None => default_fiber,
    };
    match scenario.connection_report(&x, &fiber) {
        Ok(report) => {
            match args.format.as_str() {
                "json" => println!(
                    "{}",
                    output::connection_json(&scenario, &x, &fiber, &report)
                ),
                _ => print!(
                    "{}",
                    output::connection_text(&scenario, &x, &fiber, &report)
                ),
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_list_scenarios() -> u8 {
    for name in scenarios::names() {
        let s = scenarios::build(name, &BTreeMap::new()).expect("defaults are valid");
        let params: Vec<String> = s.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{name:<14} params: {}", params.join(", "));
    }
    EXIT_OK
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Geodesic(args) => cmd_geodesic(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Connection(args) => cmd_connection(args),
        Command::ListScenarios => cmd_list_scenarios(),
    };
    ExitCode::from(code)
}
