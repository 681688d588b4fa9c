//! `uavisac`: plan a mission, sweep the echo SNR threshold, or re-audit a
//! saved plan.
//!
//! Exit codes: 0 success, 2 scenario or input error, 3 solver failure,
//! 4 audit failure (artifacts are still written).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use uavisac::ao::{slot_propulsion, snr_sweep, solve_scheme, Scheme, SolveReport, SweepRow};
use uavisac::audit::{verify_solution_with, ConstraintAudit};
use uavisac::error::SolveError;
use uavisac::scenario::{apply_override, default_document, smoke_document, ScenarioError};
use uavisac::Scenario;

const EXIT_INPUT: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "uavisac", version, about = "Energy-aware UAV sensing and communication planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one scenario with one scheme.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "proposed", value_parser = parse_scheme)]
        scheme: Scheme,
    },
    /// Solve every scheme over a list of echo SNR thresholds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Thresholds in dB, separated by commas or spaces.
        #[arg(long, default_value = "0,2,4,6", value_parser = parse_thresholds)]
        thresholds_db: Thresholds,
        /// Concurrent schemes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Fill the wall-clock column; the sweep table is then no longer
        /// reproducible byte for byte.
        #[arg(long)]
        record_timing: bool,
    },
    /// Re-audit a saved report from its beamformers and trajectory.
    Verify {
        report: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario document, or `default` / `smoke` for the built-in missions.
    #[arg(long, default_value = "default")]
    scenario: String,
    /// Document patch `dotted.path=value`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed of the rank-one randomization fallback.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone)]
struct Thresholds(Vec<f64>);

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    Scheme::parse(s).ok_or_else(|| format!("unknown scheme `{s}` (proposed, baseline-1, baseline-2)"))
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    let values = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err("no thresholds given".into());
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err("thresholds must be strictly ascending".into());
    }
    Ok(Thresholds(values))
}

/// What `run` saves: the exact scenario solved and the full report.
#[derive(Serialize, Deserialize)]
struct SavedRun {
    scenario: Value,
    report: SolveReport,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Solver(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Scenario(s) => Failure::Input(s.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let mut doc = match common.scenario.as_str() {
        "default" => default_document(),
        "smoke" => smoke_document(),
        path => {
            let text = fs::read_to_string(path).map_err(|e| io_error(Path::new(path), e))?;
            serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{path}: {e}")))?
        }
    };
    for o in &common.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut scenario = Scenario::from_value(doc)?;
    if let Some(seed) = common.seed {
        scenario.solver.seed = seed;
    }
    Ok(scenario)
}

/// Writes through a sibling temporary file and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_file_name(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
    f.write_all(contents).map_err(|e| io_error(&tmp, e))?;
    f.sync_all().map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn trajectory_csv(scenario: &Scenario, r: &SolveReport) -> String {
    let mut out = String::from("slot,t_s,q_x_m,q_y_m,v_x_m_per_s,v_y_m_per_s,speed_m_per_s,sensing_target\n");
    let t = &r.trajectory;
    for n in 0..t.len() {
        let target = r.schedule.sensing_target(n).map_or_else(|| "none".to_string(), |e| e.to_string());
        let [qx, qy] = t.positions[n];
        let [vx, vy] = t.velocities[n];
        let _ = writeln!(
            out,
            "{n},{},{qx},{qy},{vx},{vy},{},{target}",
            n as f64 * scenario.timing.slot_length,
            t.speed(n)
        );
    }
    out
}

fn power_csv(scenario: &Scenario, r: &SolveReport) -> String {
    let mut out = String::from("slot,tx_power_w,propulsion_w,total_w\n");
    for (n, prop) in slot_propulsion(scenario, &r.trajectory, &r.schedule).into_iter().enumerate() {
        let tx = r.plan.slot_power(n);
        let _ = writeln!(out, "{n},{tx},{prop},{}", tx + prop);
    }
    out
}

fn sweep_csv(rows: &[SweepRow], record_timing: bool) -> String {
    let mut out = String::from(
        "threshold_db,scheme,avg_power_w,tx_power_w,propulsion_w,iterations,wallclock_s,audit_pass,plan_threshold_db\n",
    );
    for r in rows {
        let clock = if record_timing { format!("{}", r.wallclock_s) } else { String::new() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{clock},{},{}",
            r.threshold_db,
            r.scheme.name(),
            r.avg_power_w,
            r.tx_power_w,
            r.propulsion_w,
            r.iterations,
            r.audit_pass,
            r.plan_threshold_db
        );
    }
    out
}

/// Gnuplot script with the sweep inlined: average power against the echo
/// SNR threshold, one line per scheme. Failed cells are left out.
fn fig3c_script(rows: &[SweepRow], schemes: &[Scheme]) -> String {
    let mut out = String::from(
        "# Average power consumption versus minimum sensing SNR.\n\
         # Columns: threshold_db avg_power_w\n",
    );
    for s in schemes {
        let _ = writeln!(out, "${} << EOD", s.name().replace('-', "_"));
        for r in rows.iter().filter(|r| r.scheme == *s && r.error.is_none()) {
            let _ = writeln!(out, "{} {}", r.threshold_db, r.avg_power_w);
        }
        out.push_str("EOD\n");
    }
    out.push_str(
        "set xlabel 'minimum sensing SNR (dB)'\n\
         set ylabel 'average power consumption (W)'\n\
         set key top left\n\
         set grid\n",
    );
    let plots: Vec<String> = schemes
        .iter()
        .map(|s| format!("${} using 1:2 with linespoints title '{}'", s.name().replace('-', "_"), s.name()))
        .collect();
    let _ = writeln!(out, "plot {}", plots.join(", \\\n     "));
    out
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn cmd_run(common: &Common, scheme: Scheme) -> Result<bool, Failure> {
    let scenario = load(common)?;
    let report = solve_scheme(&scenario, scheme)?;
    create_dir(&common.out)?;
    let saved = SavedRun {
        scenario: scenario.to_value(),
        report,
    };
    let mut doc = serde_json::to_value(&saved).map_err(|e| Failure::Solver(e.to_string()))?;
    if let Some(stats) = doc.pointer_mut("/report/stats").and_then(Value::as_object_mut) {
        stats.remove("wallclock_s");
    }
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Solver(e.to_string()))?;
    let r = &saved.report;
    write_atomic(&common.out.join("report.json"), json.as_bytes())?;
    write_atomic(&common.out.join("trajectory.csv"), trajectory_csv(&scenario, r).as_bytes())?;
    write_atomic(&common.out.join("power.csv"), power_csv(&scenario, r).as_bytes())?;
    write_atomic(&common.out.join("audit.txt"), r.audit.summary().as_bytes())?;
    println!(
        "{}: average power {:.6} W (transmit {:.6} W, propulsion {:.6} W), {} iterations in {:.2} s",
        scheme.name(),
        r.objective,
        r.tx_power,
        r.propulsion_power,
        r.iterations.len(),
        r.stats.wallclock_s
    );
    print!("{}", r.audit.summary());
    Ok(r.audit.pass)
}

fn cmd_sweep(common: &Common, thresholds: &Thresholds, jobs: usize, record_timing: bool) -> Result<bool, Failure> {
    let scenario = load(common)?;
    let schemes = Scheme::ALL;
    let rows = snr_sweep(&scenario, &thresholds.0, &schemes, jobs);
    create_dir(&common.out)?;
    write_atomic(&common.out.join("sweep.csv"), sweep_csv(&rows, record_timing).as_bytes())?;
    write_atomic(&common.out.join("fig3c.gp"), fig3c_script(&rows, &schemes).as_bytes())?;
    for r in &rows {
        match &r.error {
            Some(e) => println!("{:>6} dB {:<10} failed: {e}", r.threshold_db, r.scheme.name()),
            None => println!(
                "{:>6} dB {:<10} {:.6} W{}",
                r.threshold_db,
                r.scheme.name(),
                r.avg_power_w,
                if r.audit_pass { "" } else { " (audit failed)" }
            ),
        }
    }
    let every_scheme_ok = schemes
        .iter()
        .all(|s| rows.iter().any(|r| r.scheme == *s && r.error.is_none()));
    if !every_scheme_ok {
        return Err(Failure::Solver("some scheme failed at every threshold".into()));
    }
    Ok(true)
}

/// Families whose stored audit values disagree with the recomputed ones.
fn stored_disagreement(stored: &ConstraintAudit, fresh: &ConstraintAudit) -> Vec<&'static str> {
    let differs = |a: &[f64], b: &[f64]| {
        a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1e-12))
    };
    let mut out = Vec::new();
    if differs(&stored.average_rates, &fresh.average_rates) {
        out.push("C2");
    }
    if differs(&stored.sensing_snr, &fresh.sensing_snr) {
        out.push("C4");
    }
    out
}

fn cmd_verify(path: &Path) -> Result<bool, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let saved: SavedRun = serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let scenario = Scenario::from_value(saved.scenario)?;
    let r = &saved.report;
    let audit = verify_solution_with(&r.plan, &r.trajectory, &r.schedule, &scenario, r.scheme.audit_options());
    print!("{}", audit.summary());
    let mismatched = stored_disagreement(&r.audit, &audit);
    for f in &mismatched {
        println!("{f}        FAIL stored values differ from the recomputed audit");
    }
    let same_scenario = scenario.digest() == r.scenario_digest;
    if !same_scenario {
        println!("scenario  FAIL digest differs from the one the plan was solved for");
    }
    Ok(audit.pass && mismatched.is_empty() && same_scenario)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, scheme } => cmd_run(common, *scheme),
        Command::Sweep {
            common,
            thresholds_db,
            jobs,
            record_timing,
        } => cmd_sweep(common, thresholds_db, *jobs, *record_timing),
        Command::Verify { report } => cmd_verify(report),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("audit failed");
            ExitCode::from(EXIT_AUDIT)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}
