//! Command-line plumbing: argument parsing, artifact writing, exit codes.
//!
//! Exit codes: 0 success; 1 internal error (solver, I/O on artifacts);
//! 2 configuration or validation failure (bad flags, malformed or invalid
//! scenario, degenerate calibration input); 3 verify gap above threshold.
//! Artifacts are written to a temporary file in the destination directory
//! and renamed into place, so failures never leave partial files behind.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use carbonsim::deta::{self, random_verify_state};
use carbonsim::energy::{calibrate, load_calibration_csv, CalibrationContext};
use carbonsim::ledger::LifecycleStage;
use carbonsim::report::ComparisonTable;
use carbonsim::scenario::{load_scenario, ModelKind, Policy, Scenario, ScenarioError};
use carbonsim::sim::{
    derive_seed, run, run_many, run_traced, scenario_with_server_count, RunReport, SimError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_GAP: i32 = 3;

/// Environment variable overriding the scenario seed for `run`/`compare`.
pub const SEED_ENV: &str = "CARBONSIM_SEED";

#[derive(Parser)]
#[command(
    name = "carbonsim",
    version,
    about = "Time-slotted carbon-emission simulator for federated edge intelligence"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run one scenario; write report.json and ledger.csv.
    Run(RunArgs),
    /// Run every policy across server counts; write a comparison table.
    Compare(CompareArgs),
    /// Fit per-round energy parameters from a measurement table.
    Calibrate(CalibrateArgs),
    /// Cross-check the LP solver against the exhaustive oracle.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Override the scenario's policy (Baseline, DET, DAT, DETA).
    #[arg(long)]
    pub policy: Option<String>,
    /// Output directory for report.json and ledger.csv.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write decisions.json with each optimized slot's LP input and
    /// output.
    #[arg(long)]
    pub dump_decisions: bool,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Scenario JSON file (its policy field is ignored).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Server counts to compare, e.g. `--servers 1,2,5,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub servers: Vec<usize>,
    /// Policies to compare (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<String>>,
    /// Output directory for comparison.csv.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for the run fan-out (1 keeps log order).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Measurement CSV with columns model,servers,E,B,total_kwh,co2_g.
    #[arg(long)]
    pub table: PathBuf,
    /// Model family to fit: MLP, CNN, or LSTM.
    #[arg(long)]
    pub model: String,
    /// Training-set size the measured rows share.
    #[arg(long, default_value_t = 60_000)]
    pub samples: u64,
    /// Round count assumed per run (residuals are invariant to it).
    #[arg(long, default_value_t = 20)]
    pub rounds: u32,
    /// Output path for the fit JSON.
    #[arg(long, default_value = "params.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Number of random slot states to check.
    #[arg(long, default_value_t = 100)]
    pub random_states: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Oracle discretization as a fraction of each cap.
    #[arg(long, default_value_t = 0.02)]
    pub grid_step: f64,
    /// Policy to verify.
    #[arg(long, default_value = "DETA")]
    pub policy: String,
    /// Maximum tolerated relative gap (oracle − LP)/LP.
    #[arg(long, default_value_t = 0.02)]
    pub max_gap: f64,
}

pub fn dispatch(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// An error already classified with its exit code.
pub struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
    fn internal(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> CliError {
        match &e {
            ScenarioError::Invalid(violations) => {
                let mut message = String::from("scenario failed validation:");
                for v in violations {
                    let _ = write!(message, "\n  {} ({:?}): {}", v.path, v.code, v.message);
                }
                CliError::config(message)
            }
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> CliError {
        match e {
            SimError::Scenario(inner) => inner.into(),
            SimError::Sweep(msg) => CliError::config(msg),
            other => CliError::internal(other.to_string()),
        }
    }
}

fn parse_policy(s: &str) -> Result<Policy, CliError> {
    Policy::from_str(s).map_err(CliError::config)
}

fn parse_model(s: &str) -> Result<ModelKind, CliError> {
    match s.to_ascii_uppercase().as_str() {
        "MLP" => Ok(ModelKind::Mlp),
        "CNN" => Ok(ModelKind::Cnn),
        "LSTM" => Ok(ModelKind::Lstm),
        other => Err(CliError::config(format!(
            "unknown model `{other}` (expected MLP, CNN, or LSTM)"
        ))),
    }
}

/// Applies the `CARBONSIM_SEED` override, if present.
fn apply_seed_env(scenario: &mut Scenario) -> Result<(), CliError> {
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed = raw.parse::<u64>().map_err(|_| {
            CliError::config(format!("{SEED_ENV}={raw} is not a valid u64 seed"))
        })?;
        scenario.seed = seed;
    }
    Ok(())
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    let mut scenario = load_scenario(path)?;
    apply_seed_env(&mut scenario)?;
    Ok(scenario)
}

/// Writes bytes to `path` atomically (temp file + rename in the same
/// directory).
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::internal(format!("creating {}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::internal(format!("temp file in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::internal(format!("renaming into {}: {e}", path.display())))?;
    Ok(())
}

fn to_json_pretty<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::internal(format!("serializing report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// `server,stage,slot,kwh,gco2e` — one line per ledger cell, kWh summed
/// over sources.
fn ledger_csv(report: &RunReport) -> Vec<u8> {
    let mut out = String::from("server,stage,slot,kwh,gco2e\n");
    for row in &report.ledger {
        let kwh = row.grid_kwh + row.renewable_kwh + row.battery_kwh + row.import_kwh
            + row.backbone_kwh;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.server, row.stage, row.slot, kwh, row.gco2e
        );
    }
    out.into_bytes()
}

fn stage_table(report: &RunReport) -> String {
    let mut out = String::from("stage         kWh            gCO2e          fraction\n");
    for stage in LifecycleStage::ALL {
        let row = report
            .stages
            .stages
            .iter()
            .find(|r| r.stage == stage.to_string());
        let (kwh, gco2e, fraction) = row
            .map(|r| (r.kwh, r.gco2e, r.fraction))
            .unwrap_or((0.0, 0.0, 0.0));
        let _ = writeln!(
            out,
            "{:<12}  {:<13.6e}  {:<13.6e}  {:>8.4}",
            stage.to_string(),
            kwh,
            gco2e,
            fraction
        );
    }
    let _ = writeln!(
        out,
        "{:<12}  {:<13.6e}  {:<13.6e}  {:>8.4}",
        "Recycling", report.stages.recycling_kwh, report.stages.recycling_gco2e, 0.0
    );
    let _ = writeln!(
        out,
        "{:<12}  {:<13.6e}  {:<13.6e}",
        "total", report.total_kwh, report.total_gco2e
    );
    out
}

pub fn cmd_run(args: RunArgs) -> Result<i32, CliError> {
    let mut scenario = load(&args.scenario)?;
    if let Some(p) = &args.policy {
        scenario.policy = parse_policy(p)?;
    }

    let (report, decisions) = if args.dump_decisions {
        let (r, d) = run_traced(&scenario)?;
        (r, Some(d))
    } else {
        (run(&scenario)?, None)
    };

    write_atomic(&args.out.join("report.json"), &to_json_pretty(&report)?)?;
    write_atomic(&args.out.join("ledger.csv"), &ledger_csv(&report))?;
    if let Some(d) = &decisions {
        write_atomic(&args.out.join("decisions.json"), &to_json_pretty(d)?)?;
    }

    println!(
        "{} | policy {} | {} servers | {} rounds{}",
        report.scenario_id,
        report.policy,
        report.server_count,
        report.rounds_used,
        if report.target_not_reached {
            " (target not reached)"
        } else {
            ""
        }
    );
    print!("{}", stage_table(&report));
    println!(
        "simulated energy {:.6e} kWh, emissions {:.6e} gCO2e ({:.6e} g over the backbone)",
        report.total_kwh, report.total_gco2e, report.totals.backbone_gco2e
    );

    // A non-Baseline run also reports its headline reduction, from a
    // paired Baseline run under the same seed and placements.
    if scenario.policy != Policy::Baseline {
        let mut baseline = scenario.clone();
        baseline.policy = Policy::Baseline;
        let base_report = run(&baseline)?;
        let table = ComparisonTable::from_reports(&[&base_report, &report])
            .map_err(|e| CliError::internal(e.to_string()))?;
        let mut csv = Vec::new();
        table
            .write_csv(&mut csv)
            .map_err(|e| CliError::internal(e.to_string()))?;
        write_atomic(&args.out.join("comparison.csv"), &csv)?;
        let reduction = table
            .reduction(report.server_count, report.policy)
            .unwrap_or(0.0);
        println!(
            "reduction vs Baseline: {reduction:.2}% ({:.6e} → {:.6e} gCO2e)",
            base_report.total_gco2e, report.total_gco2e
        );
    }
    if !report.audit.passed {
        return Err(CliError::internal(format!(
            "conservation audit failed: residual {} kWh",
            report.audit.max_residual_kwh
        )));
    }
    Ok(EXIT_OK)
}

pub fn cmd_compare(args: CompareArgs) -> Result<i32, CliError> {
    let scenario = load(&args.scenario)?;
    if args.servers.is_empty() {
        return Err(CliError::config("--servers needs at least one count"));
    }
    let policies: Vec<Policy> = match &args.policies {
        Some(names) => names
            .iter()
            .map(|s| parse_policy(s))
            .collect::<Result<_, _>>()?,
        None => Policy::ALL.to_vec(),
    };
    if !policies.contains(&Policy::Baseline) {
        return Err(CliError::config(
            "comparison needs the Baseline policy to anchor reductions",
        ));
    }

    let mut combos = Vec::new();
    for &n in &args.servers {
        let mut with_n = scenario_with_server_count(&scenario, n)?;
        with_n.seed = derive_seed(scenario.seed, n as u64);
        for &policy in &policies {
            let mut combo = with_n.clone();
            combo.policy = policy;
            combos.push(combo);
        }
    }
    let reports = run_many(&combos, args.jobs)?;
    let refs: Vec<&RunReport> = reports.iter().collect();
    let table = ComparisonTable::from_reports(&refs)
        .map_err(|e| CliError::internal(e.to_string()))?;

    let mut csv = Vec::new();
    table
        .write_csv(&mut csv)
        .map_err(|e| CliError::internal(e.to_string()))?;
    write_atomic(&args.out.join("comparison.csv"), &csv)?;
    print!("{}", table.render_text());
    Ok(EXIT_OK)
}

pub fn cmd_calibrate(args: CalibrateArgs) -> Result<i32, CliError> {
    let model = parse_model(&args.model)?;
    let rows =
        load_calibration_csv(&args.table, model).map_err(|e| CliError::config(e.to_string()))?;
    let ctx = CalibrationContext {
        total_samples: args.samples,
        rounds: args.rounds,
    };
    let fit = calibrate(&rows, model, ctx).map_err(|e| CliError::config(e.to_string()))?;

    write_atomic(&args.out, &to_json_pretty(&fit)?)?;
    println!(
        "{} fit over {} rows: static {:.6e} kWh/slot, comm {:.6e} kWh/round, compute {:.6e} kWh/unit",
        fit.model_kind,
        fit.residuals.len(),
        fit.params.static_energy_per_slot_kwh,
        fit.params.comm_energy_per_model_exchange_kwh,
        fit.params.train_energy_per_sample_epoch_kwh
    );
    println!("servers  measured_kwh   fitted_kwh     rel_error");
    for r in &fit.residuals {
        println!(
            "{:>7}  {:<13.6e}  {:<13.6e}  {:>+8.4}%",
            r.server_count,
            r.measured_kwh,
            r.fitted_kwh,
            100.0 * r.relative_error
        );
    }
    println!(
        "max |relative error| {:.4}%",
        100.0 * fit.max_abs_relative_error
    );
    Ok(EXIT_OK)
}

pub fn cmd_verify(args: VerifyArgs) -> Result<i32, CliError> {
    let policy = parse_policy(&args.policy)?;
    if !(args.grid_step > 0.0 && args.grid_step <= 0.25) {
        return Err(CliError::config(format!(
            "--grid-step {} must lie in (0, 0.25]",
            args.grid_step
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut max_gap: f64 = 0.0;
    let mut worst = 0usize;
    for k in 0..args.random_states {
        let n = 1 + k % 3;
        let state = random_verify_state(&mut rng, n);
        let lp = deta::solve(&state, policy).map_err(|e| CliError::internal(e.to_string()))?;
        let oracle = deta::solve_oracle(&state, policy, args.grid_step)
            .map_err(|e| CliError::internal(e.to_string()))?;
        if oracle.objective_gco2e < lp.objective_gco2e - 1e-9 {
            return Err(CliError::internal(format!(
                "oracle beat the LP on state {k}: {} < {} gCO2e \
                 (the LP is supposed to be a lower bound)",
                oracle.objective_gco2e, lp.objective_gco2e
            )));
        }
        let gap = (oracle.objective_gco2e - lp.objective_gco2e)
            / lp.objective_gco2e.max(1e-12);
        if gap > max_gap {
            max_gap = gap;
            worst = k;
        }
    }
    println!(
        "verified {} states (policy {}, grid step {}): max relative gap {:.4}% (state {}), threshold {:.2}%",
        args.random_states,
        policy,
        args.grid_step,
        100.0 * max_gap,
        worst,
        100.0 * args.max_gap
    );
    if max_gap > args.max_gap {
        eprintln!("error: oracle gap exceeds threshold");
        return Ok(EXIT_GAP);
    }
    Ok(EXIT_OK)
}
