//! The time-slotted run: placement, harvest, per-slot policy solves,
//! battery dynamics, lifecycle staging, and the conservation audit.
//!
//! Slot layout for a run with R development rounds:
//!
//! - slot 0 — Preparation: per-sample collection/upload energy, charged to
//!   each server's region at that slot's intensity. This energy is spent by
//!   user devices and the radio access network, so it never enters the
//!   allocation LP.
//! - slots 1..=R — Development: one federated round per slot. Static,
//!   compute, and coordination energy feed the policy solver; the decision
//!   is booked by source and batteries absorb leftover harvest.
//! - slot R+1 — Application: serving energy split uniformly across servers
//!   and allocated by the same policy (with no offloadable work-units).
//!   Skipped entirely when the scenario serves zero inferences, so a
//!   zero-inference run books no Application entries at all.
//!
//! Harvest accrues every simulated slot, including Preparation. Randomness
//! comes from per-purpose ChaCha streams of the scenario seed: stream 0
//! places unpinned servers, stream i+1 drives server i's harvester. Servers
//! with explicit `region_id` consume no placement draws, so pinning one
//! server never reshuffles the others.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::deta::{self, AllocationDecision, SlotServer, SlotState, SolveError};
use crate::energy::EnergyParams;
use crate::harvest::{battery_step, BatteryError};
use crate::ledger::{
    EmissionLedger, EnergyBySource, LedgerError, LedgerTotals, LifecycleStage, StageReport,
};
use crate::scenario::{validate_scenario, Policy, Scenario, ScenarioError};

/// Conservation-audit tolerance, kWh.
pub const AUDIT_TOL_KWH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("invalid sweep: {0}")]
    Sweep(String),
}

/// Whole-run movement totals: what the policies actually did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DecisionsSummary {
    /// Energy debited at exporters, kWh.
    pub energy_traded_kwh: f64,
    /// Energy credited at importers after the trading loss, kWh.
    pub energy_delivered_kwh: f64,
    pub work_units_offloaded: f64,
    pub backbone_kwh: f64,
    /// (server, slot) pairs that ended a development slot with no local
    /// work-units.
    pub idle_server_slots: u64,
    /// Static energy shed by deep sleep, kWh (zero unless enabled).
    pub deep_sleep_refund_kwh: f64,
}

/// Result of the per-slot conservation checks (see `run` internals):
/// harvest splits exactly into use + storage + overflow, batteries
/// telescope exactly, and every server's supply meets its residual demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditReport {
    pub max_residual_kwh: f64,
    pub passed: bool,
}

/// One ledger line in the report JSON (the CSV mirror lives in
/// `EmissionLedger::write_csv`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub server: String,
    pub stage: String,
    pub slot: u64,
    pub grid_kwh: f64,
    pub renewable_kwh: f64,
    pub battery_kwh: f64,
    pub import_kwh: f64,
    pub backbone_kwh: f64,
    pub gco2e: f64,
}

/// Everything a single run produces. Serialization is deterministic:
/// ordered maps, ordered rows, and shortest-round-trip floats.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario_id: String,
    pub policy: Policy,
    pub seed: u64,
    pub server_count: usize,
    /// Resolved server → region placements.
    pub placements: BTreeMap<String, String>,
    pub rounds_used: u32,
    pub final_accuracy: f64,
    pub target_accuracy: f64,
    pub target_not_reached: bool,
    pub slots_simulated: u64,
    /// Physical energy drawn over the run: grid + renewable + battery +
    /// backbone. Traded energy is not double-counted (imports are the
    /// delivered share of exporters' renewable draws).
    pub total_kwh: f64,
    pub total_gco2e: f64,
    /// Emissions excluding backbone transport, for reading results with
    /// and without that term.
    pub gco2e_excl_backbone: f64,
    pub totals: LedgerTotals,
    pub stages: StageReport,
    /// LP objective (gCO2e) per optimized slot, development rounds first,
    /// then the application slot when present.
    pub objective_trace: Vec<f64>,
    pub decisions: DecisionsSummary,
    pub audit: AuditReport,
    pub ledger: Vec<LedgerRow>,
}

/// Per-slot solver inputs and outputs, captured on demand
/// (`run_traced`) for debugging and the CLI's `--dump-decisions`.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionRecord {
    pub slot: u64,
    pub stage: String,
    pub state: SlotState,
    pub decision: AllocationDecision,
}

pub fn run(scenario: &Scenario) -> Result<RunReport, SimError> {
    Ok(run_internal(scenario, false)?.0)
}

/// `run`, additionally capturing every optimized slot's state and decision.
pub fn run_traced(scenario: &Scenario) -> Result<(RunReport, Vec<DecisionRecord>), SimError> {
    let (report, trace) = run_internal(scenario, true)?;
    Ok((report, trace.unwrap_or_default()))
}

fn run_internal(
    scenario: &Scenario,
    capture: bool,
) -> Result<(RunReport, Option<Vec<DecisionRecord>>), SimError> {
    let violations = validate_scenario(scenario);
    if !violations.is_empty() {
        return Err(ScenarioError::Invalid(violations).into());
    }
    let n = scenario.servers.len();
    let wl = &scenario.workload;

    // Placement: stream 0, draws consumed only by unpinned servers.
    let mut placement_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    placement_rng.set_stream(0);
    let mut placements = BTreeMap::new();
    for server in &scenario.servers {
        let region_id = match &server.region_id {
            Some(r) => r.clone(),
            None => {
                let k = placement_rng.gen_range(0..scenario.regions.len());
                scenario.regions[k].id.clone()
            }
        };
        placements.insert(server.id.clone(), region_id);
    }

    let (rounds, target_not_reached) = match wl.rounds_to_accuracy(wl.target_accuracy) {
        Some(r) if r <= scenario.max_rounds => (r, false),
        _ => (scenario.max_rounds, true),
    };

    // Uniform sample split; the remainder goes to the lowest-index server.
    let base = wl.total_samples / n as u64;
    let rem = wl.total_samples % n as u64;
    let samples: Vec<u64> = (0..n as u64)
        .map(|i| base + if i == 0 { rem } else { 0 })
        .collect();

    let mut harvest_rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(scenario.seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect();
    let mut battery: Vec<f64> = scenario.servers.iter().map(|s| s.battery_level_kwh).collect();
    let mut ledger = EmissionLedger::for_scenario(scenario, &placements);
    let mut trace = capture.then(Vec::new);
    let mut objective_trace = Vec::new();
    let mut decisions = DecisionsSummary::default();
    let mut max_residual: f64 = 0.0;

    let static_kwh: Vec<f64> = scenario
        .servers
        .iter()
        .map(|s| s.static_energy_per_slot(scenario.slot_duration_s))
        .collect();
    let overhead_kwh: Vec<f64> = scenario
        .servers
        .iter()
        .map(|s| {
            let p = EnergyParams::from_server(s, scenario.slot_duration_s, wl.model_bytes);
            p.static_energy_per_slot_kwh + p.comm_energy_per_model_exchange_kwh
        })
        .collect();

    // Harvests for one slot, then (after any consumption) pushes leftovers
    // through the battery. Returns the slot's harvest per server.
    let sample_harvest = |slot: u64, rngs: &mut Vec<ChaCha8Rng>| -> Vec<f64> {
        (0..n)
            .map(|i| scenario.servers[i].harvester.sample(slot, &mut rngs[i]))
            .collect()
    };

    // --- Slot 0: Preparation --------------------------------------------
    let per_sample = wl.preparation.total_per_sample();
    for (i, server) in scenario.servers.iter().enumerate() {
        ledger.record(
            &server.id,
            LifecycleStage::Preparation,
            0,
            EnergyBySource {
                grid_kwh: samples[i] as f64 * per_sample,
                ..EnergyBySource::default()
            },
        )?;
    }
    let harvest0 = sample_harvest(0, &mut harvest_rngs);
    for i in 0..n {
        let server = &scenario.servers[i];
        let step = battery_step(
            battery[i],
            server.battery_capacity_kwh,
            server.charge_efficiency,
            harvest0[i],
            0.0,
        )?;
        let residual = (harvest0[i] - step.accepted_kwh - step.overflow_kwh).abs();
        max_residual = max_residual.max(residual);
        battery[i] = step.level_kwh;
    }

    // --- One optimized slot (Development or Application) -----------------
    let optimized_slot = |slot: u64,
                              stage: LifecycleStage,
                              demand_units: &[f64],
                              overheads: &[f64],
                              battery: &mut Vec<f64>,
                              harvest_rngs: &mut Vec<ChaCha8Rng>,
                              ledger: &mut EmissionLedger,
                              objective_trace: &mut Vec<f64>,
                              decisions: &mut DecisionsSummary,
                              max_residual: &mut f64,
                              trace: &mut Option<Vec<DecisionRecord>>|
     -> Result<(), SimError> {
        let harvest = sample_harvest(slot, harvest_rngs);
        let mut slot_servers = Vec::with_capacity(n);
        for (i, server) in scenario.servers.iter().enumerate() {
            slot_servers.push(SlotServer {
                id: server.id.clone(),
                harvest_kwh: harvest[i],
                battery_kwh: battery[i],
                demand_units: demand_units[i],
                compute_kwh_per_unit: server.compute_energy_per_unit_kwh,
                overhead_kwh: overheads[i],
                intensity: ledger.intensity_for(&server.id, slot)?,
            });
        }
        let state = SlotState {
            servers: slot_servers,
            alpha_energy: scenario.alpha_energy,
            alpha_task: scenario.alpha_task,
            trading_loss: scenario.trading_loss,
            bytes_per_work_unit: wl.offload_bytes_per_unit,
            backbone_kwh_per_byte: scenario.backbone_energy_per_byte_kwh,
            backbone_intensity: scenario.effective_backbone_intensity(),
        };
        let mut decision = deta::solve(&state, scenario.policy)?;

        // Deep sleep: servers that finished the slot workless shed their
        // static draw. Applied after the solve (the LP prices full
        // overheads), refunded from the dirtiest source first.
        let residual_units = decision.residual_units(&state);
        for i in 0..n {
            let idle = residual_units[i] <= 1e-12 * (1.0 + state.servers[i].demand_units);
            if idle && stage == LifecycleStage::Development {
                decisions.idle_server_slots += 1;
            }
            if idle && scenario.deep_sleep {
                let mut refund = static_kwh[i].min(
                    decision.grid_draw[i]
                        + decision.battery_discharge[i]
                        + decision.harvest_used[i],
                );
                decisions.deep_sleep_refund_kwh += refund;
                let from_grid = decision.grid_draw[i].min(refund);
                decision.grid_draw[i] -= from_grid;
                decision.objective_gco2e -= from_grid * state.servers[i].intensity;
                refund -= from_grid;
                let from_battery = decision.battery_discharge[i].min(refund);
                decision.battery_discharge[i] -= from_battery;
                refund -= from_battery;
                decision.harvest_used[i] -= decision.harvest_used[i].min(refund);
            }
        }

        let imports = decision.imports(&state);
        for i in 0..n {
            let server = &scenario.servers[i];
            let out_x: f64 = decision.task_offload[i].iter().sum();
            let backbone = out_x * state.offload_kwh_per_unit();
            ledger.record(
                &server.id,
                stage,
                slot,
                EnergyBySource {
                    grid_kwh: decision.grid_draw[i],
                    renewable_kwh: decision.harvest_used[i],
                    battery_kwh: decision.battery_discharge[i],
                    import_kwh: imports[i],
                    backbone_kwh: backbone,
                },
            )?;

            // Balance audit: supply covers the post-sleep residual demand.
            let demand = if scenario.deep_sleep
                && residual_units[i] <= 1e-12 * (1.0 + state.servers[i].demand_units)
            {
                (overheads[i] - static_kwh[i]).max(0.0)
                    + state.servers[i].compute_kwh_per_unit * residual_units[i]
            } else {
                overheads[i] + state.servers[i].compute_kwh_per_unit * residual_units[i]
            };
            let out_e: f64 = decision.energy_transfer[i].iter().sum();
            let supply = decision.grid_draw[i] + decision.harvest_used[i]
                + decision.battery_discharge[i]
                - out_e
                + imports[i];
            *max_residual = max_residual.max((supply - demand).abs());

            // Battery: discharge what the decision used, store leftovers.
            let leftover = (harvest[i] - decision.harvest_used[i]).max(0.0);
            let before = battery[i];
            let step = battery_step(
                battery[i],
                server.battery_capacity_kwh,
                server.charge_efficiency,
                leftover,
                decision.battery_discharge[i],
            )?;
            let harvest_split =
                (harvest[i] - decision.harvest_used[i] - step.accepted_kwh - step.overflow_kwh)
                    .abs();
            let telescope = (step.level_kwh
                - (before - decision.battery_discharge[i]
                    + server.charge_efficiency * step.accepted_kwh))
                .abs();
            *max_residual = max_residual.max(harvest_split).max(telescope);
            battery[i] = step.level_kwh;

            decisions.energy_traded_kwh += out_e;
            decisions.work_units_offloaded += out_x;
            decisions.backbone_kwh += backbone;
        }
        decisions.energy_delivered_kwh += imports.iter().sum::<f64>();
        objective_trace.push(decision.objective_gco2e);
        if let Some(t) = trace.as_mut() {
            t.push(DecisionRecord {
                slot,
                stage: stage.to_string(),
                state,
                decision,
            });
        }
        Ok(())
    };

    // --- Slots 1..=R: Development ----------------------------------------
    let dev_units: Vec<f64> = (0..n).map(|i| wl.work_units_per_round(samples[i])).collect();
    for round in 1..=rounds {
        optimized_slot(
            round as u64,
            LifecycleStage::Development,
            &dev_units,
            &overhead_kwh,
            &mut battery,
            &mut harvest_rngs,
            &mut ledger,
            &mut objective_trace,
            &mut decisions,
            &mut max_residual,
            &mut trace,
        )?;
    }

    // --- Slot R+1: Application -------------------------------------------
    let serving_total =
        wl.serving.inference_count as f64 * wl.serving.energy_per_inference_kwh;
    let mut slots_simulated = rounds as u64 + 1;
    if serving_total > 0.0 {
        let app_overheads = vec![serving_total / n as f64; n];
        let zero_units = vec![0.0; n];
        optimized_slot(
            rounds as u64 + 1,
            LifecycleStage::Application,
            &zero_units,
            &app_overheads,
            &mut battery,
            &mut harvest_rngs,
            &mut ledger,
            &mut objective_trace,
            &mut decisions,
            &mut max_residual,
            &mut trace,
        )?;
        slots_simulated += 1;
    }

    let totals = ledger.totals();
    let stages = ledger.stage_report();
    let ledger_rows = ledger
        .entries()
        .map(|((server, stage, slot), e)| LedgerRow {
            server: server.clone(),
            stage: stage.to_string(),
            slot: *slot,
            grid_kwh: e.sources.grid_kwh,
            renewable_kwh: e.sources.renewable_kwh,
            battery_kwh: e.sources.battery_kwh,
            import_kwh: e.sources.import_kwh,
            backbone_kwh: e.sources.backbone_kwh,
            gco2e: e.gco2e,
        })
        .collect();

    let report = RunReport {
        schema_version: scenario.schema_version,
        scenario_id: scenario.id.clone(),
        policy: scenario.policy,
        seed: scenario.seed,
        server_count: n,
        placements,
        rounds_used: rounds,
        final_accuracy: wl.accuracy_after(rounds),
        target_accuracy: wl.target_accuracy,
        target_not_reached,
        slots_simulated,
        total_kwh: totals.grid_kwh + totals.renewable_kwh + totals.battery_kwh
            + totals.backbone_kwh,
        total_gco2e: totals.gco2e,
        gco2e_excl_backbone: totals.gco2e - totals.backbone_gco2e,
        totals,
        stages,
        objective_trace,
        decisions,
        audit: AuditReport {
            max_residual_kwh: max_residual,
            passed: max_residual <= AUDIT_TOL_KWH,
        },
        ledger: ledger_rows,
    };
    Ok((report, trace))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// One scenario dimension to vary, everything else held fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepVary {
    /// Run with the first k servers; if k exceeds the declared list, the
    /// last server is cloned (fresh ids) to make up the difference. Each
    /// count runs under its own deterministically derived seed.
    ServerCount(Vec<usize>),
    /// All listed policies under the *same* seed — paired comparisons.
    Policy(Vec<Policy>),
    Seeds(Vec<u64>),
    /// Targets under the same seed — paired comparisons.
    TargetAccuracy(Vec<f64>),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent per-combination seed, stable in (base seed, combination key).
pub fn derive_seed(base: u64, key: u64) -> u64 {
    splitmix64(base ^ splitmix64(key))
}

/// The scenario restricted (or grown) to `count` servers.
pub fn scenario_with_server_count(
    scenario: &Scenario,
    count: usize,
) -> Result<Scenario, SimError> {
    if count == 0 {
        return Err(SimError::Sweep("server count must be >= 1".into()));
    }
    let mut s = scenario.clone();
    if count <= s.servers.len() {
        s.servers.truncate(count);
    } else {
        let template = s
            .servers
            .last()
            .cloned()
            .ok_or_else(|| SimError::Sweep("scenario declares no servers".into()))?;
        for k in s.servers.len()..count {
            let mut clone = template.clone();
            clone.id = format!("{}-{}", template.id, k + 1);
            if s.servers.iter().any(|e| e.id == clone.id) {
                return Err(SimError::Sweep(format!(
                    "cloned server id `{}` collides with a declared server",
                    clone.id
                )));
            }
            s.servers.push(clone);
        }
    }
    Ok(s)
}

/// Expands a sweep into concrete scenarios, in declaration order.
pub fn expand_sweep(scenario: &Scenario, vary: &SweepVary) -> Result<Vec<Scenario>, SimError> {
    match vary {
        SweepVary::ServerCount(counts) => counts
            .iter()
            .map(|&k| {
                let mut s = scenario_with_server_count(scenario, k)?;
                s.seed = derive_seed(scenario.seed, k as u64);
                Ok(s)
            })
            .collect(),
        SweepVary::Policy(policies) => Ok(policies
            .iter()
            .map(|&p| {
                let mut s = scenario.clone();
                s.policy = p;
                s
            })
            .collect()),
        SweepVary::Seeds(seeds) => Ok(seeds
            .iter()
            .map(|&seed| {
                let mut s = scenario.clone();
                s.seed = seed;
                s
            })
            .collect()),
        SweepVary::TargetAccuracy(targets) => Ok(targets
            .iter()
            .map(|&t| {
                let mut s = scenario.clone();
                s.workload.target_accuracy = t;
                s
            })
            .collect()),
    }
}

/// Runs every combination sequentially. Combinations are independent; the
/// CLI exposes a threaded fan-out, this entry point keeps deterministic
/// log ordering.
pub fn sweep(scenario: &Scenario, vary: &SweepVary) -> Result<Vec<RunReport>, SimError> {
    expand_sweep(scenario, vary)?.iter().map(run).collect()
}

/// `sweep` with a thread fan-out. Reports come back in combination order
/// regardless of completion order.
pub fn sweep_parallel(
    scenario: &Scenario,
    vary: &SweepVary,
    jobs: usize,
) -> Result<Vec<RunReport>, SimError> {
    run_many(&expand_sweep(scenario, vary)?, jobs)
}

/// Runs independent scenarios across up to `jobs` threads, preserving
/// input order in the output.
pub fn run_many(combos: &[Scenario], jobs: usize) -> Result<Vec<RunReport>, SimError> {
    let jobs = jobs.max(1).min(combos.len().max(1));
    if jobs <= 1 || combos.len() <= 1 {
        return combos.iter().map(run).collect();
    }
    let mut results: Vec<Option<Result<RunReport, SimError>>> = Vec::new();
    results.resize_with(combos.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<Result<RunReport, SimError>>>> =
        results.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= combos.len() {
                    break;
                }
                let report = run(&combos[k]);
                **slots[k].lock().unwrap() = Some(report);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every combination index was claimed by a worker"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harvest::HarvestParams;
    use crate::ledger::LifecycleStage;
    use crate::scenario::{
        EdgeServer, ModelKind, PreparationCost, Region, ServingCost, WorkloadSpec,
    };
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn region(id: &str, intensity: f64) -> Region {
        Region {
            id: id.into(),
            label: String::new(),
            intensity_series: vec![(0, intensity)],
        }
    }

    fn server(id: &str, region: Option<&str>) -> EdgeServer {
        EdgeServer {
            id: id.into(),
            region_id: region.map(String::from),
            static_power_w: 20.0,
            compute_energy_per_unit_kwh: 1e-5,
            comm_energy_per_byte_kwh: 0.0,
            battery_capacity_kwh: 0.0,
            battery_level_kwh: 0.0,
            charge_efficiency: 1.0,
            harvester: HarvestParams::None,
        }
    }

    fn scenario() -> Scenario {
        Scenario {
            schema_version: 1,
            id: "test".into(),
            policy: Policy::Baseline,
            alpha_energy: 0.5,
            alpha_task: 0.5,
            trading_loss: 0.05,
            backbone_energy_per_byte_kwh: 0.0,
            backbone_intensity: None,
            slot_duration_s: 3600.0,
            seed: 42,
            max_rounds: 50,
            deep_sleep: false,
            regions: vec![region("low", 50.0), region("high", 400.0)],
            servers: vec![server("a", Some("low")), server("b", Some("high"))],
            workload: WorkloadSpec {
                model_kind: ModelKind::Custom,
                local_epochs: 2,
                batch_size: 32,
                total_samples: 1000,
                model_bytes: 0,
                target_accuracy: 0.9,
                accuracy_curve: vec![(1, 0.7), (2, 0.85), (3, 0.9), (4, 0.93)],
                offload_bytes_per_unit: 0.0,
                preparation: PreparationCost::default(),
                serving: ServingCost::default(),
            },
        }
    }

    #[test]
    fn reports_are_deterministic_byte_for_byte() {
        let mut sc = scenario();
        sc.servers[0].harvester = HarvestParams::Stochastic {
            mean_kwh: 0.05,
            stddev_kwh: 0.01,
        };
        sc.servers[0].battery_capacity_kwh = 0.2;
        sc.servers[0].region_id = None;
        sc.policy = Policy::Deta;
        let a = serde_json::to_string(&run(&sc).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&sc).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rounds_stop_at_the_accuracy_target() {
        let report = run(&scenario()).unwrap();
        assert_eq!(report.rounds_used, 3);
        assert!(!report.target_not_reached);
        assert_abs_diff_eq!(report.final_accuracy, 0.9);
        // Slots: prep + 3 development (no serving configured).
        assert_eq!(report.slots_simulated, 4);
    }

    #[test]
    fn trivial_target_takes_one_round() {
        let mut sc = scenario();
        sc.workload.target_accuracy = 0.5;
        let report = run(&sc).unwrap();
        assert_eq!(report.rounds_used, 1);
    }

    #[test]
    fn unreachable_target_is_flagged_at_max_rounds() {
        let mut sc = scenario();
        sc.workload.target_accuracy = 0.99;
        sc.max_rounds = 7;
        let report = run(&sc).unwrap();
        assert_eq!(report.rounds_used, 7);
        assert!(report.target_not_reached);
        assert_abs_diff_eq!(report.final_accuracy, 0.93);
    }

    #[test]
    fn zero_inference_application_books_nothing() {
        let report = run(&scenario()).unwrap();
        assert_eq!(report.stages.gco2e(LifecycleStage::Application), 0.0);
        assert!(report
            .ledger
            .iter()
            .all(|row| row.stage != LifecycleStage::Application.to_string()));
    }

    #[test]
    fn stage_slots_are_ordered() {
        let mut sc = scenario();
        sc.workload.preparation.ran_kwh_per_sample = 1e-6;
        sc.workload.serving = ServingCost {
            inference_count: 1000,
            energy_per_inference_kwh: 1e-5,
        };
        let report = run(&sc).unwrap();
        for row in &report.ledger {
            let slot_range = match row.stage.as_str() {
                "Preparation" => row.slot == 0,
                "Development" => (1..=3).contains(&row.slot),
                "Application" => row.slot == 4,
                other => panic!("unexpected stage {other}"),
            };
            assert!(slot_range, "row {row:?} out of stage order");
        }
        assert!(report.stages.gco2e(LifecycleStage::Application) > 0.0);
        // Serving energy (0.01 kWh) splits evenly; emissions follow each
        // server's region: 0.005·50 + 0.005·400.
        assert_relative_eq!(
            report.stages.gco2e(LifecycleStage::Application),
            0.005 * 450.0,
            max_relative = 1e-9
        );
    }

    #[test]
    fn policies_coincide_on_a_single_server() {
        let mut sc = scenario();
        sc.servers.truncate(1);
        sc.servers[0].harvester = HarvestParams::Stochastic {
            mean_kwh: 0.02,
            stddev_kwh: 0.005,
        };
        sc.servers[0].battery_capacity_kwh = 0.1;
        let reports: Vec<RunReport> = sweep(&sc, &SweepVary::Policy(Policy::ALL.to_vec()))
            .unwrap();
        let first = &reports[0];
        for r in &reports[1..] {
            assert_eq!(r.total_gco2e, first.total_gco2e);
            assert_eq!(r.total_kwh, first.total_kwh);
            assert_eq!(r.placements, first.placements);
        }
    }

    #[test]
    fn conservation_audit_passes_with_lossy_batteries() {
        let mut sc = scenario();
        sc.policy = Policy::Deta;
        for (i, s) in sc.servers.iter_mut().enumerate() {
            s.harvester = HarvestParams::Stochastic {
                mean_kwh: 0.04 + 0.01 * i as f64,
                stddev_kwh: 0.02,
            };
            s.battery_capacity_kwh = 0.05;
            s.charge_efficiency = 0.9;
        }
        sc.workload.target_accuracy = 0.93;
        let report = run(&sc).unwrap();
        assert!(report.audit.passed, "residual {}", report.audit.max_residual_kwh);
        assert!(report.audit.max_residual_kwh <= AUDIT_TOL_KWH);
    }

    #[test]
    fn sample_split_sends_remainder_to_the_first_server() {
        let mut sc = scenario();
        sc.workload.total_samples = 10;
        sc.servers.push(server("c", Some("low")));
        let report = run(&sc).unwrap();
        // 10 = 4 + 3 + 3; compute energy per round is 2 epochs × units.
        let dev_rows: Vec<&LedgerRow> = report
            .ledger
            .iter()
            .filter(|r| r.stage == "Development" && r.slot == 1)
            .collect();
        let static_kwh = 20.0 * 3600.0 / 3.6e6;
        assert_abs_diff_eq!(
            dev_rows[0].grid_kwh,
            static_kwh + 4.0 * 2.0 * 1e-5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            dev_rows[1].grid_kwh,
            static_kwh + 3.0 * 2.0 * 1e-5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn deep_sleep_refunds_static_draw_of_workless_servers() {
        let mut sc = scenario();
        sc.workload.total_samples = 1; // server b gets zero samples
        sc.deep_sleep = true;
        let report = run(&sc).unwrap();
        let b_dev: f64 = report
            .ledger
            .iter()
            .filter(|r| r.server == "b" && r.stage == "Development")
            .map(|r| r.grid_kwh)
            .sum();
        assert_abs_diff_eq!(b_dev, 0.0, epsilon = 1e-12);
        assert!(report.decisions.deep_sleep_refund_kwh > 0.0);
        assert!(report.audit.passed);
    }

    #[test]
    fn seeded_placement_is_reproducible_and_respects_pins() {
        let mut sc = scenario();
        sc.servers[0].region_id = None;
        sc.servers[1].region_id = Some("high".into());
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a.placements, b.placements);
        assert_eq!(a.placements["b"], "high");
        sc.seed = 43;
        let c = run(&sc).unwrap();
        assert_eq!(c.placements["b"], "high");
    }

    #[test]
    fn server_count_sweep_grows_by_cloning_the_last_server() {
        let sc = scenario();
        let grown = scenario_with_server_count(&sc, 5).unwrap();
        let ids: Vec<&str> = grown.servers.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "b-3", "b-4", "b-5"]);
        let shrunk = scenario_with_server_count(&sc, 1).unwrap();
        assert_eq!(shrunk.servers.len(), 1);
        assert_eq!(shrunk.servers[0].id, "a");
        assert!(scenario_with_server_count(&sc, 0).is_err());
    }

    #[test]
    fn energy_is_affine_in_server_count_without_comm_or_harvest() {
        let mut sc = scenario();
        sc.servers = vec![server("edge", None)];
        sc.workload.total_samples = 6000;
        let reports = sweep(&sc, &SweepVary::ServerCount(vec![1, 3, 5, 7])).unwrap();
        let static_kwh = 20.0 * 3600.0 / 3.6e6;
        for (report, n) in reports.iter().zip([1.0, 3.0, 5.0, 7.0]) {
            let rounds = report.rounds_used as f64;
            let expected = rounds * (n * static_kwh + 6000.0 * 2.0 * 1e-5);
            assert_relative_eq!(report.total_kwh, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn parallel_sweep_matches_sequential_order_and_content() {
        let mut sc = scenario();
        sc.servers[0].harvester = HarvestParams::Stochastic {
            mean_kwh: 0.03,
            stddev_kwh: 0.01,
        };
        sc.servers[0].battery_capacity_kwh = 0.1;
        let vary = SweepVary::Seeds(vec![1, 2, 3, 4, 5]);
        let seq = sweep(&sc, &vary).unwrap();
        let par = sweep_parallel(&sc, &vary, 4).unwrap();
        let a = serde_json::to_string(&seq).unwrap();
        let b = serde_json::to_string(&par).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn traced_runs_capture_each_optimized_slot() {
        let mut sc = scenario();
        sc.policy = Policy::Deta;
        let (report, trace) = run_traced(&sc).unwrap();
        assert_eq!(trace.len(), report.rounds_used as usize);
        assert_eq!(trace[0].slot, 1);
        assert_eq!(trace[0].stage, "Development");
        assert_eq!(
            trace.len(),
            report.objective_trace.len(),
            "one objective per optimized slot"
        );
    }
}
