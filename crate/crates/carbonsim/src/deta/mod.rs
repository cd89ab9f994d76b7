//! Per-slot allocation policies: Baseline, DET (energy trading), DAT (task
//! offloading), and DETA (joint), each solved to exact optimality as a
//! linear program, plus a brute-force discretized oracle for validation.
//!
//! ## Formulation
//!
//! Decision variables, all nonnegative, per server i (j ranges over other
//! servers): grid draw `g_i`, locally consumed harvest `hu_i`, locally
//! consumed battery energy `bu_i`, exported energy `e[i][j]` (debited at
//! the source; `(1−η)·e[i][j]` arrives), and offloaded work-units
//! `x[i][j]`.
//!
//! Energy balance (equality) at each server:
//!
//! ```text
//! g_i + hu_i + bu_i + (1−η)·Σ_j e[j][i] + c_i·Σ_j x[i][j] − c_i·Σ_j x[j][i]
//!     = s_i + c_i·d_i
//! ```
//!
//! plus `hu_i ≤ h_i`, `bu_i ≤ b_i`, the renewable pool bound
//! `hu_i + bu_i + Σ_j e[i][j] ≤ h_i + b_i` (exports are renewable-sourced),
//! the trading cap `Σ_j e[i][j] ≤ α_E·(h_i + b_i)`, and the offload cap
//! `Σ_j x[i][j] ≤ α_T·d_i`. The objective charges grid draws at regional
//! intensity and offloaded units at the flat backbone transport rate.
//!
//! Grid draws are unbounded above, so the program is always feasible; the
//! `g_i` columns double as a ready-made starting basis (no phase-1 search).
//! Degenerate ties are broken lexicographically: emissions first, then
//! total energy exported, then total units offloaded — so the solver never
//! reports pointless transfers. Within a server, renewable sources are
//! consumed canonically: current harvest before battery, for local use and
//! for exports alike.

pub mod simplex;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::scenario::Policy;
use simplex::{solve_lexicographic, LinearProgram, SimplexError};

/// Treat allocation quantities below this as zero when extracting decisions.
const DUST: f64 = 1e-12;
/// Feasibility slack for balance and cap checks on solver output.
const CHECK_TOL: f64 = 1e-9;

/// One server's view in a single slot. Complete information: the solver
/// sees every server's fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotServer {
    pub id: String,
    /// Renewable energy harvested this slot, kWh.
    pub harvest_kwh: f64,
    /// Battery level entering the slot, kWh.
    pub battery_kwh: f64,
    /// Local task demand in work-units.
    pub demand_units: f64,
    /// Compute energy per work-unit executed on this server, kWh.
    pub compute_kwh_per_unit: f64,
    /// Static + communication energy demanded this slot regardless of task
    /// placement, kWh.
    pub overhead_kwh: f64,
    /// Regional carbon intensity this slot, gCO2e/kWh.
    pub intensity: f64,
}

impl SlotServer {
    /// Total energy demanded if all local units stay local, kWh.
    pub fn nominal_demand_kwh(&self) -> f64 {
        self.overhead_kwh + self.compute_kwh_per_unit * self.demand_units
    }
}

/// Complete per-slot optimization input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotState {
    pub servers: Vec<SlotServer>,
    pub alpha_energy: f64,
    pub alpha_task: f64,
    /// Trading loss η ∈ [0, 1).
    pub trading_loss: f64,
    /// Bytes shipped over the backbone per offloaded work-unit.
    pub bytes_per_work_unit: f64,
    pub backbone_kwh_per_byte: f64,
    pub backbone_intensity: f64,
}

impl SlotState {
    /// Backbone emission price of offloading one work-unit, gCO2e.
    pub fn offload_gco2e_per_unit(&self) -> f64 {
        self.bytes_per_work_unit * self.backbone_kwh_per_byte * self.backbone_intensity
    }

    /// Backbone transport energy per offloaded unit, kWh.
    pub fn offload_kwh_per_unit(&self) -> f64 {
        self.bytes_per_work_unit * self.backbone_kwh_per_byte
    }

    fn validate(&self) -> Result<(), SolveError> {
        if self.servers.is_empty() {
            return Err(SolveError::InvalidState("no servers in slot state".into()));
        }
        for (i, s) in self.servers.iter().enumerate() {
            for (v, name) in [
                (s.harvest_kwh, "harvest_kwh"),
                (s.battery_kwh, "battery_kwh"),
                (s.demand_units, "demand_units"),
                (s.compute_kwh_per_unit, "compute_kwh_per_unit"),
                (s.overhead_kwh, "overhead_kwh"),
                (s.intensity, "intensity"),
            ] {
                if v < 0.0 || !v.is_finite() {
                    return Err(SolveError::InvalidState(format!(
                        "servers[{i}].{name} = {v} must be finite and >= 0"
                    )));
                }
            }
        }
        for (v, name) in [
            (self.alpha_energy, "alpha_energy"),
            (self.alpha_task, "alpha_task"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SolveError::InvalidState(format!(
                    "{name} = {v} must be in [0, 1]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.trading_loss) {
            return Err(SolveError::InvalidState(format!(
                "trading_loss = {} must be in [0, 1)",
                self.trading_loss
            )));
        }
        for (v, name) in [
            (self.bytes_per_work_unit, "bytes_per_work_unit"),
            (self.backbone_kwh_per_byte, "backbone_kwh_per_byte"),
            (self.backbone_intensity, "backbone_intensity"),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(SolveError::InvalidState(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Optimal per-slot allocation. `energy_transfer[i][j]` is debited at i;
/// the receiver j is credited `(1−η)` of it. `harvest_used` and
/// `battery_discharge` are total draws (local consumption plus the
/// renewable sourcing of exports, harvest-first). `battery_charge` is
/// always zero here: storing leftover harvest is the simulator's decision,
/// made after the slot's allocation with the battery's capacity in hand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationDecision {
    pub energy_transfer: Vec<Vec<f64>>,
    pub task_offload: Vec<Vec<f64>>,
    pub grid_draw: Vec<f64>,
    pub harvest_used: Vec<f64>,
    pub battery_discharge: Vec<f64>,
    pub battery_charge: Vec<f64>,
    /// Σ grid·intensity + Σ offload·backbone price, gCO2e.
    pub objective_gco2e: f64,
}

impl AllocationDecision {
    /// Work-units each server actually executes after offloading.
    pub fn residual_units(&self, state: &SlotState) -> Vec<f64> {
        let n = state.servers.len();
        (0..n)
            .map(|i| {
                let out: f64 = self.task_offload[i].iter().sum();
                let inn: f64 = (0..n).map(|j| self.task_offload[j][i]).sum();
                (state.servers[i].demand_units - out + inn).max(0.0)
            })
            .collect()
    }

    /// Traded renewable energy received per server (post-loss), kWh.
    pub fn imports(&self, state: &SlotState) -> Vec<f64> {
        let n = state.servers.len();
        (0..n)
            .map(|i| {
                (1.0 - state.trading_loss)
                    * (0..n).map(|j| self.energy_transfer[j][i]).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid slot state: {0}")]
    InvalidState(String),
    #[error("allocation solver failed: {source}\nstate: {dump}")]
    Solver {
        source: SimplexError,
        dump: String,
    },
    #[error("exhaustive oracle supports at most 3 servers, got {0}")]
    TooManyServers(usize),
    #[error("oracle grid step {0} must lie in (0, 0.25]")]
    BadGridStep(f64),
    #[error("state too dense for exhaustive search: {combinations} combinations")]
    TooDense { combinations: u128 },
}

/// Builds the canonical decision implied by chosen transfer/offload
/// matrices: grid draws are the minimal feasible ones (renewables first),
/// renewable sourcing is harvest-before-battery. Shared by the LP
/// extraction and the oracle so both report identical semantics.
fn decision_from_flows(
    state: &SlotState,
    energy_transfer: Vec<Vec<f64>>,
    task_offload: Vec<Vec<f64>>,
) -> AllocationDecision {
    let n = state.servers.len();
    let eta = state.trading_loss;
    let kappa = state.offload_gco2e_per_unit();

    let mut grid = vec![0.0; n];
    let mut harvest_used = vec![0.0; n];
    let mut battery_discharge = vec![0.0; n];
    let mut objective = 0.0;
    let mut offloaded_total = 0.0;

    for i in 0..n {
        let s = &state.servers[i];
        let out_e: f64 = energy_transfer[i].iter().sum();
        let in_e: f64 = (0..n).map(|j| energy_transfer[j][i]).sum();
        let out_x: f64 = task_offload[i].iter().sum();
        let in_x: f64 = (0..n).map(|j| task_offload[j][i]).sum();
        offloaded_total += out_x;

        let residual_units = (s.demand_units - out_x + in_x).max(0.0);
        let demand = s.overhead_kwh + s.compute_kwh_per_unit * residual_units;
        let after_imports = (demand - (1.0 - eta) * in_e).max(0.0);

        let pool = (s.harvest_kwh + s.battery_kwh - out_e).max(0.0);
        let local_use = pool.min(after_imports);
        grid[i] = after_imports - local_use;

        // Canonical sourcing: harvest covers local use first, then exports;
        // battery covers the remainder of each.
        let hu_local = s.harvest_kwh.min(local_use);
        let bu_local = local_use - hu_local;
        let hx = (s.harvest_kwh - hu_local).min(out_e);
        let bx = out_e - hx;
        harvest_used[i] = hu_local + hx;
        battery_discharge[i] = bu_local + bx;

        objective += grid[i] * s.intensity;
    }
    objective += kappa * offloaded_total;

    AllocationDecision {
        energy_transfer,
        task_offload,
        grid_draw: grid,
        harvest_used,
        battery_discharge,
        battery_charge: vec![0.0; n],
        objective_gco2e: objective,
    }
}

fn zero_matrix(n: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; n]; n]
}

/// Solves the slot allocation for the given policy to exact LP optimality.
pub fn solve(state: &SlotState, policy: Policy) -> Result<AllocationDecision, SolveError> {
    state.validate()?;
    let n = state.servers.len();

    let trading = policy.allows_energy_trading()
        && n >= 2
        && state.alpha_energy > 0.0
        && state
            .servers
            .iter()
            .any(|s| s.harvest_kwh + s.battery_kwh > 0.0);
    let offloading = policy.allows_task_offloading()
        && n >= 2
        && state.alpha_task > 0.0
        && state.servers.iter().any(|s| s.demand_units > 0.0);

    // Without cross-server moves the optimum is the per-server closed form.
    if !trading && !offloading {
        return Ok(decision_from_flows(state, zero_matrix(n), zero_matrix(n)));
    }

    // Variable layout: g(n) | hu(n) | bu(n) | e pairs | x pairs.
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let g0 = 0;
    let hu0 = n;
    let bu0 = 2 * n;
    let e0 = 3 * n;
    let ne = if trading { pairs.len() } else { 0 };
    let x0 = e0 + ne;
    let nx = if offloading { pairs.len() } else { 0 };
    let nv = x0 + nx;

    let eta = state.trading_loss;
    let kappa = state.offload_gco2e_per_unit();

    let mut eq = Vec::with_capacity(n);
    for i in 0..n {
        let s = &state.servers[i];
        let mut row = vec![0.0; nv];
        row[g0 + i] = 1.0;
        row[hu0 + i] = 1.0;
        row[bu0 + i] = 1.0;
        if trading {
            for (k, &(_, b)) in pairs.iter().enumerate() {
                if b == i {
                    row[e0 + k] = 1.0 - eta;
                }
            }
        }
        if offloading {
            for (k, &(a, b)) in pairs.iter().enumerate() {
                if a == i {
                    row[x0 + k] += s.compute_kwh_per_unit;
                }
                if b == i {
                    row[x0 + k] -= s.compute_kwh_per_unit;
                }
            }
        }
        eq.push((row, s.nominal_demand_kwh()));
    }

    let mut ub = Vec::new();
    for i in 0..n {
        let s = &state.servers[i];
        let mut row = vec![0.0; nv];
        row[hu0 + i] = 1.0;
        ub.push((row, s.harvest_kwh));
        let mut row = vec![0.0; nv];
        row[bu0 + i] = 1.0;
        ub.push((row, s.battery_kwh));
    }
    if trading {
        for i in 0..n {
            let s = &state.servers[i];
            // Renewable pool: local use plus exports cannot exceed h + b.
            let mut pool = vec![0.0; nv];
            pool[hu0 + i] = 1.0;
            pool[bu0 + i] = 1.0;
            for (k, &(a, _)) in pairs.iter().enumerate() {
                if a == i {
                    pool[e0 + k] = 1.0;
                }
            }
            ub.push((pool, s.harvest_kwh + s.battery_kwh));
            // Trading cap.
            let mut cap = vec![0.0; nv];
            for (k, &(a, _)) in pairs.iter().enumerate() {
                if a == i {
                    cap[e0 + k] = 1.0;
                }
            }
            ub.push((cap, state.alpha_energy * (s.harvest_kwh + s.battery_kwh)));
        }
    }
    if offloading {
        for i in 0..n {
            let s = &state.servers[i];
            let mut cap = vec![0.0; nv];
            for (k, &(a, _)) in pairs.iter().enumerate() {
                if a == i {
                    cap[x0 + k] = 1.0;
                }
            }
            ub.push((cap, state.alpha_task * s.demand_units));
        }
    }

    let mut primary = vec![0.0; nv];
    for i in 0..n {
        primary[g0 + i] = state.servers[i].intensity;
    }
    for k in 0..nx {
        primary[x0 + k] = kappa;
    }
    let mut objectives = vec![primary];
    if trading {
        let mut min_traded = vec![0.0; nv];
        for k in 0..ne {
            min_traded[e0 + k] = 1.0;
        }
        objectives.push(min_traded);
    }
    if offloading {
        let mut min_offloaded = vec![0.0; nv];
        for k in 0..nx {
            min_offloaded[x0 + k] = 1.0;
        }
        objectives.push(min_offloaded);
    }

    let lp = LinearProgram {
        num_vars: nv,
        objectives,
        eq,
        eq_basis: (0..n).map(|i| g0 + i).collect(),
        ub,
    };
    let solution = solve_lexicographic(&lp).map_err(|source| SolveError::Solver {
        source,
        dump: serde_json::to_string(state).unwrap_or_else(|_| "<unprintable>".into()),
    })?;

    let assemble = |values: &[f64]| -> AllocationDecision {
        let mut e = zero_matrix(n);
        let mut x = zero_matrix(n);
        if trading {
            for (k, &(a, b)) in pairs.iter().enumerate() {
                let v = values[e0 + k];
                if v > DUST {
                    e[a][b] = v;
                }
            }
        }
        if offloading {
            for (k, &(a, b)) in pairs.iter().enumerate() {
                let v = values[x0 + k];
                if v > DUST {
                    x[a][b] = v;
                }
            }
        }
        decision_from_flows(state, e, x)
    };

    let staged = assemble(&solution.values);
    // Tie-breaking levels pivot only across the primary optimal face, but
    // guard against numerical drift: never return a vertex that prices
    // worse than the primary-only optimum.
    if solution.primary_values != solution.values {
        let primary_only = assemble(&solution.primary_values);
        let budget = 1e-12 * (1.0 + primary_only.objective_gco2e.abs());
        if staged.objective_gco2e > primary_only.objective_gco2e + budget {
            return Ok(primary_only);
        }
    }
    Ok(staged)
}

/// Servers left with (numerically) zero local work after offloading; the
/// slot's allocation already charges them no compute energy, and scenarios
/// may additionally let them shed static power (deep sleep).
pub fn sleep_mask(decision: &AllocationDecision, state: &SlotState) -> Vec<String> {
    decision
        .residual_units(state)
        .iter()
        .zip(&state.servers)
        .filter(|(&residual, s)| residual <= 1e-12 * (1.0 + s.demand_units))
        .map(|(_, s)| s.id.clone())
        .collect()
}

/// Checks every constraint on a reported decision within `CHECK_TOL`.
/// Returns the list of violations (empty = clean).
pub fn validate_decision(
    state: &SlotState,
    policy: Policy,
    d: &AllocationDecision,
) -> Vec<String> {
    let n = state.servers.len();
    let eta = state.trading_loss;
    let mut bad = Vec::new();
    let mut push = |msg: String| bad.push(msg);

    for i in 0..n {
        if d.energy_transfer[i][i] != 0.0 || d.task_offload[i][i] != 0.0 {
            push(format!("server {i}: nonzero self-transfer"));
        }
        for j in 0..n {
            if d.energy_transfer[i][j] < 0.0 || d.task_offload[i][j] < 0.0 {
                push(format!("server {i}->{j}: negative flow"));
            }
        }
        if d.grid_draw[i] < -CHECK_TOL
            || d.harvest_used[i] < -CHECK_TOL
            || d.battery_discharge[i] < -CHECK_TOL
        {
            push(format!("server {i}: negative draw"));
        }
        let s = &state.servers[i];
        let out_e: f64 = d.energy_transfer[i].iter().sum();
        let out_x: f64 = d.task_offload[i].iter().sum();
        if !policy.allows_energy_trading() && out_e > 0.0 {
            push(format!("server {i}: energy trading under {policy}"));
        }
        if !policy.allows_task_offloading() && out_x > 0.0 {
            push(format!("server {i}: task offloading under {policy}"));
        }
        let cap_e = state.alpha_energy * (s.harvest_kwh + s.battery_kwh);
        if out_e > cap_e + CHECK_TOL {
            push(format!("server {i}: export {out_e} exceeds cap {cap_e}"));
        }
        let cap_x = state.alpha_task * s.demand_units;
        if out_x > cap_x + CHECK_TOL {
            push(format!("server {i}: offload {out_x} exceeds cap {cap_x}"));
        }
        if d.harvest_used[i] > s.harvest_kwh + CHECK_TOL {
            push(format!("server {i}: harvest overdraw"));
        }
        if d.battery_discharge[i] > s.battery_kwh + CHECK_TOL {
            push(format!("server {i}: battery overdraw"));
        }
        let renewable_out = d.harvest_used[i] + d.battery_discharge[i];
        if renewable_out > s.harvest_kwh + s.battery_kwh + CHECK_TOL {
            push(format!("server {i}: renewable pool overdraw"));
        }
        // Balance: supply equals residual demand exactly.
        let in_e: f64 = (0..n).map(|j| d.energy_transfer[j][i]).sum();
        let in_x: f64 = (0..n).map(|j| d.task_offload[j][i]).sum();
        let residual = (s.demand_units - out_x + in_x).max(0.0);
        let demand = s.overhead_kwh + s.compute_kwh_per_unit * residual;
        let supply = d.grid_draw[i] + renewable_out - out_e + (1.0 - eta) * in_e;
        if (supply - demand).abs() > CHECK_TOL {
            push(format!(
                "server {i}: balance violated (supply {supply}, demand {demand})"
            ));
        }
    }

    // Task conservation across the system.
    let total_d: f64 = state.servers.iter().map(|s| s.demand_units).sum();
    let total_residual: f64 = d.residual_units(state).iter().sum();
    if (total_d - total_residual).abs() > CHECK_TOL * (1.0 + total_d) {
        push(format!(
            "task conservation violated ({total_residual} of {total_d} units)"
        ));
    }
    bad
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

/// Exhaustively enumerates transfer/offload combinations on a fractional
/// grid and returns the best feasible one under the same canonical
/// semantics as `solve`. Row quantities are discretized as multiples of
/// `grid_step` of the row's cap, with the per-row total never exceeding the
/// cap. Intended as an independent optimality check for ≤ 3 servers; the
/// LP objective is a lower bound on the oracle's by construction.
pub fn solve_oracle(
    state: &SlotState,
    policy: Policy,
    grid_step: f64,
) -> Result<AllocationDecision, SolveError> {
    state.validate()?;
    let n = state.servers.len();
    if n > 3 {
        return Err(SolveError::TooManyServers(n));
    }
    if !(grid_step > 0.0 && grid_step <= 0.25) {
        return Err(SolveError::BadGridStep(grid_step));
    }
    let levels = (1.0 / grid_step).round() as usize;
    let eta = state.trading_loss;
    let kappa = state.offload_gco2e_per_unit();

    // Active rows: (source index, cap, partner list, is_energy).
    struct Row {
        src: usize,
        step: f64,
        partners: Vec<usize>,
        is_energy: bool,
    }
    let mut rows: Vec<Row> = Vec::new();
    if policy.allows_energy_trading() && n >= 2 {
        for i in 0..n {
            let s = &state.servers[i];
            let cap = state.alpha_energy * (s.harvest_kwh + s.battery_kwh);
            if cap > 0.0 {
                rows.push(Row {
                    src: i,
                    step: cap / levels as f64,
                    partners: (0..n).filter(|&j| j != i).collect(),
                    is_energy: true,
                });
            }
        }
    }
    if policy.allows_task_offloading() && n >= 2 {
        for i in 0..n {
            let cap = state.alpha_task * state.servers[i].demand_units;
            if cap > 0.0 {
                rows.push(Row {
                    src: i,
                    step: cap / levels as f64,
                    partners: (0..n).filter(|&j| j != i).collect(),
                    is_energy: false,
                });
            }
        }
    }

    // Combination count: per row, assignments of levels to (n−1) partners
    // with total ≤ `levels`.
    let per_row: u128 = if n == 2 {
        levels as u128 + 1
    } else {
        ((levels as u128 + 1) * (levels as u128 + 2)) / 2
    };
    let mut combos: u128 = 1;
    for _ in &rows {
        combos = combos.saturating_mul(per_row);
    }
    if combos > 60_000_000 {
        return Err(SolveError::TooDense { combinations: combos });
    }

    // Lexicographic score of one flow combination: (objective, total energy
    // sent, total work sent). The best combination also keeps the flat flow
    // arrays that achieved it.
    type ComboScore = (f64, f64, f64);
    type BestCombo = (f64, f64, f64, Vec<f64>, Vec<f64>);
    type ComboEval<'a> = dyn Fn(&[f64], &[f64]) -> Option<ComboScore> + 'a;

    // Flat per-pair flow arrays sized n*n, indexed src*n + dst.
    let mut e_flow = vec![0.0; n * n];
    let mut x_flow = vec![0.0; n * n];
    let mut best: Option<BestCombo> = None;

    // Evaluates current flows; returns None when infeasible (imports exceed
    // residual demand: the balance equality cannot spill surplus).
    let evaluate = |e_flow: &[f64], x_flow: &[f64]| -> Option<ComboScore> {
        let mut obj = 0.0;
        let mut sum_e = 0.0;
        let mut sum_x = 0.0;
        for i in 0..n {
            let s = &state.servers[i];
            let mut out_e = 0.0;
            let mut in_e = 0.0;
            let mut out_x = 0.0;
            let mut in_x = 0.0;
            for j in 0..n {
                out_e += e_flow[i * n + j];
                in_e += e_flow[j * n + i];
                out_x += x_flow[i * n + j];
                in_x += x_flow[j * n + i];
            }
            sum_e += out_e;
            sum_x += out_x;
            let residual = (s.demand_units - out_x + in_x).max(0.0);
            let demand = s.overhead_kwh + s.compute_kwh_per_unit * residual;
            let imported = (1.0 - eta) * in_e;
            if imported > demand + 1e-12 {
                return None;
            }
            let pool = (s.harvest_kwh + s.battery_kwh - out_e).max(0.0);
            let local = pool.min(demand - imported);
            obj += (demand - imported - local) * s.intensity;
        }
        obj += kappa * sum_x;
        Some((obj, sum_e, sum_x))
    };

    // Depth-first over rows; within a row, over partner level assignments.
    #[allow(clippy::too_many_arguments)]
    fn walk(
        rows: &[Row],
        levels: usize,
        row_idx: usize,
        e_flow: &mut Vec<f64>,
        x_flow: &mut Vec<f64>,
        n: usize,
        evaluate: &ComboEval,
        best: &mut Option<BestCombo>,
    ) {
        if row_idx == rows.len() {
            if let Some((obj, se, sx)) = evaluate(e_flow, x_flow) {
                let better = match best {
                    None => true,
                    Some((bo, be, bx, _, _)) => {
                        obj < *bo || (obj == *bo && (se < *be || (se == *be && sx < *bx)))
                    }
                };
                if better {
                    *best = Some((obj, se, sx, e_flow.clone(), x_flow.clone()));
                }
            }
            return;
        }
        let row = &rows[row_idx];
        let np = row.partners.len();
        // Enumerate level vectors with sum ≤ levels.
        let mut assignment = vec![0usize; np];
        loop {
            let total: usize = assignment.iter().sum();
            if total <= levels {
                for (slot, &p) in row.partners.iter().enumerate() {
                    let v = assignment[slot] as f64 * row.step;
                    let idx = row.src * n + p;
                    if row.is_energy {
                        e_flow[idx] = v;
                    } else {
                        x_flow[idx] = v;
                    }
                }
                walk(rows, levels, row_idx + 1, e_flow, x_flow, n, evaluate, best);
            }
            // Next assignment (odometer).
            let mut k = 0;
            loop {
                if k == np {
                    // Clear this row and return.
                    for &p in &row.partners {
                        let idx = row.src * n + p;
                        if row.is_energy {
                            e_flow[idx] = 0.0;
                        } else {
                            x_flow[idx] = 0.0;
                        }
                    }
                    return;
                }
                assignment[k] += 1;
                if assignment[k] > levels {
                    assignment[k] = 0;
                    k += 1;
                } else {
                    break;
                }
            }
        }
    }

    walk(
        &rows, levels, 0, &mut e_flow, &mut x_flow, n, &evaluate, &mut best,
    );

    let (_, _, _, e_best, x_best) =
        best.expect("the all-zero combination is always feasible");
    let mut e = zero_matrix(n);
    let mut x = zero_matrix(n);
    for i in 0..n {
        for j in 0..n {
            e[i][j] = e_best[i * n + j];
            x[i][j] = x_best[i * n + j];
        }
    }
    Ok(decision_from_flows(state, e, x))
}

// ---------------------------------------------------------------------------
// Random state generators (validation harness support)
// ---------------------------------------------------------------------------

/// Random slot state for property suites: wide parameter ranges, any
/// density. Not grid-friendly; pair with the LP, not the oracle.
pub fn random_slot_state(rng: &mut impl Rng, num_servers: usize) -> SlotState {
    let servers = (0..num_servers)
        .map(|i| SlotServer {
            id: format!("s{i}"),
            harvest_kwh: rng.gen_range(0.0..3.0),
            battery_kwh: rng.gen_range(0.0..3.0),
            demand_units: rng.gen_range(0.0..2000.0),
            compute_kwh_per_unit: rng.gen_range(1e-6..1e-4),
            overhead_kwh: rng.gen_range(0.0..0.2),
            intensity: rng.gen_range(10.0..600.0),
        })
        .collect();
    SlotState {
        servers,
        alpha_energy: rng.gen_range(0.0..=1.0),
        alpha_task: rng.gen_range(0.0..=1.0),
        trading_loss: rng.gen_range(0.0..0.3),
        bytes_per_work_unit: rng.gen_range(0.0..2000.0),
        backbone_kwh_per_byte: rng.gen_range(0.0..5e-9),
        backbone_intensity: rng.gen_range(0.0..600.0),
    }
}

/// Random slot state shaped for oracle comparison: at most one energy
/// exporter and one task offloader (keeps the exhaustive search tractable
/// for 3 servers), renewables bounded by a quarter of total demand and a
/// bounded intensity spread. Under those bounds the worst-case
/// discretization error of a 2% grid stays below 2% of the LP objective,
/// while optima still land between grid points often enough to exercise
/// the comparison.
pub fn random_verify_state(rng: &mut impl Rng, num_servers: usize) -> SlotState {
    assert!((1..=3).contains(&num_servers));
    let harvester = rng.gen_range(0..num_servers);
    let offloader = rng.gen_range(0..num_servers);
    let mut servers = Vec::with_capacity(num_servers);
    for i in 0..num_servers {
        let demand_units = if i == offloader {
            rng.gen_range(100.0..1000.0)
        } else {
            0.0
        };
        servers.push(SlotServer {
            id: format!("s{i}"),
            harvest_kwh: 0.0,
            battery_kwh: 0.0,
            demand_units,
            compute_kwh_per_unit: rng.gen_range(1e-5..5e-5),
            overhead_kwh: rng.gen_range(0.05..0.2),
            intensity: rng.gen_range(100.0..500.0),
        });
    }
    let total_demand: f64 = servers.iter().map(|s| s.nominal_demand_kwh()).sum();
    let renewable = rng.gen_range(0.0..0.25) * total_demand;
    let split = rng.gen_range(0.0..=1.0);
    servers[harvester].harvest_kwh = renewable * split;
    servers[harvester].battery_kwh = renewable * (1.0 - split);
    SlotState {
        servers,
        alpha_energy: 0.5,
        alpha_task: 0.5,
        trading_loss: 0.05,
        bytes_per_work_unit: rng.gen_range(0.0..1000.0),
        backbone_kwh_per_byte: rng.gen_range(0.0..2e-9),
        backbone_intensity: rng.gen_range(100.0..500.0),
    }
}
