//! Per-round energy model and its calibration against measured totals.
//!
//! A server's energy for one training round decomposes into three affine
//! terms: static (leakage) energy burned every slot, compute energy
//! proportional to processed sample-epochs, and communication energy for
//! the per-round model exchange with the coordinator. The decomposition is
//! what makes whole-system energy affine in the server count when data is
//! split evenly: compute work is conserved while static and comm terms
//! scale with N.
//!
//! Calibration fits the two identifiable aggregates — per-server-slot
//! overhead and per-sample-epoch compute energy — to measured
//! (server_count, total kWh) rows by relative-error least squares, then
//! splits the overhead evenly between static and comm (the rows cannot
//! separate them; the even split is the minimum-norm choice).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{EdgeServer, ModelKind};

/// Energy coefficients for one server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    /// Leakage energy per slot, kWh.
    pub static_energy_per_slot_kwh: f64,
    /// Compute energy per sample-epoch (one work-unit), kWh.
    pub train_energy_per_sample_epoch_kwh: f64,
    /// Energy for one full model exchange (upload + download), kWh.
    pub comm_energy_per_model_exchange_kwh: f64,
}

impl EnergyParams {
    /// Derives the per-round coefficients from a server's hardware profile.
    pub fn from_server(server: &EdgeServer, slot_duration_s: f64, model_bytes: u64) -> Self {
        EnergyParams {
            static_energy_per_slot_kwh: server.static_energy_per_slot(slot_duration_s),
            train_energy_per_sample_epoch_kwh: server.compute_energy_per_unit_kwh,
            comm_energy_per_model_exchange_kwh: 2.0
                * model_bytes as f64
                * server.comm_energy_per_byte_kwh,
        }
    }
}

/// One server's energy for one round, split by term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundEnergyBreakdown {
    pub server_id: String,
    pub static_kwh: f64,
    pub compute_kwh: f64,
    pub comm_kwh: f64,
    pub total_kwh: f64,
}

/// Energy a server spends in one training round: static overhead for the
/// slot, compute proportional to `samples_assigned × local_epochs`, and one
/// model exchange (upload + download) priced at the server's per-byte cost.
///
/// An idle server (zero samples) still pays static and comm.
pub fn round_energy(
    server: &EdgeServer,
    params: &EnergyParams,
    samples_assigned: u64,
    local_epochs: u32,
    model_bytes: u64,
) -> RoundEnergyBreakdown {
    let static_kwh = params.static_energy_per_slot_kwh;
    let compute_kwh = params.train_energy_per_sample_epoch_kwh
        * samples_assigned as f64
        * local_epochs as f64;
    let comm_kwh = 2.0 * model_bytes as f64 * server.comm_energy_per_byte_kwh;
    RoundEnergyBreakdown {
        server_id: server.id.clone(),
        static_kwh,
        compute_kwh,
        comm_kwh,
        total_kwh: static_kwh + compute_kwh + comm_kwh,
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// One measured training run: `server_count` servers trained to target and
/// consumed `total_kwh` overall.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct CalibrationRow {
    pub server_count: u32,
    pub local_epochs: u32,
    pub batch_size: u32,
    pub total_kwh: f64,
}

/// Fixed experiment context the measured rows share. `rounds` is the round
/// count assumed for every row; residuals are invariant to its choice (the
/// fitted coefficients absorb it), so any positive constant works.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationContext {
    pub total_samples: u64,
    pub rounds: u32,
}

/// Per-row fit quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowResidual {
    pub server_count: u32,
    pub measured_kwh: f64,
    pub fitted_kwh: f64,
    /// (fitted − measured) / measured.
    pub relative_error: f64,
}

/// Calibration output: fitted coefficients plus the residual report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationFit {
    pub model_kind: ModelKind,
    pub params: EnergyParams,
    pub context: CalibrationContext,
    pub residuals: Vec<RowResidual>,
    pub max_abs_relative_error: f64,
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("duplicate server count {0} in calibration rows")]
    DuplicateServerCount(u32),
    #[error("row with server_count {0} has non-positive total_kwh {1}")]
    NonPositiveEnergy(u32, f64),
    #[error("calibration context must have positive samples and rounds")]
    DegenerateContext,
    #[error("failed to read calibration table: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration table parse error: {0}")]
    Csv(#[from] csv::Error),
}

/// Fits `EnergyParams` to measured rows by minimizing the sum of squared
/// *relative* errors, constrained to nonnegative coefficients.
///
/// Predicted whole-system energy for a row with N servers over R rounds:
///
/// ```text
/// predicted(N) = R · (N·(p_static + p_comm)  +  S·E·p_train)
/// ```
///
/// Only the overhead sum `q1 = p_static + p_comm` and `q2 = p_train` are
/// identifiable from totals; the returned params split q1 evenly. Relative
/// weighting keeps small-N rows from being swamped when totals span orders
/// of magnitude.
pub fn calibrate(
    rows: &[CalibrationRow],
    model_kind: ModelKind,
    ctx: CalibrationContext,
) -> Result<CalibrationFit, CalibrationError> {
    if rows.len() < 3 {
        return Err(CalibrationError::TooFewRows(rows.len()));
    }
    if ctx.total_samples == 0 || ctx.rounds == 0 {
        return Err(CalibrationError::DegenerateContext);
    }
    let mut seen = std::collections::BTreeSet::new();
    for row in rows {
        if !seen.insert(row.server_count) {
            return Err(CalibrationError::DuplicateServerCount(row.server_count));
        }
        if row.total_kwh <= 0.0 || !row.total_kwh.is_finite() {
            return Err(CalibrationError::NonPositiveEnergy(
                row.server_count,
                row.total_kwh,
            ));
        }
    }

    let r = ctx.rounds as f64;
    let s = ctx.total_samples as f64;

    // Row k contributes design entries (a_k, b_k) scaled by 1/y_k:
    // a = R·N (overhead column), b = R·S·E (compute column).
    let (mut saa, mut sab, mut sbb, mut sa, mut sb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for row in rows {
        let a = r * row.server_count as f64 / row.total_kwh;
        let b = r * s * row.local_epochs as f64 / row.total_kwh;
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        sa += a;
        sb += b;
    }

    let sse = |q1: f64, q2: f64| -> f64 {
        rows.iter()
            .map(|row| {
                let fitted =
                    r * (row.server_count as f64 * q1 + s * row.local_epochs as f64 * q2);
                let rel = fitted / row.total_kwh - 1.0;
                rel * rel
            })
            .sum()
    };

    // Unconstrained normal-equation solution, then the two boundary
    // candidates; the nonnegative minimizer is among these three.
    let det = saa * sbb - sab * sab;
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    if det.abs() > f64::EPSILON * saa.max(sbb) {
        let q1 = (sa * sbb - sb * sab) / det;
        let q2 = (saa * sb - sab * sa) / det;
        if q1 >= 0.0 && q2 >= 0.0 {
            candidates.push((q1, q2));
        }
    }
    candidates.push((0.0, (sb / sbb).max(0.0)));
    candidates.push(((sa / saa).max(0.0), 0.0));
    let (q1, q2) = candidates
        .into_iter()
        .min_by(|x, y| sse(x.0, x.1).total_cmp(&sse(y.0, y.1)))
        .expect("candidate list is never empty");

    let params = EnergyParams {
        static_energy_per_slot_kwh: q1 / 2.0,
        train_energy_per_sample_epoch_kwh: q2,
        comm_energy_per_model_exchange_kwh: q1 / 2.0,
    };

    let mut residuals = Vec::with_capacity(rows.len());
    let mut max_abs = 0.0f64;
    for row in rows {
        let fitted = r * (row.server_count as f64 * q1 + s * row.local_epochs as f64 * q2);
        let rel = fitted / row.total_kwh - 1.0;
        max_abs = max_abs.max(rel.abs());
        residuals.push(RowResidual {
            server_count: row.server_count,
            measured_kwh: row.total_kwh,
            fitted_kwh: fitted,
            relative_error: rel,
        });
    }

    Ok(CalibrationFit {
        model_kind,
        params,
        context: ctx,
        residuals,
        max_abs_relative_error: max_abs,
    })
}

/// Reads a measurement table CSV with columns
/// `model,servers,E,B,total_kwh,co2_g` and returns the rows matching
/// `model_kind` (the emission column is carried by other tooling and
/// ignored here).
pub fn load_calibration_csv(
    path: &Path,
    model_kind: ModelKind,
) -> Result<Vec<CalibrationRow>, CalibrationError> {
    #[derive(Deserialize)]
    struct Raw {
        model: String,
        servers: u32,
        #[serde(rename = "E")]
        local_epochs: u32,
        #[serde(rename = "B")]
        batch_size: u32,
        total_kwh: f64,
        #[allow(dead_code)]
        co2_g: f64,
    }

    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for raw in reader.deserialize::<Raw>() {
        let raw = raw?;
        if raw.model.eq_ignore_ascii_case(&model_kind.to_string()) {
            rows.push(CalibrationRow {
                server_count: raw.servers,
                local_epochs: raw.local_epochs,
                batch_size: raw.batch_size,
                total_kwh: raw.total_kwh,
            });
        }
    }
    Ok(rows)
}
