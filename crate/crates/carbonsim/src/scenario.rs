//! Scenario definition, loading, and validation.
//!
//! A scenario file describes the complete simulation world: grid regions
//! with their carbon-intensity series, edge servers with power and harvest
//! characteristics, the federated training workload, the allocation policy,
//! and all run parameters (caps, trading loss, seed, slot duration).
//!
//! The on-disk format is JSON with a versioned `schema_version` field.
//! Unknown keys are rejected so config typos cannot silently alter runs.
//! Scenario values are immutable after load and safe to share read-only
//! across concurrent runs.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harvest::HarvestParams;

/// Current scenario schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Seconds-to-hours conversion for watt -> kWh arithmetic.
const SECONDS_PER_HOUR: f64 = 3600.0;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A geographic grid zone carrying a carbon-intensity time series.
///
/// The series is a step function: the intensity at slot `t` is the value of
/// the last entry whose slot index is `<= t` (the first entry applies to
/// earlier slots). A single-entry series models a constant annual average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub id: String,
    /// Human-readable zone label.
    #[serde(default)]
    pub label: String,
    /// `(slot_index, gCO2e/kWh)` pairs with strictly increasing slot indices.
    pub intensity_series: Vec<(u64, f64)>,
}

impl Region {
    /// Carbon intensity in gCO2e/kWh effective at `slot`.
    pub fn intensity_at(&self, slot: u64) -> f64 {
        let mut current = self.intensity_series[0].1;
        for &(s, v) in &self.intensity_series {
            if s <= slot {
                current = v;
            } else {
                break;
            }
        }
        current
    }

    /// Mean of the tabulated intensity values.
    pub fn mean_intensity(&self) -> f64 {
        let sum: f64 = self.intensity_series.iter().map(|(_, v)| v).sum();
        sum / self.intensity_series.len() as f64
    }
}

/// A compute node with static power, per-work-unit compute energy, a
/// renewable harvester, and a battery, assigned to a grid region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeServer {
    pub id: String,
    /// Region assignment. Absent means the run places the server in a
    /// seeded uniform random region (reproducible given the scenario seed).
    #[serde(default)]
    pub region_id: Option<String>,
    /// Leakage power drawn every slot regardless of load, in watts.
    pub static_power_w: f64,
    /// Energy per work-unit (one sample-epoch of local training), kWh.
    pub compute_energy_per_unit_kwh: f64,
    /// Energy per byte exchanged with the coordinator, kWh.
    pub comm_energy_per_byte_kwh: f64,
    #[serde(default)]
    pub battery_capacity_kwh: f64,
    #[serde(default)]
    pub battery_level_kwh: f64,
    /// Battery charge efficiency in (0, 1]; 1.0 is lossless.
    #[serde(default = "default_charge_efficiency")]
    pub charge_efficiency: f64,
    #[serde(default)]
    pub harvester: HarvestParams,
}

fn default_charge_efficiency() -> f64 {
    1.0
}

impl EdgeServer {
    /// Static (leakage) energy burned per slot of the given duration, kWh.
    pub fn static_energy_per_slot(&self, slot_duration_s: f64) -> f64 {
        self.static_power_w * slot_duration_s / SECONDS_PER_HOUR / 1000.0
    }
}

/// Known model families from the calibration table; `Custom` covers
/// anything whose energy profile is supplied directly by the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Mlp,
    Cnn,
    Lstm,
    Custom,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Mlp => "MLP",
            ModelKind::Cnn => "CNN",
            ModelKind::Lstm => "LSTM",
            ModelKind::Custom => "CUSTOM",
        };
        f.write_str(s)
    }
}

/// Preparation-stage transport cost per collected sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PreparationCost {
    /// Energy spent by the user device to capture and upload one sample, kWh.
    #[serde(default)]
    pub user_device_kwh_per_sample: f64,
    /// Radio-access-network transport energy per sample, kWh.
    #[serde(default)]
    pub ran_kwh_per_sample: f64,
}

impl PreparationCost {
    pub fn total_per_sample(&self) -> f64 {
        self.user_device_kwh_per_sample + self.ran_kwh_per_sample
    }
}

/// Application-stage serving configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ServingCost {
    /// Total inference requests served over the application horizon.
    #[serde(default)]
    pub inference_count: u64,
    /// Energy per served inference, kWh.
    #[serde(default)]
    pub energy_per_inference_kwh: f64,
}

/// A federated training job description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub model_kind: ModelKind,
    /// Local epochs per round (the calibration table's `E`).
    pub local_epochs: u32,
    /// Mini-batch size (the calibration table's `B`); descriptive metadata,
    /// it does not enter the energy model.
    pub batch_size: u32,
    /// Total training samples distributed across servers.
    pub total_samples: u64,
    /// Serialized model size exchanged with the coordinator each round, bytes.
    pub model_bytes: u64,
    /// Training stops once the accuracy curve reaches this level.
    pub target_accuracy: f64,
    /// Monotone nondecreasing `(round, accuracy)` table, rounds >= 1 and
    /// strictly increasing. Accuracy between tabulated rounds is the value
    /// at the last tabulated round <= the queried round.
    pub accuracy_curve: Vec<(u32, f64)>,
    /// Bytes shipped over the backbone per offloaded work-unit.
    #[serde(default)]
    pub offload_bytes_per_unit: f64,
    #[serde(default)]
    pub preparation: PreparationCost,
    #[serde(default)]
    pub serving: ServingCost,
}

impl WorkloadSpec {
    /// Work-units one server contributes per round given its sample share:
    /// one unit is one sample-epoch of local training.
    pub fn work_units_per_round(&self, samples_assigned: u64) -> f64 {
        samples_assigned as f64 * self.local_epochs as f64
    }

    /// Accuracy the global model reaches after `round` rounds (1-based).
    pub fn accuracy_after(&self, round: u32) -> f64 {
        let mut acc = 0.0;
        for &(r, a) in &self.accuracy_curve {
            if r <= round {
                acc = a;
            } else {
                break;
            }
        }
        acc
    }

    /// First round at which the curve reaches `target`, if it ever does.
    pub fn rounds_to_accuracy(&self, target: f64) -> Option<u32> {
        self.accuracy_curve
            .iter()
            .find(|&&(_, a)| a >= target)
            .map(|&(r, _)| r)
    }
}

/// Allocation policy applied each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Policy {
    /// No cooperation: every server covers its own demand.
    #[default]
    Baseline,
    /// Dynamic energy trading: servers exchange harvested energy.
    #[serde(rename = "DET")]
    Det,
    /// Dynamic task allocation: servers offload work-units.
    #[serde(rename = "DAT")]
    Dat,
    /// Joint energy trading and task allocation.
    #[serde(rename = "DETA")]
    Deta,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Baseline, Policy::Det, Policy::Dat, Policy::Deta];

    pub fn allows_energy_trading(self) -> bool {
        matches!(self, Policy::Det | Policy::Deta)
    }

    pub fn allows_task_offloading(self) -> bool {
        matches!(self, Policy::Dat | Policy::Deta)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Policy::Baseline => "Baseline",
            Policy::Det => "DET",
            Policy::Dat => "DAT",
            Policy::Deta => "DETA",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BASELINE" => Ok(Policy::Baseline),
            "DET" => Ok(Policy::Det),
            "DAT" => Ok(Policy::Dat),
            "DETA" => Ok(Policy::Deta),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// The complete simulation world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub policy: Policy,
    /// Max fraction of a server's (harvest + battery) transferable per slot.
    #[serde(default = "default_cap")]
    pub alpha_energy: f64,
    /// Max fraction of a server's local work-units offloadable per slot.
    #[serde(default = "default_cap")]
    pub alpha_task: f64,
    /// Fraction of transferred energy lost in transit between servers.
    #[serde(default = "default_trading_loss")]
    pub trading_loss: f64,
    /// Backbone transport energy per byte for offloaded task data, kWh.
    #[serde(default)]
    pub backbone_energy_per_byte_kwh: f64,
    /// Carbon intensity charged to backbone transport, gCO2e/kWh.
    /// Absent means the mean of all region intensities.
    #[serde(default)]
    pub backbone_intensity: Option<f64>,
    #[serde(default = "default_slot_duration")]
    pub slot_duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    /// When true, servers left with zero local work-units after offloading
    /// also shed their static power for the slot.
    #[serde(default)]
    pub deep_sleep: bool,
    pub regions: Vec<Region>,
    pub servers: Vec<EdgeServer>,
    pub workload: WorkloadSpec,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_cap() -> f64 {
    0.5
}
fn default_trading_loss() -> f64 {
    0.05
}
fn default_slot_duration() -> f64 {
    3600.0
}
fn default_max_rounds() -> u32 {
    200
}

impl Scenario {
    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Backbone intensity: explicit value, or the mean of the region means.
    pub fn effective_backbone_intensity(&self) -> f64 {
        self.backbone_intensity.unwrap_or_else(|| {
            let sum: f64 = self.regions.iter().map(Region::mean_intensity).sum();
            sum / self.regions.len() as f64
        })
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Machine-readable invariant violation codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationCode {
    UnsupportedSchemaVersion,
    EmptyIntensitySeries,
    NegativeIntensity,
    NonIncreasingSlotIndex,
    DuplicateRegionId,
    NoRegions,
    NoServers,
    DuplicateServerId,
    UnknownRegion,
    NegativeStaticPower,
    NegativeComputeEnergy,
    NegativeCommEnergy,
    NegativeBatteryCapacity,
    BatteryOverfull,
    BatteryLevelNegative,
    ChargeEfficiencyOutOfRange,
    NegativeHarvestMean,
    NegativeHarvestStddev,
    MissingHarvestTrace,
    CapOutOfRange,
    TradingLossOutOfRange,
    NegativeBackboneEnergy,
    NegativeBackboneIntensity,
    NonPositiveSlotDuration,
    NonPositiveEpochs,
    NonPositiveBatchSize,
    TargetAccuracyOutOfRange,
    EmptyAccuracyCurve,
    NonMonotoneAccuracyCurve,
    NonIncreasingCurveRound,
    NegativeWorkloadEnergy,
    ZeroMaxRounds,
}

/// One violated invariant, with the JSON path of the offending value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.path, self.code, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario validation failed at {}", .0[0])]
    Invalid(Vec<Violation>),
}

fn violation(list: &mut Vec<Violation>, code: ViolationCode, path: String, message: String) {
    list.push(Violation {
        code,
        path,
        message,
    });
}

/// Checks every scenario invariant and returns the list of violations,
/// empty when the scenario is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut v = Vec::new();

    if s.schema_version != SCHEMA_VERSION {
        violation(
            &mut v,
            ViolationCode::UnsupportedSchemaVersion,
            "schema_version".into(),
            format!("expected {}, found {}", SCHEMA_VERSION, s.schema_version),
        );
    }

    if s.regions.is_empty() {
        violation(
            &mut v,
            ViolationCode::NoRegions,
            "regions".into(),
            "at least one region is required".into(),
        );
    }
    let mut region_ids = BTreeSet::new();
    for (i, r) in s.regions.iter().enumerate() {
        let path = format!("regions[{i}]");
        if !region_ids.insert(r.id.as_str()) {
            violation(
                &mut v,
                ViolationCode::DuplicateRegionId,
                format!("{path}.id"),
                format!("region id `{}` declared twice", r.id),
            );
        }
        if r.intensity_series.is_empty() {
            violation(
                &mut v,
                ViolationCode::EmptyIntensitySeries,
                format!("{path}.intensity_series"),
                "intensity series must be non-empty".into(),
            );
            continue;
        }
        let mut prev_slot: Option<u64> = None;
        for (k, &(slot, value)) in r.intensity_series.iter().enumerate() {
            let entry_path = format!("{path}.intensity_series[{k}]");
            if value < 0.0 || !value.is_finite() {
                violation(
                    &mut v,
                    ViolationCode::NegativeIntensity,
                    entry_path.clone(),
                    format!("intensity must be finite and >= 0, found {value}"),
                );
            }
            if let Some(p) = prev_slot {
                if slot <= p {
                    violation(
                        &mut v,
                        ViolationCode::NonIncreasingSlotIndex,
                        entry_path,
                        format!("slot indices must be strictly increasing ({p} then {slot})"),
                    );
                }
            }
            prev_slot = Some(slot);
        }
    }

    if s.servers.is_empty() {
        violation(
            &mut v,
            ViolationCode::NoServers,
            "servers".into(),
            "at least one edge server is required".into(),
        );
    }
    let mut server_ids = BTreeSet::new();
    for (i, srv) in s.servers.iter().enumerate() {
        let path = format!("servers[{i}]");
        if !server_ids.insert(srv.id.as_str()) {
            violation(
                &mut v,
                ViolationCode::DuplicateServerId,
                format!("{path}.id"),
                format!("server id `{}` declared twice", srv.id),
            );
        }
        if let Some(region_id) = &srv.region_id {
            if s.region(region_id).is_none() {
                violation(
                    &mut v,
                    ViolationCode::UnknownRegion,
                    format!("{path}.region_id"),
                    format!("server references undeclared region `{region_id}`"),
                );
            }
        }
        if srv.static_power_w < 0.0 {
            violation(
                &mut v,
                ViolationCode::NegativeStaticPower,
                format!("{path}.static_power_w"),
                "static power must be >= 0".into(),
            );
        }
        if srv.compute_energy_per_unit_kwh < 0.0 {
            violation(
                &mut v,
                ViolationCode::NegativeComputeEnergy,
                format!("{path}.compute_energy_per_unit_kwh"),
                "compute energy per work-unit must be >= 0".into(),
            );
        }
        if srv.comm_energy_per_byte_kwh < 0.0 {
            violation(
                &mut v,
                ViolationCode::NegativeCommEnergy,
                format!("{path}.comm_energy_per_byte_kwh"),
                "comm energy per byte must be >= 0".into(),
            );
        }
        if srv.battery_capacity_kwh < 0.0 {
            violation(
                &mut v,
                ViolationCode::NegativeBatteryCapacity,
                format!("{path}.battery_capacity_kwh"),
                "battery capacity must be >= 0".into(),
            );
        }
        if srv.battery_level_kwh < 0.0 {
            violation(
                &mut v,
                ViolationCode::BatteryLevelNegative,
                format!("{path}.battery_level_kwh"),
                "battery level must be >= 0".into(),
            );
        } else if srv.battery_level_kwh > srv.battery_capacity_kwh {
            violation(
                &mut v,
                ViolationCode::BatteryOverfull,
                format!("{path}.battery_level_kwh"),
                format!(
                    "battery level {} exceeds capacity {}",
                    srv.battery_level_kwh, srv.battery_capacity_kwh
                ),
            );
        }
        if !(srv.charge_efficiency > 0.0 && srv.charge_efficiency <= 1.0) {
            violation(
                &mut v,
                ViolationCode::ChargeEfficiencyOutOfRange,
                format!("{path}.charge_efficiency"),
                "charge efficiency must be in (0, 1]".into(),
            );
        }
        for viol in srv.harvester.validate() {
            let (code, msg) = viol;
            violation(&mut v, code, format!("{path}.harvester"), msg);
        }
    }

    for (cap, name) in [(s.alpha_energy, "alpha_energy"), (s.alpha_task, "alpha_task")] {
        if !(0.0..=1.0).contains(&cap) {
            violation(
                &mut v,
                ViolationCode::CapOutOfRange,
                name.into(),
                format!("cap must be in [0, 1], found {cap}"),
            );
        }
    }
    if !(0.0..1.0).contains(&s.trading_loss) {
        violation(
            &mut v,
            ViolationCode::TradingLossOutOfRange,
            "trading_loss".into(),
            format!("trading loss must be in [0, 1), found {}", s.trading_loss),
        );
    }
    if s.backbone_energy_per_byte_kwh < 0.0 {
        violation(
            &mut v,
            ViolationCode::NegativeBackboneEnergy,
            "backbone_energy_per_byte_kwh".into(),
            "backbone energy per byte must be >= 0".into(),
        );
    }
    if let Some(bi) = s.backbone_intensity {
        if bi < 0.0 {
            violation(
                &mut v,
                ViolationCode::NegativeBackboneIntensity,
                "backbone_intensity".into(),
                "backbone intensity must be >= 0".into(),
            );
        }
    }
    if s.slot_duration_s <= 0.0 {
        violation(
            &mut v,
            ViolationCode::NonPositiveSlotDuration,
            "slot_duration_s".into(),
            "slot duration must be > 0".into(),
        );
    }
    if s.max_rounds == 0 {
        violation(
            &mut v,
            ViolationCode::ZeroMaxRounds,
            "max_rounds".into(),
            "max_rounds must be >= 1".into(),
        );
    }

    let w = &s.workload;
    if w.local_epochs == 0 {
        violation(
            &mut v,
            ViolationCode::NonPositiveEpochs,
            "workload.local_epochs".into(),
            "local epochs must be >= 1".into(),
        );
    }
    if w.batch_size == 0 {
        violation(
            &mut v,
            ViolationCode::NonPositiveBatchSize,
            "workload.batch_size".into(),
            "batch size must be >= 1".into(),
        );
    }
    if !(w.target_accuracy > 0.0 && w.target_accuracy <= 1.0) {
        violation(
            &mut v,
            ViolationCode::TargetAccuracyOutOfRange,
            "workload.target_accuracy".into(),
            format!("target accuracy must be in (0, 1], found {}", w.target_accuracy),
        );
    }
    if w.accuracy_curve.is_empty() {
        violation(
            &mut v,
            ViolationCode::EmptyAccuracyCurve,
            "workload.accuracy_curve".into(),
            "accuracy curve must be non-empty".into(),
        );
    }
    let mut prev_round: Option<u32> = None;
    let mut prev_acc = f64::NEG_INFINITY;
    for (k, &(round, acc)) in w.accuracy_curve.iter().enumerate() {
        let path = format!("workload.accuracy_curve[{k}]");
        if let Some(p) = prev_round {
            if round <= p {
                violation(
                    &mut v,
                    ViolationCode::NonIncreasingCurveRound,
                    path.clone(),
                    format!("curve rounds must be strictly increasing ({p} then {round})"),
                );
            }
        }
        if acc < prev_acc {
            violation(
                &mut v,
                ViolationCode::NonMonotoneAccuracyCurve,
                path,
                format!("accuracy curve must be nondecreasing ({prev_acc} then {acc})"),
            );
        }
        prev_round = Some(round);
        prev_acc = acc;
    }
    for (value, path) in [
        (w.offload_bytes_per_unit, "workload.offload_bytes_per_unit"),
        (
            w.preparation.user_device_kwh_per_sample,
            "workload.preparation.user_device_kwh_per_sample",
        ),
        (
            w.preparation.ran_kwh_per_sample,
            "workload.preparation.ran_kwh_per_sample",
        ),
        (
            w.serving.energy_per_inference_kwh,
            "workload.serving.energy_per_inference_kwh",
        ),
    ] {
        if value < 0.0 {
            violation(
                &mut v,
                ViolationCode::NegativeWorkloadEnergy,
                path.into(),
                "energy coefficients must be >= 0".into(),
            );
        }
    }

    v
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Parses and fully validates a scenario file.
///
/// A file is accepted iff `validate_scenario` on the parsed value returns
/// no violations; the error carries every violation found, first one first.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    parse_scenario(&text)
}

/// Parses and validates a scenario from a JSON string.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text)?;
    let violations = validate_scenario(&scenario);
    if violations.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Invalid(violations))
    }
}

/// Reads a region intensity CSV with columns
/// `region_id,slot,intensity_gco2_per_kwh` into `Region` values.
///
/// Rows for the same region form its series in file order; the region label
/// defaults to the id.
pub fn load_region_csv(path: &Path) -> Result<Vec<Region>, ScenarioError> {
    #[derive(Deserialize)]
    struct Row {
        region_id: String,
        slot: u64,
        intensity_gco2_per_kwh: f64,
    }

    let mut reader = csv::Reader::from_path(path).map_err(csv_to_io)?;
    let mut regions: Vec<Region> = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(csv_to_io)?;
        match regions.iter_mut().find(|r| r.id == row.region_id) {
            Some(region) => region
                .intensity_series
                .push((row.slot, row.intensity_gco2_per_kwh)),
            None => regions.push(Region {
                id: row.region_id.clone(),
                label: row.region_id,
                intensity_series: vec![(row.slot, row.intensity_gco2_per_kwh)],
            }),
        }
    }
    Ok(regions)
}

fn csv_to_io(e: csv::Error) -> ScenarioError {
    ScenarioError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
