//! Scope-2 emission accounting keyed by server, lifecycle stage, and slot.
//!
//! Only grid-sourced energy carries emissions, priced at the server's
//! regional carbon intensity for the slot; harvested renewable energy,
//! battery-stored renewable energy, and imported (traded) renewable energy
//! are all accounted at zero. Backbone transport energy for offloaded work
//! is priced at a separate flat backbone intensity.
//!
//! Ledger mutation is confined to the single simulation thread; reports are
//! produced from immutable snapshots.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Scenario;

/// Lifecycle stages carrying emissions in reports. Recycling has no
/// measurable emissions in this model: it appears in reports as a
/// structural zero and never receives ledger entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LifecycleStage {
    Preparation,
    Development,
    Application,
}

impl LifecycleStage {
    pub const ALL: [LifecycleStage; 3] = [
        LifecycleStage::Preparation,
        LifecycleStage::Development,
        LifecycleStage::Application,
    ];
}

impl fmt::Display for LifecycleStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LifecycleStage::Preparation => "Preparation",
            LifecycleStage::Development => "Development",
            LifecycleStage::Application => "Application",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("negative energy or intensity: energy={energy}, intensity={intensity}")]
    NegativeInput { energy: f64, intensity: f64 },
    #[error("unknown server `{0}` (no region assignment recorded)")]
    UnknownServer(String),
    #[error("negative energy in source split: {0}")]
    NegativeSource(&'static str),
}

/// Scope-2 emissions for `energy` kWh drawn from a grid with the given
/// carbon intensity.
pub fn emissions(energy_kwh: f64, intensity_gco2_per_kwh: f64) -> Result<f64, LedgerError> {
    if energy_kwh < 0.0 || intensity_gco2_per_kwh < 0.0 {
        return Err(LedgerError::NegativeInput {
            energy: energy_kwh,
            intensity: intensity_gco2_per_kwh,
        });
    }
    Ok(energy_kwh * intensity_gco2_per_kwh)
}

/// Energy consumed in one (server, stage, slot) cell, split by source.
/// Only `grid_kwh` and `backbone_kwh` carry emissions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBySource {
    /// Grid draw, priced at the server's regional intensity.
    pub grid_kwh: f64,
    /// Locally harvested renewable energy consumed directly.
    pub renewable_kwh: f64,
    /// Battery discharge (battery contents are renewable-charged).
    pub battery_kwh: f64,
    /// Traded renewable energy received from other servers (post-loss).
    pub import_kwh: f64,
    /// Backbone transport energy for offloaded task data, priced at the
    /// backbone intensity.
    pub backbone_kwh: f64,
}

impl EnergyBySource {
    pub fn total_kwh(&self) -> f64 {
        self.grid_kwh + self.renewable_kwh + self.battery_kwh + self.import_kwh + self.backbone_kwh
    }

    fn check_nonnegative(&self) -> Result<(), LedgerError> {
        for (v, name) in [
            (self.grid_kwh, "grid_kwh"),
            (self.renewable_kwh, "renewable_kwh"),
            (self.battery_kwh, "battery_kwh"),
            (self.import_kwh, "import_kwh"),
            (self.backbone_kwh, "backbone_kwh"),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(LedgerError::NegativeSource(name));
            }
        }
        Ok(())
    }
}

/// One accumulated ledger cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LedgerEntry {
    #[serde(flatten)]
    pub sources: EnergyBySource,
    pub gco2e: f64,
}

/// Emission ledger for one run. Iteration order (and therefore every
/// serialized artifact) is deterministic via BTreeMap keys.
#[derive(Debug, Clone, Default)]
pub struct EmissionLedger {
    /// (server, stage, slot) → accumulated entry.
    entries: BTreeMap<(String, LifecycleStage, u64), LedgerEntry>,
    /// Per-server intensity series, pre-resolved from region assignments.
    intensity_series: BTreeMap<String, Vec<(u64, f64)>>,
    backbone_intensity: f64,
}

impl EmissionLedger {
    /// Builds a ledger for a scenario given resolved server → region
    /// placements (explicit or seeded).
    pub fn for_scenario(scenario: &Scenario, placements: &BTreeMap<String, String>) -> Self {
        let mut intensity_series = BTreeMap::new();
        for server in &scenario.servers {
            if let Some(region_id) = placements.get(&server.id) {
                if let Some(region) = scenario.region(region_id) {
                    intensity_series.insert(server.id.clone(), region.intensity_series.clone());
                }
            }
        }
        EmissionLedger {
            entries: BTreeMap::new(),
            intensity_series,
            backbone_intensity: scenario.effective_backbone_intensity(),
        }
    }

    /// Ledger over explicit per-server intensity series (test harnesses and
    /// slot-level tooling that bypass a full scenario).
    pub fn with_series(
        series: BTreeMap<String, Vec<(u64, f64)>>,
        backbone_intensity: f64,
    ) -> Self {
        EmissionLedger {
            entries: BTreeMap::new(),
            intensity_series: series,
            backbone_intensity,
        }
    }

    pub fn intensity_for(&self, server_id: &str, slot: u64) -> Result<f64, LedgerError> {
        let series = self
            .intensity_series
            .get(server_id)
            .ok_or_else(|| LedgerError::UnknownServer(server_id.to_string()))?;
        let mut current = series[0].1;
        for &(s, v) in series {
            if s <= slot {
                current = v;
            } else {
                break;
            }
        }
        Ok(current)
    }

    /// Accumulates one source-split energy record. Emissions are computed
    /// here: grid at the server's regional intensity for the slot, backbone
    /// at the backbone intensity, everything else at zero.
    pub fn record(
        &mut self,
        server_id: &str,
        stage: LifecycleStage,
        slot: u64,
        sources: EnergyBySource,
    ) -> Result<(), LedgerError> {
        sources.check_nonnegative()?;
        let intensity = self.intensity_for(server_id, slot)?;
        let gco2e = emissions(sources.grid_kwh, intensity)?
            + emissions(sources.backbone_kwh, self.backbone_intensity)?;
        let entry = self
            .entries
            .entry((server_id.to_string(), stage, slot))
            .or_default();
        entry.sources.grid_kwh += sources.grid_kwh;
        entry.sources.renewable_kwh += sources.renewable_kwh;
        entry.sources.battery_kwh += sources.battery_kwh;
        entry.sources.import_kwh += sources.import_kwh;
        entry.sources.backbone_kwh += sources.backbone_kwh;
        entry.gco2e += gco2e;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(
        &self,
    ) -> impl Iterator<Item = (&(String, LifecycleStage, u64), &LedgerEntry)> {
        self.entries.iter()
    }

    /// Grand totals over every entry.
    pub fn totals(&self) -> LedgerTotals {
        let mut t = LedgerTotals::default();
        for entry in self.entries.values() {
            t.energy_kwh += entry.sources.total_kwh();
            t.grid_kwh += entry.sources.grid_kwh;
            t.renewable_kwh += entry.sources.renewable_kwh;
            t.battery_kwh += entry.sources.battery_kwh;
            t.import_kwh += entry.sources.import_kwh;
            t.backbone_kwh += entry.sources.backbone_kwh;
            t.gco2e += entry.gco2e;
            t.backbone_gco2e += entry.sources.backbone_kwh * self.backbone_intensity;
        }
        t
    }

    /// Per-stage totals and emission fractions. Fractions are zero when the
    /// ledger is empty or carries zero total emissions; otherwise they sum
    /// to 1 within float dust. Recycling is reported as a structural zero
    /// and excluded from fractions.
    pub fn stage_report(&self) -> StageReport {
        let mut rows: BTreeMap<LifecycleStage, StageRow> = LifecycleStage::ALL
            .iter()
            .map(|&s| {
                (
                    s,
                    StageRow {
                        stage: s.to_string(),
                        kwh: 0.0,
                        gco2e: 0.0,
                        fraction: 0.0,
                    },
                )
            })
            .collect();
        for ((_, stage, _), entry) in &self.entries {
            let row = rows.get_mut(stage).expect("all stages pre-seeded");
            row.kwh += entry.sources.total_kwh();
            row.gco2e += entry.gco2e;
        }
        let total: f64 = rows.values().map(|r| r.gco2e).sum();
        if total > 0.0 {
            for row in rows.values_mut() {
                row.fraction = row.gco2e / total;
            }
        }
        StageReport {
            stages: LifecycleStage::ALL
                .iter()
                .map(|s| rows[s].clone())
                .collect(),
            recycling_kwh: 0.0,
            recycling_gco2e: 0.0,
            total_gco2e: total,
        }
    }

    /// Writes the entry-level CSV: `server,stage,slot,kwh,gco2e`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["server", "stage", "slot", "kwh", "gco2e"])?;
        for ((server, stage, slot), entry) in &self.entries {
            w.write_record([
                server.as_str(),
                &stage.to_string(),
                &slot.to_string(),
                &format!("{}", entry.sources.total_kwh()),
                &format!("{}", entry.gco2e),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Whole-run energy and emission totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LedgerTotals {
    pub energy_kwh: f64,
    pub grid_kwh: f64,
    pub renewable_kwh: f64,
    pub battery_kwh: f64,
    pub import_kwh: f64,
    pub backbone_kwh: f64,
    pub gco2e: f64,
    /// Portion of `gco2e` attributable to backbone transport; reported
    /// separately so results can be read with and without that term.
    pub backbone_gco2e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: String,
    pub kwh: f64,
    pub gco2e: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stages: Vec<StageRow>,
    pub recycling_kwh: f64,
    pub recycling_gco2e: f64,
    pub total_gco2e: f64,
}

impl StageReport {
    pub fn fraction(&self, stage: LifecycleStage) -> f64 {
        self.stages
            .iter()
            .find(|r| r.stage == stage.to_string())
            .map(|r| r.fraction)
            .unwrap_or(0.0)
    }

    pub fn gco2e(&self, stage: LifecycleStage) -> f64 {
        self.stages
            .iter()
            .find(|r| r.stage == stage.to_string())
            .map(|r| r.gco2e)
            .unwrap_or(0.0)
    }
}
