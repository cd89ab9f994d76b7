//! Comparison tables across server counts and policies, their CSV
//! round-trip, and the least-squares fit used by scaling checks.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Policy;
use crate::sim::RunReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("comparison table needs a Baseline run for every server count (missing for {0})")]
    MissingBaseline(usize),
}

/// One (server count, policy) cell of a policy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub servers: usize,
    pub policy: Policy,
    pub total_kwh: f64,
    pub total_gco2e: f64,
    /// Emission reduction vs the Baseline run at the same server count,
    /// percent: 100·(baseline − this)/baseline. Baseline rows are 0.
    pub reduction_pct: f64,
}

/// Policy comparison over server counts, ordered by count then by the
/// canonical policy order (Baseline, DET, DAT, DETA).
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Builds the table from per-run reports. Every server count present
    /// must include a Baseline run to anchor its reduction column.
    pub fn from_reports(reports: &[&RunReport]) -> Result<ComparisonTable, ReportError> {
        let mut by_count: BTreeMap<usize, Vec<&RunReport>> = BTreeMap::new();
        for r in reports {
            by_count.entry(r.server_count).or_default().push(r);
        }
        let mut rows = Vec::new();
        for (&count, group) in &by_count {
            let baseline = group
                .iter()
                .find(|r| r.policy == Policy::Baseline)
                .ok_or(ReportError::MissingBaseline(count))?
                .total_gco2e;
            for policy in Policy::ALL {
                for r in group.iter().filter(|r| r.policy == policy) {
                    let reduction_pct = if policy == Policy::Baseline {
                        0.0
                    } else if baseline > 0.0 {
                        100.0 * (baseline - r.total_gco2e) / baseline
                    } else {
                        0.0
                    };
                    rows.push(ComparisonRow {
                        servers: count,
                        policy,
                        total_kwh: r.total_kwh,
                        total_gco2e: r.total_gco2e,
                        reduction_pct,
                    });
                }
            }
        }
        Ok(ComparisonTable { rows })
    }

    pub fn reduction(&self, servers: usize, policy: Policy) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.servers == servers && r.policy == policy)
            .map(|r| r.reduction_pct)
    }

    /// Writes `servers,policy,total_kwh,total_gco2e,reduction_pct` rows.
    /// Floats are emitted in shortest-round-trip form, so reading the file
    /// back reproduces this table exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<ComparisonTable, ReportError> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r
            .deserialize()
            .collect::<Result<Vec<ComparisonRow>, csv::Error>>()?;
        Ok(ComparisonTable { rows })
    }

    /// Plain-text rendering for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::from(
            "servers  policy    total_kwh      total_gco2e    reduction_%\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:>7}  {:<8}  {:<13.6e}  {:<13.6e}  {:>10.2}\n",
                row.servers,
                row.policy.to_string(),
                row.total_kwh,
                row.total_gco2e,
                row.reduction_pct
            ));
        }
        out
    }
}

/// Ordinary least squares of y on x: returns (slope, intercept, r²).
/// With fewer than two distinct x values the fit is the mean line and r²
/// is defined as 1 when the ys are constant too, else 0.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len(), "mismatched fit inputs");
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0, 1.0);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return (0.0, my, if syy == 0.0 { 1.0 } else { 0.0 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum();
        1.0 - ss_res / syy
    };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn report(servers: usize, policy: Policy, gco2e: f64) -> RunReport {
        // Only the fields the table consumes matter here; the rest take
        // placeholder values.
        let mut r = empty_report();
        r.server_count = servers;
        r.policy = policy;
        r.total_gco2e = gco2e;
        r.total_kwh = gco2e / 100.0;
        r
    }

    fn empty_report() -> RunReport {
        use crate::ledger::LedgerTotals;
        RunReport {
            schema_version: 1,
            scenario_id: String::new(),
            policy: Policy::Baseline,
            seed: 0,
            server_count: 0,
            placements: Default::default(),
            rounds_used: 0,
            final_accuracy: 0.0,
            target_accuracy: 0.0,
            target_not_reached: false,
            slots_simulated: 0,
            total_kwh: 0.0,
            total_gco2e: 0.0,
            gco2e_excl_backbone: 0.0,
            totals: LedgerTotals::default(),
            stages: crate::ledger::EmissionLedger::default().stage_report(),
            objective_trace: Vec::new(),
            decisions: Default::default(),
            audit: crate::sim::AuditReport {
                max_residual_kwh: 0.0,
                passed: true,
            },
            ledger: Vec::new(),
        }
    }

    #[test]
    fn reductions_anchor_on_the_matching_baseline() {
        let reports = [
            report(2, Policy::Baseline, 100.0),
            report(2, Policy::Deta, 40.0),
            report(4, Policy::Baseline, 200.0),
            report(4, Policy::Deta, 50.0),
            report(4, Policy::Det, 120.0),
        ];
        let refs: Vec<&RunReport> = reports.iter().collect();
        let table = ComparisonTable::from_reports(&refs).unwrap();
        assert_abs_diff_eq!(table.reduction(2, Policy::Deta).unwrap(), 60.0);
        assert_abs_diff_eq!(table.reduction(4, Policy::Deta).unwrap(), 75.0);
        assert_abs_diff_eq!(table.reduction(4, Policy::Det).unwrap(), 40.0);
        assert_eq!(table.reduction(2, Policy::Baseline), Some(0.0));
        // Rows come out grouped by count, policies in canonical order.
        let order: Vec<(usize, Policy)> =
            table.rows.iter().map(|r| (r.servers, r.policy)).collect();
        assert_eq!(
            order,
            vec![
                (2, Policy::Baseline),
                (2, Policy::Deta),
                (4, Policy::Baseline),
                (4, Policy::Det),
                (4, Policy::Deta),
            ]
        );
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let reports = [report(2, Policy::Deta, 40.0)];
        let refs: Vec<&RunReport> = reports.iter().collect();
        assert!(matches!(
            ComparisonTable::from_reports(&refs),
            Err(ReportError::MissingBaseline(2))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let reports = [
            report(3, Policy::Baseline, 123.456_789_012_345),
            report(3, Policy::Deta, 0.1 + 0.2), // deliberately non-representable
        ];
        let refs: Vec<&RunReport> = reports.iter().collect();
        let table = ComparisonTable::from_reports(&refs).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = ComparisonTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(table, back);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("servers,policy,total_kwh,total_gco2e,reduction_pct\n"));
    }

    #[test]
    fn exact_affine_data_fits_with_unit_r2() {
        let xs = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.75 * x + 2.0).collect();
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        assert_relative_eq!(slope, 0.75, max_relative = 1e-12);
        assert_relative_eq!(intercept, 2.0, max_relative = 1e-12);
        assert!(r2 >= 1.0 - 1e-12);
    }

    #[test]
    fn noisy_data_degrades_r2() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, -1.0, 1.0, -1.0];
        let (_, _, r2) = linear_fit(&xs, &ys);
        assert!(r2 < 0.5);
    }

    #[test]
    fn degenerate_fits_are_defined() {
        let (slope, intercept, r2) = linear_fit(&[2.0, 2.0], &[5.0, 5.0]);
        assert_eq!(slope, 0.0);
        assert_eq!(intercept, 5.0);
        assert_eq!(r2, 1.0);
    }
}
