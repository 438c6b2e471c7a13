//! Per-round experiment metrics and their CSV/JSON export, plus merged
//! plot-ready series for cross-experiment comparison.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

/// Which scheduling regime produced a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// No scheduling policy: every feasible user participates.
    None,
    /// Entropy-maximizing subset selection.
    Entropy,
    /// Representation-estimation phase of the clustered policy.
    Estimation,
    /// Post-phase cluster-based scheduling.
    Clustered,
}

impl Phase {
    fn as_str(&self) -> &'static str {
        match self {
            Phase::None => "none",
            Phase::Entropy => "entropy",
            Phase::Estimation => "estimation",
            Phase::Clustered => "clustered",
        }
    }
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Completed rounds (1-based).
    pub t: usize,
    pub num_scheduled: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Gradient-approximation error of the round's schedule, evaluated at
    /// the round's broadcast model; zero when nobody was scheduled.
    pub epsilon: f64,
    /// Users holding a full battery after the round.
    pub battery_full_count: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rows: Vec<MetricsRow>,
}

impl MetricsRecord {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t,num_scheduled,test_accuracy,test_loss,epsilon,battery_full_count,phase\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.t,
                r.num_scheduled,
                r.test_accuracy,
                r.test_loss,
                r.epsilon,
                r.battery_full_count,
                r.phase.as_str()
            ));
        }
        out
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Writes a metrics record to `path` in the chosen format.
pub fn export_metrics(record: &MetricsRecord, path: &Path, format: ExportFormat) -> Result<()> {
    let payload = match format {
        ExportFormat::Csv => record.to_csv_string(),
        ExportFormat::Json => record.to_json_string()?,
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(payload.as_bytes())?;
    Ok(())
}

/// Writes a merged accuracy-over-rounds CSV with one labeled column per
/// record. Rows cover the union of evaluated rounds; series evaluated less
/// often are forward-filled from their last value, and leading gaps stay
/// empty.
pub fn emit_plot_data(series: &[(String, &MetricsRecord)], path: &Path) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Empty("plot series"));
    }
    let mut grid: BTreeSet<usize> = BTreeSet::new();
    let mut maps: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(series.len());
    for (_, rec) in series {
        let mut m = BTreeMap::new();
        for row in &rec.rows {
            grid.insert(row.t);
            m.insert(row.t, row.test_accuracy);
        }
        maps.push(m);
    }

    let mut out = String::from("t");
    for (label, _) in series {
        out.push(',');
        out.push_str(&label.replace(',', "_"));
    }
    out.push('\n');
    for &t in &grid {
        out.push_str(&t.to_string());
        for m in &maps {
            out.push(',');
            if let Some((_, v)) = m.range(..=t).next_back() {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
