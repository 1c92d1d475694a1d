//! Reproducible experiment reports: a structured TOML record plus CSV
//! tables. Every number in a report is a pure function of (config, seed);
//! the provenance timestamp is informational and lives only in the report
//! header, never in a table.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{ConfusionMatrix, TrialRecord, CLASSES};
use crate::config::ExperimentConfig;
use crate::optimizer::EvictionDistribution;
use crate::sim::IntervalLogEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: String,
    pub timestamp_unix: u64,
}

impl Provenance {
    pub fn now(seed: u64) -> Self {
        Provenance {
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// One named table: column header plus stringified rows, rendered to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// A full experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub provenance: Provenance,
    /// Resolved configuration, sufficient to re-run the experiment.
    pub config: ExperimentConfig,
    /// Headline verdicts and scalar results, in insertion order.
    pub results: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(experiment: &str, config: &ExperimentConfig) -> Self {
        Report {
            experiment: experiment.to_string(),
            provenance: Provenance::now(config.seed),
            config: config.clone(),
            results: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: impl std::fmt::Display) {
        self.results.push((key.to_string(), value.to_string()));
    }

    pub fn result(&self, key: &str) -> Option<&str> {
        self.results.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn add_table(&mut self, table: Table) {
        self.tables.push(table);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    pub fn parse(text: &str) -> Result<Report, toml::de::Error> {
        toml::from_str(text)
    }

    /// Writes `report.toml` plus one `<table>.csv` per table into `dir`.
    /// Returns the written paths.
    pub fn emit(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let report_path = dir.join(format!("{}_report.toml", self.experiment));
        let mut f = std::fs::File::create(&report_path)?;
        f.write_all(self.to_toml().as_bytes())?;
        written.push(report_path);
        for table in &self.tables {
            let path = dir.join(format!("{}.csv", table.name));
            std::fs::write(&path, table.to_csv())?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Trial records as `d,q_v,q_a,x,dropped`.
pub fn trials_table(name: &str, records: &[TrialRecord]) -> Table {
    let mut t = Table::new(name, &["d", "q_v", "q_a", "x", "dropped"]);
    for r in records {
        t.push(vec![
            r.demand.to_string(),
            r.victim_budget.to_string(),
            r.attacker_budget.to_string(),
            r.evictions.to_string(),
            r.dropped.to_string(),
        ]);
    }
    t
}

/// A 6x6 confusion matrix with two-decimal cells, one row per true class.
pub fn confusion_table(name: &str, matrix: &ConfusionMatrix) -> Table {
    let columns: Vec<&str> = CLASSES.iter().map(|c| c.name()).collect();
    let mut t = Table::new(name, &columns);
    for row in matrix.cells() {
        t.push(row.iter().map(|c| format!("{c:.2}")).collect());
    }
    t
}

/// Per-(q_v, q_a) classifier accuracy.
pub fn accuracy_table(
    name: &str,
    accuracies: &std::collections::BTreeMap<(usize, usize), f64>,
) -> Table {
    let mut t = Table::new(name, &["q_v", "q_a", "accuracy"]);
    for ((q_v, q_a), acc) in accuracies {
        t.push(vec![q_v.to_string(), q_a.to_string(), format!("{acc:.4}")]);
    }
    t
}

/// Eviction-probability rows, one per demand, full precision.
pub fn eviction_rows_table(name: &str, dist: &EvictionDistribution) -> Table {
    let w = dist.ways();
    let columns: Vec<String> =
        std::iter::once("d".to_string()).chain((0..=w).map(|x| format!("x{x}"))).collect();
    let column_refs: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    let mut t = Table::new(name, &column_refs);
    for d in 0..=w {
        let mut row = vec![d.to_string()];
        row.extend(dist.row(d).iter().map(|p| format!("{p:.17}")));
        t.push(row);
    }
    t
}

/// The per-interval event log: `tick,domain,q,evictions`.
pub fn interval_table(name: &str, log: &[IntervalLogEntry]) -> Table {
    let mut t = Table::new(name, &["tick", "domain", "q", "evictions"]);
    for e in log {
        t.push(vec![
            e.tick.to_string(),
            e.domain.to_string(),
            e.budget.to_string(),
            e.evictions.to_string(),
        ]);
    }
    t
}
