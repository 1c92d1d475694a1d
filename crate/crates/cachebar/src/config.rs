//! Experiment configuration: one self-describing TOML file per run, with
//! CLI flags overriding individual fields. The resolved config is echoed
//! into every report so a run can be reproduced from its output alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheGeometry, GeometryError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub cache_bytes: usize,
    pub ways: usize,
    pub line_size: usize,
    pub page_size: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        // Compact single-color geometry with the testbed's associativity;
        // attacks target one set, so the full 8 MiB is not simulated.
        GeometryConfig { cache_bytes: 16 * 64 * 64, ways: 16, line_size: 64, page_size: 4096 }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<CacheGeometry, ConfigError> {
        Ok(CacheGeometry::derive(self.cache_bytes, self.ways, self.line_size, self.page_size)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfigSection {
    pub flush_on_demote: bool,
    pub flush_on_merge: bool,
    /// Constrain the attacker to alternate Flush and Reload.
    pub protocol: bool,
}

impl Default for ModelConfigSection {
    fn default() -> Self {
        ModelConfigSection { flush_on_demote: true, flush_on_merge: true, protocol: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub ways: usize,
    pub attackers: usize,
    pub epsilon: f64,
    pub starts: usize,
    pub iterations: usize,
    /// Optional cap on the largest budget considered (0 = no cap).
    pub max_budget: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            ways: 16,
            attackers: 3,
            epsilon: 0.01,
            starts: 16,
            iterations: 4000,
            max_budget: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlushReloadConfig {
    pub trials: usize,
    /// Sender accesses per Flush-Reload interval.
    pub interval: usize,
}

impl Default for FlushReloadConfig {
    fn default() -> Self {
        FlushReloadConfig { trials: 10_000, interval: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimeProbeSection {
    pub trials: usize,
    pub demand: usize,
    pub victim_budget: usize,
    pub attacker_budget: usize,
    pub noise: f64,
    /// Continuous intervals to simulate for the per-interval event log
    /// (0 = trials only).
    pub intervals: usize,
}

impl Default for PrimeProbeSection {
    fn default() -> Self {
        PrimeProbeSection {
            trials: 1000,
            demand: 5,
            victim_budget: 16,
            attacker_budget: 16,
            noise: 0.0,
            intervals: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    /// Budget distribution file; empty runs the optimizer first.
    pub pmf_file: String,
    pub noise: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig { train_per_cell: 64, test_per_cell: 64, pmf_file: String::new(), noise: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FootprintConfig {
    /// `idle`, `busy25`, or a path to a trace file.
    pub workload: String,
    pub domains: u32,
    pub shared_pages: u64,
    pub private_pages: u64,
    pub ticks: usize,
}

impl Default for FootprintConfig {
    fn default() -> Self {
        FootprintConfig {
            workload: "idle".to_string(),
            domains: 8,
            shared_pages: 16,
            private_pages: 4,
            ticks: 30,
        }
    }
}

/// The whole experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub geometry: GeometryConfig,
    pub model: ModelConfigSection,
    pub optimizer: OptimizerConfig,
    pub flush_reload: FlushReloadConfig,
    pub prime_probe: PrimeProbeSection,
    pub classify: ClassifyConfig,
    pub footprint: FootprintConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    /// Validates cross-field constraints before any run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let geom = self.geometry.build()?;
        let bad = |field: &'static str, message: String| ConfigError::Invalid { field, message };
        if self.optimizer.ways < 2 {
            return Err(bad("optimizer.ways", "must be at least 2".into()));
        }
        if self.optimizer.attackers == 0 {
            return Err(bad("optimizer.attackers", "must be at least 1".into()));
        }
        if !(self.optimizer.epsilon > 0.0 && self.optimizer.epsilon < 1.0) {
            return Err(bad(
                "optimizer.epsilon",
                format!("must lie strictly in (0, 1), got {}", self.optimizer.epsilon),
            ));
        }
        if self.prime_probe.victim_budget > geom.ways {
            return Err(bad(
                "prime_probe.victim_budget",
                format!("exceeds ways {}", geom.ways),
            ));
        }
        if self.prime_probe.attacker_budget > geom.ways {
            return Err(bad(
                "prime_probe.attacker_budget",
                format!("exceeds ways {}", geom.ways),
            ));
        }
        if self.prime_probe.demand > geom.ways {
            return Err(bad("prime_probe.demand", format!("exceeds ways {}", geom.ways)));
        }
        if !(0.0..=1.0).contains(&self.prime_probe.noise) {
            return Err(bad("prime_probe.noise", "must lie in [0, 1]".into()));
        }
        if self.footprint.domains == 0 {
            return Err(bad("footprint.domains", "must be at least 1".into()));
        }
        match self.footprint.workload.as_str() {
            "idle" | "busy25" => {}
            path => {
                if !Path::new(path).exists() {
                    return Err(bad(
                        "footprint.workload",
                        format!("`{path}` is neither a builtin workload nor an existing file"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Output directory: flag value beats `CACHEBAR_OUT` beats config.
    pub fn resolve_out_dir(&self, flag: Option<&str>) -> PathBuf {
        if let Some(dir) = flag {
            return PathBuf::from(dir);
        }
        if let Ok(dir) = std::env::var("CACHEBAR_OUT") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from(self.out_dir.clone().unwrap_or_else(|| "out".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("seed = 7\n[prime_probe]\ndemand = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.prime_probe.demand, 3);
        assert_eq!(cfg.prime_probe.trials, 1000);
    }

    #[test]
    fn invalid_fields_name_their_path() {
        let mut cfg = ExperimentConfig::default();
        cfg.prime_probe.demand = 200;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("prime_probe.demand"), "{err}");
    }
}
