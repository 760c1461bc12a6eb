use std::path::{Path, PathBuf};

use relu_qsgd::engine::RunConfig;
use relu_qsgd::harness::{ConvergenceSweep, PhaseGrid};
use relu_qsgd::planted::{PlantedDataset, WStarSpec};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "RELU_QSGD_SEED";

/// Everything a command may need. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Base seed; `--seed` and the environment override it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub run: RunConfig,
    pub phase: PhaseGrid,
    pub ensemble: EnsembleConfig,
    pub sweep: Option<ConvergenceSweep>,
    pub master: MasterConfig,
    pub worker: WorkerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub d: usize,
    pub w_star: WStarSpec,
    /// Defaults to the base seed.
    pub seed: Option<u64>,
    /// Load this file (relative to `--out`) instead of generating.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 10_000,
            d: 1000,
            w_star: WStarSpec::paper_default(),
            seed: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub trials: usize,
    pub iters: u64,
    pub eps: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            trials: 5,
            iters: 1000,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub listen: String,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            listen: "127.0.0.1:7878".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerConfig {
    pub connect: String,
    pub id: u32,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            connect: "127.0.0.1:7878".into(),
            id: 0,
        }
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("fig1a-m200", include_str!("../presets/fig1a-m200.json")),
    ("fig1a-m400", include_str!("../presets/fig1a-m400.json")),
    ("fig1a-m600", include_str!("../presets/fig1a-m600.json")),
    ("fig1a-m800", include_str!("../presets/fig1a-m800.json")),
    ("fig1b-b4", include_str!("../presets/fig1b-b4.json")),
    ("fig1b-b5", include_str!("../presets/fig1b-b5.json")),
    ("fig1b-b6", include_str!("../presets/fig1b-b6.json")),
    ("fig1b-b7", include_str!("../presets/fig1b-b7.json")),
    ("fig2a", include_str!("../presets/fig2a.json")),
    ("fig2b", include_str!("../presets/fig2b.json")),
    (
        "table1-scenario1",
        include_str!("../presets/table1-scenario1.json"),
    ),
    (
        "table1-scenario2",
        include_str!("../presets/table1-scenario2.json"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, json)| *json)
}

pub fn parse(json: &str, origin: &str) -> Result<CliConfig, String> {
    serde_json::from_str(json).map_err(|e| format!("{origin}: {e}"))
}

/// `--seed`, then the environment variable, then the config file.
pub fn effective_seed(flag: Option<u64>, env: Option<String>, config: u64) -> Result<u64, String> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match env {
        Some(raw) => raw
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}: expected an unsigned integer, got {raw:?}")),
        None => Ok(config),
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.path.is_some() {
            return Ok(());
        }
        if self.n == 0 {
            return Err("dataset.n: must be at least 1".into());
        }
        if self.d == 0 {
            return Err("dataset.d: must be at least 1".into());
        }
        match &self.w_star {
            WStarSpec::Explicit(w) if w.len() != self.d => Err(format!(
                "dataset.w_star: has {} entries, expected d = {}",
                w.len(),
                self.d
            )),
            WStarSpec::Explicit(w) if w.iter().any(|v| !v.is_finite()) => {
                Err("dataset.w_star: entries must be finite".into())
            }
            WStarSpec::Gaussian { mean, std }
                if !(mean.is_finite() && std.is_finite() && *std >= 0.0) =>
            {
                Err("dataset.w_star: mean must be finite and std non-negative".into())
            }
            _ => Ok(()),
        }
    }

    pub fn load(&self, base_seed: u64, out: &Path) -> Result<PlantedDataset, String> {
        match &self.path {
            Some(p) => {
                let path = out.join(p);
                let file = std::fs::File::open(&path)
                    .map_err(|e| format!("dataset.path {}: {e}", path.display()))?;
                PlantedDataset::read_from(std::io::BufReader::new(file))
                    .map_err(|e| format!("dataset.path {}: {e}", path.display()))
            }
            None => PlantedDataset::generate(
                self.n,
                self.d,
                &self.w_star,
                self.seed.unwrap_or(base_seed),
            )
            .map_err(|e| format!("dataset: {e}")),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.trials == 0 {
            return Err("ensemble.trials: must be at least 1".into());
        }
        if self.iters == 0 {
            return Err("ensemble.iters: must be at least 1".into());
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(format!("ensemble.eps: must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_validates() {
        for (name, json) in PRESETS {
            let cfg = parse(json, name).unwrap();
            cfg.dataset.validate().unwrap();
            cfg.run.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.phase
                .validate()
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"run": {"batchsize": 3}}"#, "x").is_err());
        assert!(parse(r#"{"dataset": {"n": 3, "dims": 2}}"#, "x").is_err());
        assert!(parse(r#"{"extra": 1}"#, "x").is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(effective_seed(Some(1), Some("2".into()), 3), Ok(1));
        assert_eq!(effective_seed(None, Some("2".into()), 3), Ok(2));
        assert_eq!(effective_seed(None, None, 3), Ok(3));
        assert!(effective_seed(None, Some("x".into()), 3).is_err());
    }
}
