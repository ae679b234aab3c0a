//! Experiment configuration: a JSON file with defaults for every field,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use grid_core::attacks::AttackKind;
use grid_core::evalkit::{ScenarioConfig, SweepParam};
use grid_core::noisecraft::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Input files for a non-synthetic target. All three are needed by
/// `attack` and `sweep`; `defend` only reads edges and predictions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub edges: Option<PathBuf>,
    pub nodes: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

impl DataSource {
    /// The file names written by `generate`, inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DataSource {
            edges: Some(dir.join(EDGES_FILE)),
            nodes: Some(dir.join(NODES_FILE)),
            predictions: Some(dir.join(PREDICTIONS_FILE)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_none() && self.nodes.is_none() && self.predictions.is_none()
    }
}

pub const EDGES_FILE: &str = "edges.tsv";
pub const NODES_FILE: &str = "nodes.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            parameter: SweepParam::Theta,
            values: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub scenario: ScenarioConfig,
    pub solver: SolverConfig,
    pub attacks: Vec<String>,
    pub sweep: SweepSpec,
    /// Report per-phase wall-clock seconds in sweep output. Off by default
    /// so that repeated runs produce identical files.
    pub record_timing: bool,
    /// Output directory. Not echoed: the echo lives inside it.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            scenario: ScenarioConfig::default(),
            solver: SolverConfig::default(),
            attacks: AttackKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            sweep: SweepSpec::default(),
            record_timing: false,
            out: None,
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub theta: Option<f64>,
    pub n: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub attacks: Option<Vec<String>>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies flag overrides. `--seed` drives both the data and the solver.
    pub fn resolve(mut self, o: Overrides) -> Result<Self, Failure> {
        if let Some(seed) = o.seed {
            self.scenario.seed = seed;
            self.solver.seed = seed;
        }
        if let Some(theta) = o.theta {
            self.solver.theta = theta;
        }
        if let Some(n) = o.n {
            self.solver.n = n;
        }
        if o.out.is_some() {
            self.out = o.out;
        }
        if let Some(dir) = o.data {
            self.data = DataSource::in_dir(&dir);
        }
        if let Some(attacks) = o.attacks {
            self.attacks = attacks;
        }
        self.solver.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        self.attack_kinds()?;
        Ok(self)
    }

    pub fn attack_kinds(&self) -> Result<Vec<AttackKind>, Failure> {
        let mut kinds = Vec::new();
        for name in &self.attacks {
            let kind: AttackKind = name.trim().parse().map_err(|_| {
                Failure::Usage(format!(
                    "unknown attack {name:?} (expected unsupervised, supervised or adaptive)"
                ))
            })?;
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        Ok(kinds)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Writes the resolved configuration to `<out>/config.json`.
    pub fn echo(&self, out: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::Internal(e.to_string()))?;
        std::fs::write(out.join("config.json"), text + "\n")
            .map_err(|e| Failure::Usage(format!("cannot write to {}: {e}", out.display())))
    }
}
