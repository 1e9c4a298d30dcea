//! Experiment files: TOML with one table per stage. Every key is optional;
//! unknown keys are rejected.
//!
//! ```toml
//! [data]
//! root = "data"
//!
//! [data.synth]
//! frame_size = 160
//!
//! [train]
//! epochs = 5
//! learning_rate = 8e-4
//! [train.warmup]
//! epochs = 15
//!
//! [sweep]
//! lambdas = [0.0, 0.2]
//!
//! [attack]
//! deltas = [0.1]
//! steps = [0, 10, 20, 50]
//! ```
//!
//! Precedence, lowest first: built-in defaults, the file, the
//! `SKELEVISION_DATA` environment variable (data root), command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::SynthConfig;
use crate::model::digest_json;
use crate::tracking::{RolloutMode, TrackerConfig};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: PathBuf,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// λ_K values; 0 trains the single-task baseline.
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub deltas: Vec<f64>,
    /// Step counts reported; one ascent runs to the largest and is sampled
    /// at the others. 0 is the benign row.
    pub steps: Vec<usize>,
    pub attacked_frames: usize,
    pub rollout: RolloutMode,
    pub tracker: TrackerConfig,
    /// Restrict to these test sequences (all when empty).
    pub sequences: Vec<String>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            deltas: vec![0.1],
            steps: vec![0, 10, 20, 50],
            attacked_frames: base.attacked_frames,
            rollout: base.rollout,
            tracker: base.tracker,
            sequences: Vec::new(),
        }
    }
}

impl AttackSection {
    pub fn max_steps(&self) -> usize {
        self.steps.iter().copied().max().unwrap_or(0)
    }

    /// The per-run attack settings for one δ.
    pub fn attack_config(&self, delta: f64) -> AttackConfig {
        AttackConfig {
            delta,
            steps: self.max_steps().max(1),
            attacked_frames: self.attacked_frames,
            rollout: self.rollout,
            tracker: self.tracker,
            snapshot_steps: self.steps.iter().copied().filter(|&s| s > 0).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tracker: TrackerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub chart_width: u32,
    pub chart_height: u32,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            chart_width: 640,
            chart_height: 400,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
    pub eval: EvalSection,
    pub attack: AttackSection,
    pub report: ReportSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the fully resolved configuration.
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        // the train mode is chosen per sweep value, so only the shared parts are checked here
        crate::train::sweep_config(&self.train, 0.0).validate()?;
        if self.sweep.lambdas.is_empty() {
            return Err(Error::Config("sweep.lambdas is empty".into()));
        }
        if let Some(l) = self
            .sweep
            .lambdas
            .iter()
            .find(|l| !(**l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config(format!("sweep.lambdas must be ≥ 0, got {l}")));
        }
        if self.attack.deltas.is_empty() || self.attack.steps.is_empty() {
            return Err(Error::Config(
                "attack.deltas and attack.steps must be non-empty".into(),
            ));
        }
        for &d in &self.attack.deltas {
            self.attack.attack_config(d).validate()?;
        }
        if self.report.chart_width < 100 || self.report.chart_height < 100 {
            return Err(Error::Config(
                "charts must be at least 100 px on each side".into(),
            ));
        }
        Ok(())
    }

    /// Applies `--seed`: one seed drives data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn with_data_root(mut self, root: PathBuf) -> Self {
        self.data.root = root;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[train]\nlearning_rte = 0.1",
            "[attack.tracker]\nwindow = 0.2",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn round_trips_and_digest_tracks_values() {
        let cfg = ExperimentConfig::from_toml(
            "[train]\nepochs = 3\n[train.warmup]\nepochs = 2\n[attack]\nsteps = [0, 5]\nrollout = \"full-unroll\"",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.warmup.epochs, 2);
        assert_eq!(cfg.attack.rollout, RolloutMode::FullUnroll);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(cfg.clone().with_seed(9).digest(), cfg.digest());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[sweep]\nlambdas = []").is_err());
        assert!(ExperimentConfig::from_toml("[sweep]\nlambdas = [-0.5]").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nmomentum = 1.5").is_err());
        assert!(ExperimentConfig::from_toml("[data.synth]\nframe_size = 10").is_err());
    }

    #[test]
    fn attack_grid_becomes_snapshots() {
        let s = AttackSection {
            steps: vec![0, 10, 50, 20],
            ..Default::default()
        };
        let a = s.attack_config(0.05);
        assert_eq!(a.steps, 50);
        assert_eq!(a.snapshot_steps, vec![10, 50, 20]);
        assert_eq!(a.tracker.window_influence, 0.0);
    }
}
