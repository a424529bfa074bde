//! Experiment configuration: task/architecture selection, factorization
//! policy, decay settings, optimizer choice, and run hyperparameters, read
//! and written as JSON.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::factor::FactorMode;
use crate::opt::LrSchedule;
use crate::reg::{DecayConfig, DecayMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BlobsCls,
    PatchesCls,
    SeqCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Smallcnn,
    TinyAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Lamb,
    Flambe,
}

/// Which layers get factorized and how.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FactorizeConfig {
    pub enabled: bool,
    pub mode: FactorMode,
    /// Uniform rank-scale multiplier on (output channels × kernel width);
    /// ignored by the overcomplete modes, which fix the rank themselves.
    pub scale: f64,
    /// Spectral initialization: draw the unfactorized init, then truncate.
    pub spectral: bool,
    /// Inner-matrix count for the deep mode.
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_depth() -> usize {
    1
}

impl Default for FactorizeConfig {
    fn default() -> Self {
        FactorizeConfig {
            enabled: false,
            mode: FactorMode::LowRank,
            scale: 1.0,
            spectral: false,
            depth: 1,
        }
    }
}

/// Task-specific generation knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_n: usize,
    pub eval_n: usize,
    /// blobs: cluster spread; patches: pixel noise.
    pub noise: f64,
    /// blobs only.
    pub dim: usize,
    pub classes: usize,
    /// seq_copy only.
    pub seq_len: usize,
    pub vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_n: 240,
            eval_n: 240,
            noise: 0.5,
            dim: 8,
            classes: 4,
            seq_len: 6,
            vocab: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub arch: Arch,
    #[serde(default)]
    pub factorize: FactorizeConfig,
    #[serde(default)]
    pub decay: DecayConfig,
    pub optimizer: OptKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub data: DataConfig,
    /// Save a checkpoint after this epoch (1-based); 0 disables.
    #[serde(default)]
    pub checkpoint_epoch: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> crate::tensor::Result<()> {
        use crate::tensor::Error;
        self.decay.validate();
        if self.batch_size < 2 {
            return Err(Error::InvalidArg("batch_size must be ≥ 2 (normalization)".into()));
        }
        if self.optimizer == OptKind::Flambe && !self.factorize.enabled {
            return Err(Error::InvalidArg(
                "flambe requires factorized parameters; enable factorization".into(),
            ));
        }
        if self.optimizer == OptKind::Lamb && self.decay.mode == DecayMode::Fd {
            return Err(Error::InvalidArg(
                "Frobenius decay with a layer-wise adaptive optimizer is the flambe optimizer; set optimizer = \"flambe\"".into(),
            ));
        }
        if self.task == Task::SeqCopy && self.arch != Arch::TinyAttn {
            return Err(Error::InvalidArg("seq_copy requires the tiny_attn architecture".into()));
        }
        if self.arch == Arch::TinyAttn && self.task != Task::SeqCopy {
            return Err(Error::InvalidArg("tiny_attn only supports seq_copy".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> crate::tensor::Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| crate::tensor::Error::InvalidArg(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical JSON form, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Baseline config for the named preset; used by the CLI and tests.
    pub fn preset(name: &str) -> Option<Self> {
        let base = ExperimentConfig {
            name: name.to_string(),
            task: Task::PatchesCls,
            arch: Arch::Smallcnn,
            factorize: FactorizeConfig::default(),
            decay: DecayConfig::default(),
            optimizer: OptKind::Sgd,
            epochs: 20,
            batch_size: 32,
            seed: 1,
            lr: LrSchedule::Const { base: 0.05 },
            data: DataConfig::default(),
            checkpoint_epoch: 0,
        };
        let cfg = match name {
            "blobs_mlp" => ExperimentConfig {
                task: Task::BlobsCls,
                arch: Arch::Mlp,
                epochs: 30,
                lr: LrSchedule::Const { base: 0.1 },
                ..base
            },
            "cnn_wd" => ExperimentConfig {
                decay: DecayConfig { mode: DecayMode::Wd, lambda: 0.005, ..Default::default() },
                ..base
            },
            "cnn_lowrank_si_fd" => ExperimentConfig {
                factorize: FactorizeConfig {
                    enabled: true,
                    scale: 2.0 / 48.0,
                    spectral: true,
                    ..Default::default()
                },
                decay: DecayConfig { mode: DecayMode::Fd, lambda: 0.005, ..Default::default() },
                ..base
            },
            "cnn_full_fd" => ExperimentConfig {
                factorize: FactorizeConfig {
                    enabled: true,
                    mode: FactorMode::Full,
                    spectral: true,
                    ..Default::default()
                },
                decay: DecayConfig { mode: DecayMode::Fd, lambda: 0.005, ..Default::default() },
                ..base
            },
            "attn_flambe" => ExperimentConfig {
                task: Task::SeqCopy,
                arch: Arch::TinyAttn,
                factorize: FactorizeConfig { enabled: true, ..Default::default() },
                decay: DecayConfig { mode: DecayMode::Fd, lambda: 0.001, ..Default::default() },
                optimizer: OptKind::Flambe,
                epochs: 40,
                lr: LrSchedule::Const { base: 0.02 },
                ..base
            },
            _ => return None,
        };
        Some(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::preset("cnn_lowrank_si_fd").unwrap();
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = ExperimentConfig::preset("cnn_wd").unwrap();
        let mut b = a.clone();
        b.seed = 99;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn flambe_without_factorization_rejected() {
        let mut cfg = ExperimentConfig::preset("cnn_wd").unwrap();
        cfg.optimizer = OptKind::Flambe;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lamb_with_fd_rejected() {
        let mut cfg = ExperimentConfig::preset("cnn_lowrank_si_fd").unwrap();
        cfg.optimizer = OptKind::Lamb;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_validate() {
        for name in ["blobs_mlp", "cnn_wd", "cnn_lowrank_si_fd", "cnn_full_fd", "attn_flambe"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(ExperimentConfig::preset("nope").is_none());
    }
}
