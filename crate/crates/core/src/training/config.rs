use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub optimizer: AdamWConfig,
    /// `(first_step, patch_size)` entries; thresholds strictly increasing from 0.
    pub patch_schedule: Vec<(u64, usize)>,
    /// Probability of a flip, drawn independently per axis.
    pub flip_prob: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Leading steps that train only the detector with binary cross-entropy.
    pub detector_warmup_steps: u64,
    /// Weight of the detector cross-entropy once joint training starts.
    pub detector_bce_weight: f64,
    /// Samples averaged per optimizer step.
    pub grad_accumulation: usize,
    /// Let the reconstruction loss reach the text projection.
    pub train_text_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            optimizer: AdamWConfig::default(),
            patch_schedule: vec![(0, 64), (1000, 96), (2000, 128)],
            flip_prob: 0.5,
            seed: 0,
            checkpoint_every: 0,
            detector_warmup_steps: 500,
            detector_bce_weight: 1.0,
            grad_accumulation: 1,
            train_text_projection: true,
        }
    }
}

impl TrainConfig {
    /// Small-scale overfit setting for 64×64 training sets on a CPU.
    pub fn desk() -> Self {
        Self {
            total_steps: 2000,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            patch_schedule: vec![(0, 64)],
            flip_prob: 0.0,
            detector_warmup_steps: 300,
            ..Self::default()
        }
    }

    /// Checks the schedule and scalar ranges; `multiple` is the spatial
    /// granularity every patch size must respect.
    pub fn validate(&self, multiple: usize) -> Result<()> {
        let s = &self.patch_schedule;
        if s.is_empty() || s[0].0 != 0 {
            return Err(Error::Parameter("patch_schedule must start with an entry at step 0".into()));
        }
        for w in s.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Parameter(format!(
                    "patch_schedule thresholds must increase strictly ({} then {})",
                    w[0].0, w[1].0
                )));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Parameter(format!(
                    "patch_schedule sizes must not decrease ({} then {})",
                    w[0].1, w[1].1
                )));
            }
        }
        if let Some((_, p)) = s.iter().find(|(_, p)| *p == 0 || p % multiple != 0) {
            return Err(Error::Parameter(format!(
                "patch size {p} must be a positive multiple of {multiple}"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Parameter(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.grad_accumulation == 0 {
            return Err(Error::Parameter("grad_accumulation must be at least 1".into()));
        }
        if !(self.detector_bce_weight >= 0.0 && self.detector_bce_weight.is_finite()) {
            return Err(Error::Parameter("detector_bce_weight must be finite and non-negative".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0)
        {
            return Err(Error::Parameter(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    /// Patch size in effect at `step`.
    pub fn patch_at(&self, step: u64) -> usize {
        self.patch_schedule
            .iter()
            .take_while(|(t, _)| *t <= step)
            .last()
            .map(|(_, p)| *p)
            .unwrap_or(self.patch_schedule[0].1)
    }

    /// Largest patch reached before `total_steps`.
    pub fn max_patch(&self) -> usize {
        self.patch_schedule
            .iter()
            .filter(|(t, _)| *t < self.total_steps.max(1))
            .map(|(_, p)| *p)
            .max()
            .unwrap_or(0)
    }
}

/// Layout of a training configuration file: `[train]` and `[model]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl TrainFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Load(format!("training config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
