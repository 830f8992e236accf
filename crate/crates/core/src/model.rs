//! All learnable components of the pipeline, bundled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::TransparencyClass;
use crate::mask::{AdapterConfig, DetectorConfig, SoftMaskAdapter, UNetDetector, DEFAULT_TAU};
use crate::prompting::{PromptEncoders, SwitchConfig, TextEncoderConfig, VisualEncoderConfig};
use crate::removal::{RemovalConfig, RemovalNet};
use crate::tensor::ParamStore;

/// How the masking mode is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Follow the transparency switch on the instruction.
    #[default]
    Switch,
    /// Always binarize (adapter disabled).
    ForceHard,
    /// Always run the adapter.
    ForceSoft,
}

impl Routing {
    pub fn apply(self, switched: TransparencyClass) -> TransparencyClass {
        match self {
            Routing::Switch => switched,
            Routing::ForceHard => TransparencyClass::Opaque,
            Routing::ForceSoft => TransparencyClass::SemiTransparent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub adapter: AdapterConfig,
    pub text: TextEncoderConfig,
    pub visual: VisualEncoderConfig,
    pub removal: RemovalConfig,
    pub switch: SwitchConfig,
    /// Binarization threshold of the hard path.
    pub tau: f64,
    pub routing: Routing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            adapter: AdapterConfig::default(),
            text: TextEncoderConfig::default(),
            visual: VisualEncoderConfig::default(),
            removal: RemovalConfig::default(),
            switch: SwitchConfig::default(),
            tau: DEFAULT_TAU,
            routing: Routing::Switch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text.dim != self.removal.prompt_dim || self.visual.dim != self.removal.prompt_dim {
            return Err(Error::Parameter(format!(
                "encoder dims (text {}, visual {}) must equal the removal prompt_dim {}",
                self.text.dim, self.visual.dim, self.removal.prompt_dim
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Parameter(format!("tau {} must lie in (0, 1)", self.tau)));
        }
        if !(self.switch.theta > 0.0 && self.switch.theta < 1.0) {
            return Err(Error::Parameter(format!("theta {} must lie in (0, 1)", self.switch.theta)));
        }
        Ok(())
    }

    /// Training crops must be multiples of this so every component sees an exact grid.
    pub fn spatial_multiple(&self) -> usize {
        let a = 1usize << self.detector.depth;
        let b = self.adapter.patch;
        let c = self.removal.stride();
        lcm(lcm(a, b), c)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Names of the parameter groups, in storage order.
pub const COMPONENTS: [&str; 5] = ["detector", "adapter", "text_encoder", "visual_encoder", "removal"];

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub detector: UNetDetector,
    pub adapter: SoftMaskAdapter,
    pub encoders: PromptEncoders,
    pub removal: RemovalNet,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds: Vec<u64> = (0..4).map(|i| seed.wrapping_mul(0x9e37_79b9).wrapping_add(i)).collect();
        Ok(Self {
            detector: UNetDetector::new(config.detector.clone(), seeds[0])?,
            adapter: SoftMaskAdapter::new(config.adapter.clone(), seeds[1])?,
            encoders: PromptEncoders::new(config.text.clone(), config.visual.clone(), seeds[2])?,
            removal: RemovalNet::new(config.removal.clone(), seeds[3])?,
            config,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 5] {
        [
            self.detector.store(),
            self.adapter.store(),
            self.encoders.text.store(),
            self.encoders.visual.store(),
            self.removal.store(),
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 5] {
        [
            self.detector.store_mut(),
            self.adapter.store_mut(),
            self.encoders.text.store_mut(),
            self.encoders.visual.store_mut(),
            self.removal.store_mut(),
        ]
    }

    /// Trainable scalars across all components.
    pub fn count_parameters(&self) -> usize {
        self.stores()
            .iter()
            .flat_map(|s| s.entries())
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.stores().iter().all(|s| s.all_finite())
    }
}
