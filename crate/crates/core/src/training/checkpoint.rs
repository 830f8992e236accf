//! Binary checkpoint: `DEOBCKPT`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then every tensor as raw `f64` LE in
//! header order (parameters first, then optimizer moments).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, COMPONENTS};
use crate::tensor::{AdamW, ParamEntry, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEOBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Optimizers keyed by component name.
    pub optimizers: Vec<(String, AdamW)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelBundle,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    components: Vec<ComponentHeader>,
    #[serde(default)]
    training: Option<TrainingHeader>,
}

#[derive(Serialize, Deserialize)]
struct ComponentHeader {
    name: String,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    step: u64,
    rng_seed: u64,
    /// Decimal string: JSON numbers cannot hold a `u128` losslessly.
    rng_word_pos: String,
    optimizers: Vec<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    component: String,
    step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Load("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn component_index(name: &str) -> Result<usize> {
    COMPONENTS
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Load(format!("unknown component {name:?}")))
}

impl Checkpoint {
    pub fn from_model(model: ModelBundle) -> Self {
        Self { model, training: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let stores = self.model.stores();
        let components = COMPONENTS
            .iter()
            .zip(stores.iter())
            .map(|(name, store)| ComponentHeader {
                name: (*name).to_owned(),
                params: store
                    .entries()
                    .iter()
                    .map(|e| ParamHeader {
                        name: e.name.clone(),
                        shape: e.tensor.shape().to_vec(),
                        trainable: e.trainable,
                    })
                    .collect(),
            })
            .collect();
        let training = self.training.as_ref().map(|t| TrainingHeader {
            config: t.config.clone(),
            step: t.step,
            rng_seed: t.rng_seed,
            rng_word_pos: t.rng_word_pos.to_string(),
            optimizers: t
                .optimizers
                .iter()
                .map(|(c, o)| OptimizerHeader {
                    component: c.clone(),
                    step: o.steps_taken(),
                })
                .collect(),
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            components,
            training,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for store in stores {
            store.entries().iter().for_each(|e| push(e.tensor.data()));
        }
        if let Some(t) = &self.training {
            for (_, opt) in &t.optimizers {
                let (m, v) = opt.moments();
                m.iter().chain(v).for_each(|x| push(x));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Load("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Load("header length overflows".into()))?;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Load(format!("checkpoint header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Load("header and preamble disagree on the format version".into()));
        }

        let mut model = ModelBundle::new(header.model.clone(), 0)
            .map_err(|e| Error::Load(format!("stored model config: {e}")))?;
        if header.components.len() != COMPONENTS.len() {
            return Err(Error::Load(format!("expected {} components", COMPONENTS.len())));
        }
        let mut loaded = Vec::new();
        for (c, expected) in header.components.iter().zip(COMPONENTS) {
            if c.name != expected {
                return Err(Error::Load(format!("component {:?} where {expected:?} was expected", c.name)));
            }
            let mut store = ParamStore::new();
            for p in &c.params {
                let numel = p.shape.iter().product();
                let tensor = Tensor::new(p.shape.clone(), r.f64s(numel)?).map_err(|e| Error::Load(e.to_string()))?;
                store.add(p.name.clone(), tensor, p.trainable);
            }
            loaded.push(store);
        }
        for (dst, src) in model.stores_mut().into_iter().zip(&loaded) {
            dst.load_from(src)?;
            check_flags(dst.entries(), src.entries())?;
        }

        let training = match header.training {
            None => None,
            Some(t) => {
                let rng_word_pos = t
                    .rng_word_pos
                    .parse()
                    .map_err(|_| Error::Load(format!("bad rng position {:?}", t.rng_word_pos)))?;
                let mut optimizers = Vec::new();
                for o in &t.optimizers {
                    let store = model.stores()[component_index(&o.component)?];
                    let mut read = || -> Result<Vec<Vec<f64>>> {
                        store.entries().iter().map(|e| r.f64s(e.tensor.numel())).collect()
                    };
                    let (m, v) = (read()?, read()?);
                    optimizers.push((o.component.clone(), AdamW::restore(t.config.optimizer, store, o.step, m, v)?));
                }
                Some(TrainingState {
                    config: t.config,
                    step: t.step,
                    rng_seed: t.rng_seed,
                    rng_word_pos,
                    optimizers,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Load(format!("{} trailing bytes after checkpoint data", bytes.len() - r.pos)));
        }
        Ok(Self { model, training })
    }

    /// Written to a sibling temporary file first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn check_flags(mine: &[ParamEntry], stored: &[ParamEntry]) -> Result<()> {
    match mine.iter().zip(stored).find(|(a, b)| a.trainable != b.trainable) {
        Some((a, _)) => Err(Error::Load(format!("parameter {} has a different trainable flag", a.name))),
        None => Ok(()),
    }
}
