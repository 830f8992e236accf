use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingSource, VisualEncoder};
use crate::error::{Error, Result};
use crate::imaging::SceneImage;
use crate::tensor::{Bound, Conv2d, Graph, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    /// Images are resized to `input_size x input_size` first.
    pub input_size: usize,
    /// Output channels of the stride-2 conv layers.
    pub channels: Vec<usize>,
    pub dim: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32, 64, 128],
            dim: 512,
        }
    }
}

/// Strided conv stack, global average pooling and a linear head. Never trained.
#[derive(Clone, Debug)]
pub struct ToyVisualEncoder {
    config: VisualEncoderConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl ToyVisualEncoder {
    pub fn new(config: VisualEncoderConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.dim == 0 {
            return Err(Error::Parameter("visual encoder needs conv layers and a positive dim".into()));
        }
        if config.input_size >> config.channels.len() == 0 {
            return Err(Error::Parameter(format!(
                "input_size {} too small for {} stride-2 layers",
                config.input_size,
                config.channels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(&mut store, &format!("conv{i}"), cin, cout, 3, 2, 1, 1, true, &mut rng);
                cin = cout;
                c
            })
            .collect();
        let head = Linear::new(&mut store, "head", cin, config.dim, &mut rng);
        Ok(Self {
            config,
            store,
            convs,
            head,
        })
    }

    pub fn config(&self) -> &VisualEncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl VisualEncoder for ToyVisualEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_image(&self, image: &SceneImage) -> Result<Embedding> {
        let s = self.config.input_size;
        let small = image.resize(s, s)?;
        let mut g = Graph::no_grad();
        let p = Bound::bind(&mut g, &self.store, false);
        let mut x = g.constant(small.to_tensor());
        for conv in &self.convs {
            x = conv.forward(&mut g, &p, x);
            x = g.relu(x);
        }
        let pooled = g.mean_cols(x);
        let c = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, c]);
        let out = self.head.forward(&mut g, &p, pooled);
        Embedding::new(g.value(out).data().to_vec(), EmbeddingSource::Visual)
    }
}
