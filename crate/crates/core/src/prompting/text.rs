use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingSource, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    /// Number of hash buckets.
    pub vocab: usize,
    pub dim: usize,
    /// Salt for the token hash.
    pub hash_seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 2048,
            dim: 512,
            hash_seed: 0x5eed,
        }
    }
}

/// Lowercased alphanumeric runs; hyphenated words split into their parts.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(seed: u64, token: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag of tokens followed by a linear projection.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    config: TextEncoderConfig,
    store: ParamStore,
    projection: ParamId,
}

impl ToyTextEncoder {
    pub fn new(config: TextEncoderConfig, seed: u64) -> Result<Self> {
        if config.vocab == 0 || config.dim == 0 {
            return Err(Error::Parameter("text encoder vocab and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (config.dim as f64).sqrt()).expect("valid sigma");
        let data = (0..config.vocab * config.dim).map(|_| normal.sample(&mut rng)).collect();
        let mut store = ParamStore::new();
        let projection = store.add(
            "projection",
            Tensor::new(vec![config.vocab, config.dim], data)?,
            true,
        );
        Ok(Self {
            config,
            store,
            projection,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn projection(&self) -> ParamId {
        self.projection
    }

    /// L2-normalized bucket counts, `vocab` entries.
    pub fn bag(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Validation(format!("instruction {text:?} has no tokens")));
        }
        let mut bag = vec![0.0; self.config.vocab];
        for t in &tokens {
            bag[(fnv1a(self.config.hash_seed, t) % self.config.vocab as u64) as usize] += 1.0;
        }
        let norm = bag.iter().map(|v| v * v).sum::<f64>().sqrt();
        bag.iter_mut().for_each(|v| *v /= norm);
        Ok(bag)
    }

    /// `[n, vocab]` bags to `[n, dim]` embeddings.
    pub fn forward(&self, g: &mut Graph, p: &Bound, bags: Var) -> Var {
        g.matmul(bags, p.var(self.projection), false, false)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::Validation("instruction text is empty".into()));
        }
        let bag = self.bag(text)?;
        let w = self.store.get(self.projection).data();
        let d = self.config.dim;
        let mut out = vec![0.0; d];
        for (i, &b) in bag.iter().enumerate() {
            if b != 0.0 {
                for (o, wv) in out.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                    *o += b * wv;
                }
            }
        }
        Embedding::new(out, EmbeddingSource::Text)
    }
}
