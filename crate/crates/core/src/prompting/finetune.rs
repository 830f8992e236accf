use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InstructionCorpus, ToyTextEncoder};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Bound, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            temperature: 0.07,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Per-step contrastive losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
}

/// Supervised contrastive loss of four unit embeddings, rows 0-1 one class
/// and rows 2-3 the other. Self-similarities are excluded.
fn contrastive_loss(g: &mut Graph, emb: crate::tensor::Var, temperature: f64) -> crate::tensor::Var {
    let z = g.l2_normalize_rows(emb, 1e-12);
    let sim = g.matmul(z, z, false, true);
    let logits = g.scale(sim, 1.0 / temperature);
    let mut diag = vec![0.0; 16];
    let mut positives = vec![0.0; 16];
    for i in 0..4 {
        diag[i * 5] = -1e9;
        positives[i * 4 + (i ^ 1)] = 1.0;
    }
    let diag = g.constant(Tensor::new(vec![4, 4], diag).expect("4x4"));
    let logits = g.add(logits, diag);
    // The similarity matrix is symmetric, so the row-wise and column-wise
    // cross-entropies coincide; one pass covers both directions.
    let logp = g.log_softmax_rows(logits);
    let pos = g.constant(Tensor::new(vec![4, 4], positives).expect("4x4"));
    let picked = g.mul(logp, pos);
    let total = g.sum(picked);
    g.scale(total, -0.25)
}

/// Contrastively fine-tune the text projection on a two-category corpus.
/// Each step draws two instructions per category.
pub fn finetune_text_encoder(
    encoder: &mut ToyTextEncoder,
    corpus: &InstructionCorpus,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    corpus.validate()?;
    for (name, list) in [("opaque", &corpus.opaque), ("semi_transparent", &corpus.semi_transparent)] {
        if list.len() < 2 {
            return Err(Error::Validation(format!(
                "category {name} needs at least 2 instructions for fine-tuning, has {}",
                list.len()
            )));
        }
    }
    if !(config.temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature {} must be positive", config.temperature)));
    }
    let ob: Vec<Vec<f64>> = corpus.opaque.iter().map(|t| encoder.bag(t)).collect::<Result<_>>()?;
    let sb: Vec<Vec<f64>> = corpus.semi_transparent.iter().map(|t| encoder.bag(t)).collect::<Result<_>>()?;
    let vocab = encoder.config().vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer.clone(), encoder.store());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let io = sample(&mut rng, ob.len(), 2);
        let is = sample(&mut rng, sb.len(), 2);
        let mut batch = Vec::with_capacity(4 * vocab);
        for i in io.iter() {
            batch.extend_from_slice(&ob[i]);
        }
        for i in is.iter() {
            batch.extend_from_slice(&sb[i]);
        }
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, encoder.store(), true);
        let bags = g.constant(Tensor::new(vec![4, vocab], batch)?);
        let emb = encoder.forward(&mut g, &p, bags);
        let loss = contrastive_loss(&mut g, emb, config.temperature);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("contrastive loss became {value} at step {step}")));
        }
        losses.push(value);
        let grads = g.backward(loss).for_bound(&g, &p);
        opt.step(encoder.store_mut(), &grads);
    }
    Ok(FinetuneReport { losses })
}
