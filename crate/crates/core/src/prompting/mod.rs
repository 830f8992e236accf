//! Text and image embeddings, the multi-modal prompt, the transparency
//! switch and contrastive fine-tuning of the text tower.

mod corpus;
mod finetune;
mod switch;
mod text;
mod visual;

pub use corpus::{Instruction, InstructionCorpus};
pub use finetune::{finetune_text_encoder, FinetuneConfig, FinetuneReport};
pub use switch::{classify_text, classify_transparency, cosine, cosine_sim, decide, softmax, Anchors, SwitchConfig, SwitchDecision};
pub use text::{tokenize, TextEncoderConfig, ToyTextEncoder};
pub use visual::{ToyVisualEncoder, VisualEncoderConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::SceneImage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Text,
    Visual,
}

/// A finite embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
    source: EmbeddingSource,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Shape("embedding has no components".into()));
        }
        if let Some(v) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding component {v}")));
        }
        Ok(Self { vector, source })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Copy scaled by a constant.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.vector.iter().map(|v| v * k).collect(), self.source)
    }
}

/// Maps instruction text to an embedding.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

/// Maps a whole image to an embedding.
pub trait VisualEncoder {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &SceneImage) -> Result<Embedding>;
}

pub fn embed_text(instruction: &Instruction, encoder: &dyn TextEncoder) -> Result<Embedding> {
    encoder.embed_text(instruction.text())
}

pub fn embed_image(image: &SceneImage, encoder: &dyn VisualEncoder) -> Result<Embedding> {
    encoder.embed_image(image)
}

/// Prompt tokens `[L, d]`: text token first, then the visual token.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalPrompt {
    tokens: Tensor,
}

impl MultiModalPrompt {
    pub fn from_embeddings(parts: &[&Embedding]) -> Result<Self> {
        let d = parts.first().ok_or_else(|| Error::Shape("prompt needs at least one token".into()))?.dim();
        if let Some(p) = parts.iter().find(|p| p.dim() != d) {
            return Err(Error::Shape(format!("prompt token of dim {} among dim {d}", p.dim())));
        }
        let data = parts.iter().flat_map(|p| p.vector().iter().copied()).collect();
        Ok(Self {
            tokens: Tensor::new(vec![parts.len(), d], data)?,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

/// `[Γ_t(T); Γ_v(I)]` as a two-token sequence.
pub fn build_prompt(
    instruction: &Instruction,
    image: &SceneImage,
    text: &dyn TextEncoder,
    visual: &dyn VisualEncoder,
) -> Result<MultiModalPrompt> {
    let t = embed_text(instruction, text)?;
    let v = embed_image(image, visual)?;
    MultiModalPrompt::from_embeddings(&[&t, &v])
}

/// The default self-contained encoder pair.
#[derive(Clone, Debug)]
pub struct PromptEncoders {
    pub text: ToyTextEncoder,
    pub visual: ToyVisualEncoder,
}

impl PromptEncoders {
    pub fn new(text: TextEncoderConfig, visual: VisualEncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            text: ToyTextEncoder::new(text, seed)?,
            visual: ToyVisualEncoder::new(visual, seed.wrapping_add(1))?,
        })
    }

    pub fn build_prompt(&self, instruction: &Instruction, image: &SceneImage) -> Result<MultiModalPrompt> {
        build_prompt(instruction, image, &self.text, &self.visual)
    }
}
