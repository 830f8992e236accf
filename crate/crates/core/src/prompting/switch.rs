use serde::{Deserialize, Serialize};

use super::{Embedding, TextEncoder};
use crate::error::{Error, Result};
use crate::imaging::TransparencyClass;

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(a.vector(), b.vector())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub anchor_opaque: String,
    pub anchor_semi_transparent: String,
    /// Semi-transparent is chosen when its probability strictly exceeds this.
    pub theta: f64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            anchor_opaque: "opaque obstacle".into(),
            anchor_semi_transparent: "semi-transparent obstacle".into(),
            theta: 0.5,
        }
    }
}

/// Outcome of the transparency switch with the numbers behind it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub class: TransparencyClass,
    pub sim_opaque: f64,
    pub sim_semi_transparent: f64,
    pub p_opaque: f64,
    pub p_semi_transparent: f64,
}

/// Embedded anchor texts.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub opaque: Embedding,
    pub semi_transparent: Embedding,
}

impl Anchors {
    pub fn embed(encoder: &dyn TextEncoder, config: &SwitchConfig) -> Result<Self> {
        Ok(Self {
            opaque: encoder.embed_text(&config.anchor_opaque)?,
            semi_transparent: encoder.embed_text(&config.anchor_semi_transparent)?,
        })
    }
}

/// Softmax over `(s_o, s_s)`; semi-transparent iff `p_s > θ`.
pub fn decide(sim_opaque: f64, sim_semi_transparent: f64, theta: f64) -> Result<SwitchDecision> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Parameter(format!("switch threshold {theta} must lie in (0, 1)")));
    }
    let p = softmax(&[sim_opaque, sim_semi_transparent]);
    let class = if p[1] > theta {
        TransparencyClass::SemiTransparent
    } else {
        TransparencyClass::Opaque
    };
    Ok(SwitchDecision {
        class,
        sim_opaque,
        sim_semi_transparent,
        p_opaque: p[0],
        p_semi_transparent: p[1],
    })
}

/// Classify an embedded instruction against the two anchors.
pub fn classify_transparency(instruction: &Embedding, anchors: &Anchors, theta: f64) -> Result<SwitchDecision> {
    let s_o = cosine_sim(instruction, &anchors.opaque)?;
    let s_s = cosine_sim(instruction, &anchors.semi_transparent)?;
    decide(s_o, s_s, theta)
}

/// Embed `text` and the anchors with `encoder`, then classify.
pub fn classify_text(text: &str, encoder: &dyn TextEncoder, config: &SwitchConfig) -> Result<SwitchDecision> {
    let anchors = Anchors::embed(encoder, config)?;
    classify_transparency(&encoder.embed_text(text)?, &anchors, config.theta)
}
