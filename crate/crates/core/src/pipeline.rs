//! End-to-end inference: detect, switch, resolve, cut out, prompt, restore.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::Restorer;
use crate::imaging::{cutout, AlphaMask, SceneImage, TransparencyClass};
use crate::mask::resolve_mask;
use crate::model::ModelBundle;
use crate::prompting::{classify_transparency, embed_image, embed_text, Anchors, Instruction, MultiModalPrompt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub detect_ms: f64,
    pub prompt_ms: f64,
    pub resolve_ms: f64,
    pub remove_ms: f64,
    pub total_ms: f64,
}

/// What happened during one inference call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub instruction: String,
    pub class: TransparencyClass,
    pub sim_opaque: f64,
    pub sim_semi_transparent: f64,
    pub p_opaque: f64,
    pub p_semi_transparent: f64,
    pub adapter_ran: bool,
    pub mask_override: bool,
    pub initial_mask_mean: f64,
    pub mask_mean: f64,
    /// Fraction of pixels at or above the binarization threshold.
    pub mask_coverage: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl InferenceTrace {
    /// JSON sidecar; wall-clock timings only when asked, so traces of
    /// identical runs compare equal byte for byte.
    pub fn to_json(&self, with_timings: bool) -> String {
        let mut t = self.clone();
        if !with_timings {
            t.timings = None;
        }
        serde_json::to_string_pretty(&t).expect("trace serializes")
    }
}

/// Restored image, the masks used and the trace.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub image: SceneImage,
    pub mask: AlphaMask,
    pub initial_mask: AlphaMask,
    pub trace: InferenceTrace,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Run the full pipeline on one image. `override_mask` replaces the detector output.
pub fn infer(
    model: &ModelBundle,
    image: &SceneImage,
    instruction: &Instruction,
    override_mask: Option<&AlphaMask>,
) -> Result<InferenceOutput> {
    let start = Instant::now();
    let cfg = &model.config;

    let t = Instant::now();
    let detected = match override_mask {
        Some(_) => None,
        None => Some(model.detector.detect_mask(image)?),
    };
    let detect_ms = ms(t);

    let t = Instant::now();
    let text = embed_text(instruction, &model.encoders.text)?;
    let visual = embed_image(image, &model.encoders.visual)?;
    let anchors = Anchors::embed(&model.encoders.text, &cfg.switch)?;
    let decision = classify_transparency(&text, &anchors, cfg.switch.theta)?;
    let mode = cfg.routing.apply(decision.class);
    let prompt_ms = ms(t);

    let t = Instant::now();
    let initial_source = override_mask.or(detected.as_ref());
    let resolved = resolve_mask(
        image,
        mode,
        &model.detector,
        &model.adapter,
        initial_source,
        cfg.tau,
    )?;
    let resolve_ms = ms(t);

    let t = Instant::now();
    let prompt = MultiModalPrompt::from_embeddings(&[&text, &visual])?;
    let cut = cutout(image, &resolved.mask)?;
    let restored = model.removal.remove(&cut, &resolved.mask, &prompt)?;
    let remove_ms = ms(t);

    let trace = InferenceTrace {
        instruction: instruction.text().to_owned(),
        class: mode,
        sim_opaque: decision.sim_opaque,
        sim_semi_transparent: decision.sim_semi_transparent,
        p_opaque: decision.p_opaque,
        p_semi_transparent: decision.p_semi_transparent,
        adapter_ran: resolved.adapter_ran,
        mask_override: override_mask.is_some(),
        initial_mask_mean: resolved.initial.mean(),
        mask_mean: resolved.mask.mean(),
        mask_coverage: resolved.mask.coverage(cfg.tau),
        tau: cfg.tau,
        timings: Some(Timings {
            detect_ms,
            prompt_ms,
            resolve_ms,
            remove_ms,
            total_ms: ms(start),
        }),
    };
    Ok(InferenceOutput {
        image: restored,
        mask: resolved.mask,
        initial_mask: resolved.initial,
        trace,
    })
}

impl Restorer for ModelBundle {
    fn restore(&self, image: &SceneImage, instruction: &Instruction) -> Result<SceneImage> {
        Ok(infer(self, image, instruction, None)?.image)
    }
}
