//! Initial mask detection, soft-mask adaptation and per-mode resolution.

mod adapter;
mod detector;

pub use adapter::{AdapterConfig, AdapterForward, SoftMaskAdapter};
pub use detector::{DetectorConfig, UNetDetector};

use crate::error::{Error, Result};
use crate::imaging::{AlphaMask, MaskKind, SceneImage, TransparencyClass};

/// Default binarization threshold for the hard path.
pub const DEFAULT_TAU: f64 = 0.5;

/// Produces an initial soft mask from an obstructed image.
pub trait MaskDetector {
    fn detect(&self, image: &SceneImage) -> Result<AlphaMask>;
}

/// Refines an initial mask into a soft mask.
pub trait MaskAdapter {
    fn adapt(&self, initial: &AlphaMask) -> Result<AlphaMask>;
}

/// `v ≥ τ ↦ 1`, else `0`.
pub fn binarize(mask: &AlphaMask, tau: f64) -> Result<AlphaMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!("binarization threshold {tau} must lie in (0, 1)")));
    }
    let data = mask.data().iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    AlphaMask::hard(mask.width(), mask.height(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedMask {
    /// Mask handed to cutout and the removal network.
    pub mask: AlphaMask,
    /// Detector output, or the override when one was supplied.
    pub initial: AlphaMask,
    pub adapter_ran: bool,
}

/// Hard path binarizes the initial mask; soft path runs the adapter on it.
pub fn resolve_mask(
    image: &SceneImage,
    mode: TransparencyClass,
    detector: &dyn MaskDetector,
    adapter: &dyn MaskAdapter,
    override_mask: Option<&AlphaMask>,
    tau: f64,
) -> Result<ResolvedMask> {
    let initial = match override_mask {
        Some(m) => {
            if m.dims() != image.dims() {
                return Err(Error::Shape(format!(
                    "override mask is {}x{} but image is {}x{}",
                    m.width(),
                    m.height(),
                    image.width(),
                    image.height()
                )));
            }
            m.clone()
        }
        None => detector.detect(image)?,
    };
    let (mask, adapter_ran) = match mode {
        TransparencyClass::Opaque => (binarize(&initial, tau)?, false),
        TransparencyClass::SemiTransparent => {
            let adapted = adapter.adapt(&initial)?;
            let adapted = if adapted.kind() == MaskKind::Soft {
                adapted
            } else {
                AlphaMask::soft(adapted.width(), adapted.height(), adapted.data().to_vec())?
            };
            (adapted, true)
        }
    };
    Ok(ResolvedMask {
        mask,
        initial,
        adapter_ran,
    })
}
