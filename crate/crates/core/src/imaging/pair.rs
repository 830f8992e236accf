use super::compose::compose;
use super::image::{AlphaMask, ObstructionKind, SceneImage, TransparencyClass};
use crate::error::{Error, Result};

/// Allowed per-channel deviation between the stored composite and `compose(B, R, M)`.
pub const COMPOSE_TOLERANCE: f64 = 1e-6;

/// A clean background, its obstruction layer and mask, and their composite.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    composite: SceneImage,
    background: SceneImage,
    obstruction: SceneImage,
    mask: AlphaMask,
    kind: ObstructionKind,
    transparency: TransparencyClass,
    seed: u64,
}

impl ScenePair {
    /// Validates dimensions and the compositing invariant.
    pub fn new(
        composite: SceneImage,
        background: SceneImage,
        obstruction: SceneImage,
        mask: AlphaMask,
        kind: ObstructionKind,
        transparency: TransparencyClass,
        seed: u64,
    ) -> Result<Self> {
        let expected = compose(&background, &obstruction, &mask)?;
        if composite.dims() != background.dims() {
            return Err(Error::Shape(format!(
                "composite is {}x{} but background is {}x{}",
                composite.width(),
                composite.height(),
                background.width(),
                background.height()
            )));
        }
        let worst = expected
            .data()
            .iter()
            .zip(composite.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if worst > COMPOSE_TOLERANCE {
            return Err(Error::Validation(format!(
                "composite deviates from compose(background, obstruction, mask) by {worst:e}"
            )));
        }
        Ok(Self {
            composite,
            background,
            obstruction,
            mask,
            kind,
            transparency,
            seed,
        })
    }

    /// Build a pair whose composite is computed from the components.
    pub fn from_components(
        background: SceneImage,
        obstruction: SceneImage,
        mask: AlphaMask,
        kind: ObstructionKind,
        transparency: TransparencyClass,
        seed: u64,
    ) -> Result<Self> {
        let composite = compose(&background, &obstruction, &mask)?;
        Ok(Self {
            composite,
            background,
            obstruction,
            mask,
            kind,
            transparency,
            seed,
        })
    }

    pub fn composite(&self) -> &SceneImage {
        &self.composite
    }

    pub fn background(&self) -> &SceneImage {
        &self.background
    }

    pub fn obstruction(&self) -> &SceneImage {
        &self.obstruction
    }

    pub fn mask(&self) -> &AlphaMask {
        &self.mask
    }

    pub fn kind(&self) -> ObstructionKind {
        self.kind
    }

    pub fn transparency(&self) -> TransparencyClass {
        self.transparency
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> (usize, usize) {
        self.composite.dims()
    }

    /// Apply the same geometric transform to all images and the mask.
    pub fn map_geometry(
        &self,
        image: impl Fn(&SceneImage) -> Result<SceneImage>,
        mask: impl Fn(&AlphaMask) -> Result<AlphaMask>,
    ) -> Result<Self> {
        Ok(Self {
            composite: image(&self.composite)?,
            background: image(&self.background)?,
            obstruction: image(&self.obstruction)?,
            mask: mask(&self.mask)?,
            kind: self.kind,
            transparency: self.transparency,
            seed: self.seed,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        self.map_geometry(|i| Ok(i.flip_horizontal()), |m| Ok(m.flip_horizontal()))
            .expect("flips are infallible")
    }

    pub fn flip_vertical(&self) -> Self {
        self.map_geometry(|i| Ok(i.flip_vertical()), |m| Ok(m.flip_vertical()))
            .expect("flips are infallible")
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        self.map_geometry(|i| i.crop(x0, y0, width, height), |m| m.crop(x0, y0, width, height))
    }

    /// Largest per-channel deviation from the compositing identity.
    pub fn compose_residual(&self) -> f64 {
        let expected = compose(&self.background, &self.obstruction, &self.mask).expect("dims validated");
        expected
            .data()
            .iter()
            .zip(self.composite.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
