use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ScenePair, SceneImage};
use crate::prompting::Instruction;

/// One training example; without an instruction the trainer draws one from
/// the corpus category matching the pair's transparency class.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub pair: ScenePair,
    pub instruction: Option<Instruction>,
}

impl TrainSample {
    pub fn new(pair: ScenePair) -> Self {
        Self { pair, instruction: None }
    }

    pub fn with_instruction(pair: ScenePair, instruction: Instruction) -> Self {
        Self {
            pair,
            instruction: Some(instruction),
        }
    }
}

/// Flips applied by [`augment`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Random horizontal and vertical flips, each with probability `flip_prob`,
/// applied identically to every image of the pair and to its mask.
pub fn augment<R: Rng + ?Sized>(pair: &ScenePair, flip_prob: f64, rng: &mut R) -> Result<(ScenePair, Flips)> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Parameter(format!("flip_prob {flip_prob} outside [0, 1]")));
    }
    let flips = Flips {
        horizontal: rng.random::<f64>() < flip_prob,
        vertical: rng.random::<f64>() < flip_prob,
    };
    let mut out = pair.clone();
    if flips.horizontal {
        out = out.flip_horizontal();
    }
    if flips.vertical {
        out = out.flip_vertical();
    }
    Ok((out, flips))
}

/// Uniformly placed square crop of side `size`; returns the crop and its
/// top-left corner.
pub fn crop_patch<R: Rng + ?Sized>(pair: &ScenePair, size: usize, rng: &mut R) -> Result<(ScenePair, (usize, usize))> {
    let (w, h) = pair.dims();
    if size == 0 || size > w || size > h {
        return Err(Error::Parameter(format!("patch size {size} does not fit a {w}x{h} pair")));
    }
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    Ok((pair.crop(x0, y0, size, size)?, (x0, y0)))
}

/// Mean absolute difference between restoration and clean background.
pub fn l1_objective(restored: &SceneImage, background: &SceneImage) -> Result<f64> {
    if restored.dims() != background.dims() {
        return Err(Error::Shape(format!(
            "restored {:?} vs background {:?}",
            restored.dims(),
            background.dims()
        )));
    }
    let n = restored.data().len() as f64;
    Ok(restored
        .data()
        .iter()
        .zip(background.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}
