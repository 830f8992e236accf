//! Image and mask types, compositing, procedural obstructions and pair storage.

mod background;
mod compose;
pub(crate) mod geometry;
mod image;
mod io;
mod pair;
mod synth;

pub use background::procedural_background;
pub use compose::{compose, cutout};
pub use image::{AlphaMask, MaskKind, ObstructionKind, SceneImage, TransparencyClass, MIN_SIDE};
pub use io::{
    load_dataset, load_pair, read_image, read_mask, read_meta, save_pair, write_image, write_mask, PairMeta, StoredPair, PAIR_FORMAT_VERSION,
};
pub use pair::{ScenePair, COMPOSE_TOLERANCE};
pub use synth::{synth_fence, synth_pair, synth_soft, FenceParams, Lattice, SoftKind};
