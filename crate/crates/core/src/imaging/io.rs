use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::compose::compose;
use super::image::{AlphaMask, MaskKind, ObstructionKind, SceneImage, TransparencyClass};
use super::pair::ScenePair;
use crate::error::{Error, Result};

pub const PAIR_FORMAT_VERSION: u32 = 1;

const COMPOSITE: &str = "composite.png";
const BACKGROUND: &str = "background.png";
const OBSTRUCTION: &str = "obstruction.png";
const MASK: &str = "mask.png";
const META: &str = "meta.json";

/// Sidecar describing a stored pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub format_version: u32,
    pub kind: ObstructionKind,
    pub transparency: TransparencyClass,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub mask_kind: MaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_rgb(path: &Path, img: &SceneImage) -> Result<()> {
    let (w, h) = img.dims();
    let mut buf = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            buf.extend(img.pixel(x, y).map(quantize));
        }
    }
    let out = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    out.save(path)
        .map_err(|e| Error::Load(format!("writing {}: {e}", path.display())))
}

fn write_gray(path: &Path, mask: &AlphaMask) -> Result<()> {
    let (w, h) = mask.dims();
    let buf = mask.data().iter().map(|v| quantize(*v)).collect();
    let out = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to mask");
    out.save(path)
        .map_err(|e| Error::Load(format!("writing {}: {e}", path.display())))
}

/// Read an 8-bit RGB image file as a `SceneImage`.
pub fn read_image(path: &Path) -> Result<SceneImage> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    SceneImage::new(w, h, data).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

/// Write a `SceneImage` as an 8-bit RGB file.
pub fn write_image(path: &Path, img: &SceneImage) -> Result<()> {
    write_rgb(path, img)
}

/// Read an 8-bit grayscale file as a mask of the given kind.
pub fn read_mask(path: &Path, kind: MaskKind) -> Result<AlphaMask> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("reading {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    AlphaMask::new(w, h, data, kind).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

pub fn write_mask(path: &Path, mask: &AlphaMask) -> Result<()> {
    write_gray(path, mask)
}

/// Write the four images and the metadata sidecar into `dir`, creating it if needed.
pub fn save_pair(dir: &Path, pair: &ScenePair, instruction: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb(&dir.join(COMPOSITE), pair.composite())?;
    write_rgb(&dir.join(BACKGROUND), pair.background())?;
    write_rgb(&dir.join(OBSTRUCTION), pair.obstruction())?;
    write_gray(&dir.join(MASK), pair.mask())?;
    let (width, height) = pair.dims();
    let meta = PairMeta {
        format_version: PAIR_FORMAT_VERSION,
        kind: pair.kind(),
        transparency: pair.transparency(),
        seed: pair.seed(),
        width,
        height,
        mask_kind: pair.mask().kind(),
        instruction: instruction.map(str::to_owned),
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    let path = dir.join(META);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// A pair read back from disk, named after its directory.
#[derive(Clone, Debug)]
pub struct StoredPair {
    pub name: String,
    pub pair: ScenePair,
    pub meta: PairMeta,
}

/// Load every pair directory (one holding a metadata file) directly under
/// `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<StoredPair>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(META).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Load(format!("no pair directories under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            Ok(StoredPair {
                name: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                pair: load_pair(d)?,
                meta: read_meta(d)?,
            })
        })
        .collect()
}

pub fn read_meta(dir: &Path) -> Result<PairMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load(format!("reading {}: {e}", path.display())))?;
    let meta: PairMeta =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("corrupt metadata {}: {e}", path.display())))?;
    if meta.format_version != PAIR_FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{} has format_version {}, expected {PAIR_FORMAT_VERSION}",
            path.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Load a pair directory.
///
/// The composite is recomputed from the quantized components so the loaded
/// pair satisfies the compositing invariant exactly; the stored composite must
/// agree with it to within two quantization steps.
pub fn load_pair(dir: &Path) -> Result<ScenePair> {
    let meta = read_meta(dir)?;
    let stored = read_image(&dir.join(COMPOSITE))?;
    let background = read_image(&dir.join(BACKGROUND))?;
    let obstruction = read_image(&dir.join(OBSTRUCTION))?;
    let mask = read_mask(&dir.join(MASK), meta.mask_kind)?;
    for (name, dims) in [
        (COMPOSITE, stored.dims()),
        (BACKGROUND, background.dims()),
        (OBSTRUCTION, obstruction.dims()),
        (MASK, mask.dims()),
    ] {
        if dims != (meta.width, meta.height) {
            return Err(Error::Load(format!(
                "{}: {name} is {}x{} but metadata says {}x{}",
                dir.display(),
                dims.0,
                dims.1,
                meta.width,
                meta.height
            )));
        }
    }
    let composite = compose(&background, &obstruction, &mask)?;
    let worst = composite
        .data()
        .iter()
        .zip(stored.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if worst > 2.0 / 255.0 + 1e-12 {
        return Err(Error::Load(format!(
            "{}: stored composite disagrees with its components by {worst:.4}",
            dir.display()
        )));
    }
    ScenePair::new(
        composite,
        background,
        obstruction,
        mask,
        meta.kind,
        meta.transparency,
        meta.seed,
    )
}
