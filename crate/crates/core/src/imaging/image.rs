use serde::{Deserialize, Serialize};

use super::geometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::Validation(format!(
            "image {width}x{height} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum"
        )));
    }
    Ok(())
}

fn check_unit_range(data: &[f64], what: &str) -> Result<()> {
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!(
            "{what} value {v} at index {i} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// RGB image with channel values in `[0, 1]`, stored planar (`[3][H][W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SceneImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        check_unit_range(&data, "pixel")?;
        Ok(Self { width, height, data })
    }

    /// Build from `f(x, y, channel)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _, c| rgb[c])
    }

    /// Clamp arbitrary finite values into range; rejects non-finite input.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value {v}")));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, data)
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Planar data, channel-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        [self.get(x, y, 0), self.get(x, y, 1), self.get(x, y, 2)]
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// `[3, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![3, self.height, self.width], self.data.clone())
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            geometry::flip_horizontal(&self.data, 3, self.width, self.height),
        )
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            geometry::flip_vertical(&self.data, 3, self.width, self.height),
        )
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Parameter(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        check_dims(width, height)?;
        Ok(Self::from_raw(
            width,
            height,
            geometry::crop(&self.data, 3, self.width, self.height, x0, y0, width, height),
        ))
    }

    /// Reflect-pad bottom/right so both sides become multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let nw = self.width.div_ceil(multiple) * multiple;
        let nh = self.height.div_ceil(multiple) * multiple;
        if (nw, nh) == (self.width, self.height) {
            return self.clone();
        }
        Self::from_raw(nw, nh, geometry::pad_reflect(&self.data, 3, self.width, self.height, nw, nh))
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let data = geometry::resize_bilinear(&self.data, 3, self.width, self.height, width, height);
        Self::from_clamped(width, height, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Hard,
    Soft,
}

/// Per-pixel occlusion weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
    kind: MaskKind,
}

impl AlphaMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>, kind: MaskKind) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        check_unit_range(&data, "mask")?;
        if kind == MaskKind::Hard {
            if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Validation(format!("hard mask holds non-binary value {v}")));
            }
        }
        Ok(Self {
            width,
            height,
            data,
            kind,
        })
    }

    pub fn soft(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(width, height, data, MaskKind::Soft)
    }

    pub fn hard(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(width, height, data, MaskKind::Hard)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            kind: MaskKind::Hard,
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
            kind: MaskKind::Hard,
        }
    }

    /// Soft mask from network activations; rejects non-finite values.
    pub fn from_activations(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite mask activation {v} at index {i}")));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::soft(width, height, data)
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>, kind: MaskKind) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
            kind,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Fraction of pixels at or above `threshold`.
    pub fn coverage(&self, threshold: f64) -> f64 {
        self.data.iter().filter(|v| **v >= threshold).count() as f64 / self.data.len() as f64
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.height, self.width], self.data.clone())
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            geometry::flip_horizontal(&self.data, 1, self.width, self.height),
            self.kind,
        )
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            geometry::flip_vertical(&self.data, 1, self.width, self.height),
            self.kind,
        )
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Parameter(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_raw(
            width,
            height,
            geometry::crop(&self.data, 1, self.width, self.height, x0, y0, width, height),
            self.kind,
        ))
    }

    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let nw = self.width.div_ceil(multiple) * multiple;
        let nh = self.height.div_ceil(multiple) * multiple;
        if (nw, nh) == (self.width, self.height) {
            return self.clone();
        }
        Self::from_raw(
            nw,
            nh,
            geometry::pad_reflect(&self.data, 1, self.width, self.height, nw, nh),
            self.kind,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransparencyClass {
    Opaque,
    SemiTransparent,
}

impl TransparencyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TransparencyClass::Opaque => "opaque",
            TransparencyClass::SemiTransparent => "semi_transparent",
        }
    }
}

impl std::fmt::Display for TransparencyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// What kind of obstruction a pair carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstructionKind {
    Fence,
    Raindrop,
    Flare,
    Stroke,
    RainStreak,
    Snow,
    Custom,
}

impl ObstructionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObstructionKind::Fence => "fence",
            ObstructionKind::Raindrop => "raindrop",
            ObstructionKind::Flare => "flare",
            ObstructionKind::Stroke => "stroke",
            ObstructionKind::RainStreak => "rain_streak",
            ObstructionKind::Snow => "snow",
            ObstructionKind::Custom => "custom",
        }
    }
}

impl std::fmt::Display for ObstructionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for ObstructionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fence" => ObstructionKind::Fence,
            "raindrop" => ObstructionKind::Raindrop,
            "flare" => ObstructionKind::Flare,
            "stroke" => ObstructionKind::Stroke,
            "rain_streak" => ObstructionKind::RainStreak,
            "snow" => ObstructionKind::Snow,
            "custom" => ObstructionKind::Custom,
            other => return Err(Error::Parameter(format!("unknown obstruction kind {other:?}"))),
        })
    }
}
