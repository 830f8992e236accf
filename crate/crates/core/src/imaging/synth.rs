use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::background::procedural_background;
use super::geometry::gaussian_blur;
use super::image::{AlphaMask, MaskKind, ObstructionKind, SceneImage, TransparencyClass};
use super::pair::ScenePair;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lattice {
    /// Parallel bars along one direction.
    Single,
    /// Bars along both rotated axes.
    #[default]
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FenceParams {
    pub bar_width: usize,
    pub spacing: usize,
    /// Rotation of the lattice in degrees.
    pub angle: f64,
    pub color: [f64; 3],
    /// Standard deviation of per-pixel noise added to the fence color.
    pub noise: f64,
    pub lattice: Lattice,
}

impl Default for FenceParams {
    fn default() -> Self {
        Self {
            bar_width: 2,
            spacing: 10,
            angle: 0.0,
            color: [0.55, 0.5, 0.45],
            noise: 0.0,
            lattice: Lattice::Double,
        }
    }
}

/// Opaque fence lattice over `background`; the mask is hard.
pub fn synth_fence(background: &SceneImage, params: &FenceParams, seed: u64) -> Result<ScenePair> {
    if params.bar_width < 1 {
        return Err(Error::Parameter("fence bar_width must be at least 1".into()));
    }
    if params.spacing <= params.bar_width {
        return Err(Error::Parameter(format!(
            "fence spacing {} must exceed bar_width {}",
            params.spacing, params.bar_width
        )));
    }
    if !params.angle.is_finite() || !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(Error::Parameter("fence angle and noise must be finite, noise non-negative".into()));
    }
    if params.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Parameter(format!("fence color {:?} outside [0, 1]", params.color)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = params.spacing as f64;
    let bar = params.bar_width as f64;
    let off_u = rng.random_range(0..params.spacing) as f64;
    let off_v = rng.random_range(0..params.spacing) as f64;
    let (sin, cos) = params.angle.to_radians().sin_cos();
    let (w, h) = background.dims();

    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let u = xf * cos + yf * sin;
            let v = -xf * sin + yf * cos;
            let on_u = (u - off_u).rem_euclid(spacing) < bar;
            let on_v = params.lattice == Lattice::Double && (v - off_v).rem_euclid(spacing) < bar;
            mask.push(if on_u || on_v { 1.0 } else { 0.0 });
        }
    }
    let mask = AlphaMask::from_raw(w, h, mask, MaskKind::Hard);

    let noise = Normal::new(0.0, params.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut layer = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for _ in 0..w * h {
            let n = if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            layer.push((params.color[c] + n).clamp(0.0, 1.0));
        }
    }
    let obstruction = SceneImage::from_raw(w, h, layer);
    ScenePair::from_components(
        background.clone(),
        obstruction,
        mask,
        ObstructionKind::Fence,
        TransparencyClass::Opaque,
        seed,
    )
}

/// Semi-transparent obstruction families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftKind {
    Raindrop,
    Flare,
    Snow,
    RainStreak,
}

impl SoftKind {
    pub fn obstruction_kind(self) -> ObstructionKind {
        match self {
            SoftKind::Raindrop => ObstructionKind::Raindrop,
            SoftKind::Flare => ObstructionKind::Flare,
            SoftKind::Snow => ObstructionKind::Snow,
            SoftKind::RainStreak => ObstructionKind::RainStreak,
        }
    }
}

impl std::str::FromStr for SoftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raindrop" => Ok(SoftKind::Raindrop),
            "flare" => Ok(SoftKind::Flare),
            "snow" => Ok(SoftKind::Snow),
            "rain_streak" => Ok(SoftKind::RainStreak),
            other => Err(Error::Parameter(format!(
                "unknown soft obstruction kind {other:?} (expected raindrop, flare, snow or rain_streak)"
            ))),
        }
    }
}

fn stamp_disk(plane: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, r: f64, value: f64) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            if d2 <= r * r {
                let p = &mut plane[y * w + x];
                *p = p.max(value);
            }
        }
    }
}

fn stamp_segment(plane: &mut [f64], w: usize, h: usize, from: (f64, f64), to: (f64, f64), half_width: f64, value: f64) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    let x0 = (from.0.min(to.0) - half_width).floor().max(0.0) as usize;
    let y0 = (from.1.min(to.1) - half_width).floor().max(0.0) as usize;
    let x1 = ((from.0.max(to.0) + half_width).ceil().max(0.0) as usize).min(w - 1);
    let y1 = ((from.1.max(to.1) + half_width).ceil().max(0.0) as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - from.0) * dx + (py - from.1) * dy) / len2).clamp(0.0, 1.0);
            let d2 = (px - from.0 - t * dx).powi(2) + (py - from.1 - t * dy).powi(2);
            if d2 <= half_width * half_width {
                let p = &mut plane[y * w + x];
                *p = p.max(value);
            }
        }
    }
}

/// Soft, Gaussian-feathered obstruction over `background`.
///
/// The unfeathered shapes depend only on `(kind, density, seed)`, so the same
/// seed at a larger `feather_sigma` yields a strictly smoother mask.
pub fn synth_soft(
    background: &SceneImage,
    kind: SoftKind,
    density: f64,
    feather_sigma: f64,
    seed: u64,
) -> Result<ScenePair> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Parameter(format!("density {density} must lie in (0, 1]")));
    }
    if !(feather_sigma > 0.0 && feather_sigma.is_finite()) {
        return Err(Error::Parameter(format!("feather_sigma {feather_sigma} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = background.dims();
    let (wf, hf) = (w as f64, h as f64);
    let area = wf * hf;
    let mut base = vec![0.0; w * h];
    let mut layer = vec![0.0; 3 * w * h];
    let bg = background.data();

    match kind {
        SoftKind::Raindrop => {
            let count = ((density * area / 120.0).ceil() as usize).max(1);
            for _ in 0..count {
                let cx = rng.random_range(0.0..wf);
                let cy = rng.random_range(0.0..hf);
                let r = rng.random_range(2.0..(wf.min(hf) / 10.0).max(3.0));
                let peak = rng.random_range(0.55..0.9);
                stamp_disk(&mut base, w, h, cx, cy, r, peak);
            }
            // Drops refract a brightened, washed-out copy of the scene.
            for (i, v) in layer.iter_mut().enumerate() {
                *v = (0.45 * bg[i] + 0.5).clamp(0.0, 1.0);
            }
        }
        SoftKind::Flare => {
            let cx = rng.random_range(0.2 * wf..0.8 * wf);
            let cy = rng.random_range(0.2 * hf..0.8 * hf);
            let radius = wf.max(hf) * (0.15 + 0.35 * density);
            let peak = rng.random_range(0.7..0.95);
            let tint = [1.0, rng.random_range(0.8..0.95), rng.random_range(0.55..0.8)];
            for y in 0..h {
                for x in 0..w {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt() / radius;
                    base[y * w + x] = peak * (1.0 - d).max(0.0).powf(1.5);
                    for c in 0..3 {
                        layer[(c * h + y) * w + x] = (tint[c] * (1.0 - 0.25 * d.min(1.0))).clamp(0.0, 1.0);
                    }
                }
            }
        }
        SoftKind::Snow => {
            let count = ((density * area / 40.0).ceil() as usize).max(1);
            for _ in 0..count {
                let cx = rng.random_range(0.0..wf);
                let cy = rng.random_range(0.0..hf);
                let r = rng.random_range(0.7..1.8);
                let peak = rng.random_range(0.6..0.95);
                stamp_disk(&mut base, w, h, cx, cy, r, peak);
            }
            layer.iter_mut().for_each(|v| *v = 0.96);
        }
        SoftKind::RainStreak => {
            let count = ((density * area / 60.0).ceil() as usize).max(1);
            let angle = rng.random_range(-25.0f64..25.0).to_radians();
            for _ in 0..count {
                let cx = rng.random_range(0.0..wf);
                let cy = rng.random_range(0.0..hf);
                let len = rng.random_range(6.0..14.0);
                let a = angle + rng.random_range(-0.08..0.08);
                let (dx, dy) = (a.sin() * len / 2.0, a.cos() * len / 2.0);
                let peak = rng.random_range(0.4..0.75);
                stamp_segment(&mut base, w, h, (cx - dx, cy - dy), (cx + dx, cy + dy), 0.6, peak);
            }
            layer.iter_mut().for_each(|v| *v = 0.85);
        }
    }

    let mut alpha = gaussian_blur(&base, w, h, feather_sigma);
    for v in &mut alpha {
        *v = v.clamp(0.0, 1.0);
    }
    let mask = AlphaMask::from_raw(w, h, alpha, MaskKind::Soft);
    let obstruction = SceneImage::from_raw(w, h, layer);
    ScenePair::from_components(
        background.clone(),
        obstruction,
        mask,
        kind.obstruction_kind(),
        TransparencyClass::SemiTransparent,
        seed,
    )
}

/// One randomized pair of `kind` on a procedural background. Fence
/// geometry, soft-layer density and feathering all vary with `seed`.
pub fn synth_pair(kind: ObstructionKind, width: usize, height: usize, seed: u64) -> Result<ScenePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = procedural_background(width, height, rng.random())?;
    let layer_seed = rng.random();
    let soft = match kind {
        ObstructionKind::Fence => {
            let shade = rng.random_range(0.35..0.7);
            let params = FenceParams {
                bar_width: rng.random_range(2..=3),
                spacing: rng.random_range(8..=12),
                angle: rng.random_range(-20.0..20.0),
                color: [shade + 0.05, shade, shade - 0.05],
                noise: 0.02,
                lattice: Lattice::Double,
            };
            return synth_fence(&background, &params, layer_seed);
        }
        ObstructionKind::Raindrop => SoftKind::Raindrop,
        ObstructionKind::Flare => SoftKind::Flare,
        ObstructionKind::Snow => SoftKind::Snow,
        ObstructionKind::RainStreak => SoftKind::RainStreak,
        other => {
            return Err(Error::Parameter(format!("no synthesizer for obstruction kind {other}")));
        }
    };
    let density = rng.random_range(0.2..0.45);
    let sigma = rng.random_range(1.0..2.0);
    synth_soft(&background, soft, density, sigma, layer_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::procedural_background;

    fn bg(w: usize, h: usize) -> SceneImage {
        procedural_background(w, h, 11).unwrap()
    }

    #[test]
    fn fence_rejects_bad_spacing() {
        let p = FenceParams {
            spacing: 2,
            ..FenceParams::default()
        };
        assert!(matches!(synth_fence(&bg(16, 16), &p, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn fence_is_hard_and_opaque() {
        let p = synth_fence(&bg(32, 32), &FenceParams::default(), 5).unwrap();
        assert_eq!(p.mask().kind(), MaskKind::Hard);
        assert_eq!(p.transparency(), TransparencyClass::Opaque);
        assert!(p.compose_residual() < 1e-12);
    }

    #[test]
    fn soft_kinds_parse_and_reject_unknown() {
        assert_eq!("rain_streak".parse::<SoftKind>().unwrap(), SoftKind::RainStreak);
        assert!(matches!("fence".parse::<SoftKind>(), Err(Error::Parameter(_))));
    }

    #[test]
    fn every_soft_kind_is_soft() {
        for kind in [SoftKind::Raindrop, SoftKind::Flare, SoftKind::Snow, SoftKind::RainStreak] {
            let p = synth_soft(&bg(48, 40), kind, 0.5, 1.5, 9).unwrap();
            assert!(p.mask().data().iter().any(|v| *v > 0.0 && *v < 1.0), "{kind:?}");
            assert!(p.mask().data().iter().all(|v| *v <= 1.0));
            assert_eq!(p.transparency(), TransparencyClass::SemiTransparent);
            assert!(p.compose_residual() < 1e-12);
        }
    }
}
