use crate::error::{Error, Result};
use crate::imaging::{AlphaMask, SceneImage};
use crate::mask::{binarize, DEFAULT_TAU};

/// Value returned for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &SceneImage, b: &SceneImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "reference is {}x{} but test image is {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(reference: &SceneImage, test: &SceneImage) -> Result<f64> {
    same_dims(reference, test)?;
    let n = reference.data().len() as f64;
    Ok(reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10·log₁₀(1 / MSE)` with peak 1, capped at `cap` dB.
pub fn psnr_capped(reference: &SceneImage, test: &SceneImage, cap: f64) -> Result<f64> {
    let e = mse(reference, test)?;
    if e == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / e).log10()).min(cap))
}

pub fn psnr(reference: &SceneImage, test: &SceneImage) -> Result<f64> {
    psnr_capped(reference, test, PSNR_CAP)
}

/// Normalized 1-D Gaussian window of [`SSIM_WINDOW`] taps.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filter: `(w−10) x (h−10)` output.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on Rec. 601 luminance, averaged over the valid map.
pub fn ssim(reference: &SceneImage, test: &SceneImage) -> Result<f64> {
    same_dims(reference, test)?;
    let (w, h) = reference.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let x = reference.luminance();
    let y = test.luminance();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let k = ssim_window();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// IoU of masks binarized at `tau`; two empty masks score 1.
pub fn mask_iou_at(pred: &AlphaMask, gt: &AlphaMask, tau: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "predicted mask is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let a = binarize(pred, tau)?;
    let b = binarize(gt, tau)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, q) in a.data().iter().zip(b.data()) {
        let (p, q) = (*p == 1.0, *q == 1.0);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mask_iou(pred: &AlphaMask, gt: &AlphaMask) -> Result<f64> {
    mask_iou_at(pred, gt, DEFAULT_TAU)
}

/// A full-reference image metric (slot for perceptual metrics).
pub trait ImageMetric {
    fn name(&self) -> &str;
    fn compute(&self, reference: &SceneImage, test: &SceneImage) -> Result<f64>;
}

pub struct Psnr;

impl ImageMetric for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn compute(&self, reference: &SceneImage, test: &SceneImage) -> Result<f64> {
        psnr(reference, test)
    }
}

pub struct Ssim;

impl ImageMetric for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }

    fn compute(&self, reference: &SceneImage, test: &SceneImage) -> Result<f64> {
        ssim(reference, test)
    }
}
