use super::image::{AlphaMask, SceneImage};
use crate::error::{Error, Result};

fn check_same(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}x{} does not match {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// `B·(1−M) + R·M` per channel.
pub fn compose(background: &SceneImage, obstruction: &SceneImage, mask: &AlphaMask) -> Result<SceneImage> {
    check_same("compose obstruction", obstruction.dims(), background.dims())?;
    check_same("compose mask", mask.dims(), background.dims())?;
    let n = mask.data().len();
    let m = mask.data();
    let mut out = Vec::with_capacity(3 * n);
    for c in 0..3 {
        let b = background.channel(c);
        let r = obstruction.channel(c);
        for i in 0..n {
            out.push((b[i] * (1.0 - m[i]) + r[i] * m[i]).clamp(0.0, 1.0));
        }
    }
    Ok(SceneImage::from_raw(background.width(), background.height(), out))
}

/// Attenuate masked content to zero: `I·(1−M)`.
pub fn cutout(image: &SceneImage, mask: &AlphaMask) -> Result<SceneImage> {
    check_same("cutout mask", mask.dims(), image.dims())?;
    let m = mask.data();
    let n = m.len();
    let out = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 - m[i % n]))
        .collect();
    Ok(SceneImage::from_raw(image.width(), image.height(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_arithmetic() {
        let b = SceneImage::filled(8, 8, [0.2; 3]).unwrap();
        let r = SceneImage::filled(8, 8, [0.8; 3]).unwrap();
        let m = AlphaMask::soft(8, 8, vec![0.5; 64]).unwrap();
        let c = compose(&b, &r, &m).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let cut = cutout(&r, &m).unwrap();
        assert!(cut.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn mismatched_dims_are_shape_errors() {
        let b = SceneImage::filled(8, 8, [0.2; 3]).unwrap();
        let r = SceneImage::filled(9, 8, [0.8; 3]).unwrap();
        let m = AlphaMask::zeros(8, 8);
        assert!(matches!(compose(&b, &r, &m), Err(Error::Shape(_))));
        assert!(matches!(cutout(&r, &m), Err(Error::Shape(_))));
    }
}
