//! Spatial transforms over planar `[planes][H][W]` buffers, shared by
//! images and masks.

/// Mirror an out-of-range coordinate back into `0..n` without repeating the
/// edge sample (numpy/pytorch "reflect").
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

pub(crate) fn flip_horizontal(data: &[f64], planes: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..planes {
        for y in 0..h {
            let row = (p * h + y) * w;
            for x in 0..w {
                out[row + x] = data[row + w - 1 - x];
            }
        }
    }
    out
}

pub(crate) fn flip_vertical(data: &[f64], planes: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..planes {
        for y in 0..h {
            let dst = (p * h + y) * w;
            let src = (p * h + h - 1 - y) * w;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn crop(
    data: &[f64],
    planes: usize,
    w: usize,
    h: usize,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
) -> Vec<f64> {
    assert!(x0 + cw <= w && y0 + ch <= h, "crop window outside image");
    let mut out = Vec::with_capacity(planes * cw * ch);
    for p in 0..planes {
        for y in y0..y0 + ch {
            let row = (p * h + y) * w;
            out.extend_from_slice(&data[row + x0..row + x0 + cw]);
        }
    }
    out
}

/// Reflect-pad on the bottom/right edges to `(nw, nh)`.
pub(crate) fn pad_reflect(data: &[f64], planes: usize, w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    assert!(nw >= w && nh >= h, "pad target smaller than input");
    let mut out = Vec::with_capacity(planes * nw * nh);
    for p in 0..planes {
        for y in 0..nh {
            let sy = reflect(y as isize, h);
            let row = (p * h + sy) * w;
            for x in 0..nw {
                out.push(data[row + reflect(x as isize, w)]);
            }
        }
    }
    out
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`).
pub(crate) fn resize_bilinear(data: &[f64], planes: usize, w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = Vec::with_capacity(planes * nw * nh);
    for p in 0..planes {
        let plane = &data[p * w * h..(p + 1) * w * h];
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Normalised 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur of a single plane with reflected borders.
pub(crate) fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - r, w);
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - r, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}
