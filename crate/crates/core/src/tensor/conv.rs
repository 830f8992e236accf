/// Geometry of a 2-D convolution over a `[C, H, W]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel,
            "convolution window larger than padded input"
        );
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold `[c, h, w]` into `[c*k*k, ho*wo]` with zero padding.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, spec: &ConvSpec) -> Vec<f64> {
    let (ho, wo) = spec.output_hw(h, w);
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut col = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im(col: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, spec: &ConvSpec) {
    let (ho, wo) = spec.output_hw(h, w);
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution: one `k x k` filter per channel.
pub(crate) fn depthwise_forward(
    x: &[f64],
    weight: &[f64],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
) -> Vec<f64> {
    let (ho, wo) = spec.output_hw(h, w);
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let filt = &weight[ci * k * k..(ci + 1) * k * k];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let wv = filt[ky * k + kx];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        // contiguous span of valid output columns
                        let lo = (p - kx as isize).max(0) as usize;
                        let hi = ((w as isize + p - kx as isize).min(wo as isize)).max(0) as usize;
                        for ox in lo..hi {
                            dst_row[ox] += wv * src_row[(ox as isize + kx as isize - p) as usize];
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise_forward`] with respect to input and weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
) {
    let (ho, wo) = spec.output_hw(h, w);
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut dx = dx;
    let mut dw = dw;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let filt = &weight[ci * k * k..(ci + 1) * k * k];
        let g = &dy[ci * ho * wo..(ci + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let wv = filt[ky * k + kx];
                let mut acc = 0.0;
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let grow = &g[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        // valid output columns form one contiguous span
                        let lo = (p - kx as isize).max(0) as usize;
                        let hi = ((w as isize + p - kx as isize).min(wo as isize)).max(0) as usize;
                        if lo >= hi {
                            continue;
                        }
                        let shift = kx as isize - p;
                        let xs = (lo as isize + shift) as usize;
                        let xrow = &plane[iy * w + xs..iy * w + xs + (hi - lo)];
                        acc += grow[lo..hi].iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(dx) = dx.as_deref_mut() {
                            let off = ci * h * w + iy * w + xs;
                            for (d, gv) in dx[off..off + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * gv;
                            }
                        }
                    } else {
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += gv * plane[iy * w + ix as usize];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[ci * h * w + iy * w + ix as usize] += wv * gv;
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[ci * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
}
