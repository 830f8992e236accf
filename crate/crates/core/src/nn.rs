//! Building blocks shared by the detector, adapter and removal network.

use std::sync::Arc;

use crate::tensor::{Graph, Var};

/// `[C·r², H, W] -> [C, H·r, W·r]`.
pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (cr, h, w) = (s[0], s[1], s[2]);
    assert_eq!(cr % (r * r), 0, "pixel_shuffle channel count");
    let c = cr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut index = Vec::with_capacity(cr * h * w);
    for co in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let ci = co * r * r + (y % r) * r + xo % r;
                index.push((ci * h + y / r) * w + xo / r);
            }
        }
    }
    g.gather(x, Arc::new(index), vec![c, ho, wo])
}

/// `[C, H, W] -> [C·r², H/r, W/r]`, the inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(g: &mut Graph, x: Var, r: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(h % r == 0 && w % r == 0, "pixel_unshuffle needs sides divisible by {r}");
    let (ho, wo) = (h / r, w / r);
    let mut index = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                for y in 0..ho {
                    for xo in 0..wo {
                        index.push((ci * h + y * r + dy) * w + xo * r + dx);
                    }
                }
            }
        }
    }
    g.gather(x, Arc::new(index), vec![c * r * r, ho, wo])
}

/// Top-left `h x w` window of a `[C, H, W]` map.
pub fn crop_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (c, hi, wi) = (s[0], s[1], s[2]);
    if (hi, wi) == (h, w) {
        return x;
    }
    assert!(h <= hi && w <= wi, "crop_map larger than input");
    let mut index = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..w {
                index.push((ci * hi + y) * wi + xo);
            }
        }
    }
    g.gather(x, Arc::new(index), vec![c, h, w])
}

/// Attention in the transposed layout: queries `[d, n]`, keys and values
/// `[d, L]`. Returns `(output [d, n], weights [n, L])` where
/// `weights = softmax(qᵀk / λ)` row-wise and `output = v · weightsᵀ`.
pub fn attend_t(g: &mut Graph, q: Var, k: Var, v: Var, lambda: Option<Var>, scale: f64) -> (Var, Var) {
    let mut logits = g.matmul(q, k, true, false);
    if scale != 1.0 {
        logits = g.scale(logits, scale);
    }
    if let Some(l) = lambda {
        logits = g.div_scalar(logits, l);
    }
    let weights = g.softmax_rows(logits);
    let out = g.matmul(v, weights, false, true);
    (out, weights)
}
