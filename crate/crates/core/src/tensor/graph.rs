use std::sync::Arc;

use super::conv::{self, ConvSpec};
use super::gemm::{gemm, Operand};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the normalized positions.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    MulScalar { x: Var, s: Var },
    DivScalar { x: Var, s: Var },
    AddBiasRows { x: Var, b: Var },
    AddBiasCols { x: Var, b: Var },
    MulBroadcastRows { x: Var, m: Var },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec, col: Option<Vec<f64>> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    LayerNormCols { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, stats: Option<BatchStats> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { x: Var, eps: f64, norms: Vec<f64> },
    MeanCols(Var),
    Sum(Var),
    Mean(Var),
    MeanAbsDiff { x: Var, target: Tensor },
    BceWithLogits { x: Var, target: Tensor },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Every operation evaluates eagerly and
/// records enough to run the reverse pass from any scalar node.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let r = shape.first().copied().unwrap_or(1);
    let n: usize = shape.iter().skip(1).product();
    (r, n)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients and keeps no backward caches.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracking(&self, parents: &[Var]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Multiply by a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "mul_scalar needs a scalar");
        let sv = self.data(s)[0];
        self.map(x, |v| v * sv, Op::MulScalar { x, s })
    }

    /// Divide by a single-element tensor.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "div_scalar needs a scalar");
        let sv = self.data(s)[0];
        self.map(x, |v| v / sv, Op::DivScalar { x, s })
    }

    /// Add `b[r]` to every element of row `r` (channel bias for `[C, ...]`).
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Var {
        let (r, n) = rows_cols(self.shape(x));
        assert_eq!(self.value(b).numel(), r, "row bias length");
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for (row, bv) in data.chunks_mut(n.max(1)).zip(bias) {
            for v in row {
                *v += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::AddBiasRows { x, b }, &[x, b])
    }

    /// Add `b[j]` to column `j` of a `[R, N]` matrix.
    pub fn add_bias_cols(&mut self, x: Var, b: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        assert_eq!(self.value(b).numel(), n, "column bias length");
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::AddBiasCols { x, b }, &[x, b])
    }

    /// Multiply every row of `x` (`[C, ...]`) elementwise by `m` (`N` values).
    pub fn mul_broadcast_rows(&mut self, x: Var, m: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        assert_eq!(self.value(m).numel(), n, "broadcast operand length");
        let mv = self.data(m);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, w) in row.iter_mut().zip(mv) {
                *v *= w;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::MulBroadcastRows { x, m }, &[x, m])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape");
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(shape, data, Op::Gather { x, index }, &[x])
    }

    /// Concatenate along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing shape");
            rows += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(shape, data, Op::Concat(parts.to_vec()), parts)
    }

    /// Rows `start..start+len` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x);
        assert!(start + len <= shape[0], "slice_rows out of range");
        let (_, n) = rows_cols(shape);
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let data = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push(out_shape, data, Op::SliceRows { x, start }, &[x])
    }

    /// Matrix product `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs matrices");
        let oa = Operand::new(self.data(a), sa[0], sa[1], ta);
        let ob = Operand::new(self.data(b), sb[0], sb[1], tb);
        assert_eq!(oa.cols, ob.rows, "matmul inner dimension");
        let (m, n) = (oa.rows, ob.cols);
        let mut out = vec![0.0; m * n];
        gemm(oa, ob, 0.0, &mut out, n as isize, 1);
        self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// 2-D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin/groups, k, k]`.
    /// Only dense (`groups == 1`) and depthwise (`groups == Cin == Cout`)
    /// layouts are supported.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin/g, k, k]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        assert_eq!(ws[2], spec.kernel, "kernel size");
        assert_eq!(ws[3], spec.kernel, "kernel size");
        let (ho, wo) = spec.output_hw(h, wd);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            assert_eq!(self.value(b).numel(), cout, "conv bias length");
            parents.push(b);
        }
        let track = self.tracking(&parents);
        let (mut out, col) = if spec.groups == 1 {
            assert_eq!(ws[1], cin, "conv2d input channels");
            let kk = cin * spec.kernel * spec.kernel;
            let mut out = vec![0.0; cout * ho * wo];
            if spec.is_pointwise() {
                gemm(
                    Operand::new(self.data(w), cout, kk, false),
                    Operand::new(self.data(x), kk, ho * wo, false),
                    0.0,
                    &mut out,
                    (ho * wo) as isize,
                    1,
                );
                (out, None)
            } else {
                let col = conv::im2col(self.data(x), cin, h, wd, &spec);
                gemm(
                    Operand::new(self.data(w), cout, kk, false),
                    Operand::new(&col, kk, ho * wo, false),
                    0.0,
                    &mut out,
                    (ho * wo) as isize,
                    1,
                );
                (out, if track { Some(col) } else { None })
            }
        } else {
            assert!(
                spec.groups == cin && cout == cin && ws[1] == 1,
                "only depthwise grouped convolution is supported"
            );
            (conv::depthwise_forward(self.data(x), self.data(w), cin, h, wd, &spec), None)
        };
        if let Some(b) = b {
            let bias = self.data(b);
            for (plane, bv) in out.chunks_mut(ho * wo).zip(bias) {
                for v in plane {
                    *v += bv;
                }
            }
        }
        self.push(vec![cout, ho, wo], out, Op::Conv2d { x, w, b, spec, col }, &parents)
    }

    /// 2x2 max pooling with stride 2 over `[C, H, W]` (even H, W).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dimensions");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if best == usize::MAX || src[i] > best_v {
                            best = i;
                            best_v = src[i];
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![c, ho, wo], out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Normalize each column of `[C, N]` across its `C` entries, then apply
    /// per-row gain and shift.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (c, n) = rows_cols(self.shape(x));
        assert_eq!(self.value(gamma).numel(), c, "layer norm gain length");
        assert_eq!(self.value(beta).numel(), c, "layer norm shift length");
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; n];
        for row in src.chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= c as f64;
        }
        let mut var = vec![0.0; n];
        for row in src.chunks(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|s| 1.0 / (s / c as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for j in 0..n {
                let i = ci * n + j;
                xhat[i] = (src[i] - mean[j]) * rstd[j];
                out[i] = g[ci] * xhat[i] + b[ci];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNormCols {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(shape, out, op, &[x, gamma, beta])
    }

    /// Batch normalization of `[C, ...]` over all non-channel positions.
    /// With `running` the stored statistics are used (evaluation mode);
    /// otherwise the batch statistics are used and recorded.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Var {
        let (c, n) = rows_cols(self.shape(x));
        assert_eq!(self.value(gamma).numel(), c, "batch norm gain length");
        assert_eq!(self.value(beta).numel(), c, "batch norm shift length");
        let src = self.data(x);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                assert_eq!(m.len(), c, "running mean length");
                assert_eq!(v.len(), c, "running var length");
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mean: Vec<f64> = src.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
                let var: Vec<f64> = src
                    .chunks(n)
                    .zip(&mean)
                    .map(|(r, m)| r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64)
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for j in 0..n {
                let i = ci * n + j;
                xhat[i] = (src[i] - mean[ci]) * rstd[ci];
                out[i] = g[ci] * xhat[i] + b[ci];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            stats,
        };
        self.push(shape, out, op, &[x, gamma, beta])
    }

    /// Statistics recorded by a training-mode [`Graph::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::LogSoftmaxRows(x), &[x])
    }

    /// Scale each row of a matrix to unit Euclidean norm (norms below `eps`
    /// are clamped to `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut data = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(nrm);
            let d = nrm.max(eps);
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::L2NormalizeRows { x, eps, norms }, &[x])
    }

    /// Mean over everything but the leading dimension: `[R, ...] -> [R]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let (r, n) = rows_cols(self.shape(x));
        let data = self.data(x).chunks(n).map(|row| row.iter().sum::<f64>() / n as f64).collect();
        self.push(vec![r], data, Op::MeanCols(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean absolute difference against a constant target.
    pub fn mean_abs_diff(&mut self, x: Var, target: &Tensor) -> Var {
        assert_eq!(self.shape(x), target.shape(), "L1 target shape");
        let n = target.numel() as f64;
        let s = self.data(x).iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let op = Op::MeanAbsDiff {
            x,
            target: target.clone(),
        };
        self.push(vec![1], vec![s], op, &[x])
    }

    /// Mean binary cross-entropy of logits against constant soft targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Var {
        assert_eq!(self.shape(x), target.shape(), "BCE target shape");
        let n = target.numel() as f64;
        let s = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            x,
            target: target.clone(),
        };
        self.push(vec![1], vec![s], op, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).numel(),
            "reshape element count"
        );
        let data = self.data(x).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((d, gv), y) in s.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((d, gv), x) in s.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += scale * gv;
                    }
                }
            }
            Op::MulScalar { x, s: sv } => {
                let k = self.data(*sv)[0];
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += k * gv;
                    }
                }
                if let Some(s) = self.slot(grads, *sv) {
                    s[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::DivScalar { x, s: sv } => {
                let k = self.data(*sv)[0];
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += gv / k;
                    }
                }
                if let Some(s) = self.slot(grads, *sv) {
                    s[0] -= g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() / (k * k);
                }
            }
            Op::AddBiasRows { x, b } => {
                let (_, n) = rows_cols(node.value.shape());
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (d, row) in s.iter_mut().zip(g.chunks(n.max(1))) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::AddBiasCols { x, b } => {
                let (_, n) = rows_cols(node.value.shape());
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::MulBroadcastRows { x, m } => {
                let (_, n) = rows_cols(node.value.shape());
                let (xv, mv) = (self.data(*x), self.data(*m));
                if let Some(s) = self.slot(grads, *x) {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, gv), w) in srow.iter_mut().zip(grow).zip(mv) {
                            *d += gv * w;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *m) {
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        for ((d, gv), xe) in s.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xe;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, gv), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, gv), v) in s.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(*v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, gv), y) in s.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, gv), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v >= *lo && *v <= *hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&src, gv) in index.iter().zip(g) {
                        s[src] += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(s) = self.slot(grads, p) {
                        add_into(s, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, n) = rows_cols(self.shape(*x));
                if let Some(s) = self.slot(grads, *x) {
                    add_into(&mut s[start * n..start * n + g.len()], g);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let oa = Operand::new(self.data(*a), sa[0], sa[1], *ta);
                let ob = Operand::new(self.data(*b), sb[0], sb[1], *tb);
                let (m, k, n) = (oa.rows, oa.cols, ob.cols);
                let og = Operand::new(g, m, n, false);
                if let Some(s) = self.slot(grads, *a) {
                    // d op(a) = g * op(b)^T, written through a's layout
                    let (rs, cs) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    gemm(og, ob.t(), 1.0, s, rs, cs);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let (rs, cs) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    gemm(oa.t(), og, 1.0, s, rs, cs);
                }
            }
            Op::Conv2d { x, w, b, spec, col } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let cout = ws[0];
                let (ho, wo) = spec.output_hw(h, wd);
                let hw = ho * wo;
                if let Some(bv) = b {
                    if let Some(s) = self.slot(grads, *bv) {
                        for (d, plane) in s.iter_mut().zip(g.chunks(hw)) {
                            *d += plane.iter().sum::<f64>();
                        }
                    }
                }
                if spec.groups == 1 {
                    let kk = cin * spec.kernel * spec.kernel;
                    let og = Operand::new(g, cout, hw, false);
                    let cols: &[f64] = if spec.is_pointwise() {
                        self.data(*x)
                    } else {
                        col.as_deref().expect("conv column cache present while tracking")
                    };
                    if let Some(s) = self.slot(grads, *w) {
                        gemm(og, Operand::new(cols, kk, hw, true), 1.0, s, kk as isize, 1);
                    }
                    if self.nodes[x.0].requires_grad {
                        let wop = Operand::new(self.data(*w), cout, kk, true);
                        if spec.is_pointwise() {
                            let s = self.slot(grads, *x).expect("tracked input");
                            gemm(wop, og, 1.0, s, hw as isize, 1);
                        } else {
                            let mut dcol = vec![0.0; kk * hw];
                            gemm(wop, og, 0.0, &mut dcol, hw as isize, 1);
                            let s = self.slot(grads, *x).expect("tracked input");
                            conv::col2im(&dcol, s, cin, h, wd, spec);
                        }
                    }
                } else {
                    let mut dx = self.slot(grads, *x).map(std::mem::take);
                    let mut dw = self.slot(grads, *w).map(std::mem::take);
                    conv::depthwise_backward(
                        self.data(*x),
                        self.data(*w),
                        g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        cin,
                        h,
                        wd,
                        spec,
                    );
                    if let Some(dx) = dx {
                        grads[x.0] = Some(dx);
                    }
                    if let Some(dw) = dw {
                        grads[w.0] = Some(dw);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&src, gv) in argmax.iter().zip(g) {
                        s[src] += gv;
                    }
                }
            }
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (c, n) = rows_cols(node.value.shape());
                let gam = self.data(*gamma);
                if let Some(s) = self.slot(grads, *gamma) {
                    for (ci, d) in s.iter_mut().enumerate() {
                        *d += (0..n).map(|j| g[ci * n + j] * xhat[ci * n + j]).sum::<f64>();
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for (d, row) in s.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut m1 = vec![0.0; n];
                    let mut m2 = vec![0.0; n];
                    for ci in 0..c {
                        for j in 0..n {
                            let i = ci * n + j;
                            let gh = g[i] * gam[ci];
                            m1[j] += gh;
                            m2[j] += gh * xhat[i];
                        }
                    }
                    let cf = c as f64;
                    for ci in 0..c {
                        for j in 0..n {
                            let i = ci * n + j;
                            let gh = g[i] * gam[ci];
                            s[i] += rstd[j] * (gh - m1[j] / cf - xhat[i] * m2[j] / cf);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                stats,
            } => {
                let (c, n) = rows_cols(node.value.shape());
                let gam = self.data(*gamma);
                if let Some(s) = self.slot(grads, *gamma) {
                    for (ci, d) in s.iter_mut().enumerate() {
                        *d += (0..n).map(|j| g[ci * n + j] * xhat[ci * n + j]).sum::<f64>();
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for (d, row) in s.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for ci in 0..c {
                        let row = ci * n..(ci + 1) * n;
                        if stats.is_some() {
                            let m1: f64 = g[row.clone()].iter().sum::<f64>() * gam[ci];
                            let m2: f64 = g[row.clone()]
                                .iter()
                                .zip(&xhat[row.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * gam[ci];
                            for i in row {
                                s[i] += rstd[ci] * (g[i] * gam[ci] - m1 / nf - xhat[i] * m2 / nf);
                            }
                        } else {
                            for i in row {
                                s[i] += g[i] * gam[ci] * rstd[ci];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = rows_cols(node.value.shape());
                if let Some(s) = self.slot(grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let (_, n) = rows_cols(node.value.shape());
                if let Some(s) = self.slot(grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - y.exp() * total;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, eps, norms } => {
                let (_, n) = rows_cols(node.value.shape());
                if let Some(s) = self.slot(grads, *x) {
                    for (((srow, grow), yrow), nrm) in
                        s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).zip(norms)
                    {
                        if *nrm > *eps {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((d, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                                *d += (gv - y * dot) / nrm;
                            }
                        } else {
                            for (d, gv) in srow.iter_mut().zip(grow) {
                                *d += gv / eps;
                            }
                        }
                    }
                }
            }
            Op::MeanCols(x) => {
                let (_, n) = rows_cols(self.shape(*x));
                if let Some(s) = self.slot(grads, *x) {
                    for (srow, gv) in s.chunks_mut(n).zip(g) {
                        let d = gv / n as f64;
                        for v in srow {
                            *v += d;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for v in s.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let d = g[0] / s.len() as f64;
                    for v in s.iter_mut() {
                        *v += d;
                    }
                }
            }
            Op::MeanAbsDiff { x, target } => {
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    let d = g[0] / target.numel() as f64;
                    for ((v, a), t) in s.iter_mut().zip(xv).zip(target.data()) {
                        let diff = a - t;
                        if diff > 0.0 {
                            *v += d;
                        } else if diff < 0.0 {
                            *v -= d;
                        }
                    }
                }
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    let d = g[0] / target.numel() as f64;
                    for ((v, z), t) in s.iter_mut().zip(xv).zip(target.data()) {
                        *v += d * (sigmoid(*z) - t);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of leaf nodes from one reverse pass.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of a bound store, in store order.
    pub fn for_bound(&self, g: &Graph, bound: &super::Bound) -> Vec<Option<Tensor>> {
        bound
            .vars()
            .iter()
            .map(|&v| {
                self.get(v)
                    .map(|d| Tensor::from_parts(g.shape(v).to_vec(), d.to_vec()))
            })
            .collect()
    }
}
