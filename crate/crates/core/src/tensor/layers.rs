use rand::Rng;

use super::conv::ConvSpec;
use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::Tensor;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Convolution layer with PyTorch-style uniform initialisation.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            groups == 1 || (groups == in_channels && groups == out_channels),
            "conv {name}: only dense or depthwise groups"
        );
        let per_group = in_channels / groups;
        let fan_in = (per_group * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, per_group, kernel, kernel], bound),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[out_channels], bound), true));
        Self {
            weight,
            bias,
            spec: ConvSpec {
                kernel,
                stride,
                padding,
                groups,
            },
            in_channels,
            out_channels,
        }
    }

    /// `k x k` conv, stride 1, "same" padding.
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, kernel, 1, kernel / 2, 1, true, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }
}

/// Affine map over the last dimension of a token matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_features, in_features], bound),
            true,
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_features], bound), true);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `[n, in] -> [n, out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.weight), false, true);
        g.add_bias_cols(y, p.var(self.bias))
    }

    /// `[in, n] -> [out, n]`: applies the map to every column.
    pub fn forward_cols(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(p.var(self.weight), x, false, false);
        g.add_bias_rows(y, p.var(self.bias))
    }

    /// `[n, in] -> [out, n]`, the channel-major layout used by feature maps.
    pub fn forward_t(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(p.var(self.weight), x, false, true);
        g.add_bias_rows(y, p.var(self.bias))
    }
}

/// Layer norm over the channel axis of a `[C, ...]` map (per position).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm_cols(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// Batch norm over the spatial positions of a `[C, ...]` map.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    /// Training mode normalizes with batch statistics; read them back with
    /// [`Graph::batch_stats`] and fold them in with [`BatchNorm::update_running`].
    pub fn forward(&self, g: &mut Graph, p: &Bound, store: &ParamStore, x: Var, train: bool) -> Var {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        if train {
            g.batch_norm(x, gamma, beta, None, Self::EPS)
        } else {
            let rm = store.get(self.running_mean).data();
            let rv = store.get(self.running_var).data();
            g.batch_norm(x, gamma, beta, Some((rm, rv)), Self::EPS)
        }
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &super::BatchStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let m = Self::MOMENTUM;
        for (r, b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}
