use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MaskAdapter;
use crate::error::{Error, Result};
use crate::imaging::AlphaMask;
use crate::nn::{attend_t, crop_map, pixel_shuffle};
use crate::tensor::{BatchNorm, Bound, Conv2d, Graph, LayerNorm, Linear, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Transformer blocks.
    pub blocks: usize,
    /// Side of the square patch turned into one token.
    pub patch: usize,
    /// Token embedding width.
    pub width: usize,
    pub heads: usize,
    /// Channels of the entry convolution.
    pub entry_channels: usize,
    /// Hidden width of the feed-forward layer relative to `width`.
    pub mlp_ratio: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            patch: 8,
            width: 64,
            heads: 2,
            entry_channels: 16,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct TokenBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Result of a graph-level adapter pass.
pub struct AdapterForward {
    /// Refined mask `[1, H, W]` in `[0, 1]`.
    pub mask: Var,
    /// Entry batch-norm node (carries batch statistics in training mode).
    pub batch_norm: Var,
}

/// Learned soft-mask refinement: entry conv + batch norm + ReLU, patch
/// tokens through self-attention blocks, and a sigmoid exit convolution
/// that also sees the initial mask.
#[derive(Clone, Debug)]
pub struct SoftMaskAdapter {
    config: AdapterConfig,
    store: ParamStore,
    entry: Conv2d,
    entry_bn: BatchNorm,
    embed: Conv2d,
    blocks: Vec<TokenBlock>,
    token_head: Linear,
    exit: Conv2d,
}

impl SoftMaskAdapter {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        if config.blocks == 0 {
            return Err(Error::Parameter("adapter needs at least one transformer block".into()));
        }
        if config.patch == 0 || config.width == 0 || config.heads == 0 || config.width % config.heads != 0 {
            return Err(Error::Parameter(format!(
                "adapter width {} must be a positive multiple of heads {}, patch positive",
                config.width, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, e) = (config.width, config.entry_channels);
        let entry = Conv2d::new(&mut store, "entry", 1, e, 3, 1, 1, 1, false, &mut rng);
        let entry_bn = BatchNorm::new(&mut store, "entry_bn", e);
        let embed = Conv2d::new(&mut store, "embed", e, w, config.patch, config.patch, 0, 1, true, &mut rng);
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("block{i}");
                TokenBlock {
                    ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), w),
                    qkv: Linear::new(&mut store, &format!("{n}.qkv"), w, 3 * w, &mut rng),
                    proj: Linear::new(&mut store, &format!("{n}.proj"), w, w, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), w),
                    fc1: Linear::new(&mut store, &format!("{n}.fc1"), w, config.mlp_ratio * w, &mut rng),
                    fc2: Linear::new(&mut store, &format!("{n}.fc2"), config.mlp_ratio * w, w, &mut rng),
                }
            })
            .collect();
        let token_head = Linear::new(&mut store, "token_head", w, config.patch * config.patch, &mut rng);
        let exit = Conv2d::same(&mut store, "exit", 2, 1, 3, &mut rng);
        // Start close to a sharpened copy of the initial mask: the learned
        // branch contributes little until training moves it.
        {
            let wt = store.get_mut(exit.weight).data_mut();
            for v in &mut wt[..9] {
                *v *= 0.1;
            }
            wt[9..].fill(0.0);
            wt[9 + 4] = 6.0;
        }
        store.get_mut(exit.bias.expect("exit has bias")).data_mut()[0] = -3.0;
        Ok(Self {
            config,
            store,
            entry,
            entry_bn,
            embed,
            blocks,
            token_head,
            exit,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn entry_batch_norm(&self) -> &BatchNorm {
        &self.entry_bn
    }

    /// Graph-level pass over a `[1, H, W]` mask whose sides are multiples of the patch size.
    pub fn forward(&self, g: &mut Graph, p: &Bound, mask: Var, train: bool) -> AdapterForward {
        let s = g.shape(mask).to_vec();
        let (h, w) = (s[1], s[2]);
        let k = self.config.patch;
        assert!(h % k == 0 && w % k == 0, "adapter input must be divisible by the patch size");
        let (th, tw) = (h / k, w / k);
        let width = self.config.width;
        let dh = width / self.config.heads;

        let x = self.entry.forward(g, p, mask);
        let bn = self.entry_bn.forward(g, p, &self.store, x, train);
        let x = g.relu(bn);
        let tok = self.embed.forward(g, p, x);
        let mut t = g.reshape(tok, &[width, th * tw]);
        for b in &self.blocks {
            let n = b.ln1.forward(g, p, t);
            let qkv = b.qkv.forward_cols(g, p, n);
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let q = g.slice_rows(qkv, hd * dh, dh);
                let kk = g.slice_rows(qkv, width + hd * dh, dh);
                let v = g.slice_rows(qkv, 2 * width + hd * dh, dh);
                let (o, _) = attend_t(g, q, kk, v, None, 1.0 / (dh as f64).sqrt());
                heads.push(o);
            }
            let a = g.concat(&heads);
            let a = b.proj.forward_cols(g, p, a);
            t = g.add(t, a);
            let n = b.ln2.forward(g, p, t);
            let f = b.fc1.forward_cols(g, p, n);
            let f = g.gelu(f);
            let f = b.fc2.forward_cols(g, p, f);
            t = g.add(t, f);
        }
        let pix = self.token_head.forward_cols(g, p, t);
        let pix = g.reshape(pix, &[k * k, th, tw]);
        let pix = pixel_shuffle(g, pix, k);
        let cat = g.concat(&[pix, mask]);
        let logits = self.exit.forward(g, p, cat);
        AdapterForward {
            mask: g.sigmoid(logits),
            batch_norm: bn,
        }
    }

    /// Refine a mask of any size (reflect-padded to the patch grid internally).
    pub fn adapt_mask(&self, initial: &AlphaMask) -> Result<AlphaMask> {
        let (w, h) = initial.dims();
        let padded = initial.pad_to_multiple(self.config.patch);
        let mut g = Graph::no_grad();
        let p = Bound::bind(&mut g, &self.store, false);
        let x = g.constant(padded.to_tensor());
        let out = self.forward(&mut g, &p, x, false).mask;
        let out = crop_map(&mut g, out, h, w);
        let data = g.value(out).data().to_vec();
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Numeric(format!(
                "adapter produced {bad} non-finite values for a {w}x{h} mask (parameters finite: {})",
                self.store.all_finite()
            )));
        }
        AlphaMask::from_activations(w, h, data)
    }

    /// Refine a mask whose sides already match the patch grid; other sizes are a shape error.
    pub fn adapt_exact(&self, initial: &AlphaMask) -> Result<AlphaMask> {
        let (w, h) = initial.dims();
        let k = self.config.patch;
        if w % k != 0 || h % k != 0 {
            return Err(Error::Shape(format!(
                "adapter expects sides divisible by {k}, got {w}x{h}"
            )));
        }
        self.adapt_mask(initial)
    }
}

impl MaskAdapter for SoftMaskAdapter {
    fn adapt(&self, initial: &AlphaMask) -> Result<AlphaMask> {
        self.adapt_mask(initial)
    }
}
