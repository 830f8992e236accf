use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AlphaMask, SceneImage};
use crate::nn::{attend_t, crop_map, pixel_shuffle, pixel_unshuffle};
use crate::prompting::MultiModalPrompt;
use crate::tensor::{Bound, Conv2d, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalConfig {
    /// Channel width per stage; the stage count is `widths.len()`.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub heads: usize,
    /// Feed-forward hidden width relative to the stage width.
    pub ffn_expansion: usize,
    /// Dimension of the prompt tokens.
    pub prompt_dim: usize,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            heads: 2,
            ffn_expansion: 2,
            prompt_dim: 512,
        }
    }
}

impl RemovalConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Validation("removal network needs at least one stage".into()));
        }
        if self.blocks_per_stage == 0 || self.heads == 0 || self.ffn_expansion == 0 || self.prompt_dim == 0 {
            return Err(Error::Validation(
                "blocks_per_stage, heads, ffn_expansion and prompt_dim must be positive".into(),
            ));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % self.heads != 0 {
                return Err(Error::Validation(format!(
                    "stage {i} width {w} must be a positive multiple of {} heads",
                    self.heads
                )));
            }
            if i > 0 && w % 4 != 0 {
                return Err(Error::Validation(format!("stage {i} width {w} must be divisible by 4")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    width: usize,
    norm1: LayerNorm,
    qkv: Conv2d,
    qkv_dw: Conv2d,
    temperature: Vec<ParamId>,
    attn_out: Conv2d,
    norm2: LayerNorm,
    cross_q: Conv2d,
    cross_k: Linear,
    cross_v: Linear,
    lambda: Vec<ParamId>,
    cross_out: Conv2d,
    norm3: LayerNorm,
    ffn_in: Conv2d,
    ffn_dw: Conv2d,
    ffn_out: Conv2d,
}

fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    Conv2d::new(store, name, cin, cout, 1, 1, 0, 1, true, rng)
}

fn depthwise(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    Conv2d::new(store, name, c, c, 3, 1, 1, c, true, rng)
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, config: &RemovalConfig, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = width * config.ffn_expansion;
        let temperature = (0..config.heads)
            .map(|h| store.add(format!("{name}.attn.temperature.{h}"), Tensor::full(&[1], 1.0), true))
            .collect();
        let lambda = (0..config.heads)
            .map(|h| store.add(format!("{name}.cross.lambda.{h}"), Tensor::full(&[1], 1.0), true))
            .collect();
        Self {
            width,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            qkv: pointwise(store, &format!("{name}.attn.qkv"), width, 3 * width, rng),
            qkv_dw: depthwise(store, &format!("{name}.attn.qkv_dw"), 3 * width, rng),
            temperature,
            attn_out: pointwise(store, &format!("{name}.attn.out"), width, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            cross_q: pointwise(store, &format!("{name}.cross.q"), width, width, rng),
            cross_k: Linear::new(store, &format!("{name}.cross.k"), config.prompt_dim, width, rng),
            cross_v: Linear::new(store, &format!("{name}.cross.v"), config.prompt_dim, width, rng),
            lambda,
            cross_out: pointwise(store, &format!("{name}.cross.out"), width, width, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width),
            ffn_in: pointwise(store, &format!("{name}.ffn.in"), width, 2 * hidden, rng),
            ffn_dw: depthwise(store, &format!("{name}.ffn.dw"), 2 * hidden, rng),
            ffn_out: pointwise(store, &format!("{name}.ffn.out"), hidden, width, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, prompt: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let n = h * w;
        let heads = self.temperature.len();
        let dh = self.width / heads;

        // Channel (transposed) self-attention.
        let y = self.norm1.forward(g, p, x);
        let qkv = self.qkv.forward(g, p, y);
        let qkv = self.qkv_dw.forward(g, p, qkv);
        let qkv = g.reshape(qkv, &[3 * c, n]);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_rows(qkv, hd * dh, dh);
            let k = g.slice_rows(qkv, c + hd * dh, dh);
            let v = g.slice_rows(qkv, 2 * c + hd * dh, dh);
            let q = g.l2_normalize_rows(q, 1e-12);
            let k = g.l2_normalize_rows(k, 1e-12);
            let a = g.matmul(q, k, false, true);
            let a = g.mul_scalar(a, p.var(self.temperature[hd]));
            let a = g.softmax_rows(a);
            outs.push(g.matmul(a, v, false, false));
        }
        let a = g.concat(&outs);
        let a = g.reshape(a, &[c, h, w]);
        let a = self.attn_out.forward(g, p, a);
        let x = g.add(x, a);

        // Cross-attention from image features to the prompt tokens.
        let y = self.norm2.forward(g, p, x);
        let q = self.cross_q.forward(g, p, y);
        let q = g.reshape(q, &[c, n]);
        let k = self.cross_k.forward_t(g, p, prompt);
        let v = self.cross_v.forward_t(g, p, prompt);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_rows(q, hd * dh, dh);
            let kh = g.slice_rows(k, hd * dh, dh);
            let vh = g.slice_rows(v, hd * dh, dh);
            let (o, _) = attend_t(g, qh, kh, vh, Some(p.var(self.lambda[hd])), 1.0);
            outs.push(o);
        }
        let a = g.concat(&outs);
        let a = g.reshape(a, &[c, h, w]);
        let a = self.cross_out.forward(g, p, a);
        let x = g.add(x, a);

        // Gated depthwise feed-forward.
        let y = self.norm3.forward(g, p, x);
        let y = self.ffn_in.forward(g, p, y);
        let y = self.ffn_dw.forward(g, p, y);
        let hidden = g.shape(y)[0] / 2;
        let gate = g.slice_rows(y, 0, hidden);
        let gate = g.gelu(gate);
        let val = g.slice_rows(y, hidden, hidden);
        let y = g.mul(gate, val);
        let y = self.ffn_out.forward(g, p, y);
        g.add(x, y)
    }
}

/// Restormer-style encoder-decoder conditioned on prompt tokens through a
/// cross-attention unit in every transformer block.
#[derive(Clone, Debug)]
pub struct RemovalNet {
    config: RemovalConfig,
    store: ParamStore,
    embed: Conv2d,
    encoders: Vec<Vec<Block>>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    reduces: Vec<Conv2d>,
    decoders: Vec<Vec<Block>>,
    output: Conv2d,
}

impl RemovalNet {
    pub fn new(config: RemovalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = config.stages();
        let wd = &config.widths;
        let embed = Conv2d::same(&mut store, "embed", 4, wd[0], 3, &mut rng);
        let mut encoders = Vec::with_capacity(s);
        let mut downs = Vec::new();
        for (i, &w) in wd.iter().enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| Block::new(&mut store, &format!("enc{i}.{b}"), &config, w, &mut rng))
                .collect();
            encoders.push(blocks);
            if i + 1 < s {
                downs.push(Conv2d::same(&mut store, &format!("down{i}"), w, wd[i + 1] / 4, 3, &mut rng));
            }
        }
        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for i in (0..s - 1).rev() {
            let w = wd[i];
            ups.push(Conv2d::same(&mut store, &format!("up{i}"), wd[i + 1], 4 * w, 3, &mut rng));
            reduces.push(pointwise(&mut store, &format!("reduce{i}"), 2 * w, w, &mut rng));
            decoders.push(
                (0..config.blocks_per_stage)
                    .map(|b| Block::new(&mut store, &format!("dec{i}.{b}"), &config, w, &mut rng))
                    .collect(),
            );
        }
        let output = Conv2d::same(&mut store, "output", wd[0], 3, 3, &mut rng);
        Ok(Self {
            config,
            store,
            embed,
            encoders,
            downs,
            ups,
            reduces,
            decoders,
            output,
        })
    }

    pub fn config(&self) -> &RemovalConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Rows scaled to norm `sqrt(d)` so token entries are O(1).
    pub fn prompt_tensor(prompt: &MultiModalPrompt) -> Tensor {
        let d = prompt.dim();
        let scale = (d as f64).sqrt();
        let mut data = prompt.tokens().data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v *= scale / n);
        }
        Tensor::new(vec![prompt.len(), d], data).expect("prompt shape")
    }

    /// Graph-level pass: cutout `[3, H, W]`, mask `[1, H, W]`, prompt `[L, d]`
    /// (already passed through [`Self::prompt_tensor`]). Returns the
    /// unclamped estimate `[3, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, cut: Var, mask: Var, prompt: Var) -> Var {
        let input = g.concat(&[cut, mask]);
        let mut x = self.embed.forward(g, p, input);
        let s = self.config.stages();
        let mut skips = Vec::with_capacity(s);
        for (i, blocks) in self.encoders.iter().enumerate() {
            for b in blocks {
                x = b.forward(g, p, x, prompt);
            }
            if i + 1 < s {
                skips.push(x);
                let d = self.downs[i].forward(g, p, x);
                x = pixel_unshuffle(g, d, 2);
            }
        }
        for ((up, reduce), blocks) in self.ups.iter().zip(&self.reduces).zip(&self.decoders) {
            let u = up.forward(g, p, x);
            let u = pixel_shuffle(g, u, 2);
            let skip = skips.pop().expect("one skip per decoder");
            let cat = g.concat(&[u, skip]);
            x = reduce.forward(g, p, cat);
            for b in blocks {
                x = b.forward(g, p, x, prompt);
            }
        }
        let out = self.output.forward(g, p, x);
        g.add(out, cut)
    }

    /// Restore a cutout image given its mask and prompt.
    pub fn remove(&self, cut: &SceneImage, mask: &AlphaMask, prompt: &MultiModalPrompt) -> Result<SceneImage> {
        if cut.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "image is {}x{} but mask is {}x{}",
                cut.width(),
                cut.height(),
                mask.width(),
                mask.height()
            )));
        }
        if prompt.dim() != self.config.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt tokens have dim {}, network expects {}",
                prompt.dim(),
                self.config.prompt_dim
            )));
        }
        let (w, h) = cut.dims();
        let stride = self.config.stride();
        let cut_p = cut.pad_to_multiple(stride);
        let mask_p = mask.pad_to_multiple(stride);
        let mut g = Graph::no_grad();
        let p = Bound::bind(&mut g, &self.store, false);
        let c = g.constant(cut_p.to_tensor());
        let m = g.constant(mask_p.to_tensor());
        let pr = g.constant(Self::prompt_tensor(prompt));
        let out = self.forward(&mut g, &p, c, m, pr);
        let out = g.clamp(out, 0.0, 1.0);
        let out = crop_map(&mut g, out, h, w);
        let data = g.value(out).data().to_vec();
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Numeric(format!(
                "removal network produced {bad} non-finite values (parameters finite: {})",
                self.store.all_finite()
            )));
        }
        SceneImage::new(w, h, data)
    }
}
