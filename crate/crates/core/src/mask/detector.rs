use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MaskDetector;
use crate::error::{Error, Result};
use crate::imaging::{AlphaMask, SceneImage};
use crate::nn::{crop_map, pixel_shuffle};
use crate::tensor::{Bound, Conv2d, Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Number of 2x downsampling stages.
    pub depth: usize,
    /// Channels at full resolution; doubles per stage.
    pub base_channels: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::same(store, &format!("{name}.0"), cin, cout, 3, rng),
            b: Conv2d::same(store, &format!("{name}.1"), cout, cout, 3, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = self.a.forward(g, p, x);
        let y = g.relu(y);
        let y = self.b.forward(g, p, y);
        g.relu(y)
    }
}

/// U-Net mask detector producing per-pixel occlusion probabilities.
#[derive(Clone, Debug)]
pub struct UNetDetector {
    config: DetectorConfig,
    store: ParamStore,
    encoders: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    ups: Vec<Conv2d>,
    decoders: Vec<DoubleConv>,
    head: Conv2d,
}

impl UNetDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 {
            return Err(Error::Parameter("detector depth and base_channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let mut encoders = Vec::new();
        let mut cin = 3;
        for level in 0..config.depth {
            let cout = c << level;
            encoders.push(DoubleConv::new(&mut store, &format!("enc{level}"), cin, cout, &mut rng));
            cin = cout;
        }
        let bottleneck = DoubleConv::new(&mut store, "bottleneck", cin, c << config.depth, &mut rng);
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for level in (0..config.depth).rev() {
            let wide = c << (level + 1);
            let narrow = c << level;
            ups.push(Conv2d::new(&mut store, &format!("up{level}"), wide, 4 * narrow, 1, 1, 0, 1, true, &mut rng));
            decoders.push(DoubleConv::new(&mut store, &format!("dec{level}"), 2 * narrow, narrow, &mut rng));
        }
        let head = Conv2d::new(&mut store, "head", c, 1, 1, 1, 0, 1, true, &mut rng);
        Ok(Self {
            config,
            store,
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Spatial sides must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << self.config.depth
    }

    /// Logits `[1, H, W]` for an image tensor `[3, H, W]` with sides divisible by [`Self::stride`].
    pub fn forward_logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut y = x;
        for enc in &self.encoders {
            y = enc.forward(g, p, y);
            skips.push(y);
            y = g.max_pool2(y);
        }
        y = self.bottleneck.forward(g, p, y);
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            let u = up.forward(g, p, y);
            let u = pixel_shuffle(g, u, 2);
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(&[u, skip]);
            y = dec.forward(g, p, cat);
        }
        self.head.forward(g, p, y)
    }

    /// Soft mask for an image of any size (reflect-padded internally).
    pub fn detect_mask(&self, image: &SceneImage) -> Result<AlphaMask> {
        let (w, h) = image.dims();
        let padded = image.pad_to_multiple(self.stride());
        let mut g = Graph::no_grad();
        let p = Bound::bind(&mut g, &self.store, false);
        let x = g.constant(padded.to_tensor());
        let logits = self.forward_logits(&mut g, &p, x);
        let probs = g.sigmoid(logits);
        let out = crop_map(&mut g, probs, h, w);
        let data = g.value(out).data().to_vec();
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Numeric(format!(
                "detector produced {bad} non-finite activations for a {w}x{h} image (parameters finite: {})",
                self.store.all_finite()
            )));
        }
        AlphaMask::from_activations(w, h, data)
    }
}

impl MaskDetector for UNetDetector {
    fn detect(&self, image: &SceneImage) -> Result<AlphaMask> {
        self.detect_mask(image)
    }
}
