#![allow(dead_code)]

use deobstruct::imaging::{procedural_background, SceneImage, synth_fence, synth_soft, FenceParams, ScenePair, SoftKind};
use deobstruct::mask::{AdapterConfig, DetectorConfig};
use deobstruct::model::ModelConfig;
use deobstruct::prompting::{TextEncoderConfig, VisualEncoderConfig};
use deobstruct::removal::RemovalConfig;

/// A shrunken model that keeps every component but trains in milliseconds.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        detector: DetectorConfig {
            depth: 2,
            base_channels: 8,
        },
        adapter: AdapterConfig {
            blocks: 1,
            patch: 8,
            width: 16,
            heads: 2,
            entry_channels: 4,
            mlp_ratio: 2,
        },
        text: TextEncoderConfig {
            vocab: 256,
            dim: 32,
            ..TextEncoderConfig::default()
        },
        visual: VisualEncoderConfig {
            input_size: 16,
            channels: vec![4, 8],
            dim: 32,
        },
        removal: RemovalConfig {
            widths: vec![8, 16],
            blocks_per_stage: 1,
            heads: 2,
            ffn_expansion: 2,
            prompt_dim: 32,
        },
        ..ModelConfig::default()
    }
}

pub fn fence_pair(size: usize, seed: u64) -> ScenePair {
    let bg = procedural_background(size, size, seed).unwrap();
    synth_fence(&bg, &FenceParams::default(), seed ^ 0x5a5a).unwrap()
}

pub fn raindrop_pair(size: usize, seed: u64) -> ScenePair {
    let bg = procedural_background(size, size, seed).unwrap();
    synth_soft(&bg, SoftKind::Raindrop, 0.3, 1.5, seed ^ 0xa5a5).unwrap()
}

use deobstruct::prompting::{cosine_sim, InstructionCorpus, TextEncoder};
use deobstruct::tensor::{Bound, Graph, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hold out the last `held` instructions of each category.
pub fn split_corpus(corpus: &InstructionCorpus, held: usize) -> (InstructionCorpus, Vec<String>, Vec<String>) {
    let (ot, oh) = corpus.opaque.split_at(corpus.opaque.len() - held);
    let (st, sh) = corpus.semi_transparent.split_at(corpus.semi_transparent.len() - held);
    (
        InstructionCorpus {
            opaque: ot.to_vec(),
            semi_transparent: st.to_vec(),
        },
        oh.to_vec(),
        sh.to_vec(),
    )
}

/// Mean intra-category cosine minus mean inter-category cosine.
pub fn category_margin(enc: &dyn TextEncoder, a: &[String], b: &[String]) -> f64 {
    let ea: Vec<_> = a.iter().map(|t| enc.embed_text(t).unwrap()).collect();
    let eb: Vec<_> = b.iter().map(|t| enc.embed_text(t).unwrap()).collect();
    let mut intra = (0.0, 0);
    for set in [&ea, &eb] {
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                intra.0 += cosine_sim(&set[i], &set[j]).unwrap();
                intra.1 += 1;
            }
        }
    }
    let mut inter = (0.0, 0);
    for x in &ea {
        for y in &eb {
            inter.0 += cosine_sim(x, y).unwrap();
            inter.1 += 1;
        }
    }
    intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64
}

/// Jitter every trainable parameter so no gradient is trivially zero.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in e.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Compare reverse-mode gradients with central differences on a random
/// `fraction` of trainable scalars. Returns (checked, worst relative error).
pub fn gradient_check(
    store: &ParamStore,
    fraction: f64,
    seed: u64,
    loss: impl Fn(&mut Graph, &Bound) -> Var,
) -> (usize, f64) {
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, store, true);
    let root = loss(&mut g, &p);
    let grads = g.backward(root).for_bound(&g, &p);
    let eval = |s: &ParamStore| {
        let mut g = Graph::no_grad();
        let p = Bound::bind(&mut g, s, false);
        let root = loss(&mut g, &p);
        g.value(root).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let mut probe = store.clone();
    for (k, e) in store.entries().iter().enumerate() {
        if !e.trainable {
            continue;
        }
        for i in 0..e.tensor.numel() {
            if rng.random::<f64>() >= fraction {
                continue;
            }
            let x = e.tensor.data()[i];
            probe.entries_mut()[k].tensor.data_mut()[i] = x + h;
            let up = eval(&probe);
            probe.entries_mut()[k].tensor.data_mut()[i] = x - h;
            let down = eval(&probe);
            probe.entries_mut()[k].tensor.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[k].as_ref().map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}

/// Direct double sum over each 11x11 window with a 2-D Gaussian.
pub fn ssim_oracle(a: &SceneImage, b: &SceneImage) -> f64 {
    let (w, h) = a.dims();
    let luma = |img: &SceneImage, x: usize, y: usize| 0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2);
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let p = luma(a, x0 + j, y0 + i);
                    let q = luma(b, x0 + j, y0 + i);
                    mx += k * p;
                    my += k * q;
                    sxx += k * p * p;
                    syy += k * q * q;
                    sxy += k * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
