use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingState};
use super::config::TrainConfig;
use super::data::{augment, crop_patch, Flips, TrainSample};
use crate::error::{Error, Result};
use crate::imaging::{ScenePair, TransparencyClass};
use crate::model::ModelBundle;
use crate::prompting::{
    classify_transparency, Anchors, Instruction, InstructionCorpus, MultiModalPrompt, TextEncoder, VisualEncoder,
};
use crate::removal::RemovalNet;
use crate::tensor::{AdamW, BatchStats, Bound, Graph, Tensor};

/// Trained components, in optimizer order. The visual encoder stays frozen.
const TRAINED: [&str; 4] = ["detector", "adapter", "removal", "text_encoder"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Detector only, binary cross-entropy against the ground-truth mask.
    Warmup,
    /// Detector, adapter, removal network and text projection together.
    Joint,
}

/// One sample drawn for a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub index: usize,
    pub origin: (usize, usize),
    pub flips: Flips,
    pub instruction: String,
    /// Routing decision (joint phase only).
    pub mode: Option<TransparencyClass>,
    pub adapter_ran: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Zero-based index of the step that just ran.
    pub step: u64,
    pub phase: Phase,
    pub patch: usize,
    pub loss: f64,
    pub l1: Option<f64>,
    pub bce: f64,
    pub samples: Vec<SampleTrace>,
}

struct Micro {
    grads: [Option<Vec<Option<Tensor>>>; 4],
    loss: f64,
    l1: Option<f64>,
    bce: f64,
    mode: Option<TransparencyClass>,
    adapter_ran: bool,
    stats: Option<BatchStats>,
}

/// Stateful training loop over an in-memory set of pairs.
pub struct Trainer {
    model: ModelBundle,
    config: TrainConfig,
    data: Vec<TrainSample>,
    opaque: Vec<Instruction>,
    semi: Vec<Instruction>,
    rng: ChaCha8Rng,
    step: u64,
    optimizers: [AdamW; 4],
}

impl Trainer {
    pub fn new(model: ModelBundle, config: TrainConfig, data: Vec<TrainSample>, corpus: &InstructionCorpus) -> Result<Self> {
        config.validate(model.config.spatial_multiple())?;
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let need = config.max_patch();
        if let Some(s) = data.iter().find(|s| s.pair.dims().0 < need || s.pair.dims().1 < need) {
            return Err(Error::Parameter(format!(
                "pair of size {:?} is smaller than the scheduled patch size {need}",
                s.pair.dims()
            )));
        }
        corpus.validate()?;
        Anchors::embed(&model.encoders.text, &model.config.switch)?;
        let o = config.optimizer;
        let optimizers = [
            AdamW::new(o, model.detector.store()),
            AdamW::new(o, model.adapter.store()),
            AdamW::new(o, model.removal.store()),
            AdamW::new(o, model.encoders.text.store()),
        ];
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            opaque: corpus.instructions(TransparencyClass::Opaque),
            semi: corpus.instructions(TransparencyClass::SemiTransparent),
            model,
            config,
            data,
            step: 0,
            optimizers,
        })
    }

    /// Continue from a checkpoint that carries training state.
    pub fn resume(checkpoint: Checkpoint, data: Vec<TrainSample>, corpus: &InstructionCorpus) -> Result<Self> {
        let state = checkpoint
            .training
            .ok_or_else(|| Error::Load("checkpoint holds no training state".into()))?;
        let mut t = Self::new(checkpoint.model, state.config, data, corpus)?;
        t.step = state.step;
        t.rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        t.rng.set_word_pos(state.rng_word_pos);
        for (name, opt) in state.optimizers {
            let k = TRAINED
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Load(format!("no optimizer slot for {name:?}")))?;
            t.optimizers[k] = opt;
        }
        Ok(t)
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }

    pub fn into_model(self) -> ModelBundle {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn set_total_steps(&mut self, total: u64) -> Result<()> {
        let mut c = self.config.clone();
        c.total_steps = total;
        let need = c.max_patch();
        if self.data.iter().any(|s| s.pair.dims().0 < need || s.pair.dims().1 < need) {
            return Err(Error::Parameter(format!("extending to {total} steps reaches patch size {need}")));
        }
        self.config = c;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingState {
                config: self.config.clone(),
                step: self.step,
                rng_seed: self.config.seed,
                rng_word_pos: self.rng.get_word_pos(),
                optimizers: TRAINED
                    .iter()
                    .zip(&self.optimizers)
                    .map(|(n, o)| ((*n).to_owned(), o.clone()))
                    .collect(),
            }),
        }
    }

    /// Run one optimizer step (possibly over several accumulated samples).
    pub fn step(&mut self) -> Result<StepTrace> {
        let step = self.step;
        let patch = self.config.patch_at(step);
        let phase = if step < self.config.detector_warmup_steps {
            Phase::Warmup
        } else {
            Phase::Joint
        };
        let k = self.config.grad_accumulation;
        let mut sums: [Option<Vec<Option<Tensor>>>; 4] = [None, None, None, None];
        let mut samples = Vec::with_capacity(k);
        let (mut loss, mut l1, mut bce) = (0.0, 0.0, 0.0);

        for _ in 0..k {
            let index = self.rng.random_range(0..self.data.len());
            let (pair, flips) = augment(&self.data[index].pair, self.config.flip_prob, &mut self.rng)?;
            let (pair, origin) = crop_patch(&pair, patch, &mut self.rng)?;
            let instruction = match &self.data[index].instruction {
                Some(i) => i.clone(),
                None => {
                    let pool = match pair.transparency() {
                        TransparencyClass::Opaque => &self.opaque,
                        TransparencyClass::SemiTransparent => &self.semi,
                    };
                    pool[self.rng.random_range(0..pool.len())].clone()
                }
            };
            let micro = match phase {
                Phase::Warmup => self.warmup_pass(&pair)?,
                Phase::Joint => self.joint_pass(&pair, &instruction)?,
            };
            let grads_finite = micro.grads.iter().flatten().flatten().flatten().all(|t| t.all_finite());
            if !micro.loss.is_finite() || !grads_finite {
                let dump = serde_json::json!({
                    "step": step,
                    "non_finite": if micro.loss.is_finite() { "gradient" } else { "loss" },
                    "phase": phase,
                    "sample": index,
                    "origin": origin,
                    "flips": flips,
                    "instruction": instruction.text(),
                    "l1": micro.l1,
                    "bce": micro.bce,
                });
                return Err(Error::Numeric(format!("training diverged: {dump}")));
            }
            if let Some(stats) = &micro.stats {
                let bn = self.model.adapter.entry_batch_norm().clone();
                bn.update_running(self.model.adapter.store_mut(), stats);
            }
            for (sum, g) in sums.iter_mut().zip(micro.grads) {
                if let Some(g) = g {
                    accumulate(sum, g);
                }
            }
            loss += micro.loss;
            l1 += micro.l1.unwrap_or(0.0);
            bce += micro.bce;
            samples.push(SampleTrace {
                index,
                origin,
                flips,
                instruction: instruction.text().to_owned(),
                mode: micro.mode,
                adapter_ran: micro.adapter_ran,
            });
        }

        let inv = 1.0 / k as f64;
        for (i, sum) in sums.into_iter().enumerate() {
            let Some(mut grads) = sum else { continue };
            if k > 1 {
                grads.iter_mut().flatten().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= inv));
            }
            let store = match i {
                0 => self.model.detector.store_mut(),
                1 => self.model.adapter.store_mut(),
                2 => self.model.removal.store_mut(),
                _ => self.model.encoders.text.store_mut(),
            };
            self.optimizers[i].step(store, &grads);
        }
        if !self.model.all_finite() {
            let dump = serde_json::json!({ "step": step, "non_finite": "parameters" });
            return Err(Error::Numeric(format!("training diverged: {dump}")));
        }
        self.step += 1;
        Ok(StepTrace {
            step,
            phase,
            patch,
            loss: loss * inv,
            l1: (phase == Phase::Joint).then_some(l1 * inv),
            bce: bce * inv,
            samples,
        })
    }

    fn warmup_pass(&self, pair: &ScenePair) -> Result<Micro> {
        let mut g = Graph::new();
        let pd = Bound::bind(&mut g, self.model.detector.store(), true);
        let x = g.constant(pair.composite().to_tensor());
        let logits = self.model.detector.forward_logits(&mut g, &pd, x);
        let bce = g.bce_with_logits(logits, &pair.mask().to_tensor());
        let value = g.value(bce).data()[0];
        let grads = g.backward(bce);
        Ok(Micro {
            grads: [Some(grads.for_bound(&g, &pd)), None, None, None],
            loss: value,
            l1: None,
            bce: value,
            mode: None,
            adapter_ran: false,
            stats: None,
        })
    }

    fn joint_pass(&self, pair: &ScenePair, instruction: &Instruction) -> Result<Micro> {
        let m = &self.model;
        let text = m.encoders.text.embed_text(instruction.text())?;
        let visual = m.encoders.visual.embed_image(pair.composite())?;
        let anchors = Anchors::embed(&m.encoders.text, &m.config.switch)?;
        let decision = classify_transparency(&text, &anchors, m.config.switch.theta)?;
        let mode = m.config.routing.apply(decision.class);
        let train_text = self.config.train_text_projection;

        let mut g = Graph::new();
        let pd = Bound::bind(&mut g, m.detector.store(), true);
        let x = g.constant(pair.composite().to_tensor());
        let logits = m.detector.forward_logits(&mut g, &pd, x);
        let bce = g.bce_with_logits(logits, &pair.mask().to_tensor());
        let probs = g.sigmoid(logits);

        let (mask, pa, bn) = match mode {
            TransparencyClass::Opaque => {
                let p = g.value(probs);
                let hard = p.data().iter().map(|&v| if v >= m.config.tau { 1.0 } else { 0.0 }).collect();
                (g.constant(Tensor::new(p.shape().to_vec(), hard)?), None, None)
            }
            TransparencyClass::SemiTransparent => {
                let pa = Bound::bind(&mut g, m.adapter.store(), true);
                let f = m.adapter.forward(&mut g, &pa, probs, true);
                (f.mask, Some(pa), Some(f.batch_norm))
            }
        };
        let keep = g.affine(mask, -1.0, 1.0);
        let cut = g.mul_broadcast_rows(x, keep);
        let (prompt, pt) = if train_text {
            let d = m.encoders.text.config().dim;
            let bag = m.encoders.text.bag(instruction.text())?;
            let bag = g.constant(Tensor::new(vec![1, bag.len()], bag)?);
            let pt = Bound::bind(&mut g, m.encoders.text.store(), true);
            let t = m.encoders.text.forward(&mut g, &pt, bag);
            let v = g.constant(Tensor::new(vec![1, d], visual.vector().to_vec())?);
            let tokens = g.concat(&[t, v]);
            let unit = g.l2_normalize_rows(tokens, 1e-12);
            (g.scale(unit, (d as f64).sqrt()), Some(pt))
        } else {
            let tokens = MultiModalPrompt::from_embeddings(&[&text, &visual])?;
            (g.constant(RemovalNet::prompt_tensor(&tokens)), None)
        };
        let pr = Bound::bind(&mut g, m.removal.store(), true);
        let out = m.removal.forward(&mut g, &pr, cut, mask, prompt);
        let l1 = g.mean_abs_diff(out, &pair.background().to_tensor());
        let weighted = g.scale(bce, self.config.detector_bce_weight);
        let total = g.add(l1, weighted);

        let loss = g.value(total).data()[0];
        let l1v = g.value(l1).data()[0];
        let bcev = g.value(bce).data()[0];
        let stats = bn.and_then(|b| g.batch_stats(b).cloned());
        let grads = g.backward(total);
        Ok(Micro {
            grads: [
                Some(grads.for_bound(&g, &pd)),
                pa.as_ref().map(|pa| grads.for_bound(&g, pa)),
                Some(grads.for_bound(&g, &pr)),
                pt.as_ref().map(|pt| grads.for_bound(&g, pt)),
            ],
            loss,
            l1: Some(l1v),
            bce: bcev,
            mode: Some(mode),
            adapter_ran: pa.is_some(),
            stats,
        })
    }

    /// Step until `total_steps`, reporting each step. With a directory and a
    /// positive `checkpoint_every`, saves `step_NNNNNN.ckpt` and refreshes
    /// `latest.ckpt`; returns the paths written.
    pub fn run(&mut self, observer: &mut dyn FnMut(&StepTrace), checkpoint_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        while self.step < self.config.total_steps {
            let trace = self.step()?;
            observer(&trace);
            let every = self.config.checkpoint_every;
            if let (Some(dir), true) = (checkpoint_dir, every > 0 && self.step % every == 0) {
                let ckpt = self.checkpoint();
                let path = dir.join(format!("step_{:06}.ckpt", self.step));
                ckpt.save(&path)?;
                ckpt.save(&dir.join("latest.ckpt"))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn accumulate(sum: &mut Option<Vec<Option<Tensor>>>, grads: Vec<Option<Tensor>>) {
    match sum {
        None => *sum = Some(grads),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
        }
    }
}

/// Train a model from scratch for `config.total_steps` steps and return the
/// final checkpoint.
pub fn train(
    model: ModelBundle,
    config: TrainConfig,
    data: Vec<TrainSample>,
    corpus: &InstructionCorpus,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<Checkpoint> {
    let mut t = Trainer::new(model, config, data, corpus)?;
    t.run(observer, None)?;
    Ok(t.checkpoint())
}
