//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use deobstruct::evaluation::{mask_iou, psnr, ssim};
use deobstruct::imaging::*;
use deobstruct::mask::{AdapterConfig, SoftMaskAdapter};
use deobstruct::model::{ModelBundle, ModelConfig, Routing};
use deobstruct::pipeline::infer;
use deobstruct::prompting::*;
use deobstruct::removal::{cross_attention, RemovalConfig, RemovalNet};
use deobstruct::tensor::{Graph, Tensor};
use deobstruct::training::{Checkpoint, TrainConfig, TrainSample, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SceneImage {
    SceneImage::from_fn(w, h, |_, _, _| rng.random()).unwrap()
}

fn compositing_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(8..24), rng.random_range(8..24));
        let b = random_image(&mut rng, w, h);
        let r = random_image(&mut rng, w, h);
        let m = AlphaMask::soft(w, h, (0..w * h).map(|_| rng.random()).collect()).unwrap();
        let i = compose(&b, &r, &m).unwrap();
        let cut = cutout(&i, &m).unwrap();
        for y in 0..h {
            for x in 0..w {
                let a = m.get(x, y);
                for c in 0..3 {
                    let expected = a * r.get(x, y, c) + (1.0 - a) * b.get(x, y, c);
                    worst = worst.max((i.get(x, y, c) - expected).abs());
                    worst = worst.max((cut.get(x, y, c) - expected * (1.0 - a)).abs());
                }
            }
        }
        worst = worst.max(max_diff(&compose(&b, &r, &AlphaMask::zeros(w, h)).unwrap(), &b));
        worst = worst.max(max_diff(&compose(&b, &r, &AlphaMask::ones(w, h)).unwrap(), &r));
        worst = worst.max(max_diff(&cutout(&b, &AlphaMask::zeros(w, h)).unwrap(), &b));
        worst = worst.max(cutout(&b, &AlphaMask::ones(w, h)).unwrap().data().iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    check(worst <= 1e-6, format!("1000 triples, max deviation {worst:.2e}"))
}

fn max_diff(a: &SceneImage, b: &SceneImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn switch_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let emb = |v: Vec<f64>| Embedding::new(v, EmbeddingSource::Text).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut triples: Vec<[Vec<f64>; 3]> = (0..99)
        .map(|_| {
            let d = rng.random_range(2..16);
            let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            [v(), v(), v()]
        })
        .collect();
    triples.push([vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (mut agree, mut ties, mut worst_sum) = (0, 0, 0.0f64);
    for [t, o, s] in &triples {
        let anchors = Anchors {
            opaque: emb(o.clone()),
            semi_transparent: emb(s.clone()),
        };
        let got = classify_transparency(&emb(t.clone()), &anchors, 0.5).unwrap();
        let (so, ss) = (cos(t, o), cos(t, s));
        let ps = ss.exp() / (so.exp() + ss.exp());
        let expected = if ps > 0.5 { TransparencyClass::SemiTransparent } else { TransparencyClass::Opaque };
        let argmax = if ss > so { TransparencyClass::SemiTransparent } else { TransparencyClass::Opaque };
        if so == ss {
            ties += 1;
        }
        if got.class == expected && got.class == argmax && (got.p_semi_transparent - ps).abs() < 1e-9 {
            agree += 1;
        }
        worst_sum = worst_sum.max((got.p_opaque + got.p_semi_transparent - 1.0).abs());
    }
    for _ in 0..100 {
        let logits: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(-30.0..30.0)).collect();
        worst_sum = worst_sum.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
    }
    check(
        agree == triples.len() && ties >= 1 && worst_sum <= 1e-9,
        format!("{agree}/{} agree, {ties} tie, softmax sum error {worst_sum:.1e}", triples.len()),
    )
}

fn attention_examples() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand_t = |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut worst: f64 = 0.0;

    let (q, k, v) = (rand_t(6, 4), rand_t(1, 4), rand_t(1, 4));
    let one = cross_attention(&q, &k, &v, 0.7).unwrap();
    for row in one.output.data().chunks(4) {
        worst = worst.max(row.iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let (k, v) = (rand_t(5, 4), rand_t(5, 4));
    let uni = cross_attention(&Tensor::zeros(&[3, 4]), &k, &v, 1.0).unwrap();
    for row in uni.output.data().chunks(4) {
        for (j, x) in row.iter().enumerate() {
            let mean = (0..5).map(|i| v.data()[i * 4 + j]).sum::<f64>() / 5.0;
            worst = worst.max((x - mean).abs());
        }
    }

    let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.5, 1.0]).unwrap();
    let two = cross_attention(&q, &k, &v, 1.0).unwrap();
    for (j, x) in two.output.data().iter().enumerate() {
        let expected = 0.7311 * v.data()[j] + 0.2689 * v.data()[2 + j];
        worst = worst.max((x - expected).abs());
    }

    let mut row_err: f64 = 0.0;
    for _ in 0..20 {
        let a = cross_attention(&rand_t(9, 8), &rand_t(3, 8), &rand_t(3, 8), 0.5).unwrap();
        for row in a.weights.data().chunks(3) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst < 1e-4 && row_err < 1e-6, format!("max deviation {worst:.1e}, row sum error {row_err:.1e}"))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut adapter = SoftMaskAdapter::new(AdapterConfig::default(), 1).map_err(|e| e.to_string())?;
    common::jitter(adapter.store_mut(), 11);
    let mask = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random()).collect()).unwrap();
    let wa = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (na, ea) = common::gradient_check(adapter.store(), 0.01, 5, |g: &mut Graph, p| {
        let m = g.constant(mask.clone());
        let out = adapter.forward(g, p, m, true).mask;
        let w = g.constant(wa.clone());
        let y = g.mul(out, w);
        g.sum(y)
    });

    let cfg = RemovalConfig {
        widths: vec![16],
        blocks_per_stage: 1,
        heads: 2,
        ffn_expansion: 2,
        prompt_dim: 16,
    };
    let mut net = RemovalNet::new(cfg, 2).map_err(|e| e.to_string())?;
    common::jitter(net.store_mut(), 12);
    let mut t = |shape: &[usize], lo: f64| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..1.0)).collect()).unwrap()
    };
    let (cut, m, prompt, wr) = (t(&[3, 16, 16], 0.0), t(&[1, 16, 16], 0.0), t(&[2, 16], -1.0), t(&[3, 16, 16], -1.0));
    let (nr, er) = common::gradient_check(net.store(), 0.01, 6, |g: &mut Graph, p| {
        let (c, mm, pr) = (g.constant(cut.clone()), g.constant(m.clone()), g.constant(prompt.clone()));
        let out = net.forward(g, p, c, mm, pr);
        let w = g.constant(wr.clone());
        let y = g.mul(out, w);
        g.sum(y)
    });
    check(
        ea < 1e-4 && er < 1e-4 && na > 0 && nr > 0,
        format!("adapter {na} params rel err {ea:.1e}, removal {nr} params rel err {er:.1e}"),
    )
}

fn metric_oracles() -> Outcome {
    let a = SceneImage::filled(32, 32, [0.25; 3]).unwrap();
    let b = SceneImage::filled(32, 32, [0.35; 3]).unwrap();
    let cap = psnr(&a, &a).unwrap();
    let p = psnr(&a, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut self_err, mut oracle_err) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let x = random_image(&mut rng, 64, 64);
        let y = random_image(&mut rng, 64, 64);
        self_err = self_err.max((ssim(&x, &x).unwrap() - 1.0).abs());
        oracle_err = oracle_err.max((ssim(&x, &y).unwrap() - common::ssim_oracle(&x, &y)).abs());
    }
    check(
        cap == 100.0 && (p - 20.0).abs() < 1e-6 && self_err < 1e-6 && oracle_err < 1e-6,
        format!("cap {cap}, uniform 0.1 -> {p:.9} dB, ssim(X,X) error {self_err:.1e}, oracle error {oracle_err:.1e}"),
    )
}

fn detector_sanity() -> Outcome {
    let train: Vec<_> = (0..32).map(|i| TrainSample::new(synth_pair(ObstructionKind::Fence, 64, 64, 100 + i).unwrap())).collect();
    let held: Vec<_> = (0..8).map(|i| synth_pair(ObstructionKind::Fence, 64, 64, 900 + i).unwrap()).collect();
    let cfg = TrainConfig {
        total_steps: 500,
        detector_warmup_steps: 500,
        ..TrainConfig::desk()
    };
    let model = ModelBundle::new(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, cfg, train, &InstructionCorpus::bundled()).map_err(|e| e.to_string())?;
    trainer.run(&mut |_| {}, None).map_err(|e| e.to_string())?;
    let m = trainer.model();
    let ious: Vec<f64> = held.iter().map(|p| mask_iou(&m.detector.detect_mask(p.composite()).unwrap(), p.mask()).unwrap()).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    check(mean >= 0.7, format!("mean held-out IoU {mean:.3} over {} pairs", ious.len()))
}

struct Overfit {
    model: ModelBundle,
    pairs: Vec<ScenePair>,
    instructions: Vec<Instruction>,
    joint_l1: Vec<f64>,
}

fn overfit(kind: ObstructionKind, routing: Routing) -> Result<Overfit, String> {
    let corpus = InstructionCorpus::bundled();
    let pairs: Vec<ScenePair> = (0..8).map(|i| synth_pair(kind, 64, 64, 300 + i).unwrap()).collect();
    let instructions: Vec<Instruction> = pairs.iter().map(|p| corpus.instructions(p.transparency())[0].clone()).collect();
    let data = pairs.iter().zip(&instructions).map(|(p, i)| TrainSample::with_instruction(p.clone(), i.clone())).collect();
    let config = ModelConfig {
        routing,
        ..ModelConfig::default()
    };
    let model = ModelBundle::new(config, 0).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, TrainConfig::desk(), data, &corpus).map_err(|e| e.to_string())?;
    let mut joint_l1 = Vec::new();
    trainer.run(&mut |s| joint_l1.extend(s.l1), None).map_err(|e| e.to_string())?;
    Ok(Overfit {
        model: trainer.into_model(),
        pairs,
        instructions,
        joint_l1,
    })
}

fn psnr_gains(run: &Overfit) -> Result<Vec<(f64, f64)>, String> {
    run.pairs
        .iter()
        .zip(&run.instructions)
        .map(|(p, i)| {
            let out = infer(&run.model, p.composite(), i, None).map_err(|e| e.to_string())?;
            Ok((psnr(p.background(), p.composite()).unwrap(), psnr(p.background(), &out.image).unwrap()))
        })
        .collect()
}

fn overfit_experiment() -> Outcome {
    let run = overfit(ObstructionKind::Fence, Routing::Switch)?;
    let n = run.joint_l1.len();
    if n < 200 {
        return Err(format!("only {n} joint steps"));
    }
    let first = run.joint_l1[..100].iter().sum::<f64>() / 100.0;
    let last = run.joint_l1[n - 100..].iter().sum::<f64>() / 100.0;
    let gains: Vec<f64> = psnr_gains(&run)?.iter().map(|(i, o)| o - i).collect();
    let min_gain = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = gains.iter().map(|g| format!("{g:.2}")).collect();
    check(
        last < 0.5 * first && min_gain >= 5.0,
        format!("L1 {first:.4} -> {last:.4} (ratio {:.3}), PSNR gains dB [{}]", last / first, listed.join(", ")),
    )
}

fn finetune_margin() -> Outcome {
    let (train, ho, hs) = common::split_corpus(&InstructionCorpus::bundled(), 10);
    let mut enc = PromptEncoders::new(TextEncoderConfig::default(), VisualEncoderConfig::default(), 1).map_err(|e| e.to_string())?;
    let visual = enc.visual.store().clone();
    let before = common::category_margin(&enc.text, &ho, &hs);
    finetune_text_encoder(&mut enc.text, &train, &FinetuneConfig::default()).map_err(|e| e.to_string())?;
    let after = common::category_margin(&enc.text, &ho, &hs);
    let frozen = &visual == enc.visual.store();
    check(
        after >= 0.1 && frozen,
        format!("held-out margin {before:.3} -> {after:.3}, visual encoder unchanged: {frozen}"),
    )
}

fn mean_abs(a: &AlphaMask, b: &AlphaMask) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

fn adapter_effect() -> Outcome {
    let soft = overfit(ObstructionKind::Raindrop, Routing::Switch)?;
    let hard = overfit(ObstructionKind::Raindrop, Routing::ForceHard)?;
    let mean_out = |run: &Overfit| -> Result<f64, String> { Ok(psnr_gains(run)?.iter().map(|(_, o)| o).sum::<f64>() / 8.0) };
    let (ps, ph) = (mean_out(&soft)?, mean_out(&hard)?);
    let (mut adapted_err, mut initial_err, mut adapter_runs) = (0.0, 0.0, 0);
    for (p, i) in soft.pairs.iter().zip(&soft.instructions) {
        let out = infer(&soft.model, p.composite(), i, None).map_err(|e| e.to_string())?;
        adapter_runs += out.trace.adapter_ran as usize;
        adapted_err += mean_abs(&out.mask, p.mask()) / 8.0;
        initial_err += mean_abs(&out.initial_mask, p.mask()) / 8.0;
    }
    // Mask error is informational; the adapter only sees the restoration loss.
    check(
        ps >= ph && adapter_runs == 8,
        format!(
            "training PSNR adapter {ps:.2} dB vs hard-only {ph:.2} dB; adapter ran on {adapter_runs}/8; mask error vs ground truth: initial {initial_err:.4}, adapted {adapted_err:.4}"
        ),
    )
}

fn round_trips() -> Outcome {
    let corpus = InstructionCorpus::bundled();
    let data: Vec<_> = (0..2).map(|i| TrainSample::new(common::fence_pair(32, i))).collect();
    let cfg = TrainConfig {
        total_steps: 6,
        detector_warmup_steps: 2,
        patch_schedule: vec![(0, 32)],
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelBundle::new(common::small_model_config(), 3).unwrap(), cfg, data, &corpus).map_err(|e| e.to_string())?;
    trainer.run(&mut |_| {}, None).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.ckpt");
    trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?.model;
    let probes = [common::fence_pair(32, 7), common::raindrop_pair(40, 8), common::fence_pair(24, 9)];
    let instr = ["remove the fence", "remove the raindrops", "clear the wire mesh"];
    let mut identical = true;
    for (p, t) in probes.iter().zip(instr) {
        let t = Instruction::new(t).unwrap();
        let a = infer(trainer.model(), p.composite(), &t, None).map_err(|e| e.to_string())?;
        let b = infer(&loaded, p.composite(), &t, None).map_err(|e| e.to_string())?;
        identical &= a.image == b.image && a.mask == b.mask;
    }

    let synth_ok = [ObstructionKind::Fence, ObstructionKind::Raindrop, ObstructionKind::Snow]
        .iter()
        .all(|&k| synth_pair(k, 48, 48, 7).unwrap() == synth_pair(k, 48, 48, 7).unwrap());

    let mut worst: f64 = 0.0;
    for (i, pair) in [common::fence_pair(40, 1), common::raindrop_pair(40, 2)].iter().enumerate() {
        let d = dir.path().join(format!("pair{i}"));
        save_pair(&d, pair, None).map_err(|e| e.to_string())?;
        let back = load_pair(&d).map_err(|e| e.to_string())?;
        for (a, b) in [
            (back.background().data(), pair.background().data()),
            (back.obstruction().data(), pair.obstruction().data()),
            (back.mask().data(), pair.mask().data()),
        ] {
            worst = worst.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    check(
        identical && synth_ok && worst <= 1.0 / 255.0 + 1e-12,
        format!("checkpoint outputs identical: {identical}; synth deterministic: {synth_ok}; pair round trip max error {worst:.5}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("compositing algebra", compositing_algebra),
        ("switch oracle", switch_oracle),
        ("cross-attention", attention_examples),
        ("gradient checks", gradient_checks),
        ("metric oracles", metric_oracles),
        ("detector sanity", detector_sanity),
        ("overfit experiment", overfit_experiment),
        ("contrastive fine-tuning", finetune_margin),
        ("adapter effect", adapter_effect),
        ("determinism and round trips", round_trips),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
