mod common;

use deobstruct::imaging::{MaskKind, TransparencyClass};
use deobstruct::model::{ModelBundle, Routing};
use deobstruct::pipeline::infer;
use deobstruct::prompting::{classify_text, tokenize, Instruction, InstructionCorpus};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ModelBundle {
    ModelBundle::new(common::small_model_config(), 2).unwrap()
}

#[test]
fn trace_agrees_with_the_switch_on_random_instructions() {
    let m = model();
    let corpus = InstructionCorpus::bundled();
    let words: Vec<String> = corpus.opaque.iter().chain(&corpus.semi_transparent).flat_map(|s| tokenize(s)).collect();
    let img = common::raindrop_pair(24, 3).composite().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = [0usize; 2];
    for _ in 0..50 {
        let n = rng.random_range(1..7);
        let text = (0..n).map(|_| words.choose(&mut rng).unwrap().as_str()).collect::<Vec<_>>().join(" ");
        let out = infer(&m, &img, &Instruction::new(text.clone()).unwrap(), None).unwrap();
        let expected = classify_text(&text, &m.encoders.text, &m.config.switch).unwrap();
        let t = &out.trace;
        assert_eq!(t.class, expected.class, "{text}");
        assert_eq!((t.sim_opaque, t.sim_semi_transparent), (expected.sim_opaque, expected.sim_semi_transparent));
        assert!((t.p_opaque + t.p_semi_transparent - 1.0).abs() < 1e-12);
        let semi = t.class == TransparencyClass::SemiTransparent;
        assert_eq!(t.adapter_ran, semi);
        assert_eq!(out.mask.kind() == MaskKind::Soft, semi);
        if !semi {
            assert!(out.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        }
        assert!((t.mask_mean - out.mask.mean()).abs() < 1e-12);
        seen[semi as usize] += 1;
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

#[test]
fn anchor_phrases_route_as_named() {
    let m = model();
    let img = common::fence_pair(32, 1).composite().clone();
    let semi = infer(&m, &img, &Instruction::new("remove the semi-transparent raindrops").unwrap(), None).unwrap();
    assert!(semi.trace.adapter_ran);
    let hard = infer(&m, &img, &Instruction::new("remove the opaque fence").unwrap(), None).unwrap();
    assert!(!hard.trace.adapter_ran);
    assert_eq!(hard.mask.kind(), MaskKind::Hard);
}

#[test]
fn output_matches_input_size_and_is_deterministic() {
    let m = model();
    let pair = common::fence_pair(40, 5);
    let img = pair.composite().crop(0, 0, 37, 29).unwrap();
    let instr = Instruction::new("remove the fence").unwrap();
    let a = infer(&m, &img, &instr, None).unwrap();
    let b = infer(&m, &img, &instr, None).unwrap();
    assert_eq!(a.image.dims(), (37, 29));
    assert_eq!(a.mask.dims(), (37, 29));
    assert_eq!(a.image, b.image);
    assert_eq!(a.trace.to_json(false), b.trace.to_json(false));
    assert!(!a.trace.to_json(false).contains("total_ms"));
    assert!(a.trace.to_json(true).contains("total_ms"));
}

#[test]
fn override_mask_and_forced_routing() {
    let mut m = model();
    let pair = common::fence_pair(32, 6);
    let instr = Instruction::new("remove the raindrops").unwrap();
    let out = infer(&m, pair.composite(), &instr, Some(pair.mask())).unwrap();
    assert!(out.trace.mask_override);
    assert_eq!(&out.initial_mask, pair.mask());

    m.config.routing = Routing::ForceHard;
    let out = infer(&m, pair.composite(), &instr, Some(pair.mask())).unwrap();
    assert!(!out.trace.adapter_ran);
    assert_eq!(&out.mask, pair.mask());
    m.config.routing = Routing::ForceSoft;
    let out = infer(&m, pair.composite(), &Instruction::new("remove the opaque fence").unwrap(), None).unwrap();
    assert!(out.trace.adapter_ran);

    let wrong = deobstruct::imaging::AlphaMask::zeros(16, 32);
    assert!(infer(&m, pair.composite(), &instr, Some(&wrong)).is_err());
}
