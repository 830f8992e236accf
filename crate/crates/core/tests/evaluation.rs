mod common;

use deobstruct::evaluation::*;
use deobstruct::imaging::{AlphaMask, ObstructionKind, SceneImage};
use deobstruct::prompting::Instruction;
use deobstruct::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SceneImage {
    SceneImage::from_fn(w, h, |_, _, _| rng.random()).unwrap()
}

#[test]
fn psnr_examples() {
    let a = SceneImage::filled(16, 16, [0.3; 3]).unwrap();
    let b = SceneImage::filled(16, 16, [0.4; 3]).unwrap();
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
    let black = SceneImage::filled(16, 16, [0.0; 3]).unwrap();
    let white = SceneImage::filled(16, 16, [1.0; 3]).unwrap();
    assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
    assert!(matches!(psnr(&a, &SceneImage::filled(8, 16, [0.3; 3]).unwrap()), Err(Error::Shape(_))));
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, 24, 24);
    let noise: Vec<f64> = (0..img.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for s in [0.01, 0.05, 0.1, 0.2] {
        let data = img.data().iter().zip(&noise).map(|(v, n)| v + s * n).collect();
        let noisy = SceneImage::from_clamped(24, 24, data).unwrap();
        let p = psnr(&img, &noisy).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_matches_a_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..3 {
        let a = random_image(&mut rng, 64, 64);
        let b = random_image(&mut rng, 64, 64);
        assert!((ssim(&a, &b).unwrap() - common::ssim_oracle(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }
    let small = SceneImage::filled(10, 32, [0.5; 3]).unwrap();
    assert!(matches!(ssim(&small, &small), Err(Error::Parameter(_))));
}

#[test]
fn ssim_is_nearly_invariant_to_a_shared_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let a = SceneImage::from_fn(32, 32, |_, _, _| rng.random_range(0.1..0.8)).unwrap();
        let b = SceneImage::from_fn(32, 32, |x, y, c| (a.get(x, y, c) + rng.random_range(-0.1..0.1)).clamp(0.0, 0.9)).unwrap();
        let c = rng.random_range(0.02..0.1);
        let shift = |img: &SceneImage| SceneImage::from_fn(32, 32, |x, y, ch| img.get(x, y, ch) + c).unwrap();
        let base = ssim(&a, &b).unwrap();
        assert!((ssim(&shift(&a), &shift(&b)).unwrap() - base).abs() < 1e-3);
    }
}

#[test]
fn iou_examples() {
    let m = |bits: &[u8]| AlphaMask::hard(4, 1, bits.iter().map(|&b| b as f64).collect()).unwrap();
    assert_eq!(mask_iou(&m(&[1, 1, 0, 0]), &m(&[1, 1, 0, 0])).unwrap(), 1.0);
    assert_eq!(mask_iou(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap(), 0.0);
    assert!((mask_iou(&m(&[1, 1, 0, 0]), &m(&[0, 1, 1, 0])).unwrap() - 1.0 / 3.0).abs() < 1e-9);
    assert_eq!(mask_iou(&AlphaMask::zeros(4, 4), &AlphaMask::zeros(4, 4)).unwrap(), 1.0);
    assert!(matches!(mask_iou(&AlphaMask::zeros(4, 4), &AlphaMask::zeros(4, 3)), Err(Error::Shape(_))));

    // 20x20 squares offset by half their width: overlap 200 of 600.
    let sq = |x0: usize| AlphaMask::hard(40, 20, (0..800).map(|i| if (x0..x0 + 20).contains(&(i % 40)) { 1.0 } else { 0.0 }).collect()).unwrap();
    assert!((mask_iou(&sq(0), &sq(10)).unwrap() - 1.0 / 3.0).abs() < 1e-9);
}

fn items() -> Vec<EvalItem> {
    vec![
        EvalItem {
            name: "f".into(),
            pair: common::fence_pair(32, 1),
            instruction: Instruction::new("remove the fence").unwrap(),
        },
        EvalItem {
            name: "r".into(),
            pair: common::raindrop_pair(32, 2),
            instruction: Instruction::new("remove the raindrops").unwrap(),
        },
    ]
}

#[test]
fn identity_report_scores_the_composites() {
    let set = items();
    let report = evaluate(&IdentityRestorer, &set).unwrap();
    for (m, item) in report.images.iter().zip(&set) {
        let expected = psnr(item.pair.background(), item.pair.composite()).unwrap();
        assert_eq!(m.psnr, expected);
        assert_eq!(m.input_psnr, expected);
    }
    let mean = (report.images[0].psnr + report.images[1].psnr) / 2.0;
    assert!((report.overall.mean_psnr - mean).abs() < 1e-12);
    assert_eq!(report.per_kind[&ObstructionKind::Fence].count, 1);
    assert_eq!(report.per_kind[&ObstructionKind::Raindrop].mean_psnr, report.images[1].psnr);
    assert_eq!(MetricReport::from_json(&report.to_json()).unwrap(), report);
    assert!(report.table().contains("raindrop"));

    let one = evaluate(&IdentityRestorer, &set[..1]).unwrap();
    assert_eq!(one.overall.mean_ssim, one.images[0].ssim);
    assert!(matches!(evaluate(&IdentityRestorer, &[]), Err(Error::Validation(_))));
}
