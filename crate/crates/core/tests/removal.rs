use deobstruct::imaging::{procedural_background, AlphaMask, SceneImage};
use deobstruct::prompting::{Embedding, EmbeddingSource, MultiModalPrompt};
use deobstruct::removal::*;
use deobstruct::tensor::Tensor;
use deobstruct::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn prompt(d: usize, seed: u64) -> MultiModalPrompt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Embedding::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), EmbeddingSource::Text).unwrap();
    let v = Embedding::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), EmbeddingSource::Visual).unwrap();
    MultiModalPrompt::from_embeddings(&[&t, &v]).unwrap()
}

#[test]
fn single_token_attention_passes_the_value_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random(&mut rng, 5, 4);
    let k = random(&mut rng, 1, 4);
    let v = random(&mut rng, 1, 4);
    for lambda in [0.1, 1.0, 7.0] {
        let a = cross_attention(&q, &k, &v, lambda).unwrap();
        for row in a.output.data().chunks(4) {
            for (x, y) in row.iter().zip(v.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_queries_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::zeros(&[3, 4]);
    let k = random(&mut rng, 5, 4);
    let v = random(&mut rng, 5, 4);
    let a = cross_attention(&q, &k, &v, 1.0).unwrap();
    let mean: Vec<f64> = (0..4).map(|j| (0..5).map(|i| v.data()[i * 4 + j]).sum::<f64>() / 5.0).collect();
    for row in a.output.data().chunks(4) {
        for (x, y) in row.iter().zip(&mean) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn two_token_example_and_row_sums() {
    let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, 4.0]).unwrap();
    let a = cross_attention(&q, &k, &v, 1.0).unwrap();
    let w1 = 1.0 / (1.0 + (-1.0f64).exp());
    let expected = [w1 * 2.0 + (1.0 - w1) * 0.5, -w1 + (1.0 - w1) * 4.0];
    for (x, y) in a.output.data().iter().zip(expected) {
        assert!((x - y).abs() < 1e-4);
    }
    assert!((a.weights.data()[0] - 0.7311).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = cross_attention(&random(&mut rng, 7, 3), &random(&mut rng, 4, 3), &random(&mut rng, 4, 3), 0.3).unwrap();
    for row in a.weights.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(matches!(cross_attention(&q, &k, &v, 0.0), Err(Error::Validation(_))));
    assert!(matches!(cross_attention(&q, &k, &v, -1.0), Err(Error::Validation(_))));
    assert!(cross_attention(&q, &k, &random(&mut rng, 3, 2), 1.0).is_err());
}

fn small() -> RemovalConfig {
    RemovalConfig {
        widths: vec![8, 16],
        blocks_per_stage: 1,
        heads: 2,
        ffn_expansion: 2,
        prompt_dim: 16,
    }
}

#[test]
fn output_keeps_the_input_size_and_range() {
    let net = RemovalNet::new(small(), 0).unwrap();
    let p = prompt(16, 0);
    for (w, h) in [(64, 64), (96, 96), (128, 128), (30, 17)] {
        let img = procedural_background(w, h, 1).unwrap();
        let out = net.remove(&img, &AlphaMask::zeros(w, h), &p).unwrap();
        assert_eq!(out.dims(), (w, h));
        assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    let bright = SceneImage::filled(16, 16, [1.0; 3]).unwrap();
    let out = net.remove(&bright, &AlphaMask::ones(16, 16), &prompt(16, 9)).unwrap();
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn mismatched_inputs_are_shape_errors() {
    let net = RemovalNet::new(small(), 0).unwrap();
    let img = procedural_background(16, 16, 1).unwrap();
    assert!(matches!(net.remove(&img, &AlphaMask::zeros(16, 16), &prompt(8, 0)), Err(Error::Shape(_))));
    assert!(matches!(net.remove(&img, &AlphaMask::zeros(8, 16), &prompt(16, 0)), Err(Error::Shape(_))));
}

#[test]
fn parameter_count_is_stable_and_monotone() {
    let a = RemovalNet::new(small(), 0).unwrap().count_parameters();
    assert_eq!(a, RemovalNet::new(small(), 99).unwrap().count_parameters());
    let deeper = RemovalConfig {
        blocks_per_stage: 2,
        ..small()
    };
    assert!(RemovalNet::new(deeper, 0).unwrap().count_parameters() > a);
    let empty = RemovalConfig {
        widths: vec![],
        ..small()
    };
    assert!(matches!(RemovalNet::new(empty, 0), Err(Error::Validation(_))));
}
