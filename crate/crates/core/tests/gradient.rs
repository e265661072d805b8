//! Finite-difference check of image -> embedding -> triplet loss gradients.

use derm_core::model::{init_model, ConvSpec, ModelConfig};
use derm_core::tensor::Tensor;
use derm_core::triplet::{batch_gradient, gradient_check, ImageSet, Regime, Triplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 12,
        channels_in: 3,
        conv_specs: vec![
            ConvSpec { filters: 4, kernel: 3, stride: 2, pad: 1, pool: false },
            ConvSpec { filters: 5, kernel: 3, stride: 1, pad: 1, pool: true },
            ConvSpec { filters: 6, kernel: 3, stride: 1, pad: 1, pool: false },
        ],
        embed_dim: 6,
        seed,
    }
}

fn random_images(seed: u64, ids: &[&str], size: usize) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.iter()
        .map(|id| {
            let data = (0..3 * size * size).map(|_| rng.gen::<f64>()).collect();
            (id.to_string(), Tensor::new(vec![3, size, size], data).unwrap())
        })
        .collect()
}

#[test]
fn pipeline_gradients_match_finite_differences() {
    let batch = [Triplet::new("a", "b", "c", Regime::Disease), Triplet::new("c", "a", "b", Regime::Disease)];
    for seed in 0..20 {
        let model = small_model(seed);
        let params = init_model(&model).unwrap();
        let images = random_images(seed, &["a", "b", "c"], 12);
        // freshly initialized embeddings are small, so the hinge is active
        let (loss, _) = batch_gradient(&model, &params, &images, &batch, 1.0).unwrap();
        assert!(loss > 0.5);
        let g = gradient_check(&model, &params, &images, &batch, 1.0, 1e-5, 1e-6).unwrap();
        assert_eq!(g.checked, params.num_scalars());
        assert!(g.max_relative_error < 1e-4, "seed {seed}: {g:?}");
    }
}

#[test]
fn inactive_hinge_has_zero_gradient_everywhere() {
    let model = small_model(3);
    let params = init_model(&model).unwrap();
    let mut images = random_images(3, &["a", "b"], 12);
    images.insert("c".into(), images["a"].map(|v| v * 1e4));
    let batch = [Triplet::new("a", "b", "c", Regime::Disease)];
    let (loss, grads) = batch_gradient(&model, &params, &images, &batch, 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn desk_model_spot_check() {
    let model = ModelConfig::default();
    let params = init_model(&model).unwrap();
    let images = random_images(9, &["a", "b", "c"], model.input_size);
    let batch = [Triplet::new("a", "b", "c", Regime::Disease)];
    let (_, grads) = batch_gradient(&model, &params, &images, &batch, 1.0).unwrap();
    // central differences on a handful of head and first-layer scalars
    for (name, i) in [("conv0.weight", 5), ("conv0.bias", 1), ("conv2.weight", 100), ("conv2.bias", 7)] {
        let mut p = params.clone();
        let orig = p.get(name).unwrap().data()[i];
        let mut at = |v: f64| {
            p.get_mut(name).unwrap().data_mut()[i] = v;
            batch_gradient(&model, &p, &images, &batch, 1.0).unwrap().0
        };
        let numeric = (at(orig + 1e-5) - at(orig - 1e-5)) / 2e-5;
        let analytic = grads[name].data()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(err < 1e-4, "{name}[{i}]: {analytic} vs {numeric}");
    }
}
