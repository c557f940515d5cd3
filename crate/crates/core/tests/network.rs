use dccs_core::lasea::SampleMode;
use dccs_core::network::train::{train_step, AdaGrad, DEFAULT_LR};
use dccs_core::network::{Model, ModelConfig, DSE_PREFIX, LASEA_PREFIX};
use dccs_core::synth::{generate_scene, to_rgb, SceneParams};
use dccs_core::{Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(size: usize) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        state_dim: 4,
        input_height: size,
        input_width: size,
        ..ModelConfig::tiny()
    }
}

fn small_scenes(count: u64) -> Vec<(Tensor, Tensor)> {
    let params = SceneParams {
        height: 48,
        width: 48,
        ..SceneParams::default()
    };
    (0..count)
        .map(|s| {
            let scene = generate_scene(&params.with_seed(s)).unwrap();
            (to_rgb(&scene.image), scene.mask.to_tensor())
        })
        .collect()
}

#[test]
fn parameters_and_activations_stay_finite_for_200_steps() {
    let data = small_scenes(16);
    let mut model = Model::new(small_config(48), 1).unwrap();
    let mut opt = AdaGrad::new(&model.store, DEFAULT_LR);
    for step in 0..200u64 {
        let start = (step as usize * 2) % data.len();
        let batch = &data[start..start + 2];
        let loss = train_step(&mut model, &mut opt, batch, step).unwrap();
        assert!(loss.is_finite(), "step {step}: loss {loss}");
        assert!(model.store.all_finite(), "step {step}: non-finite parameter");
        if step % 50 == 49 {
            let mut g = Graph::inference(&model.store);
            let x = g.input(data[0].0.clone());
            for m in model.forward(&mut g, x, SampleMode::Train(step)).unwrap() {
                assert!(g.value(m).is_finite(), "step {step}: non-finite map");
            }
        }
    }
}

#[test]
fn zeroed_attention_blocks_are_transparent_after_perturbation() {
    let mut model = Model::new(small_config(48), 2).unwrap();
    assert!(model.store.zero_matching(&[DSE_PREFIX, LASEA_PREFIX]) > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = Tensor::uniform(Shape::new(1, 3, 48, 48), 0.0, 1.0, &mut rng);
    let before = model.predict(&image).unwrap();

    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, name, _)| name.starts_with(DSE_PREFIX) || name.starts_with(LASEA_PREFIX))
        .map(|(id, _, _)| id)
        .collect();
    for &id in &ids {
        let shape = model.store.get(id).shape();
        *model.store.get_mut(id) = Tensor::uniform(shape, -0.5, 0.5, &mut rng);
    }
    assert_ne!(model.predict(&image).unwrap(), before);

    model.store.zero_matching(&[DSE_PREFIX, LASEA_PREFIX]);
    assert_eq!(model.predict(&image).unwrap(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn finest_map_matches_input_and_stays_in_unit_interval(hm in 1usize..=4, wm in 1usize..=4, seed in 0u64..1000) {
        let (h, w) = (16 * hm, 16 * wm);
        let model = Model::new(ModelConfig { input_height: h, input_width: w, ..small_config(16) }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
        let conf = model.predict(&image).unwrap();
        prop_assert_eq!(conf.shape(), Shape::new(1, 1, h, w));
        prop_assert!(conf.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
