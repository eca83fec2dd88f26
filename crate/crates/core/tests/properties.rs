use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdm_core::checkpoint::{self, Checkpoint};
use vdm_core::data::{gen_counting_dataset, GridSpec, TensorSet, RED};
use vdm_core::eval::{self, Attribution, Method, Order};
use vdm_core::hardconcrete::{self, HCParams};
use vdm_core::maskgen::{make_mask, upsample, MaskMode, PatchMask};
use vdm_core::numerics::{Tape, Tensor};
use vdm_core::training::LagrangianState;
use vdm_core::vit::{ViT, ViTConfig};

fn tiny_vit(seed: u64) -> ViT<f32> {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes: 5,
    };
    ViT::init(cfg, seed).unwrap()
}

fn tiny_spec() -> GridSpec {
    GridSpec {
        grid: 2,
        patch_px: 4,
        ..GridSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn saliency_stays_in_unit_range(z in prop::collection::vec(0.0f64..=1.0, 9)) {
        let cfg = ViTConfig::default();
        let map = upsample(&PatchMask::new(z).unwrap(), &cfg).unwrap();
        prop_assert_eq!(map.values.len(), cfg.image_size * cfg.image_size);
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_mask_gives_constant_map(c in 0.0f64..=1.0) {
        let map = upsample(&PatchMask::new(vec![c; 9]).unwrap(), &ViTConfig::default()).unwrap();
        prop_assert!(map.values.iter().all(|&v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn aggregated_mask_is_below_every_layer(
        logits in prop::collection::vec(prop::collection::vec(-6.0f64..6.0, 6), 1..5),
        seed in any::<u64>(),
        train in any::<bool>(),
    ) {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = logits.iter().map(|l| tape.constant(Tensor::new(&[2, 3], l.clone()).unwrap())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<_> = logits.iter().map(|_| hardconcrete::uniform_noise(&mut rng, &[2, 3])).collect();
        let mode = if train { MaskMode::Train } else { MaskMode::Infer };
        let m = make_mask(&vars, mode, Some(&noise), &HCParams::default()).unwrap();
        let z = m.z.value();
        let layers: Vec<_> = m.per_layer.iter().map(|v| v.value()).collect();
        for (i, &zi) in z.data().iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&zi));
            let min = layers.iter().map(|l| l.data()[i]).fold(f64::INFINITY, f64::min);
            prop_assert!(zi <= min + 1e-15);
        }
    }

    #[test]
    fn dominating_curves_have_larger_auc(
        base in prop::collection::vec(0.0f64..5.0, 10),
        bump in prop::collection::vec(0.0f64..1.0, 10),
    ) {
        let f = eval::default_fractions();
        let higher: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
        prop_assert!(eval::auc(&f, &higher).unwrap() >= eval::auc(&f, &base).unwrap());
    }

    #[test]
    fn removal_order_ignores_positive_scale(
        scores in prop::collection::vec(-3.0f64..3.0, 9),
        k in 0.01f64..100.0,
    ) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
        for order in [Order::Positive, Order::Negative] {
            prop_assert_eq!(eval::removal_order(&scores, order), eval::removal_order(&scaled, order));
        }
    }

    #[test]
    fn lambda_never_goes_negative(
        start in 0.0f64..50.0,
        updates in prop::collection::vec((0.0f64..5.0, 0.0f64..2.0), 1..50),
    ) {
        let mut state = LagrangianState::new(start);
        for (kl, lr) in updates {
            state.update(kl, 0.1, lr);
            prop_assert!(state.lambda >= 0.0);
        }
    }

    #[test]
    fn hard_concrete_samples_stay_in_support(u in -8.0f64..8.0, e in 1e-9f64..(1.0 - 1e-9)) {
        let z = hardconcrete::scalar::sample(u, e, &HCParams::default());
        prop_assert!((0.0..=1.0).contains(&z));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_are_deterministic_and_labels_match_pixels(seed in any::<u64>()) {
        let spec = GridSpec::default();
        let a = gen_counting_dataset(seed, 20, &spec).unwrap();
        prop_assert_eq!(&a, &gen_counting_dataset(seed, 20, &spec).unwrap());
        for img in &a {
            prop_assert_eq!(img.red_set.len(), img.label);
            prop_assert_eq!(&img.patches_of_color(&spec, RED), &img.red_set);
        }
    }

    #[test]
    fn curves_ignore_attribution_scale(seed in 0u64..1000, k in 0.01f64..100.0) {
        let vit = tiny_vit(seed);
        let set = TensorSet::from_images(&gen_counting_dataset(seed, 6, &tiny_spec()).unwrap()).unwrap();
        let attrs = eval::random_attributions(seed, set.len(), 4);
        let scaled: Vec<Attribution> = attrs
            .iter()
            .map(|a| Attribution::new(Method::Random, a.scores.iter().map(|s| s * k).collect()).unwrap())
            .collect();
        let f = eval::default_fractions();
        let fill = set.mean_color();
        for order in [Order::Positive, Order::Negative] {
            let a = eval::perturb_and_score(&set, &vit, &attrs, order, &f, fill).unwrap();
            let b = eval::perturb_and_score(&set, &vit, &scaled, order, &f, fill).unwrap();
            prop_assert_eq!(&a.kl, &b.kl);
            prop_assert_eq!(&a.acc, &b.acc);
            prop_assert_eq!(a.kl[0], 0.0);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>()) {
        let vit = tiny_vit(seed);
        let bytes = checkpoint::vit_checkpoint(&vit).unwrap().to_bytes().unwrap();
        let back = checkpoint::load_vit(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(checkpoint::vit_checkpoint(&back).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-20.0f64..20.0, 12)) {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(&[3, 4], values).unwrap()).softmax().unwrap().value();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
