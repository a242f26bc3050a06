use convmlp_core::check::{conv_oracle_sweep, naive_conv2d, normwise_rel_error, random_conv_case};
use convmlp_core::kernels::{conv2d, layer_norm};
use convmlp_core::nn::{ChannelMlp, Layer, ParamRegistry};
use convmlp_core::train::{cosine_lr, cross_entropy, OptimizerState};
use convmlp_core::{Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_matches_naive_on_200_geometries() {
    let err = conv_oracle_sweep(2024, 200).unwrap();
    assert!(err <= 1e-10, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_equals_oracle(seed in any::<u64>()) {
        let c = random_conv_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let fast = conv2d(&c.input, &c.weight, c.bias.as_ref(), &c.geom).unwrap();
        let slow = naive_conv2d(&c.input, &c.weight, c.bias.as_ref(), &c.geom).unwrap();
        prop_assert!(normwise_rel_error(&fast, &slow) <= 1e-10);
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_conv_case(&mut rng);
        let d = random_conv_case(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let y_in = Tensor::from_fn(c.input.shape(), |i| d.input.data()[i % d.input.len()]);
        let mix = Tensor::from_fn(c.input.shape(), |i| a * c.input.data()[i] + b * y_in.data()[i]);
        let lhs = conv2d(&mix, &c.weight, None, &c.geom).unwrap();
        let fx = conv2d(&c.input, &c.weight, None, &c.geom).unwrap();
        let fy = conv2d(&y_in, &c.weight, None, &c.geom).unwrap();
        let rhs = Tensor::from_fn(fx.shape(), |i| a * fx.data()[i] + b * fy.data()[i]);
        let scale = rhs.max_abs().max(1.0);
        let diff = lhs.data().iter().zip(rhs.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(diff / scale <= 1e-12);
    }

    #[test]
    fn channel_mlp_commutes_with_spatial_permutation(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let mut reg = ParamRegistry::<f64>::new();
        let mlp = ChannelMlp::new(&mut reg, "m", 3, 2, 0.0, 0).unwrap();
        reg.init(seed);
        let x = Tensor::from_fn(&[1, 3, h, w], |i| ((i as f64 + seed as f64 % 7.0) * 0.7).sin());
        let plane = h * w;
        // reverse the positions within each channel plane
        let perm = |t: &Tensor<f64>| {
            let c = t.shape()[1];
            Tensor::from_fn(t.shape(), |i| {
                let (ch, p) = (i / plane, i % plane);
                t.data()[ch.min(c - 1) * plane + (plane - 1 - p)]
            })
        };
        let a = mlp.forward(&reg, &perm(&x)).unwrap();
        let b = perm(&mlp.forward(&reg, &x).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn layer_norm_centres_every_position(seed in any::<u64>(), c in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = Tensor::from_fn(&[2, c, 3, 2], |_| rng.random_range(-5.0..5.0));
        let y = layer_norm(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), 1e-5).unwrap();
        for n in 0..2 {
            for p in 0..6 {
                let mean: f64 = (0..c).map(|ch| y.data()[(n * c + ch) * 6 + p]).sum::<f64>() / c as f64;
                prop_assert!(mean.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative_with_zero_sum_gradient(seed in any::<u64>(), k in 2usize..12) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::<f64>::from_fn(&[3, k], |_| rng.random_range(-30.0..30.0));
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..k)).collect();
        let (loss, g) = cross_entropy(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for n in 0..3 {
            let s: f64 = g.data()[n * k..(n + 1) * k].iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_lr_stays_in_range(total in 1usize..500, frac in 0.0f64..0.5, step_frac in 0.0f64..=1.0) {
        let warmup = ((total as f64) * frac) as usize;
        let warmup = warmup.min(total - 1);
        let step = ((total as f64) * step_frac) as usize;
        let lr = cosine_lr(step, total, 0.3, warmup);
        prop_assert!((0.0..=0.3 + 1e-15).contains(&lr));
    }

    #[test]
    fn optimizer_state_survives_step_sequences(steps in proptest::collection::vec(0u8..3, 1..12)) {
        let mut model = Model::<f32>::new(&ModelConfig::tiny(2), 0).unwrap();
        let mut adam = OptimizerState::adamw(model.params(), 1e-3, 0.05);
        let mut sgd = OptimizerState::sgd(model.params(), 1e-2, 0.9);
        for (i, s) in steps.iter().enumerate() {
            for p in model.params_mut().iter_mut() {
                if p.trainable() {
                    p.grad.fill((i as f32 + 1.0) * 1e-3);
                }
            }
            match s {
                0 => adam.apply(model.params_mut()).unwrap(),
                1 => sgd.apply(model.params_mut()).unwrap(),
                _ => model.params_mut().zero_grad(),
            }
        }
        adam.check(model.params()).unwrap();
        sgd.check(model.params()).unwrap();
        prop_assert_eq!(adam.step as usize, steps.iter().filter(|&&s| s == 0).count());
    }

    #[test]
    fn pyramid_contract_for_random_extents(hm in 1usize..5, wm in 1usize..5) {
        let model = Model::<f32>::new(&ModelConfig::tiny(3), 0).unwrap();
        let (h, w) = (32 * hm, 32 * wm);
        let f = model.features(&Tensor::full(&[1, 3, h, w], 0.1)).unwrap();
        let c = model.config().channels;
        for (k, level) in f.levels().into_iter().enumerate() {
            prop_assert_eq!(level.shape(), &[1, c[k], h >> (k + 2), w >> (k + 2)][..]);
        }
    }

    #[test]
    fn build_is_a_pure_function_of_config_and_seed(seed in any::<u64>(), depth in 1usize..3, ratio in 1usize..4) {
        let cfg = ModelConfig { stage_depths: [depth, 1, depth], mlp_ratio: ratio, ..ModelConfig::tiny(3) };
        let a = Model::<f32>::new(&cfg, seed).unwrap();
        let b = Model::<f32>::new(&cfg, seed).unwrap();
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            prop_assert_eq!(&p.name, &q.name);
            prop_assert_eq!(&p.value, &q.value);
        }
    }
}
