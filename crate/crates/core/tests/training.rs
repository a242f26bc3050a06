use convmlp_core::nn::Mode;
use convmlp_core::train::{
    cross_entropy, evaluate, synthetic_dataset, train_loop, Hyper, OptimizerKind, OptimizerState, TrainOptions,
};
use convmlp_core::{Model, ModelConfig, Tensor};

pub fn overfit_options(seed: u64) -> TrainOptions {
    TrainOptions {
        epochs: 200,
        batch_size: 16,
        optimizer: OptimizerKind::AdamW,
        hyper: Hyper { lr: 2e-3, weight_decay: 0.0, ..Hyper::default() },
        warmup_fraction: 0.05,
        seed,
    }
}

#[test]
fn overfits_64_synthetic_samples() {
    let data = synthetic_dataset(1, 64, 4, 32).unwrap();
    let (model, history) = train_loop(&ModelConfig::tiny(4), &data, &overfit_options(1)).unwrap();
    let first_full = history.iter().position(|m| m.top1 == 1.0);
    assert!(first_full.is_some(), "never reached 100%: last {:?}", history.last());
    assert_eq!(evaluate(&model, &data, 16).unwrap(), 1.0);
    eprintln!("train top-1 first hit 100% at epoch {:?}", first_full);
}

#[test]
fn initial_loss_is_near_ln_k() {
    for k in [2, 4, 10] {
        let data = synthetic_dataset(2, 4 * k, k, 32).unwrap();
        let opts = TrainOptions { epochs: 1, batch_size: 4 * k, ..overfit_options(2) };
        let (_, h) = train_loop(&ModelConfig::tiny(k), &data, &opts).unwrap();
        let ln_k = (k as f64).ln();
        assert!((h[0].loss - ln_k).abs() <= 0.15 * ln_k, "K={k}: {} vs {ln_k}", h[0].loss);
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = synthetic_dataset(3, 24, 3, 32).unwrap();
    let opts = TrainOptions { epochs: 3, batch_size: 8, ..overfit_options(9) };
    let (ma, a) = train_loop(&ModelConfig::tiny(3), &data, &opts).unwrap();
    let (mb, b) = train_loop(&ModelConfig::tiny(3), &data, &opts).unwrap();
    assert_eq!(a, b);
    for (p, q) in ma.params().iter().zip(mb.params().iter()) {
        assert_eq!(p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let (_, c) = train_loop(&ModelConfig::tiny(3), &data, &TrainOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn single_batch_descent_over_random_models() {
    let data = synthetic_dataset(4, 8, 2, 32).unwrap();
    let (x, labels) = data.batch(&(0..8).collect::<Vec<_>>());
    let x: Tensor<f64> = x.cast();
    for seed in 0..20 {
        let mut model = Model::<f64>::new(&ModelConfig::tiny(2), seed).unwrap();
        let mut state = OptimizerState::adamw(model.params(), 1e-4, 0.05);
        let logits = model.forward(&x, Mode::Train).unwrap();
        let (before, grad) = cross_entropy(&logits, &labels).unwrap();
        model.backward(&grad).unwrap();
        state.apply(model.params_mut()).unwrap();
        let (after, _) = cross_entropy(&model.forward(&x, Mode::Train).unwrap(), &labels).unwrap();
        assert!(after <= before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn evaluate_tie_break_and_batch_invariance() {
    let data = synthetic_dataset(5, 30, 3, 32).unwrap();
    let mut model = Model::<f32>::new(&ModelConfig::tiny(3), 0).unwrap();
    let (w, b) = (model.head.weight, model.head.bias);
    model.params_mut().get_mut(w).value.fill(0.0);
    model.params_mut().get_mut(b).value.fill(0.25);
    let class0 = data.labels.iter().filter(|&&l| l == 0).count() as f64 / data.len() as f64;
    assert_eq!(evaluate(&model, &data, 7).unwrap(), class0);

    let model = Model::<f32>::new(&ModelConfig::tiny(3), 1).unwrap();
    let a = evaluate(&model, &data, 1).unwrap();
    for bs in [4, 7, 30, 64] {
        assert_eq!(evaluate(&model, &data, bs).unwrap(), a);
    }
}

/// Nearest class mean on raw pixels is a linear classifier
/// (`argmax_k  x·μ_k − |μ_k|²/2`).
#[test]
fn synthetic_classes_are_linearly_separable() {
    let data = synthetic_dataset(6, 64, 8, 32).unwrap();
    let per = 3 * 32 * 32;
    let mut means = vec![vec![0.0f64; per]; 8];
    let mut counts = [0usize; 8];
    for (i, &l) in data.labels.iter().enumerate() {
        counts[l] += 1;
        for (m, &v) in means[l].iter_mut().zip(&data.images.data()[i * per..(i + 1) * per]) {
            *m += v as f64;
        }
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    for (i, &l) in data.labels.iter().enumerate() {
        let x = &data.images.data()[i * per..(i + 1) * per];
        let score = |m: &Vec<f64>| x.iter().zip(m).map(|(&a, b)| a as f64 * b).sum::<f64>() - m.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let best = (0..8).max_by(|&a, &b| score(&means[a]).partial_cmp(&score(&means[b])).unwrap()).unwrap();
        assert_eq!(best, l, "sample {i}");
    }
    // blob locations differ between classes 0 and 1
    let argmax = |m: &Vec<f64>| (0..1024).max_by(|&a, &b| m[a].partial_cmp(&m[b]).unwrap()).unwrap();
    assert_ne!(argmax(&means[0]), argmax(&means[1]));
}

#[test]
fn sgd_training_reduces_loss() {
    let data = synthetic_dataset(7, 16, 2, 32).unwrap();
    let opts = TrainOptions {
        epochs: 10,
        batch_size: 8,
        optimizer: OptimizerKind::Sgd,
        hyper: Hyper { lr: 0.05, momentum: 0.9, weight_decay: 0.0, ..Hyper::default() },
        warmup_fraction: 0.0,
        seed: 0,
    };
    let (_, h) = train_loop(&ModelConfig::tiny(2), &data, &opts).unwrap();
    assert!(h.last().unwrap().loss < h[0].loss, "{h:?}");
}

#[test]
fn optimizer_state_tracks_registry_after_many_steps() {
    let mut model = Model::<f32>::new(&ModelConfig::tiny(2), 0).unwrap();
    let mut state = OptimizerState::adamw(model.params(), 1e-3, 0.05);
    let trainable: Vec<Vec<usize>> = model.params().trainable().map(|p| p.value.shape().to_vec()).collect();
    assert_eq!(state.len(), trainable.len());
    for step in 1..=5 {
        state.apply(model.params_mut()).unwrap();
        assert_eq!(state.step, step);
        state.check(model.params()).unwrap();
    }
    for (slot, shape) in trainable.iter().enumerate() {
        assert_eq!(state.first_moment(slot).shape(), &shape[..]);
    }
}
