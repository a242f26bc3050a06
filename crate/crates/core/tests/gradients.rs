use convmlp_core::check::{check_gradients, worst, FdOptions, GradCheck, LayerProbe};
use convmlp_core::kernels::ConvGeometry;
use convmlp_core::model::{conv_stage_block, ConvBnRelu, ConvMlpBlock, Downsample, Tokenizer};
use convmlp_core::nn::{
    BatchNorm2d, ChannelMlp, Conv2d, Dropout, Gelu, Layer, LayerNorm, Linear, MaxPool2d, ParamRegistry, Relu, Residual,
};
use convmlp_core::train::cross_entropy;
use convmlp_core::{Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Perturbs every parameter away from its initial value so that zero biases
/// and unit norm scales do not hide errors.
fn jitter(reg: &mut ParamRegistry<f64>, seed: u64) {
    reg.init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in reg.iter_mut() {
        if p.trainable() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn run<L: Layer<f64>>(mut layer: L, mut reg: ParamRegistry<f64>, x: &Tensor<f64>) -> Vec<GradCheck> {
    jitter(&mut reg, 7);
    let checks = check_gradients(&mut LayerProbe { layer: &mut layer, params: &mut reg }, x, &FdOptions::default()).unwrap();
    assert!(worst(&checks) <= LAYER_TOL, "{checks:#?}");
    checks
}

#[test]
fn conv2d_plain_strided_grouped_depthwise() {
    for (cin, cout, geom, bias) in [
        (3, 4, ConvGeometry::new(3, 1, 1), true),
        (3, 5, ConvGeometry::new(3, 2, 1), false),
        (4, 6, ConvGeometry::new(1, 1, 0), true),
        (4, 6, ConvGeometry::new(3, 1, 0).with_groups(2), true),
        (5, 5, ConvGeometry::new(3, 1, 1).with_groups(5), true),
        (2, 3, ConvGeometry { kernel: (2, 3), stride: (2, 1), padding: (0, 1), groups: 1 }, true),
    ] {
        let mut reg = ParamRegistry::new();
        let conv = Conv2d::new(&mut reg, "c", cin, cout, geom, bias).unwrap();
        let checks = run(conv, reg, &input(&[2, cin, 6, 7], 1));
        assert_eq!(checks.len(), if bias { 3 } else { 2 });
    }
}

#[test]
fn linear_layer() {
    let mut reg = ParamRegistry::new();
    let l = Linear::new(&mut reg, "l", 5, 3).unwrap();
    run(l, reg, &input(&[2, 5, 3, 3], 2));
    let mut reg = ParamRegistry::new();
    let l = Linear::new(&mut reg, "l", 5, 3).unwrap();
    run(l, reg, &input(&[4, 5], 3));
}

#[test]
fn layer_norm() {
    let mut reg = ParamRegistry::new();
    let ln = LayerNorm::new(&mut reg, "ln", 6).unwrap();
    run(ln, reg, &input(&[2, 6, 3, 3], 4));
}

#[test]
fn batch_norm_training_mode() {
    let mut reg = ParamRegistry::new();
    let bn = BatchNorm2d::new(&mut reg, "bn", 3).unwrap();
    let checks = run(bn, reg, &input(&[2, 3, 4, 4], 5));
    // running statistics are buffers and not probed
    assert_eq!(checks.len(), 3);
}

#[test]
fn activations_and_pooling() {
    let x = input(&[2, 3, 5, 5], 6);
    run(Relu::<f64>::new(), ParamRegistry::new(), &x);
    run(Gelu::<f64>::new(), ParamRegistry::new(), &x);
    run(MaxPool2d::new(ConvGeometry::new(3, 2, 1)), ParamRegistry::new(), &x);
    run(MaxPool2d::new(ConvGeometry::new(2, 2, 0)), ParamRegistry::new(), &input(&[1, 2, 6, 6], 7));
}

#[test]
fn dropout_with_zero_rate() {
    run(Dropout::new(0.0, 1).unwrap(), ParamRegistry::<f64>::new(), &input(&[2, 3, 2, 2], 8));
}

#[test]
fn channel_mlp_and_residual() {
    let mut reg = ParamRegistry::new();
    let mlp = ChannelMlp::new(&mut reg, "mlp", 4, 2, 0.0, 0).unwrap();
    run(mlp, reg, &input(&[2, 4, 3, 3], 9));
    let mut reg = ParamRegistry::new();
    let res = Residual::new(ChannelMlp::new(&mut reg, "mlp", 4, 3, 0.0, 0).unwrap());
    run(res, reg, &input(&[1, 4, 3, 2], 10));
}

#[test]
fn conv_bn_relu_and_tokenizer() {
    let mut reg = ParamRegistry::new();
    let b = ConvBnRelu::new(&mut reg, "b", 3, 4, ConvGeometry::new(3, 2, 1)).unwrap();
    run(b, reg, &input(&[2, 3, 6, 6], 11));
    let mut reg = ParamRegistry::new();
    let t = Tokenizer::conv(&mut reg, "tok", &[2, 2, 4]).unwrap();
    run(t, reg, &input(&[2, 3, 8, 8], 12));
    let mut reg = ParamRegistry::new();
    let t = Tokenizer::patch(&mut reg, "tok", 4).unwrap();
    run(t, reg, &input(&[1, 3, 8, 8], 13));
}

#[test]
fn conv_stage_block_gradient() {
    let mut reg = ParamRegistry::new();
    let b = conv_stage_block(&mut reg, "cs", 4, 6).unwrap();
    run(b, reg, &input(&[2, 4, 4, 4], 14));
}

#[test]
fn convmlp_block_gradient() {
    for dw in [true, false] {
        let mut reg = ParamRegistry::new();
        let b = ConvMlpBlock::new(&mut reg, "blk", 8, 2, dw, 0.0, 0).unwrap();
        run(b, reg, &input(&[1, 8, 4, 4], 15));
    }
}

#[test]
fn downsamplers() {
    for conv in [true, false] {
        let mut reg = ParamRegistry::new();
        let d = Downsample::new(&mut reg, "down", 3, 5, conv).unwrap();
        run(d, reg, &input(&[2, 3, 4, 6], 16));
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let logits = input(&[3, 5], 17);
    let labels = [4, 0, 2];
    let (_, grad) = cross_entropy(&logits, &labels).unwrap();
    let h = 1e-6;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        up.data_mut()[i] += h;
        let mut down = logits.clone();
        down.data_mut()[i] -= h;
        let fd = (cross_entropy(&up, &labels).unwrap().0 - cross_entropy(&down, &labels).unwrap().0) / (2.0 * h);
        let a = grad.data()[i];
        assert!((a - fd).abs() / a.abs().max(fd.abs()) <= 1e-6, "{i}: {a} vs {fd}");
    }
}

fn tiny_two_class() -> Model<f64> {
    let mut m = Model::<f64>::new(&ModelConfig::tiny(2), 3).unwrap();
    jitter(m.params_mut(), 3);
    m
}

#[test]
fn end_to_end_tiny_model() {
    let mut model = tiny_two_class();
    let x = input(&[2, 3, 32, 32], 18);
    let opts = FdOptions { max_per_tensor: 6, ..FdOptions::default() };
    let checks = check_gradients(&mut model, &x, &opts).unwrap();
    let n_trainable = model.params().iter().filter(|p| p.trainable()).count();
    assert_eq!(checks.len(), n_trainable + 1);
    assert!(worst(&checks) <= MODEL_TOL, "{:#?}", checks.iter().filter(|c| c.max_rel_error > MODEL_TOL).collect::<Vec<_>>());
}

#[test]
fn end_to_end_patch_merge_baseline() {
    let cfg = ModelConfig { use_conv_stage: false, use_conv_downsample: false, use_dw_conv: false, ..ModelConfig::tiny(2) };
    let mut model = Model::<f64>::new(&cfg, 4).unwrap();
    jitter(model.params_mut(), 4);
    let x = input(&[2, 3, 32, 32], 19);
    let opts = FdOptions { max_per_tensor: 6, ..FdOptions::default() };
    let checks = check_gradients(&mut model, &x, &opts).unwrap();
    assert!(worst(&checks) <= MODEL_TOL, "{checks:#?}");
}
