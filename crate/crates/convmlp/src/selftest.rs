//! Built-in numerical checks: convolution against the naive loop, and
//! central finite differences for every layer and a whole tiny model.

use convmlp_core::check::{check_gradients, conv_oracle_sweep, worst, FdOptions, LayerProbe};
use convmlp_core::kernels::ConvGeometry;
use convmlp_core::model::{conv_stage_block, ConvBnRelu, ConvMlpBlock, Downsample, Tokenizer};
use convmlp_core::nn::{BatchNorm2d, ChannelMlp, Conv2d, Gelu, Layer, LayerNorm, Linear, MaxPool2d, ParamRegistry, Relu};
use convmlp_core::train::cross_entropy;
use convmlp_core::{Model, ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-10;
pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

/// One named check and its worst relative error.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.error <= self.tol
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Moves parameters off their initial values (zero biases, unit scales).
pub fn jitter(reg: &mut ParamRegistry<f64>, seed: u64) {
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

fn layer<L: Layer<f64>>(name: &str, mut l: L, mut reg: ParamRegistry<f64>, x: &Tensor<f64>, opts: &FdOptions) -> Result<CheckLine> {
    jitter(&mut reg, 7);
    let checks = check_gradients(&mut LayerProbe { layer: &mut l, params: &mut reg }, x, opts)?;
    Ok(CheckLine { name: name.into(), error: worst(&checks), tol: LAYER_TOL })
}

fn cross_entropy_line() -> Result<CheckLine> {
    let logits = input(&[3, 5], 17);
    let labels = [4, 0, 2];
    let (_, grad) = cross_entropy(&logits, &labels)?;
    let h = 1e-6;
    let mut err = 0.0f64;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        up.data_mut()[i] += h;
        let mut down = logits.clone();
        down.data_mut()[i] -= h;
        let fd = (cross_entropy(&up, &labels)?.0 - cross_entropy(&down, &labels)?.0) / (2.0 * h);
        let a = grad.data()[i];
        err = err.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    Ok(CheckLine { name: "cross_entropy".into(), error: err, tol: LAYER_TOL })
}

fn model_line(name: &str, cfg: &ModelConfig, seed: u64, opts: &FdOptions) -> Result<CheckLine> {
    let mut model = Model::<f64>::new(cfg, seed)?;
    jitter(model.params_mut(), seed);
    let checks = check_gradients(&mut model, &input(&[2, 3, 32, 32], seed + 10), opts)?;
    Ok(CheckLine { name: name.into(), error: worst(&checks), tol: MODEL_TOL })
}

/// Runs the suite, reporting each line as it finishes.
pub fn run_selftest(level: Level, mut report: impl FnMut(&CheckLine)) -> Result<Vec<CheckLine>> {
    let (cases, per_tensor, e2e_per_tensor) = match level {
        Level::Fast => (100, 8, 4),
        Level::Full => (500, 24, 12),
    };
    let opts = FdOptions { max_per_tensor: per_tensor, ..FdOptions::default() };
    let e2e = FdOptions { max_per_tensor: e2e_per_tensor, ..FdOptions::default() };
    let mut lines = Vec::new();
    let mut push = |line: CheckLine| {
        report(&line);
        lines.push(line);
    };

    push(CheckLine { name: format!("conv oracle ({cases} geometries)"), error: conv_oracle_sweep(2024, cases)?, tol: ORACLE_TOL });

    let x = input(&[2, 3, 6, 7], 1);
    for (name, cout, geom) in [
        ("conv2d 3x3", 4, ConvGeometry::new(3, 1, 1)),
        ("conv2d 3x3 stride 2", 4, ConvGeometry::new(3, 2, 1)),
        ("conv2d grouped", 6, ConvGeometry::new(3, 1, 0).with_groups(3)),
        ("conv2d depthwise", 3, ConvGeometry::new(3, 1, 1).with_groups(3)),
    ] {
        let mut reg = ParamRegistry::new();
        let l = Conv2d::new(&mut reg, "c", 3, cout, geom, true)?;
        push(layer(name, l, reg, &x, &opts)?);
    }
    let y = input(&[2, 6, 3, 3], 2);
    let mut reg = ParamRegistry::new();
    let l = Linear::new(&mut reg, "l", 6, 4)?;
    push(layer("linear", l, reg, &y, &opts)?);
    let mut reg = ParamRegistry::new();
    let l = LayerNorm::new(&mut reg, "ln", 6)?;
    push(layer("layer_norm", l, reg, &y, &opts)?);
    let mut reg = ParamRegistry::new();
    let l = BatchNorm2d::new(&mut reg, "bn", 6)?;
    push(layer("batch_norm", l, reg, &y, &opts)?);
    push(layer("relu", Relu::new(), ParamRegistry::new(), &y, &opts)?);
    push(layer("gelu", Gelu::new(), ParamRegistry::new(), &y, &opts)?);
    push(layer("max_pool", MaxPool2d::new(ConvGeometry::new(3, 2, 1)), ParamRegistry::new(), &x, &opts)?);
    let mut reg = ParamRegistry::new();
    let l = ChannelMlp::new(&mut reg, "mlp", 6, 2, 0.0, 0)?;
    push(layer("channel_mlp", l, reg, &y, &opts)?);
    push(cross_entropy_line()?);

    let img = input(&[2, 3, 8, 8], 3);
    let mut reg = ParamRegistry::new();
    let l = ConvBnRelu::new(&mut reg, "b", 3, 4, ConvGeometry::new(3, 2, 1))?;
    push(layer("conv_bn_relu", l, reg, &img, &opts)?);
    let mut reg = ParamRegistry::new();
    let l = Tokenizer::conv(&mut reg, "tok", &[2, 2, 4])?;
    push(layer("conv tokenizer", l, reg, &img, &opts)?);
    let mut reg = ParamRegistry::new();
    let l = Tokenizer::patch(&mut reg, "tok", 4)?;
    push(layer("patch tokenizer", l, reg, &img, &opts)?);
    let z = input(&[2, 4, 4, 4], 4);
    let mut reg = ParamRegistry::new();
    let l = conv_stage_block(&mut reg, "cs", 4, 6)?;
    push(layer("conv stage block", l, reg, &z, &opts)?);
    for dw in [true, false] {
        let mut reg = ParamRegistry::new();
        let l = ConvMlpBlock::new(&mut reg, "blk", 4, 2, dw, 0.0, 0)?;
        push(layer(if dw { "conv-mlp block" } else { "conv-mlp block (no dw)" }, l, reg, &z, &opts)?);
    }
    for conv in [true, false] {
        let mut reg = ParamRegistry::new();
        let l = Downsample::new(&mut reg, "down", 4, 6, conv)?;
        push(layer(if conv { "conv downsample" } else { "patch merge" }, l, reg, &z, &opts)?);
    }

    push(model_line("end-to-end tiny", &ModelConfig::tiny(2), 3, &e2e)?);
    if level == Level::Full {
        let baseline = ModelConfig { use_conv_stage: false, use_conv_downsample: false, use_dw_conv: false, ..ModelConfig::tiny(2) };
        push(model_line("end-to-end tiny baseline", &baseline, 4, &e2e)?);
    }
    Ok(lines)
}
