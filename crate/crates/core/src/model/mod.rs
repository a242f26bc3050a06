//! The ConvMLP network: convolutional tokenizer, a stride-4 first stage,
//! three Conv-MLP stages and a pooled linear classifier.

mod blocks;
mod config;

pub use blocks::{
    conv_stage_block, depth_to_space, space_to_depth, ConvBnRelu, ConvMlpBlock, ConvStageBlock, Downsample,
    MlpStage, Tokenizer,
};
pub use config::{ModelConfig, TokenizerKind, PRESET_NAMES};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Layer, Linear, Mode, ParamRegistry};
use crate::real::Real;
use crate::tensor::Tensor;

/// Inputs must have spatial extents divisible by this.
pub const INPUT_MULTIPLE: usize = 32;

/// Stride-4 stage that follows the tokenizer.
#[derive(Debug, Clone)]
pub enum FirstStage<T> {
    Conv(Vec<ConvStageBlock<T>>),
    Mlp(Vec<ConvMlpBlock<T>>),
}

impl<T: Real> Layer<T> for FirstStage<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            FirstStage::Conv(b) => b.forward(params, x),
            FirstStage::Mlp(b) => b.forward(params, x),
        }
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            FirstStage::Conv(b) => b.forward_train(params, x),
            FirstStage::Mlp(b) => b.forward_train(params, x),
        }
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            FirstStage::Conv(b) => b.backward(params, grad),
            FirstStage::Mlp(b) => b.backward(params, grad),
        }
    }
}

/// Multi-scale features at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    /// Tokenizer output, `[N, C1, H/4, W/4]`.
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
}

impl<T> FeaturePyramid<T> {
    pub fn levels(&self) -> [&Tensor<T>; 4] {
        [&self.f1, &self.f2, &self.f3, &self.f4]
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    seed: u64,
    params: ParamRegistry<T>,
    pub tokenizer: Tokenizer<T>,
    pub first_stage: FirstStage<T>,
    pub stages: Vec<MlpStage<T>>,
    pub head: Linear<T>,
    pooled_from: Option<Vec<usize>>,
}

impl<T: Real> Model<T> {
    /// Builds the network and initializes every parameter from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let c = config.channels;
        let tokenizer = match config.tokenizer {
            TokenizerKind::Conv => Tokenizer::conv(&mut reg, "tokenizer", &config.tokenizer_channels)?,
            TokenizerKind::Patch => Tokenizer::patch(&mut reg, "tokenizer", c[0])?,
        };
        let first_stage = if config.use_conv_stage {
            let blocks = (0..config.conv_stage_blocks)
                .map(|i| conv_stage_block(&mut reg, &format!("conv_stage.blocks.{i}"), c[0], config.conv_stage_hidden))
                .collect::<Result<_>>()?;
            FirstStage::Conv(blocks)
        } else {
            let blocks = (0..config.conv_stage_blocks)
                .map(|i| {
                    let name = format!("mlp_stage.blocks.{i}");
                    ConvMlpBlock::new(&mut reg, &name, c[0], config.mlp_ratio, false, config.dropout, seed)
                })
                .collect::<Result<_>>()?;
            FirstStage::Mlp(blocks)
        };
        let mut stages = Vec::with_capacity(3);
        for k in 0..3 {
            let downsample =
                Downsample::new(&mut reg, &format!("stages.{k}.downsample"), c[k], c[k + 1], config.use_conv_downsample)?;
            let blocks = (0..config.stage_depths[k])
                .map(|i| {
                    let name = format!("stages.{k}.blocks.{i}");
                    ConvMlpBlock::new(&mut reg, &name, c[k + 1], config.mlp_ratio, config.use_dw_conv, config.dropout, seed)
                })
                .collect::<Result<_>>()?;
            stages.push(MlpStage { downsample, blocks });
        }
        let head = Linear::new(&mut reg, "head", c[3], config.num_classes)?;
        reg.init(seed);
        Ok(Self { config: config.clone(), seed, params: reg, tokenizer, first_stage, stages, head, pooled_from: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamRegistry<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.params
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params.num_trainable_elements()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::new(&self.config, self.seed).expect("config already validated");
        out.params = self.params.cast();
        out
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::dim("model", format!("expected 3 input channels, got {c}")));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::geom("model", format!("input {h}x{w} is not a multiple of {INPUT_MULTIPLE}")));
        }
        Ok(())
    }

    /// Tokenizer output alone; needs only extents divisible by 4.
    pub fn tokenizer_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::geom("tokenizer", format!("input {h}x{w} is not a multiple of 4")));
        }
        self.tokenizer.forward(&self.params, x)
    }

    /// First (stride-4) stage applied to a tokenizer output.
    pub fn first_stage_forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        self.first_stage.forward(&self.params, tokens)
    }

    /// Evaluation-mode feature pyramid.
    pub fn features(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.check_input(x)?;
        let f1 = self.tokenizer.forward(&self.params, x)?;
        let h = self.first_stage.forward(&self.params, &f1)?;
        let f2 = self.stages[0].forward(&self.params, &h)?;
        let f3 = self.stages[1].forward(&self.params, &f2)?;
        let f4 = self.stages[2].forward(&self.params, &f3)?;
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }

    /// Evaluation-mode logits `[N, num_classes]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(x)?;
        let pooled = kernels::global_avg_pool(&f.f4)?;
        self.head.forward(&self.params, &pooled)
    }

    /// Logits in either mode. Train mode updates batch-norm statistics and
    /// caches activations for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        self.check_input(x)?;
        let p = &mut self.params;
        let mut h = self.tokenizer.forward_train(p, x)?;
        h = self.first_stage.forward_train(p, &h)?;
        for stage in &mut self.stages {
            h = stage.forward_train(p, &h)?;
        }
        self.pooled_from = Some(h.shape().to_vec());
        let pooled = kernels::global_avg_pool(&h)?;
        self.head.forward_train(p, &pooled)
    }

    /// Accumulates parameter gradients for the last training forward and
    /// returns the gradient with respect to the input image.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.pooled_from.take().ok_or(Error::MissingCache { op: "model" })?;
        let p = &mut self.params;
        let g = self.head.backward(p, grad_logits)?;
        let mut g = kernels::global_avg_pool_backward(&shape, &g)?;
        for stage in self.stages.iter_mut().rev() {
            g = stage.backward(p, &g)?;
        }
        g = self.first_stage.backward(p, &g)?;
        self.tokenizer.backward(p, &g)
    }
}
