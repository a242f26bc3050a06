use alloc::format;
use alloc::string::String;

use super::{Layer, ParamId, ParamInit, ParamRegistry, ParamRole};
use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormCache, BatchNormMode, ConvGeometry, LayerNormCache, MaxPoolIndices};
use crate::real::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        reg: &mut ParamRegistry<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        if geom.groups == 0 || !in_channels.is_multiple_of(geom.groups) || !out_channels.is_multiple_of(geom.groups) {
            return Err(Error::dim(
                "conv2d",
                format!("{name}: channels {in_channels}->{out_channels} not divisible by groups {}", geom.groups),
            ));
        }
        let shape = [out_channels, in_channels / geom.groups, geom.kernel.0, geom.kernel.1];
        let weight = reg.register(format!("{name}.weight"), &shape, ParamRole::Weight, ParamInit::TruncatedNormal)?;
        let bias = if bias {
            Some(reg.register(format!("{name}.bias"), &[out_channels], ParamRole::NoDecay, ParamInit::Zeros)?)
        } else {
            None
        };
        Ok(Self { name: name.into(), weight, bias, geom, in_channels, out_channels, input: None })
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let bias = self.bias.map(|b| params.value(b));
        kernels::conv2d(x, params.value(self.weight), bias, &self.geom)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(params, x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::MissingCache { op: "conv2d" })?;
        let g = kernels::conv2d_backward(&x, params.value(self.weight), grad, &self.geom, self.bias.is_some())?;
        params.accumulate_grad(self.weight, &g.weight)?;
        if let (Some(b), Some(gb)) = (self.bias, g.bias.as_ref()) {
            params.accumulate_grad(b, gb)?;
        }
        Ok(g.input)
    }
}

/// Channel-axis affine map (see [`kernels::linear`]).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(reg: &mut ParamRegistry<T>, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let weight = reg.register(
            format!("{name}.weight"),
            &[out_features, in_features],
            ParamRole::Weight,
            ParamInit::TruncatedNormal,
        )?;
        let bias = reg.register(format!("{name}.bias"), &[out_features], ParamRole::NoDecay, ParamInit::Zeros)?;
        Ok(Self { weight, bias, in_features, out_features, input: None })
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::linear(x, params.value(self.weight), Some(params.value(self.bias)))
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(params, x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::MissingCache { op: "linear" })?;
        let g = kernels::linear_backward(&x, params.value(self.weight), grad)?;
        params.accumulate_grad(self.weight, &g.weight)?;
        params.accumulate_grad(self.bias, &g.bias)?;
        Ok(g.input)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    cache: Option<LayerNormCache<T>>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(reg: &mut ParamRegistry<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = reg.register(format!("{name}.weight"), &[channels], ParamRole::NoDecay, ParamInit::Ones)?;
        let beta = reg.register(format!("{name}.bias"), &[channels], ParamRole::NoDecay, ParamInit::Zeros)?;
        Ok(Self { gamma, beta, eps: NORM_EPS, cache: None })
    }
}

impl<T: Real> Layer<T> for LayerNorm<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::layer_norm(x, params.value(self.gamma), params.value(self.beta), self.eps)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = kernels::layer_norm_with_cache(x, params.value(self.gamma), params.value(self.beta), self.eps)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache { op: "layer_norm" })?;
        let g = kernels::layer_norm_backward(&cache, params.value(self.gamma), grad)?;
        params.accumulate_grad(self.gamma, &g.gamma)?;
        params.accumulate_grad(self.beta, &g.beta)?;
        Ok(g.input)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(reg: &mut ParamRegistry<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = reg.register(format!("{name}.weight"), &[channels], ParamRole::NoDecay, ParamInit::Ones)?;
        let beta = reg.register(format!("{name}.bias"), &[channels], ParamRole::NoDecay, ParamInit::Zeros)?;
        let running_mean =
            reg.register(format!("{name}.running_mean"), &[channels], ParamRole::Buffer, ParamInit::Zeros)?;
        let running_var = reg.register(format!("{name}.running_var"), &[channels], ParamRole::Buffer, ParamInit::Ones)?;
        Ok(Self { gamma, beta, running_mean, running_var, eps: NORM_EPS, momentum: BN_MOMENTUM, cache: None })
    }
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mode = BatchNormMode::Eval {
            running_mean: params.value(self.running_mean),
            running_var: params.value(self.running_var),
        };
        kernels::batch_norm2d(x, params.value(self.gamma), params.value(self.beta), mode, self.eps).map(|(y, _)| y)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gamma = params.value(self.gamma).clone();
        let beta = params.value(self.beta).clone();
        let mut rm = params.value(self.running_mean).clone();
        let mut rv = params.value(self.running_var).clone();
        let mode = BatchNormMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: self.momentum };
        let (y, cache) = kernels::batch_norm2d(x, &gamma, &beta, mode, self.eps)?;
        params.get_mut(self.running_mean).value = rm;
        params.get_mut(self.running_var).value = rv;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache { op: "batch_norm2d" })?;
        let g = kernels::batch_norm2d_backward(&cache, params.value(self.gamma), grad)?;
        params.accumulate_grad(self.gamma, &g.gamma)?;
        params.accumulate_grad(self.beta, &g.beta)?;
        Ok(g.input)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&self, _: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::relu(x))
    }

    fn forward_train(&mut self, _: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = kernels::relu(x);
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, _: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::MissingCache { op: "relu" })?;
        kernels::relu_backward(&x, grad)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Gelu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Gelu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Real> Layer<T> for Gelu<T> {
    fn forward(&self, _: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::gelu(x))
    }

    fn forward_train(&mut self, _: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = kernels::gelu(x);
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, _: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::MissingCache { op: "gelu" })?;
        kernels::gelu_backward(&x, grad)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub geom: ConvGeometry,
    indices: Option<MaxPoolIndices>,
}

impl MaxPool2d {
    pub fn new(geom: ConvGeometry) -> Self {
        Self { geom, indices: None }
    }
}

impl<T: Real> Layer<T> for MaxPool2d {
    fn forward(&self, _: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::max_pool2d(x, &self.geom).map(|(y, _)| y)
    }

    fn forward_train(&mut self, _: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, idx) = kernels::max_pool2d(x, &self.geom)?;
        self.indices = Some(idx);
        Ok(y)
    }

    fn backward(&mut self, _: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let idx = self.indices.take().ok_or(Error::MissingCache { op: "max_pool2d" })?;
        kernels::max_pool2d_backward(&idx, grad)
    }
}
