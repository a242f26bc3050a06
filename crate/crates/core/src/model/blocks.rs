use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::nn::{BatchNorm2d, ChannelMlp, Conv2d, Layer, LayerNorm, Linear, MaxPool2d, ParamRegistry, Relu, Residual};
use crate::real::Real;
use crate::tensor::Tensor;

/// conv (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(reg: &mut ParamRegistry<T>, name: &str, cin: usize, cout: usize, geom: ConvGeometry) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(reg, &format!("{name}.conv"), cin, cout, geom, false)?,
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), cout)?,
            relu: Relu::new(),
        })
    }
}

impl<T: Real> Layer<T> for ConvBnRelu<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.forward(params, x)?;
        let h = self.bn.forward(params, &h)?;
        self.relu.forward(params, &h)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.forward_train(params, x)?;
        let h = self.bn.forward_train(params, &h)?;
        self.relu.forward_train(params, &h)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(params, grad)?;
        let g = self.bn.backward(params, &g)?;
        self.conv.backward(params, &g)
    }
}

/// Stride-4 stem.
#[derive(Debug, Clone)]
pub enum Tokenizer<T> {
    Conv { blocks: Vec<ConvBnRelu<T>>, pool: MaxPool2d },
    Patch { embed: Conv2d<T> },
}

impl<T: Real> Tokenizer<T> {
    /// Conv-BN-ReLU blocks with strides (2, 1, 1, ...) and 3×3 kernels,
    /// then a 3×3 stride-2 max-pool.
    pub fn conv(reg: &mut ParamRegistry<T>, name: &str, channels: &[usize]) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let stride = if i == 0 { 2 } else { 1 };
            blocks.push(ConvBnRelu::new(reg, &format!("{name}.{i}"), cin, cout, ConvGeometry::new(3, stride, 1))?);
            cin = cout;
        }
        Ok(Tokenizer::Conv { blocks, pool: MaxPool2d::new(ConvGeometry::new(3, 2, 1)) })
    }

    pub fn patch(reg: &mut ParamRegistry<T>, name: &str, c1: usize) -> Result<Self> {
        let embed = Conv2d::new(reg, &format!("{name}.embed"), 3, c1, ConvGeometry::new(4, 4, 0), true)?;
        Ok(Tokenizer::Patch { embed })
    }
}

impl<T: Real> Layer<T> for Tokenizer<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Tokenizer::Conv { blocks, pool } => {
                let h = blocks.forward(params, x)?;
                pool.forward(params, &h)
            }
            Tokenizer::Patch { embed } => embed.forward(params, x),
        }
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Tokenizer::Conv { blocks, pool } => {
                let h = blocks.forward_train(params, x)?;
                Layer::<T>::forward_train(pool, params, &h)
            }
            Tokenizer::Patch { embed } => embed.forward_train(params, x),
        }
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Tokenizer::Conv { blocks, pool } => {
                let g = Layer::<T>::backward(pool, params, grad)?;
                blocks.backward(params, &g)
            }
            Tokenizer::Patch { embed } => embed.backward(params, grad),
        }
    }
}

/// Residual bottleneck of the convolution stage:
/// `x + [1×1 C→hidden, 3×3 hidden→hidden, 1×1 hidden→C]`, each conv followed
/// by batch norm and ReLU.
pub type ConvStageBlock<T> = Residual<Vec<ConvBnRelu<T>>>;

pub fn conv_stage_block<T: Real>(
    reg: &mut ParamRegistry<T>,
    name: &str,
    channels: usize,
    hidden: usize,
) -> Result<ConvStageBlock<T>> {
    Ok(Residual::new(alloc::vec![
        ConvBnRelu::new(reg, &format!("{name}.0"), channels, hidden, ConvGeometry::new(1, 1, 0))?,
        ConvBnRelu::new(reg, &format!("{name}.1"), hidden, hidden, ConvGeometry::new(3, 1, 1))?,
        ConvBnRelu::new(reg, &format!("{name}.2"), hidden, channels, ConvGeometry::new(1, 1, 0))?,
    ]))
}

/// Pre-norm residual channel MLP, optional residual depthwise 3×3 conv,
/// pre-norm residual channel MLP.
#[derive(Debug, Clone)]
pub struct ConvMlpBlock<T> {
    pub norm1: LayerNorm<T>,
    pub mlp1: ChannelMlp<T>,
    pub dw: Option<Conv2d<T>>,
    pub norm2: LayerNorm<T>,
    pub mlp2: ChannelMlp<T>,
}

impl<T: Real> ConvMlpBlock<T> {
    pub fn new(
        reg: &mut ParamRegistry<T>,
        name: &str,
        channels: usize,
        ratio: usize,
        use_dw: bool,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(reg, &format!("{name}.norm1"), channels)?;
        let mlp1 = ChannelMlp::new(reg, &format!("{name}.mlp1"), channels, ratio, dropout, seed)?;
        let dw = if use_dw {
            let geom = ConvGeometry::new(3, 1, 1).with_groups(channels);
            Some(Conv2d::new(reg, &format!("{name}.dw"), channels, channels, geom, true)?)
        } else {
            None
        };
        let norm2 = LayerNorm::new(reg, &format!("{name}.norm2"), channels)?;
        let mlp2 = ChannelMlp::new(reg, &format!("{name}.mlp2"), channels, ratio, dropout, seed)?;
        Ok(Self { norm1, mlp1, dw, norm2, mlp2 })
    }
}

impl<T: Real> Layer<T> for ConvMlpBlock<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = x.add(&self.mlp1.forward(params, &self.norm1.forward(params, x)?)?)?;
        if let Some(dw) = &self.dw {
            x = x.add(&dw.forward(params, &x)?)?;
        }
        x.add(&self.mlp2.forward(params, &self.norm2.forward(params, &x)?)?)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward_train(params, x)?;
        let mut x = x.add(&self.mlp1.forward_train(params, &h)?)?;
        if let Some(dw) = &mut self.dw {
            x = x.add(&dw.forward_train(params, &x)?)?;
        }
        let h = self.norm2.forward_train(params, &x)?;
        x.add(&self.mlp2.forward_train(params, &h)?)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        let gh = self.mlp2.backward(params, &g)?;
        g.add_assign(&self.norm2.backward(params, &gh)?)?;
        if let Some(dw) = &mut self.dw {
            let gd = dw.backward(params, &g)?;
            g.add_assign(&gd)?;
        }
        let gh = self.mlp1.backward(params, &g)?;
        g.add_assign(&self.norm1.backward(params, &gh)?)?;
        Ok(g)
    }
}

/// Halves the resolution between stages.
#[derive(Debug, Clone)]
pub enum Downsample<T> {
    /// 3×3 stride-2 convolution with bias.
    Conv(Conv2d<T>),
    /// Concatenate each 2×2 neighbourhood (4·Cin channels) and project with a
    /// channel-axis linear map to Cout.
    PatchMerge { proj: Linear<T>, in_channels: usize },
}

impl<T: Real> Downsample<T> {
    pub fn new(reg: &mut ParamRegistry<T>, name: &str, cin: usize, cout: usize, conv: bool) -> Result<Self> {
        if conv {
            Ok(Downsample::Conv(Conv2d::new(reg, &format!("{name}.conv"), cin, cout, ConvGeometry::new(3, 2, 1), true)?))
        } else {
            Ok(Downsample::PatchMerge { proj: Linear::new(reg, &format!("{name}.proj"), 4 * cin, cout)?, in_channels: cin })
        }
    }

    fn check(x: &Tensor<T>) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::geom("downsample", format!("input extent {h}x{w} must be even")));
        }
        Ok(())
    }
}

/// `[N, C, H, W] -> [N, 4C, H/2, W/2]`; channel block `k` holds offset
/// `(k % 2, k / 2)` of each 2×2 window as (row, column).
pub fn space_to_depth<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, 4 * c, oh, ow]);
    for b in 0..n {
        for k in 0..4 {
            let (dy, dx) = (k % 2, k / 2);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let dst = out.index4(b, k * c + ch, y, xx);
                        out.data_mut()[dst] = x.at4(b, ch, 2 * y + dy, 2 * xx + dx);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depth_to_space<T: Real>(g: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let (n, c4, oh, ow) = g.dims4()?;
    if c4 != 4 * c {
        return Err(Error::dim("depth_to_space", format!("{c4} channels is not 4 x {c}")));
    }
    let mut out = Tensor::zeros(&[n, c, 2 * oh, 2 * ow]);
    for b in 0..n {
        for k in 0..4 {
            let (dy, dx) = (k % 2, k / 2);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let dst = out.index4(b, ch, 2 * y + dy, 2 * xx + dx);
                        out.data_mut()[dst] = g.at4(b, k * c + ch, y, xx);
                    }
                }
            }
        }
    }
    Ok(out)
}

impl<T: Real> Layer<T> for Downsample<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check(x)?;
        match self {
            Downsample::Conv(conv) => conv.forward(params, x),
            Downsample::PatchMerge { proj, .. } => proj.forward(params, &space_to_depth(x)?),
        }
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check(x)?;
        match self {
            Downsample::Conv(conv) => conv.forward_train(params, x),
            Downsample::PatchMerge { proj, .. } => proj.forward_train(params, &space_to_depth(x)?),
        }
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Downsample::Conv(conv) => conv.backward(params, grad),
            Downsample::PatchMerge { proj, in_channels } => depth_to_space(&proj.backward(params, grad)?, *in_channels),
        }
    }
}

/// Downsampler followed by Conv-MLP blocks.
#[derive(Debug, Clone)]
pub struct MlpStage<T> {
    pub downsample: Downsample<T>,
    pub blocks: Vec<ConvMlpBlock<T>>,
}

impl<T: Real> Layer<T> for MlpStage<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.downsample.forward(params, x)?;
        self.blocks.forward(params, &h)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.downsample.forward_train(params, x)?;
        self.blocks.forward_train(params, &h)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.blocks.backward(params, grad)?;
        self.downsample.backward(params, &g)
    }
}
