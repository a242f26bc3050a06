use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Gelu, Linear};
use super::{name_hash, Layer, Mode, ParamRegistry};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Inverted dropout. Eval mode (or `p == 0`) is the identity and returns no
/// mask; train mode zeroes each element with probability `p` and scales the
/// survivors by `1 / (1 - p)`.
pub fn dropout<T: Real>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut impl RngCore,
) -> Result<(Tensor<T>, Option<Vec<bool>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = T::of_f64(1.0 / (1.0 - p));
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.random::<f64>() >= p).collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &keep)| if keep { v * scale } else { T::zero() }).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, Some(mask)))
}

/// Dropout layer with its own deterministic random stream: the mask of the
/// `k`-th training forward comes from stream `k` of a ChaCha generator keyed
/// by the layer seed.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    seed: u64,
    calls: u64,
    mask: Option<(Option<Vec<bool>>, f64)>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Self { p, seed, calls: 0, mask: None })
    }

    pub fn for_layer(p: f64, model_seed: u64, name: &str) -> Result<Self> {
        Self::new(p, model_seed ^ name_hash(name))
    }
}

impl<T: Real> Layer<T> for Dropout {
    fn forward(&self, _: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn forward_train(&mut self, _: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.calls);
        self.calls += 1;
        let (y, mask) = dropout(x, self.p, Mode::Train, &mut rng)?;
        self.mask = Some((mask, self.p));
        Ok(y)
    }

    fn backward(&mut self, _: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (mask, p) = self.mask.take().ok_or(Error::MissingCache { op: "dropout" })?;
        let Some(mask) = mask else { return Ok(grad.clone()) };
        let scale = T::of_f64(1.0 / (1.0 - p));
        let data = grad.data().iter().zip(&mask).map(|(&g, &keep)| if keep { g * scale } else { T::zero() }).collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

/// `fc2(dropout(gelu(fc1(x))))` over the channel axis, hidden width `ratio · C`.
#[derive(Debug, Clone)]
pub struct ChannelMlp<T> {
    pub fc1: Linear<T>,
    act: Gelu<T>,
    drop: Dropout,
    pub fc2: Linear<T>,
}

impl<T: Real> ChannelMlp<T> {
    pub fn new(
        reg: &mut ParamRegistry<T>,
        name: &str,
        channels: usize,
        ratio: usize,
        p: f64,
        seed: u64,
    ) -> Result<Self> {
        let hidden = channels * ratio;
        Ok(Self {
            fc1: Linear::new(reg, &format!("{name}.fc1"), channels, hidden)?,
            act: Gelu::new(),
            drop: Dropout::for_layer(p, seed, &format!("{name}.drop"))?,
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, channels)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features
    }
}

impl<T: Real> Layer<T> for ChannelMlp<T> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(params, x)?;
        let h = self.act.forward(params, &h)?;
        self.fc2.forward(params, &h)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward_train(params, x)?;
        let h = self.act.forward_train(params, &h)?;
        let h = Layer::<T>::forward_train(&mut self.drop, params, &h)?;
        self.fc2.forward_train(params, &h)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc2.backward(params, grad)?;
        let g = Layer::<T>::backward(&mut self.drop, params, &g)?;
        let g = self.act.backward(params, &g)?;
        self.fc1.backward(params, &g)
    }
}

/// `x + inner(x)`.
#[derive(Debug, Clone)]
pub struct Residual<L> {
    pub inner: L,
}

impl<L> Residual<L> {
    pub fn new(inner: L) -> Self {
        Self { inner }
    }
}

impl<T: Real, L: Layer<T>> Layer<T> for Residual<L> {
    fn forward(&self, params: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.inner.forward(params, x)?;
        residual_sum(x, &y)
    }

    fn forward_train(&mut self, params: &mut ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.inner.forward_train(params, x)?;
        residual_sum(x, &y)
    }

    fn backward(&mut self, params: &mut ParamRegistry<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.inner.backward(params, grad)?;
        g.add_assign(grad)?;
        Ok(g)
    }
}

fn residual_sum<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::dim("residual", format!("sub-layer maps {:?} to {:?}", x.shape(), y.shape())));
    }
    x.add(y)
}
