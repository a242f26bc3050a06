//! Numerical oracles: a direct-loop convolution and a central
//! finite-difference gradient checker. Used by the test suites and by the
//! CLI `selftest` command.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::model::Model;
use crate::nn::{Layer, Mode, ParamRegistry};
use crate::real::Real;
use crate::tensor::Tensor;

/// Convolution by the textbook seven-deep loop.
pub fn naive_conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, cpg, kh, kw) = weight.dims4()?;
    let g = geom.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cpg != cin / g || (kh, kw) != geom.kernel {
        return Err(Error::dim("naive_conv2d", format!("weight {:?} vs input {:?}", weight.shape(), input.shape())));
    }
    let (oh, ow) = geom.output_extent(h, w)?;
    let opg = cout / g;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            let grp = o / opg;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |bv| bv.data()[o]);
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * geom.stride.0 + ky) as isize - geom.padding.0 as isize;
                                let ix = (x * geom.stride.1 + kx) as isize - geom.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight.at4(o, ci, ky, kx) * input.at4(b, grp * cpg + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.index4(b, o, y, x);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// `max|a - b| / max|b|`, the normwise relative difference.
pub fn normwise_rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.max_abs().max(f64::MIN_POSITIVE);
    diff / scale
}

/// A random convolution problem: input, weight, optional bias and geometry.
#[derive(Debug, Clone)]
pub struct ConvCase {
    pub input: Tensor<f64>,
    pub weight: Tensor<f64>,
    pub bias: Option<Tensor<f64>>,
    pub geom: ConvGeometry,
}

/// Draws a small convolution problem covering strides 1-3, padding 0-2,
/// rectangular kernels, grouped and depthwise cases.
pub fn random_conv_case(rng: &mut impl Rng) -> ConvCase {
    let groups = [1, 1, 1, 2, 3][rng.random_range(0..5)];
    let depthwise = rng.random_bool(0.2);
    let (cin, cout, groups) = if depthwise {
        let c = rng.random_range(1..=6);
        (c, c, c)
    } else {
        (groups * rng.random_range(1..=3), groups * rng.random_range(1..=3), groups)
    };
    let kernel = (rng.random_range(1..=4), rng.random_range(1..=4));
    let stride = (rng.random_range(1..=3), rng.random_range(1..=3));
    let padding = (rng.random_range(0..=2), rng.random_range(0..=2));
    let h = rng.random_range(kernel.0.max(1)..=9);
    let w = rng.random_range(kernel.1.max(1)..=9);
    let n = rng.random_range(1..=2);
    let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let input = uniform(&[n, cin, h, w]);
    let weight = uniform(&[cout, cin / groups, kernel.0, kernel.1]);
    let bias = if cout % 2 == 0 { Some(uniform(&[cout])) } else { None };
    ConvCase { input, weight, bias, geom: ConvGeometry { kernel, stride, padding, groups } }
}

/// Runs `cases` random convolution problems through the im2col kernel and
/// the direct loop and returns the largest normwise relative difference.
pub fn conv_oracle_sweep(seed: u64, cases: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = random_conv_case(&mut rng);
        let fast = crate::kernels::conv2d(&c.input, &c.weight, c.bias.as_ref(), &c.geom)?;
        let slow = naive_conv2d(&c.input, &c.weight, c.bias.as_ref(), &c.geom)?;
        worst = worst.max(normwise_rel_error(&fast, &slow));
    }
    Ok(worst)
}

/// Something with a training forward, a backward and parameters in `f64`.
pub trait Probe {
    fn registry(&mut self) -> &mut ParamRegistry<f64>;
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// A layer together with the registry it reads.
pub struct LayerProbe<'a, L> {
    pub layer: &'a mut L,
    pub params: &'a mut ParamRegistry<f64>,
}

impl<L: Layer<f64>> Probe for LayerProbe<'_, L> {
    fn registry(&mut self) -> &mut ParamRegistry<f64> {
        self.params
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.forward_train(self.params, x)
    }

    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.backward(self.params, grad)
    }
}

impl Probe for Model<f64> {
    fn registry(&mut self) -> &mut ParamRegistry<f64> {
        self.params_mut()
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Model::forward(self, x, Mode::Train)
    }

    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        Model::backward(self, grad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the per-element relative error.
    pub floor: f64,
    /// Coordinates probed per tensor (evenly spaced, always including the
    /// first and last element).
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6, max_per_tensor: 24, seed: 0 }
    }
}

/// Worst relative error over the probed coordinates of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn probe_indices(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..k).map(|i| i * (len - 1) / (k - 1)).collect();
    idx.dedup();
    idx
}

/// Compares the analytic input and parameter gradients of `probe` with
/// central differences of the scalar `sum(forward(x) * r)`, where `r` is a
/// fixed random projection. Buffers are skipped.
pub fn check_gradients<P: Probe + ?Sized>(probe: &mut P, x: &Tensor<f64>, opts: &FdOptions) -> Result<Vec<GradCheck>> {
    let y = probe.forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    probe.registry().zero_grad();
    let gx = probe.backward(&r)?;

    let loss = |p: &mut P, x: &Tensor<f64>| -> Result<f64> {
        let y = p.forward(x)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    let mut out = Vec::new();
    let mut xp = x.clone();
    let mut worst: f64 = 0.0;
    let idx = probe_indices(x.len(), opts.max_per_tensor);
    for &i in &idx {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + opts.step;
        let up = loss(probe, &xp)?;
        xp.data_mut()[i] = orig - opts.step;
        let down = loss(probe, &xp)?;
        xp.data_mut()[i] = orig;
        worst = worst.max(rel(gx.data()[i], (up - down) / (2.0 * opts.step), opts.floor));
    }
    out.push(GradCheck { name: "input".into(), max_rel_error: worst, checked: idx.len() });

    let trainable: Vec<(usize, String, usize)> = probe
        .registry()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable())
        .map(|(k, p)| (k, p.name.clone(), p.value.len()))
        .collect();
    for (k, name, len) in trainable {
        let id = crate::nn::ParamId(k);
        let analytic = probe.registry().get(id).grad.clone();
        let idx = probe_indices(len, opts.max_per_tensor);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = probe.registry().get(id).value.data()[i];
            probe.registry().get_mut(id).value.data_mut()[i] = orig + opts.step;
            let up = loss(probe, x)?;
            probe.registry().get_mut(id).value.data_mut()[i] = orig - opts.step;
            let down = loss(probe, x)?;
            probe.registry().get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(rel(analytic.data()[i], (up - down) / (2.0 * opts.step), opts.floor));
        }
        out.push(GradCheck { name, max_rel_error: worst, checked: idx.len() });
    }
    Ok(out)
}

/// Largest error over a set of checks.
pub fn worst(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}
