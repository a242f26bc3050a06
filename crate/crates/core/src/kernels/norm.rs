use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check_affine<T: Real>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            op,
            format!("gamma {:?} / beta {:?} must both be [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

fn check_eps(op: &'static str, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("{op}: eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Saved state for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    /// One entry per `(n, position)`.
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Normalizes over the channel axis independently at every `(n, h, w)`.
pub fn layer_norm<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    layer_norm_with_cache(input, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_cache<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    check_affine("layer_norm", c, gamma, beta)?;
    check_eps("layer_norm", eps)?;
    let p = h * w;
    let eps = T::of_f64(eps);
    let inv_c = T::one() / T::of_f64(c as f64);
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = vec![T::zero(); n * p];
    let mut mean = vec![T::zero(); p];
    let mut var = vec![T::zero(); p];
    for b in 0..n {
        let x = &input.data()[b * c * p..(b + 1) * c * p];
        mean.iter_mut().for_each(|v| *v = T::zero());
        var.iter_mut().for_each(|v| *v = T::zero());
        for row in x.chunks(p) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for row in x.chunks(p) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let istd = &mut inv_std[b * p..(b + 1) * p];
        for (is, &s) in istd.iter_mut().zip(&var) {
            *is = T::one() / (s * inv_c + eps).sqrt();
        }
        let xh = &mut xhat.data_mut()[b * c * p..(b + 1) * c * p];
        let y = &mut out.data_mut()[b * c * p..(b + 1) * c * p];
        for ch in 0..c {
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in 0..p {
                let k = ch * p + i;
                let v = (x[k] - mean[i]) * istd[i];
                xh[k] = v;
                y[k] = v * gm + bt;
            }
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    cache.xhat.same_shape("layer_norm_backward", grad_out)?;
    let (n, c, h, w) = grad_out.dims4()?;
    let p = h * w;
    let inv_c = T::one() / T::of_f64(c as f64);
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    let mut sum_g = vec![T::zero(); p];
    let mut sum_gx = vec![T::zero(); p];
    for b in 0..n {
        let g = &grad_out.data()[b * c * p..(b + 1) * c * p];
        let xh = &cache.xhat.data()[b * c * p..(b + 1) * c * p];
        sum_g.iter_mut().for_each(|v| *v = T::zero());
        sum_gx.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            let gm = gamma.data()[ch];
            let (mut dg, mut db) = (T::zero(), T::zero());
            for i in 0..p {
                let k = ch * p + i;
                dg += g[k] * xh[k];
                db += g[k];
                let gh = g[k] * gm;
                sum_g[i] += gh;
                sum_gx[i] += gh * xh[k];
            }
            ggamma.data_mut()[ch] += dg;
            gbeta.data_mut()[ch] += db;
        }
        let istd = &cache.inv_std[b * p..(b + 1) * p];
        let dx = &mut gx.data_mut()[b * c * p..(b + 1) * c * p];
        for ch in 0..c {
            let gm = gamma.data()[ch];
            for i in 0..p {
                let k = ch * p + i;
                dx[k] = istd[i] * (g[k] * gm - sum_g[i] * inv_c - xh[k] * sum_gx[i] * inv_c);
            }
        }
    }
    Ok(NormGrads { input: gx, gamma: ggamma, beta: gbeta })
}

/// Statistics source for [`batch_norm2d`].
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into the running
    /// estimates: `running = (1 - momentum) * running + momentum * batch`.
    Train { running_mean: &'a mut Tensor<T>, running_var: &'a mut Tensor<T>, momentum: f64 },
    /// Normalize with the running estimates; nothing is mutated.
    Eval { running_mean: &'a Tensor<T>, running_var: &'a Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel normalization over `(N, H, W)`.
pub fn batch_norm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BatchNormMode<'_, T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    check_affine("batch_norm2d", c, gamma, beta)?;
    check_eps("batch_norm2d", eps)?;
    let p = h * w;
    let count = n * p;
    let eps_t = T::of_f64(eps);
    let (mean, var, batch_stats) = match mode {
        BatchNormMode::Train { running_mean, running_var, momentum } => {
            if !(momentum > 0.0 && momentum <= 1.0) {
                return Err(Error::Parameter(format!("batch_norm2d: momentum {momentum} outside (0, 1]")));
            }
            if count == 1 {
                return Err(Error::DegenerateStatistics {
                    op: "batch_norm2d",
                    detail: "N*H*W == 1 leaves no spread to normalize in training mode".into(),
                });
            }
            if running_mean.shape() != [c] || running_var.shape() != [c] {
                return Err(Error::dim("batch_norm2d", format!("running statistics must be [{c}]")));
            }
            let inv_count = T::one() / T::of_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * p;
                    s += input.data()[off..off + p].iter().copied().sum::<T>();
                }
                let m = s * inv_count;
                let mut v = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * p;
                    for &x in &input.data()[off..off + p] {
                        v += (x - m) * (x - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v * inv_count;
            }
            let mom = T::of_f64(momentum);
            let unbias = T::of_f64(count as f64 / (count as f64 - 1.0));
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var, true)
        }
        BatchNormMode::Eval { running_mean, running_var } => {
            if running_mean.shape() != [c] || running_var.shape() != [c] {
                return Err(Error::dim("batch_norm2d", format!("running statistics must be [{c}]")));
            }
            (running_mean.data().to_vec(), running_var.data().to_vec(), false)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * p;
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + p {
                let v = (input.data()[i] - m) * is;
                xhat.data_mut()[i] = v;
                out.data_mut()[i] = v * gm + bt;
            }
        }
    }
    Ok((out, BatchNormCache { xhat, inv_std, batch_stats }))
}

pub fn batch_norm2d_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    cache.xhat.same_shape("batch_norm2d_backward", grad_out)?;
    let (n, c, h, w) = grad_out.dims4()?;
    let p = h * w;
    let inv_count = T::one() / T::of_f64((n * p) as f64);
    let g = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                sg += g[i];
                sgx += g[i] * xh[i];
            }
        }
        ggamma.data_mut()[ch] = sgx;
        gbeta.data_mut()[ch] = sg;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        let (mg, mgx) = (sg * inv_count, sgx * inv_count);
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                gx.data_mut()[i] = if cache.batch_stats {
                    scale * (g[i] - mg - xh[i] * mgx)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    Ok(NormGrads { input: gx, gamma: ggamma, beta: gbeta })
}
