use alloc::format;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `(N, Cin, positions)` view of a rank-2 `[N, C]` or rank-4 `[N, C, H, W]` tensor.
fn channel_view<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dim(op, format!("expected [N, C] or [N, C, H, W], got {:?}", x.shape()))),
    }
}

/// Affine map over the channel axis, applied independently at every
/// `(n, h, w)` position. Input is `[N, Cin]` or `[N, Cin, H, W]`, weight is
/// `[Cout, Cin]`, bias is `[Cout]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, cin, p) = channel_view("linear", input)?;
    let cout = check_weight(weight, cin)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("linear", format!("bias {:?} != [{cout}]", b.shape())));
        }
    }
    let mut shape = input.shape().to_vec();
    shape[1] = cout;
    let mut out = Tensor::zeros(&shape);
    for b in 0..n {
        let x = &input.data()[b * cin * p..(b + 1) * cin * p];
        let y = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
        gemm_nn(cout, p, cin, weight.data(), x, y);
        if let Some(bias) = bias {
            for (row, &bv) in y.chunks_mut(p).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

fn check_weight<T: Real>(weight: &Tensor<T>, cin: usize) -> Result<usize> {
    match *weight.shape() {
        [cout, wc] if wc == cin => Ok(cout),
        _ => Err(Error::dim("linear", format!("weight {:?} does not take {cin} input channels", weight.shape()))),
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, cin, p) = channel_view("linear_backward", input)?;
    let cout = check_weight(weight, cin)?;
    let mut expect = input.shape().to_vec();
    expect[1] = cout;
    if grad_out.shape() != expect.as_slice() {
        return Err(Error::dim("linear_backward", format!("grad {:?} != {expect:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    for b in 0..n {
        let x = &input.data()[b * cin * p..(b + 1) * cin * p];
        let g = &grad_out.data()[b * cout * p..(b + 1) * cout * p];
        gemm_tn(cin, p, cout, weight.data(), g, &mut gx.data_mut()[b * cin * p..(b + 1) * cin * p]);
        gemm_nt(cout, cin, p, g, x, gw.data_mut());
        for (acc, row) in gb.data_mut().iter_mut().zip(g.chunks(p)) {
            *acc += row.iter().copied().sum::<T>();
        }
    }
    Ok(LinearGrads { input: gx, weight: gw, bias: gb })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_is_identity() {
        let c = 4;
        let x = Tensor::<f64>::from_fn(&[2, c, 3, 2], |i| i as f64 * 0.5 - 3.0);
        let w = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[c]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap(), x);
    }

    #[test]
    fn ones_weight_sums_channels() {
        let cin = 6;
        let x = Tensor::<f32>::full(&[1, cin, 2, 3], 1.0);
        let w = Tensor::full(&[1, cin], 1.0);
        let y = linear(&x, &w, Some(&Tensor::zeros(&[1]))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert!(y.data().iter().all(|&v| v == cin as f32));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        let w = Tensor::<f32>::zeros(&[2, 4]);
        assert!(matches!(linear(&x, &w, None), Err(Error::Dimension { .. })));
    }
}
