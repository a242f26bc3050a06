use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of_f64(0.5);
    x * half * (T::one() + (x * T::of_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::of_f64(0.5) * (T::one() + (x * T::of_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::of_f64(INV_SQRT_2PI) * (-(x * x) * T::of_f64(0.5)).exp();
    cdf + x * pdf
}

/// Exact GELU, `x · Φ(x)` with the erf-based Gaussian CDF.
pub fn gelu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(gelu_scalar)
}

pub fn gelu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.same_shape("gelu_backward", grad_out)?;
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| g * gelu_grad_scalar(x)).collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.same_shape("relu_backward", grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}
