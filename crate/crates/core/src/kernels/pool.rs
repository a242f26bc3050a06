use alloc::format;
use alloc::vec::Vec;

use super::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Flat input index of the selected element for every pooled output.
#[derive(Debug, Clone)]
pub struct MaxPoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Max pooling with implicit `-inf` padding. Ties resolve to the first
/// element of the window in row-major order.
pub fn max_pool2d<T: Real>(input: &Tensor<T>, geom: &ConvGeometry) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let (n, c, h, w) = input.dims4()?;
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    if 2 * ph > kh || 2 * pw > kw {
        return Err(Error::geom("max_pool2d", format!("padding {:?} exceeds half the kernel {:?}", geom.padding, geom.kernel)));
    }
    let (oh, ow) = geom.output_extent(h, w).map_err(|e| match e {
        Error::Geometry { detail, .. } => Error::geom("max_pool2d", detail),
        other => other,
    })?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..kh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|(v, _)| x[idx] > v) {
                            best = Some((x[idx], idx));
                        }
                    }
                }
                // padding never exceeds half the kernel, so each window has a real element
                let (v, idx) = best.expect("pool window covers at least one input element");
                out.data_mut()[(plane * oh + oy) * ow + ox] = v;
                argmax.push(idx);
            }
        }
    }
    Ok((out, MaxPoolIndices { input_shape: input.shape().to_vec(), argmax }))
}

pub fn max_pool2d_backward<T: Real>(indices: &MaxPoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::dim(
            "max_pool2d_backward",
            format!("grad has {} elements, pooling produced {}", grad_out.len(), indices.argmax.len()),
        ));
    }
    let mut gx = Tensor::zeros(&indices.input_shape);
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[idx] += g;
    }
    Ok(gx)
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let p = h * w;
    let inv = T::one() / T::of_f64(p as f64);
    let data = input.data().chunks(p).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::dim("global_avg_pool_backward", format!("input shape {input_shape:?} is not NCHW")));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::dim("global_avg_pool_backward", format!("grad {:?} != [{n}, {c}]", grad_out.shape())));
    }
    let p = h * w;
    let inv = T::one() / T::of_f64(p as f64);
    Ok(Tensor::from_fn(input_shape, |i| grad_out.data()[i / p] * inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_pool_matches_window_max() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 7, 7], |i| i as f64);
        let (y, _) = max_pool2d(&x, &ConvGeometry::new(3, 2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for oy in 0..4usize {
            for ox in 0..4usize {
                let mut m = f64::NEG_INFINITY;
                for iy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(7) {
                    for ix in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(7) {
                        m = m.max(x.at4(0, 0, iy, ix));
                    }
                }
                assert_eq!(y.at4(0, 0, oy, ox), m);
            }
        }
    }

    #[test]
    fn ties_route_gradient_to_first_element() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let (_, idx) = max_pool2d(&x, &ConvGeometry::new(2, 2, 0)).unwrap();
        let g = max_pool2d_backward(&idx, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn average_of_constant_is_constant() {
        let x = Tensor::<f32>::full(&[2, 3, 5, 4], 2.5);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
}
