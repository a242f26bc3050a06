use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Kernel size, stride, zero padding and group count of a 2-D convolution
/// (also reused for pooling windows, where `groups` is ignored).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: (kernel, kernel), stride: (stride, stride), padding: (padding, padding), groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn axis_extent(op: &'static str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        if kernel == 0 || stride == 0 {
            return Err(Error::geom(op, "kernel and stride must be positive"));
        }
        let padded = input + 2 * pad;
        if padded < kernel {
            return Err(Error::geom(
                op,
                format!("input extent {input} with padding {pad} is smaller than kernel {kernel}"),
            ));
        }
        Ok((padded - kernel) / stride + 1)
    }

    /// Output spatial extent `(H', W')` for an `H × W` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            Self::axis_extent("conv2d", h, self.kernel.0, self.stride.0, self.padding.0)?,
            Self::axis_extent("conv2d", w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

struct Plan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
}

fn plan<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, geom: &ConvGeometry) -> Result<Plan> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight
        .dims4()
        .map_err(|_| Error::dim("conv2d", format!("weight must be rank 4, got {:?}", weight.shape())))?;
    let g = geom.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::dim(
            "conv2d",
            format!("channels in={cin} out={cout} not divisible by groups={g}"),
        ));
    }
    if wcin != cin / g || (kh, kw) != geom.kernel {
        return Err(Error::dim(
            "conv2d",
            format!(
                "weight {:?} incompatible with input channels {cin}, groups {g}, kernel {:?}",
                weight.shape(),
                geom.kernel
            ),
        ));
    }
    let (oh, ow) = geom.output_extent(h, w)?;
    Ok(Plan { n, cin, h, w, cout, oh, ow, cin_g: cin / g, cout_g: cout / g, k: (cin / g) * kh * kw })
}

/// Unfolds one image's channel group into a `(cin_g·kh·kw) × (H'·W')` matrix.
/// `image` holds `cin_g` contiguous `h × w` planes.
pub fn im2col<T: Real>(
    image: &[T],
    cin_g: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let p = oh * ow;
    for c in 0..cin_g {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    cin_g: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
    image: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let p = oh * ow;
    for c in 0..cin_g {
        let plane = &mut image[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation via im2col + matrix product.
///
/// `weight` is `[Cout, Cin/groups, kh, kw]`; `groups == Cin == Cout` gives a
/// depthwise convolution.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let pl = plan(input, weight, geom)?;
    if let Some(b) = bias {
        if b.shape() != [pl.cout] {
            return Err(Error::dim("conv2d", format!("bias {:?} != [{}]", b.shape(), pl.cout)));
        }
    }
    let p = pl.oh * pl.ow;
    let mut out = Tensor::zeros(&[pl.n, pl.cout, pl.oh, pl.ow]);
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); pl.k * p] };
    let x = input.data();
    let wt = weight.data();
    for n in 0..pl.n {
        for g in 0..geom.groups {
            let img_off = (n * pl.cin + g * pl.cin_g) * pl.h * pl.w;
            let image = &x[img_off..img_off + pl.cin_g * pl.h * pl.w];
            let cols_ref: &[T] = if pointwise {
                image
            } else {
                im2col(image, pl.cin_g, pl.h, pl.w, geom, pl.oh, pl.ow, &mut cols);
                &cols
            };
            let w_g = &wt[g * pl.cout_g * pl.k..(g + 1) * pl.cout_g * pl.k];
            let out_off = (n * pl.cout + g * pl.cout_g) * p;
            let dst = &mut out.data_mut()[out_off..out_off + pl.cout_g * p];
            gemm_nn(pl.cout_g, p, pl.k, w_g, cols_ref, dst);
        }
        if let Some(b) = bias {
            let dst = &mut out.data_mut()[n * pl.cout * p..(n + 1) * pl.cout * p];
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    let pl = plan(input, weight, geom)?;
    if grad_out.shape() != [pl.n, pl.cout, pl.oh, pl.ow] {
        return Err(Error::dim(
            "conv2d_backward",
            format!("grad {:?} != [{}, {}, {}, {}]", grad_out.shape(), pl.n, pl.cout, pl.oh, pl.ow),
        ));
    }
    let p = pl.oh * pl.ow;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut cols = vec![T::zero(); pl.k * p];
    let mut grad_cols = vec![T::zero(); pl.k * p];
    let pointwise = geom.is_pointwise();
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    for n in 0..pl.n {
        for g in 0..geom.groups {
            let img_off = (n * pl.cin + g * pl.cin_g) * pl.h * pl.w;
            let img_len = pl.cin_g * pl.h * pl.w;
            let image = &x[img_off..img_off + img_len];
            let cols_ref: &[T] = if pointwise {
                image
            } else {
                im2col(image, pl.cin_g, pl.h, pl.w, geom, pl.oh, pl.ow, &mut cols);
                &cols
            };
            let out_off = (n * pl.cout + g * pl.cout_g) * p;
            let g_out = &go[out_off..out_off + pl.cout_g * p];
            let w_range = g * pl.cout_g * pl.k..(g + 1) * pl.cout_g * pl.k;
            gemm_nt(pl.cout_g, pl.k, p, g_out, cols_ref, &mut grad_w.data_mut()[w_range.clone()]);

            let dst = &mut grad_in.data_mut()[img_off..img_off + img_len];
            if pointwise {
                gemm_tn(pl.k, p, pl.cout_g, &wt[w_range], g_out, dst);
            } else {
                grad_cols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(pl.k, p, pl.cout_g, &wt[w_range], g_out, &mut grad_cols);
                col2im(&grad_cols, pl.cin_g, pl.h, pl.w, geom, pl.oh, pl.ow, dst);
            }
        }
    }
    let bias = with_bias.then(|| {
        let mut gb = Tensor::zeros(&[pl.cout]);
        for n in 0..pl.n {
            for co in 0..pl.cout {
                let off = (n * pl.cout + co) * p;
                gb.data_mut()[co] += go[off..off + p].iter().copied().sum::<T>();
            }
        }
        gb
    });
    Ok(ConvGrads { input: grad_in, weight: grad_w, bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let y = conv2d(&x, &w, None, &ConvGeometry::new(3, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let c = 5;
        let x = Tensor::<f64>::from_fn(&[2, c, 6, 7], |i| (i as f64 * 0.731).sin());
        let w = Tensor::from_fn(&[c, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let geom = ConvGeometry::new(3, 1, 1).with_groups(c);
        let y = conv2d(&x, &w, None, &geom).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_extent_follows_floor_formula() {
        let g = ConvGeometry::new(3, 2, 1);
        assert_eq!(g.output_extent(224, 224).unwrap(), (112, 112));
        assert_eq!(g.output_extent(7, 8).unwrap(), (4, 4));
        assert!(ConvGeometry::new(5, 1, 0).output_extent(3, 3).is_err());
    }

    #[test]
    fn channel_group_mismatch_is_a_dimension_error() {
        let x = Tensor::<f32>::zeros(&[1, 6, 4, 4]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvGeometry::new(3, 1, 1).with_groups(4)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let err = conv2d(&x, &w, None, &ConvGeometry::new(3, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn too_small_input_is_a_geometry_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvGeometry::new(3, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Geometry { .. }));
    }
}
