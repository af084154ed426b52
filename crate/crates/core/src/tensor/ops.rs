//! Forward and adjoint kernels.
//!
//! Convolutions unfold their input into columns and run one matrix product
//! per batch item. The product's blocking depends only on operand shapes and
//! the kernel is chosen at compile time, so results are bit-reproducible for
//! identical inputs. Other reductions run in index order.
//!
//! Convolution weights are `(c_out, c_in, k, k)`. Transposed convolution
//! weights are `(c_in, c_out, k, k)`, so `conv_transpose2d(·; W)` is the exact
//! adjoint of `conv2d(·; W)` for the same `W`, stride and padding.

use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Output extent of a strided convolution, or `None` if it would be empty.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (input + 2 * pad).checked_sub(k)?;
    Some(span / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_extent(
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Option<usize> {
    if input == 0 {
        return None;
    }
    ((input - 1) * stride + k + output_padding).checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Range of output coordinates `o` with `o * stride + tap - pad` inside `[0, input)`.
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // o * stride >= pad - tap
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    // o * stride + tap - pad <= input - 1
    let hi_excl = if input + pad > tap { (input + pad - tap - 1) / stride + 1 } else { 0 };
    (lo.min(out), hi_excl.min(out).max(lo.min(out)))
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [1, c_out, 1, 1] {
            return Err(shape_err!("bias {:?} for {} output channels", b.shape(), c_out));
        }
    }
    Ok(())
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [_, ci, h, w] = input.shape();
    let [co, wci, kh, kw] = weight.shape();
    if stride == 0 {
        return Err(shape_err!("stride must be positive"));
    }
    if kh != kw {
        return Err(shape_err!("non-square kernel {kh}x{kw}"));
    }
    if wci != ci {
        return Err(shape_err!("weight expects {wci} input channels, input has {ci}"));
    }
    check_bias(bias, co)?;
    let ho = conv_out_extent(h, kh, stride, pad).filter(|&v| v > 0);
    let wo = conv_out_extent(w, kw, stride, pad).filter(|&v| v > 0);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(shape_err!("conv of {h}x{w} with k={kh} s={stride} p={pad} has empty output"));
    };
    Ok(conv2d_unchecked(input, weight, bias, stride, pad, ho, wo))
}

fn conv2d_unchecked<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let [b, ci, _, _] = input.shape();
    let [co, _, k, _] = weight.shape();
    let kk = ci * k * k;
    let hw = ho * wo;
    let mut out = Tensor::zeros([b, co, ho, wo]);
    let mut cols = vec![T::zero(); kk * hw];
    for bi in 0..b {
        im2col(input, bi, k, stride, pad, ho, wo, &mut cols);
        let dst = &mut out.data_mut()[bi * co * hw..(bi + 1) * co * hw];
        if let Some(bias) = bias {
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bias.data()[o]);
            }
        }
        T::gemm(co, kk, hw, weight.data(), (kk, 1), &cols, (hw, 1), T::one(), dst, (hw, 1));
    }
    out
}

pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let [_, ci, h, w] = input.shape();
    let [wci, co, kh, kw] = weight.shape();
    if stride == 0 {
        return Err(shape_err!("stride must be positive"));
    }
    if kh != kw {
        return Err(shape_err!("non-square kernel {kh}x{kw}"));
    }
    if wci != ci {
        return Err(shape_err!("weight expects {wci} input channels, input has {ci}"));
    }
    if output_padding >= stride.max(1) && output_padding != 0 {
        return Err(shape_err!("output_padding {output_padding} must be below stride {stride}"));
    }
    check_bias(bias, co)?;
    let ho = conv_transpose_out_extent(h, kh, stride, pad, output_padding);
    let wo = conv_transpose_out_extent(w, kw, stride, pad, output_padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(shape_err!("transposed conv of {h}x{w} has empty output"));
    };
    Ok(conv_transpose2d_unchecked(input, weight, bias, stride, pad, ho, wo))
}

fn conv_transpose2d_unchecked<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let [b, ci, h, w] = input.shape();
    let [_, co, k, _] = weight.shape();
    let kk = co * k * k;
    let hw = h * w;
    let mut out = Tensor::zeros([b, co, ho, wo]);
    if let Some(bias) = bias {
        for bi in 0..b {
            for o in 0..co {
                out.plane_mut(bi, o).fill(bias.data()[o]);
            }
        }
    }
    let mut cols = vec![T::zero(); kk * hw];
    for bi in 0..b {
        let src = &input.data()[bi * ci * hw..(bi + 1) * ci * hw];
        T::gemm(kk, ci, hw, weight.data(), (1, kk), src, (hw, 1), T::zero(), &mut cols, (hw, 1));
        col2im(&cols, &mut out, bi, k, stride, pad, h, w);
    }
    out
}

/// Unfolds batch item `bi` into a `(c·k·k) × (ho·wo)` matrix whose column
/// `p` holds the receptive field of output position `p`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    input: &Tensor<T>,
    bi: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let [_, c, h, w] = input.shape();
    let hw = ho * wo;
    let xr: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(wo, w, stride, kx, pad)).collect();
    let yr: Vec<(usize, usize)> = (0..k).map(|ky| valid_range(ho, h, stride, ky, pad)).collect();
    for ch in 0..c {
        let src = input.plane(bi, ch);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = xr[kx];
                let (y0, y1) = yr[ky];
                if x0 >= x1 || y0 >= y1 {
                    row.fill(T::zero());
                    continue;
                }
                row[..y0 * wo].fill(T::zero());
                row[y1 * wo..].fill(T::zero());
                for oy in y0..y1 {
                    let iy = oy * stride + ky - pad;
                    let line = &mut row[oy * wo..(oy + 1) * wo];
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    let ix0 = x0 * stride + kx - pad;
                    let srow = &src[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        line[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (j, d) in line[x0..x1].iter_mut().enumerate() {
                            *d = srow[ix0 + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds every column entry back onto batch item `bi`
/// of `out`, where `(h, w)` are the extents the columns were laid out for.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    out: &mut Tensor<T>,
    bi: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) {
    let [_, c, ho, wo] = out.shape();
    let hw = h * w;
    let xr: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(w, wo, stride, kx, pad)).collect();
    let yr: Vec<(usize, usize)> = (0..k).map(|ky| valid_range(h, ho, stride, ky, pad)).collect();
    for ch in 0..c {
        let dst = out.plane_mut(bi, ch);
        for ky in 0..k {
            let (y0, y1) = yr[ky];
            for kx in 0..k {
                let (x0, x1) = xr[kx];
                if x0 >= x1 {
                    continue;
                }
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for iy in y0..y1 {
                    let oy = iy * stride + ky - pad;
                    let s = &row[iy * w + x0..iy * w + x1];
                    let ox0 = x0 * stride + kx - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        for (d, &v) in drow[ox0..ox0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            drow[ox0 + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input<T: Real>(
    grad: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    input_hw: (usize, usize),
) -> Tensor<T> {
    conv_transpose2d_unchecked(grad, weight, None, stride, pad, input_hw.0, input_hw.1)
}

/// Correlation of `grad` (the output side) with `input`, producing a
/// `(grad_c, input_c, k, k)` tensor. Serves as the weight gradient of both
/// `conv2d` (grad = dL/dout, input = x) and, with roles swapped, of
/// `conv_transpose2d`.
pub fn correlate_weight_grad<T: Real>(
    grad: &Tensor<T>,
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [b, co, ho, wo] = grad.shape();
    let [_, ci, _, _] = input.shape();
    let kk = ci * k * k;
    let hw = ho * wo;
    let mut out = Tensor::zeros([co, ci, k, k]);
    let mut cols = vec![T::zero(); kk * hw];
    for bi in 0..b {
        im2col(input, bi, k, stride, pad, ho, wo, &mut cols);
        let g = &grad.data()[bi * co * hw..(bi + 1) * co * hw];
        T::gemm(co, hw, kk, g, (hw, 1), &cols, (1, hw), T::one(), out.data_mut(), (kk, 1));
    }
    out
}

/// Per-channel sum over batch and space, shaped `(1, C, 1, 1)`.
pub fn channel_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [b, c, _, _] = t.shape();
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for ci in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            for &v in t.plane(bi, ci) {
                acc += v;
            }
        }
        out.data_mut()[ci] = acc;
    }
    out
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ba, ca, ha, wa] = a.shape();
    let [bb, cb, hb, wb] = b.shape();
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(shape_err!("concat of {:?} and {:?}", a.shape(), b.shape()));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
    for bi in 0..ba {
        data.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Tensor::from_vec([ba, ca + cb, ha, wa], data)
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if start + len > c || len == 0 {
        return Err(shape_err!("channel slice {start}..{} of {c}", start + len));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * len * hw);
    for bi in 0..b {
        let base = (bi * c + start) * hw;
        data.extend_from_slice(&x.data()[base..base + len * hw]);
    }
    Tensor::from_vec([b, len, h, w], data)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let mut out = Tensor::zeros([b, c, 2 * h, 2 * w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 cell.
pub fn sum_pool2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (hh, hw) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, hh, hw]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..hh {
                for xx in 0..hw {
                    dst[y * hw + xx] = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                }
            }
        }
    }
    out
}

/// Multiplies every channel of `x` by the single-channel `mask`.
pub fn mul_channel_broadcast<T: Real>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if mask.shape() != [b, 1, h, w] {
        return Err(shape_err!("mask {:?} for tensor {:?}", mask.shape(), x.shape()));
    }
    let mut out = x.clone();
    for bi in 0..b {
        let m = mask.plane(bi, 0);
        for ci in 0..c {
            for (v, &mv) in out.plane_mut(bi, ci).iter_mut().zip(m) {
                *v *= mv;
            }
        }
    }
    Ok(out)
}

/// Broadcasts a `(1, C, 1, 1)` tensor to `(b, C, h, w)`.
pub fn expand<T: Real>(p: &Tensor<T>, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let [one, c, ph, pw] = p.shape();
    if (one, ph, pw) != (1, 1, 1) {
        return Err(shape_err!("expand expects (1, C, 1, 1), got {:?}", p.shape()));
    }
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            out.plane_mut(bi, ci).fill(p.data()[ci]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct-summation reference convolution, independent of the kernel above.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [b, ci, h, wd] = x.shape();
        let [co, _, k, _] = w.shape();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn([b, co, ho, wo], |[bi, o, oy, ox]| {
            let mut acc = 0.0;
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(o, c, ky, kx) * x.at(bi, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f32);
        let w = Tensor::ones([1, 1, 1, 1]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::<f32>::zeros([1, 1, 256, 256]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().shape(), [1, 1, 128, 128]);
        let y = Tensor::<f32>::zeros([1, 1, 128, 128]);
        assert_eq!(conv_transpose2d(&y, &w, None, 2, 1, 1).unwrap().shape(), [1, 1, 256, 256]);
    }

    #[test]
    fn all_ones_sums_to_nine() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn transposed_scatter_of_single_pixel() {
        let x = Tensor::<f32>::ones([1, 1, 1, 1]);
        let w = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2d(&x, &w, None, 2, 0, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let w = Tensor::zeros([1, 2, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let w = Tensor::<f64>::zeros([2, 1, 3, 3]);
        assert!(conv_transpose2d(&Tensor::zeros([1, 3, 2, 2]), &w, None, 2, 1, 1).is_err());
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        assert!(concat_channels(&a, &Tensor::zeros([1, 2, 4, 5])).is_err());
    }

    #[test]
    fn conv_matches_reference_over_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w, k, s, p) in &[(7, 6, 3, 1, 1), (8, 8, 3, 2, 1), (9, 5, 5, 2, 2), (6, 6, 1, 1, 0), (5, 7, 3, 2, 0)] {
            let x = rand_tensor(&mut rng, [2, 3, h, w]);
            let wt = rand_tensor(&mut rng, [4, 3, k, k]);
            let got = conv2d(&x, &wt, None, s, p).unwrap();
            let want = conv_reference(&x, &wt, s, p);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{h}x{w} k{k} s{s} p{p}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, k, s, p, op) in &[(8, 3, 2, 1, 1), (6, 3, 1, 1, 0), (9, 5, 2, 2, 0), (4, 2, 2, 0, 0)] {
            let x = rand_tensor(&mut rng, [1, 2, h, h]);
            let wt = rand_tensor(&mut rng, [3, 2, k, k]);
            let y = conv2d(&x, &wt, None, s, p).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let back = conv_transpose2d(&r, &wt, None, s, p, op).unwrap();
            // Extents only agree when output_padding restores them.
            if back.shape() != x.shape() {
                continue;
            }
            let lhs = y.dot(&r).unwrap();
            let rhs = x.dot(&back).unwrap();
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn upsample_and_pool_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, [1, 2, 3, 4]);
        let y = rand_tensor(&mut rng, [1, 2, 6, 8]);
        let lhs = upsample2x(&x).dot(&y).unwrap();
        let rhs = x.dot(&sum_pool2x(&y)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::<f32>::from_fn([2, 2, 4, 4], |[b, c, y, x]| (b * 1000 + c * 100 + y * 10 + x) as f32);
        let z = Tensor::zeros([2, 3, 4, 4]);
        let cat = concat_channels(&a, &z).unwrap();
        assert_eq!(cat.shape(), [2, 5, 4, 4]);
        assert_eq!(slice_channels(&cat, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&cat, 2, 3).unwrap(), z);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![3.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data()[0], 3.0);
        assert!((y.data()[1] + 0.02).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }
}
