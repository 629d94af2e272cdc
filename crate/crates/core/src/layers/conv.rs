//! im2col convolution shared by the full-precision and binarized layers.
//!
//! Patches are laid out one per row (`N·P × K`, with `K = C·kh·kw`) so that a
//! packed patch is a contiguous bit row and the same `binary_gemm` kernel
//! serves convolution and dense layers alike.

use serde::{Deserialize, Serialize};

use crate::bittensor::{binary_gemm_into, BitTensor, Popcount};
use crate::error::{BnnError, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
        }
    }

    /// Geometry of a dense layer seen as a 1×1 convolution over a 1×1 map.
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self::new(in_features, out_features, 1, 1, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(BnnError::invalid("channel counts must be positive"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(BnnError::invalid("kernel and stride must be at least 1"));
        }
        Ok(())
    }

    /// Length of one patch, i.e. the inner dimension of the GEMM.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(BnnError::shape(format!(
                "{kh}×{kw} kernel does not fit a {h}×{w} input with padding {}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// How the layer input enters the patch matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum InputMode {
    Float,
    Sign,
}

/// Which arithmetic evaluates the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Kernel {
    FloatGemm,
    /// XNOR/popcount; valid only when both operands are `±1`.
    Binary,
}

pub(crate) struct ConvCache<T> {
    pub geom: ConvGeometry,
    pub input_shape: Vec<usize>,
    pub out_hw: (usize, usize),
    /// Effective input patches, `N·P × K`, zero where the patch hangs over
    /// the padding.
    pub cols: Vec<T>,
    /// Effective weights, `out × K`.
    pub weight: Vec<T>,
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn sign<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

pub(crate) fn check_input<T: Real>(
    x: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(BnnError::shape(format!(
            "convolution expects N×C×H×W input, got {:?}",
            x.shape()
        )));
    }
    if x.dim(1) != g.in_channels {
        return Err(BnnError::shape(format!(
            "convolution expects {} input channels, got {}",
            g.in_channels,
            x.dim(1)
        )));
    }
    Ok((x.dim(0), x.dim(2), x.dim(3)))
}

/// Columns `[lo, hi)` of a `kw`-wide kernel row starting at input column
/// `x0` that fall inside `0..w`.
fn valid_span(x0: isize, kw: usize, w: usize) -> (usize, usize) {
    let lo = (-x0).clamp(0, kw as isize) as usize;
    let hi = (w as isize - x0).clamp(0, kw as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn im2col<T: Real>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
    mode: InputMode,
) -> Vec<T> {
    let signed: Vec<T>;
    let x = match mode {
        InputMode::Float => x,
        InputMode::Sign => {
            signed = x.iter().map(|&v| sign(v)).collect();
            &signed
        }
    };
    let c = g.in_channels;
    let (kh, kw) = g.kernel;
    let k = g.patch_len();
    let pad = g.padding as isize;
    let mut cols = vec![T::zero(); n * oh * ow * k];
    let mut row = 0;
    for img in 0..n {
        let base = &x[img * c * h * w..(img + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                let y0 = (oy * g.stride) as isize - pad;
                let x0 = (ox * g.stride) as isize - pad;
                let (lo, hi) = valid_span(x0, kw, w);
                for ci in 0..c {
                    let plane = &base[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..kh {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize || lo == hi {
                            continue;
                        }
                        let src = iy as usize * w + (x0 + lo as isize) as usize;
                        let at = (ci * kh + ky) * kw;
                        dst[at + lo..at + hi].copy_from_slice(&plane[src..src + hi - lo]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    gcols: &[T],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let c = g.in_channels;
    let (kh, kw) = g.kernel;
    let k = g.patch_len();
    let pad = g.padding as isize;
    let mut gx = vec![T::zero(); n * c * h * w];
    let mut row = 0;
    for img in 0..n {
        let base = &mut gx[img * c * h * w..(img + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &gcols[row * k..(row + 1) * k];
                let y0 = (oy * g.stride) as isize - pad;
                let x0 = (ox * g.stride) as isize - pad;
                let (lo, hi) = valid_span(x0, kw, w);
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize || lo == hi {
                            continue;
                        }
                        let dst = ci * h * w + iy as usize * w + (x0 + lo as isize) as usize;
                        let at = (ci * kh + ky) * kw;
                        for (d, &s) in base[dst..dst + hi - lo]
                            .iter_mut()
                            .zip(&src[at + lo..at + hi])
                        {
                            *d = *d + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    gx
}

/// `out × N·P` (GEMM order) to `N × out × P` (NCHW order).
fn scatter_nchw<T: Real>(tmp: &[T], n: usize, out_c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * out_c * p];
    for o in 0..out_c {
        for img in 0..n {
            let src = &tmp[o * n * p + img * p..o * n * p + (img + 1) * p];
            out[(img * out_c + o) * p..(img * out_c + o + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn gather_gemm_order<T: Real>(g: &[T], n: usize, out_c: usize, p: usize) -> Vec<T> {
    let mut tmp = vec![T::zero(); n * out_c * p];
    for o in 0..out_c {
        for img in 0..n {
            tmp[o * n * p + img * p..o * n * p + (img + 1) * p]
                .copy_from_slice(&g[(img * out_c + o) * p..(img * out_c + o + 1) * p]);
        }
    }
    tmp
}

/// Subtracts the contribution the binary kernel picked up from padding.
///
/// Packed patches cannot hold zeros, so padded entries enter the XNOR product
/// as `+1`. Each such entry adds `w` to the raw dot product; removing
/// `Σ w` over the padded taps restores zero-padding semantics exactly.
fn remove_padding_contribution<T: Real>(
    tmp: &mut [T],
    weight: &[T],
    g: &ConvGeometry,
    n: usize,
    h: usize,
    w: usize,
    (oh, ow): (usize, usize),
) {
    if g.padding == 0 {
        return;
    }
    let (kh, kw) = g.kernel;
    let taps = kh * kw;
    let k = g.patch_len();
    let p = oh * ow;
    // Per output channel and tap, the weight sum over input channels.
    let mut tap_sum = vec![T::zero(); g.out_channels * taps];
    for o in 0..g.out_channels {
        for ci in 0..g.in_channels {
            for t in 0..taps {
                tap_sum[o * taps + t] = tap_sum[o * taps + t] + weight[o * k + ci * taps + t];
            }
        }
    }
    let pad = g.padding as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let y0 = (oy * g.stride) as isize - pad;
            let x0 = (ox * g.stride) as isize - pad;
            let mut padded = Vec::new();
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = y0 + ky as isize;
                    let ix = x0 + kx as isize;
                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                        padded.push(ky * kw + kx);
                    }
                }
            }
            if padded.is_empty() {
                continue;
            }
            let pos = oy * ow + ox;
            for o in 0..g.out_channels {
                let corr = padded
                    .iter()
                    .fold(T::zero(), |acc, &t| acc + tap_sum[o * taps + t]);
                for img in 0..n {
                    let at = o * n * p + img * p + pos;
                    tmp[at] = tmp[at] - corr;
                }
            }
        }
    }
}

/// Convolution of `x` (N×C×H×W) with effective weights `weight` (out×K).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_impl<T: Real>(
    x: &Tensor<T>,
    weight: Vec<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
    mode: InputMode,
    kernel: Kernel,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
    g.validate()?;
    let (n, h, w) = check_input(x, g)?;
    let (oh, ow) = g.output_hw(h, w)?;
    let k = g.patch_len();
    if weight.len() != g.out_channels * k {
        return Err(BnnError::shape(format!(
            "weights hold {} values, geometry needs {}",
            weight.len(),
            g.out_channels * k
        )));
    }
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(BnnError::shape(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                g.out_channels
            )));
        }
    }
    let p = oh * ow;
    let rows = n * p;
    let cols = im2col(x.values(), n, h, w, g, (oh, ow), mode);
    let mut tmp = vec![T::zero(); g.out_channels * rows];
    match kernel {
        Kernel::FloatGemm => {
            gemm(
                false,
                true,
                g.out_channels,
                k,
                rows,
                T::one(),
                &weight,
                &cols,
                T::zero(),
                &mut tmp,
            );
        }
        Kernel::Binary => {
            debug_assert_eq!(mode, InputMode::Sign);
            let wbits = BitTensor::pack_rows(&weight, g.out_channels, k)?;
            let cbits = BitTensor::pack_rows(&cols, rows, k)?;
            binary_gemm_into(&wbits, &cbits, &mut tmp, Popcount::detect());
            remove_padding_contribution(&mut tmp, &weight, g, n, h, w, (oh, ow));
        }
    }
    let mut out = scatter_nchw(&tmp, n, g.out_channels, p);
    if let Some(b) = bias {
        for img in 0..n {
            for (o, &bo) in b.iter().enumerate() {
                for v in
                    &mut out[(img * g.out_channels + o) * p..(img * g.out_channels + o + 1) * p]
                {
                    *v = *v + bo;
                }
            }
        }
    }
    let out = Tensor::new(vec![n, g.out_channels, oh, ow], out)?;
    let cache = keep_cache.then(|| ConvCache {
        geom: *g,
        input_shape: x.shape().to_vec(),
        out_hw: (oh, ow),
        cols,
        weight,
    });
    Ok((out, cache))
}

pub(crate) fn conv_backward_impl<T: Real>(
    cache: &ConvCache<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = &cache.geom;
    let (n, h, w) = (
        cache.input_shape[0],
        cache.input_shape[2],
        cache.input_shape[3],
    );
    let (oh, ow) = cache.out_hw;
    let expected = [n, g.out_channels, oh, ow];
    if grad_out.shape() != expected {
        return Err(BnnError::shape(format!(
            "upstream gradient {:?} does not match convolution output {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let p = oh * ow;
    let rows = n * p;
    let k = g.patch_len();
    let gt = gather_gemm_order(grad_out.values(), n, g.out_channels, p);

    let mut gw = vec![T::zero(); g.out_channels * k];
    gemm(
        false,
        false,
        g.out_channels,
        rows,
        k,
        T::one(),
        &gt,
        &cache.cols,
        T::zero(),
        &mut gw,
    );

    let gb: Vec<T> = gt.chunks(rows).map(|r| r.iter().copied().sum()).collect();

    let input = if need_input {
        let mut gcols = vec![T::zero(); rows * k];
        gemm(
            true,
            false,
            rows,
            g.out_channels,
            k,
            T::one(),
            &gt,
            &cache.weight,
            T::zero(),
            &mut gcols,
        );
        let gx = col2im(&gcols, n, h, w, g, (oh, ow));
        Some(Tensor::new(cache.input_shape.clone(), gx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution used as an independent oracle.
    fn direct_conv(x: &Tensor<f64>, wt: &[f64], g: &ConvGeometry) -> Tensor<f64> {
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (oh, ow) = g.output_hw(h, w).unwrap();
        let (kh, kw) = g.kernel;
        let mut out = Tensor::zeros(vec![n, g.out_channels, oh, ow]);
        for img in 0..n {
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..g.in_channels {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.values()[((img * g.in_channels + ci) * h
                                        + iy as usize)
                                        * w
                                        + ix as usize];
                                    let wv = wt[((o * g.in_channels + ci) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.values_mut()[((img * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn float_conv_matches_direct() {
        let g = ConvGeometry::new(3, 4, 3, 2, 1);
        let x = Tensor::from_fn(vec![2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let wt: Vec<f64> = (0..4 * 27)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2)
            .collect();
        let (out, _) = conv_forward_impl(
            &x,
            wt.clone(),
            None,
            &g,
            InputMode::Float,
            Kernel::FloatGemm,
            false,
        )
        .unwrap();
        let want = direct_conv(&x, &wt, &g);
        assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn binary_kernel_restores_zero_padding() {
        let g = ConvGeometry::new(2, 3, 3, 1, 1);
        let x = Tensor::from_fn(
            vec![1, 2, 5, 5],
            |i| if (i * 7) % 3 == 0 { -0.5 } else { 0.25 },
        );
        let wt: Vec<f64> = (0..3 * 18)
            .map(|i| if (i * 5) % 4 < 2 { 1.0 } else { -1.0 })
            .collect();
        let (bin, _) = conv_forward_impl(
            &x,
            wt.clone(),
            None,
            &g,
            InputMode::Sign,
            Kernel::Binary,
            false,
        )
        .unwrap();
        let xs = x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let want = direct_conv(&xs, &wt, &g);
        assert_eq!(bin.values(), want.values());
    }

    #[test]
    fn kernel_larger_than_input_is_shape_error() {
        let g = ConvGeometry::new(1, 1, 5, 1, 0);
        assert!(matches!(g.output_hw(3, 3), Err(BnnError::Shape(_))));
    }
}
