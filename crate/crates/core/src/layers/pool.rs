use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolGeometry {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(BnnError::invalid(
                "pool kernel and stride must be at least 1",
            ));
        }
        if self.padding >= self.kernel {
            return Err(BnnError::invalid(
                "pool padding must be smaller than the kernel",
            ));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(BnnError::shape(format!(
                "{k}×{k} pool does not fit a {h}×{w} map",
                k = self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

fn nchw<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(BnnError::shape(format!(
            "pooling expects N×C×H×W, got {:?}",
            x.shape()
        )));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    /// Flat input index chosen for each output entry.
    argmax: Vec<usize>,
}

pub fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    g: &PoolGeometry,
) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (n, c, h, w) = nchw(x)?;
    let (oh, ow) = g.output_hw(h, w)?;
    let xv = x.values();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let k = g.kernel;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * g.stride) as isize - g.padding as isize;
                let x0 = (ox * g.stride) as isize - g.padding as isize;
                // Window clipped to the map; ties keep the first in scan order.
                let ylo = y0.max(0) as usize;
                let yhi = (y0 + k as isize).min(h as isize) as usize;
                let xlo = x0.max(0) as usize;
                let xhi = (x0 + k as isize).min(w as isize) as usize;
                let mut at = base + ylo * w + xlo;
                let mut best = xv[at];
                for iy in ylo..yhi {
                    let row = base + iy * w;
                    for (ix, &v) in xv[row + xlo..row + xhi].iter().enumerate() {
                        if v > best {
                            best = v;
                            at = row + xlo + ix;
                        }
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Real>(cache: &MaxPoolCache, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.len() != cache.argmax.len() {
        return Err(BnnError::shape(format!(
            "pool gradient {:?} does not match forward output",
            grad.shape()
        )));
    }
    let mut gx = Tensor::zeros(cache.input_shape.clone());
    let gv = gx.values_mut();
    for (&at, &g) in cache.argmax.iter().zip(grad.values()) {
        gv[at] = gv[at] + g;
    }
    Ok(gx)
}

/// Average pooling without padding.
pub fn avgpool_forward<T: Real>(x: &Tensor<T>, g: &PoolGeometry) -> Result<Tensor<T>> {
    if g.padding != 0 {
        return Err(BnnError::invalid(
            "average pooling does not support padding",
        ));
    }
    let (n, c, h, w) = nchw(x)?;
    let (oh, ow) = g.output_hw(h, w)?;
    let inv = T::one() / T::from_f64((g.kernel * g.kernel) as f64);
    let xv = x.values();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * w + ox * g.stride;
                    acc = acc + xv[row..row + g.kernel].iter().copied().sum();
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool_backward<T: Real>(
    input_shape: &[usize],
    g: &PoolGeometry,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (oh, ow) = g.output_hw(h, w)?;
    if grad.shape() != [n, c, oh, ow] {
        return Err(BnnError::shape(format!(
            "pool gradient {:?} does not match forward output",
            grad.shape()
        )));
    }
    let inv = T::one() / T::from_f64((g.kernel * g.kernel) as f64);
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let gxv = gx.values_mut();
    let gv = grad.values();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let share = gv[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * w + ox * g.stride;
                    for v in &mut gxv[row..row + g.kernel] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Mean over the spatial axes: `N×C×H×W → N×C`.
pub fn global_avgpool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x)?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let out = x
        .values()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avgpool_backward<T: Real>(
    input_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = (input_shape[0], input_shape[1]);
    if grad.shape() != [n, c] {
        return Err(BnnError::shape(format!(
            "global pool gradient {:?} is not [{n}, {c}]",
            grad.shape()
        )));
    }
    let hw: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::from_f64(hw as f64);
    let mut vals = Vec::with_capacity(n * c * hw);
    for &g in grad.values() {
        vals.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape.to_vec(), vals)
}
