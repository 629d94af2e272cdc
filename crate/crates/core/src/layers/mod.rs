//! Layer kernels: binarized and full-precision convolution/dense, batch
//! normalization, pooling, joins, activations and losses.
//!
//! Every kernel is a pair of pure functions: a forward that optionally returns
//! a cache, and a backward that consumes the cache. The [`crate::autodiff`]
//! tape strings them together.

mod act;
mod conv;
mod join;
mod loss;
mod norm;
mod pool;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use act::{relu_backward, relu_forward, tanh_backward, tanh_forward};
pub use conv::ConvGeometry;
pub use join::{concat_backward, concat_forward, residual_add};
pub use loss::{mse_loss, softmax_cross_entropy, LossOutput};
pub use norm::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, BatchNormCache,
    BatchStats, BN_EPS, BN_MOMENTUM,
};
pub use pool::{
    avgpool_backward, avgpool_forward, global_avgpool_backward, global_avgpool_forward,
    maxpool_backward, maxpool_forward, MaxPoolCache, PoolGeometry,
};

use crate::autodiff::{sign_backward, SteConfig};
use crate::error::{BnnError, Result};
use crate::tensor::{Real, Tensor};
use conv::{conv_backward_impl, conv_forward_impl, ConvCache, InputMode, Kernel};

/// Where the single per-layer scaling factor `α = mean|w|` is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalingMode {
    /// No scaling.
    #[default]
    N,
    /// Weight gradient multiplied by `α`; forward unscaled.
    B,
    /// Forward output and weight gradient multiplied by `α`.
    FB,
}

impl ScalingMode {
    pub const ALL: [ScalingMode; 3] = [ScalingMode::N, ScalingMode::B, ScalingMode::FB];

    pub fn scales_forward(self) -> bool {
        self == ScalingMode::FB
    }

    pub fn scales_weight_grad(self) -> bool {
        self != ScalingMode::N
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMode::N => "N",
            ScalingMode::B => "B",
            ScalingMode::FB => "FB",
        })
    }
}

impl FromStr for ScalingMode {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "N" => Ok(ScalingMode::N),
            "B" => Ok(ScalingMode::B),
            "FB" => Ok(ScalingMode::FB),
            other => Err(BnnError::invalid(format!(
                "unknown scaling mode {other:?} (expected N, B or FB)"
            ))),
        }
    }
}

/// Geometry and binarization options of a Q-layer (binary weights).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QLayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub scaling_mode: ScalingMode,
    /// Sign the input before the product. Off for a binary-weight first layer.
    pub binarize_input: bool,
}

impl QLayerConfig {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        QLayerConfig {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            scaling_mode: ScalingMode::N,
            binarize_input: true,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self::conv(in_features, out_features, 1, 1, 0)
    }

    pub fn with_scaling(mut self, mode: ScalingMode) -> Self {
        self.scaling_mode = mode;
        self
    }

    pub fn with_binarize_input(mut self, on: bool) -> Self {
        self.binarize_input = on;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Full-precision weights maintained by the optimizer; the forward pass uses
/// their signs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWeights<T: Real = f32> {
    pub values: Tensor<T>,
    /// Scale frozen at deployment, used instead of `mean|w|` when set.
    /// Deployed weights are stored as bits only, so `mean|w|` of the
    /// reloaded `±1` values no longer carries the trained scale.
    pub fixed_alpha: Option<T>,
}

impl<T: Real> LatentWeights<T> {
    pub fn new(values: Tensor<T>) -> Self {
        LatentWeights {
            values,
            fixed_alpha: None,
        }
    }

    /// The factor a forward pass applies: the frozen scale if present,
    /// otherwise [`compute_scaling_factor`].
    pub fn alpha(&self) -> Result<T> {
        match self.fixed_alpha {
            Some(a) => Ok(a),
            None => compute_scaling_factor(self),
        }
    }

    /// Clamps every entry to `[-1, 1]`.
    pub fn clip(&mut self) {
        for v in self.values.values_mut() {
            *v = v.max(-T::one()).min(T::one());
        }
    }
}

/// `α = mean(|w|)` over every entry of the layer.
pub fn compute_scaling_factor<T: Real>(w: &LatentWeights<T>) -> Result<T> {
    let vals = w.values.values();
    if vals.is_empty() {
        return Err(BnnError::invalid(
            "scaling factor of an empty weight tensor",
        ));
    }
    // Accumulated in f64 so that α is the f32 rounding of the exact mean
    // even for million-entry layers.
    let total: f64 = vals
        .iter()
        .map(|v| v.abs().to_f64().unwrap_or(f64::NAN))
        .sum();
    Ok(T::from_f64(total / vals.len() as f64))
}

fn signed<T: Real>(values: &[T]) -> Result<Vec<T>> {
    values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                Err(BnnError::Numeric("NaN latent weight".into()))
            } else if v >= T::zero() {
                Ok(T::one())
            } else {
                Ok(-T::one())
            }
        })
        .collect()
}

fn check_weight_shape<T: Real>(w: &Tensor<T>, g: &ConvGeometry) -> Result<()> {
    if w.len() != g.out_channels * g.patch_len() {
        return Err(BnnError::shape(format!(
            "weight tensor {:?} does not fit geometry {:?}",
            w.shape(),
            g.weight_shape()
        )));
    }
    Ok(())
}

/// Arithmetic used by a Q-layer forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QKernel {
    /// XNOR/popcount over packed operands (when the input is binarized).
    #[default]
    Packed,
    /// Float GEMM over the same `±1` operands; the reference path.
    FloatReference,
}

/// State kept by a Q-layer forward for its backward.
pub struct QCache<T: Real> {
    conv: ConvCache<T>,
    cfg: QLayerConfig,
    pre_sign_input: Option<Tensor<T>>,
    latent: Tensor<T>,
    alpha: T,
    dense: bool,
}

impl<T: Real> QCache<T> {
    pub fn alpha(&self) -> T {
        self.alpha
    }
}

pub struct QGrads<T: Real> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
}

fn q_forward<T: Real>(
    x: &Tensor<T>,
    w: &LatentWeights<T>,
    cfg: &QLayerConfig,
    kernel: QKernel,
    keep_cache: bool,
    dense: bool,
) -> Result<(Tensor<T>, Option<QCache<T>>)> {
    let g = cfg.geometry();
    g.validate()?;
    check_weight_shape(&w.values, &g)?;
    if cfg.binarize_input && x.values().iter().any(|v| v.is_nan()) {
        return Err(BnnError::Numeric("NaN activation entering sign".into()));
    }
    let alpha = w.alpha()?;
    let weight = signed(w.values.values())?;
    let mode = if cfg.binarize_input {
        InputMode::Sign
    } else {
        InputMode::Float
    };
    let k = if cfg.binarize_input && kernel == QKernel::Packed {
        Kernel::Binary
    } else {
        Kernel::FloatGemm
    };
    let (mut out, cache) = conv_forward_impl(x, weight, None, &g, mode, k, keep_cache)?;
    if cfg.scaling_mode.scales_forward() {
        for v in out.values_mut() {
            *v = *v * alpha;
        }
    }
    let cache = cache.map(|conv| QCache {
        conv,
        cfg: *cfg,
        pre_sign_input: cfg.binarize_input.then(|| x.clone()),
        latent: w.values.clone(),
        alpha,
        dense,
    });
    Ok((out, cache))
}

fn q_backward<T: Real>(
    cache: &QCache<T>,
    grad_out: &Tensor<T>,
    ste: &SteConfig,
    need_input: bool,
) -> Result<QGrads<T>> {
    let grads = conv_backward_impl(&cache.conv, grad_out, need_input)?;
    let mut gw = Tensor::new(cache.latent.shape().to_vec(), grads.weight)?;
    if cache.cfg.scaling_mode.scales_weight_grad() {
        gw = gw.scale(cache.alpha);
    }
    let weight = sign_backward(&gw, &cache.latent, ste)?;
    let input = match (grads.input, &cache.pre_sign_input) {
        (Some(gx), Some(pre)) => Some(sign_backward(&gx, pre, ste)?),
        (gx, _) => gx,
    };
    Ok(QGrads { input, weight })
}

/// Binarized convolution of an `N×C×H×W` input.
///
/// Output equals the float convolution of `sign(input)` (or the raw input
/// when `binarize_input` is off) with `sign(w)`, zero padded, times `α` in
/// mode FB.
pub fn qconv_forward<T: Real>(
    input: &Tensor<T>,
    w: &LatentWeights<T>,
    cfg: &QLayerConfig,
    kernel: QKernel,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<QCache<T>>)> {
    q_forward(input, w, cfg, kernel, keep_cache, false)
}

/// Gradients for input and latent weights of a binarized convolution.
///
/// Both sign nodes apply the straight-through estimator. In modes B and FB
/// the weight gradient is multiplied by `α`; the input gradient never is.
pub fn qconv_backward<T: Real>(
    cache: Option<&QCache<T>>,
    grad_out: &Tensor<T>,
    ste: &SteConfig,
) -> Result<QGrads<T>> {
    let cache = cache.ok_or_else(|| {
        BnnError::State("qconv backward called without a recorded forward".into())
    })?;
    if cache.dense {
        return Err(BnnError::State("cache belongs to a dense layer".into()));
    }
    q_backward(cache, grad_out, ste, true)
}

fn as_map<T: Real>(x: &Tensor<T>, features: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.dim(1) != features {
        return Err(BnnError::shape(format!(
            "dense layer expects N×{features} input, got {:?}",
            x.shape()
        )));
    }
    x.clone().reshape(vec![x.dim(0), features, 1, 1])
}

/// Binarized dense layer over `N×F` input; weights are `out×F`.
pub fn qdense_forward<T: Real>(
    input: &Tensor<T>,
    w: &LatentWeights<T>,
    cfg: &QLayerConfig,
    kernel: QKernel,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<QCache<T>>)> {
    let x = as_map(input, cfg.in_channels)?;
    let (out, cache) = q_forward(&x, w, cfg, kernel, keep_cache, true)?;
    let n = out.dim(0);
    Ok((out.reshape(vec![n, cfg.out_channels])?, cache))
}

pub fn qdense_backward<T: Real>(
    cache: Option<&QCache<T>>,
    grad_out: &Tensor<T>,
    ste: &SteConfig,
) -> Result<QGrads<T>> {
    let cache = cache.ok_or_else(|| {
        BnnError::State("qdense backward called without a recorded forward".into())
    })?;
    if !cache.dense {
        return Err(BnnError::State("cache belongs to a convolution".into()));
    }
    let n = cache.conv.input_shape[0];
    let g = grad_out
        .clone()
        .reshape(vec![n, cache.cfg.out_channels, 1, 1])
        .map_err(|_| {
            BnnError::shape(format!(
                "upstream gradient {:?} does not match dense output [{n}, {}]",
                grad_out.shape(),
                cache.cfg.out_channels
            ))
        })?;
    let mut grads = q_backward(cache, &g, ste, true)?;
    grads.input = grads
        .input
        .map(|gx| gx.reshape(vec![n, cache.cfg.in_channels]))
        .transpose()?;
    Ok(grads)
}

/// State of a full-precision convolution or dense forward.
pub struct FloatCache<T: Real> {
    conv: ConvCache<T>,
    weight_shape: Vec<usize>,
    dense: bool,
}

pub struct FloatGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Full-precision convolution with optional per-channel bias.
pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<FloatCache<T>>)> {
    check_weight_shape(weight, g)?;
    let (out, cache) = conv_forward_impl(
        input,
        weight.values().to_vec(),
        bias.map(|b| b.values()),
        g,
        InputMode::Float,
        Kernel::FloatGemm,
        keep_cache,
    )?;
    let cache = cache.map(|conv| FloatCache {
        conv,
        weight_shape: weight.shape().to_vec(),
        dense: false,
    });
    Ok((out, cache))
}

pub fn conv_backward<T: Real>(
    cache: Option<&FloatCache<T>>,
    grad_out: &Tensor<T>,
    has_bias: bool,
    need_input: bool,
) -> Result<FloatGrads<T>> {
    let cache = cache
        .ok_or_else(|| BnnError::State("conv backward called without a recorded forward".into()))?;
    let grads = conv_backward_impl(&cache.conv, grad_out, need_input)?;
    Ok(FloatGrads {
        input: grads.input,
        weight: Tensor::new(cache.weight_shape.clone(), grads.weight)?,
        bias: has_bias
            .then(|| Tensor::new(vec![grads.bias.len()], grads.bias))
            .transpose()?,
    })
}

/// Full-precision dense layer: `y = x·Wᵀ + b` with `W` stored `out×in`.
pub fn dense_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<FloatCache<T>>)> {
    if weight.rank() != 2 {
        return Err(BnnError::shape(format!(
            "dense weight must be 2-D, got {:?}",
            weight.shape()
        )));
    }
    let g = ConvGeometry::dense(weight.dim(1), weight.dim(0));
    let x = as_map(input, g.in_channels)?;
    let (out, cache) = conv_forward_impl(
        &x,
        weight.values().to_vec(),
        bias.map(|b| b.values()),
        &g,
        InputMode::Float,
        Kernel::FloatGemm,
        keep_cache,
    )?;
    let n = out.dim(0);
    let cache = cache.map(|conv| FloatCache {
        conv,
        weight_shape: weight.shape().to_vec(),
        dense: true,
    });
    Ok((out.reshape(vec![n, g.out_channels])?, cache))
}

pub fn dense_backward<T: Real>(
    cache: Option<&FloatCache<T>>,
    grad_out: &Tensor<T>,
    has_bias: bool,
    need_input: bool,
) -> Result<FloatGrads<T>> {
    let cache = cache.ok_or_else(|| {
        BnnError::State("dense backward called without a recorded forward".into())
    })?;
    if !cache.dense {
        return Err(BnnError::State("cache belongs to a convolution".into()));
    }
    let n = cache.conv.input_shape[0];
    let (out_f, in_f) = (cache.weight_shape[0], cache.weight_shape[1]);
    let g = grad_out
        .clone()
        .reshape(vec![n, out_f, 1, 1])
        .map_err(|_| {
            BnnError::shape(format!(
                "upstream gradient {:?} does not match [{n}, {out_f}]",
                grad_out.shape()
            ))
        })?;
    let mut grads = conv_backward(Some(cache), &g, has_bias, need_input)?;
    grads.input = grads
        .input
        .map(|gx| gx.reshape(vec![n, in_f]))
        .transpose()?;
    Ok(grads)
}
