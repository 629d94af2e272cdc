//! Reverse-mode differentiation tape and the straight-through estimator.
//!
//! The tape records one node per op in execution order. [`Tape::backward`]
//! walks the nodes in reverse and sums gradient contributions into per-slot
//! accumulators. A tape created with [`Tape::inference`] records nothing and
//! keeps no caches, so the same forward code serves training and evaluation.
//!
//! The estimator clips on the magnitude of the sign's *input*: the gradient
//! passes where `|r| ≤ t_clip` and is zeroed elsewhere. It does not clip the
//! gradient's own magnitude.

use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};
use crate::layers::{
    self, avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward_eval,
    batchnorm_forward_train, concat_backward, concat_forward, global_avgpool_backward,
    global_avgpool_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    tanh_backward, tanh_forward, BatchNormCache, BatchStats, ConvGeometry, FloatCache,
    LatentWeights, MaxPoolCache, PoolGeometry, QCache, QKernel, QLayerConfig, BN_EPS,
};
use crate::tensor::{Real, Tensor};

/// Straight-through estimator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteConfig {
    t_clip: f64,
}

impl SteConfig {
    pub const DEFAULT_T_CLIP: f64 = 0.5;

    pub fn new(t_clip: f64) -> Result<Self> {
        if !(t_clip.is_finite() && t_clip > 0.0) {
            return Err(BnnError::invalid(format!(
                "t_clip must be positive and finite, got {t_clip}"
            )));
        }
        Ok(SteConfig { t_clip })
    }

    pub fn t_clip(&self) -> f64 {
        self.t_clip
    }
}

impl Default for SteConfig {
    fn default() -> Self {
        SteConfig {
            t_clip: Self::DEFAULT_T_CLIP,
        }
    }
}

/// `+1` where `r ≥ 0`, `−1` elsewhere.
pub fn sign_forward<T: Real>(r: &Tensor<T>) -> Result<Tensor<T>> {
    if r.values().iter().any(|v| v.is_nan()) {
        return Err(BnnError::Numeric("NaN input to sign".into()));
    }
    Ok(r.map(|v| if v >= T::zero() { T::one() } else { -T::one() }))
}

/// `upstream · 1{|r| ≤ t_clip}`, with the boundary included.
pub fn sign_backward<T: Real>(
    upstream: &Tensor<T>,
    r: &Tensor<T>,
    cfg: &SteConfig,
) -> Result<Tensor<T>> {
    let t = T::from_f64(cfg.t_clip);
    upstream.zip_map(r, |g, r| if r.abs() <= t { g } else { T::zero() })
}

/// Handle to a value slot on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Sign {
        x: Var,
        ste: SteConfig,
    },
    Float {
        x: Var,
        w: Var,
        b: Option<Var>,
        cache: FloatCache<T>,
        dense: bool,
    },
    Quant {
        x: Var,
        w: Var,
        cache: QCache<T>,
        ste: SteConfig,
        dense: bool,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Tanh {
        x: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        cache: MaxPoolCache,
    },
    AvgPool {
        x: Var,
        geom: PoolGeometry,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Scalar losses whose gradient w.r.t. `x` is fixed at forward time.
    Loss {
        x: Var,
        grad: Tensor<T>,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    out: Var,
}

/// Records operations for one forward pass.
pub struct Tape<T: Real = f32> {
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by slot.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if no recorded path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records nodes for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires_grad: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; nothing is recorded.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Adds an input slot. Gradients are computed only for slots that require
    /// them and for values derived from such slots.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    /// A trainable parameter slot.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Takes the value out of a slot that will not be read again.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        let shape = self.values[v.0].shape().to_vec();
        std::mem::replace(
            &mut self.values[v.0],
            Tensor::zeros(vec![0; shape.len().max(1)]),
        )
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad && self.recording);
        Var(self.values.len() - 1)
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.requires_grad[v.0])
    }

    fn emit(&mut self, value: Tensor<T>, track: bool, op: Option<Op<T>>) -> Var {
        let out = self.push(value, track);
        if let (true, Some(op)) = (track, op) {
            self.nodes.push(Node { op, out });
        }
        out
    }

    pub fn sign(&mut self, x: Var, ste: SteConfig) -> Result<Var> {
        let y = sign_forward(self.value(x))?;
        let track = self.needs_grad(&[x]);
        Ok(self.emit(y, track, Some(Op::Sign { x, ste })))
    }

    /// Full-precision convolution; `w` is `out×in×kh×kw`, `b` per channel.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeometry) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        let track = self.needs_grad(&ins);
        let (y, cache) = layers::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
            track,
        )?;
        Ok(self.emit(
            y,
            track,
            cache.map(|cache| Op::Float {
                x,
                w,
                b,
                cache,
                dense: false,
            }),
        ))
    }

    /// Full-precision dense layer; `w` is `out×in`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        let track = self.needs_grad(&ins);
        let (y, cache) = layers::dense_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            track,
        )?;
        Ok(self.emit(
            y,
            track,
            cache.map(|cache| Op::Float {
                x,
                w,
                b,
                cache,
                dense: true,
            }),
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn quant(
        &mut self,
        x: Var,
        w: Var,
        cfg: &QLayerConfig,
        ste: SteConfig,
        kernel: QKernel,
        fixed_alpha: Option<T>,
        dense: bool,
    ) -> Result<Var> {
        let track = self.needs_grad(&[x, w]);
        // The layer API takes latent weights by reference; wrap without copying
        // by temporarily moving the slot value.
        let mut latent = LatentWeights::new(std::mem::replace(
            &mut self.values[w.0],
            Tensor::zeros(vec![0]),
        ));
        latent.fixed_alpha = fixed_alpha;
        let res = if dense {
            layers::qdense_forward(self.value(x), &latent, cfg, kernel, track)
        } else {
            layers::qconv_forward(self.value(x), &latent, cfg, kernel, track)
        };
        self.values[w.0] = latent.values;
        let (y, cache) = res?;
        Ok(self.emit(
            y,
            track,
            cache.map(|cache| Op::Quant {
                x,
                w,
                cache,
                ste,
                dense,
            }),
        ))
    }

    /// Binarized convolution with latent weights `w`. `fixed_alpha`
    /// overrides the scale computed from `w` (see [`LatentWeights`]).
    pub fn qconv(
        &mut self,
        x: Var,
        w: Var,
        cfg: &QLayerConfig,
        ste: SteConfig,
        kernel: QKernel,
        fixed_alpha: Option<T>,
    ) -> Result<Var> {
        self.quant(x, w, cfg, ste, kernel, fixed_alpha, false)
    }

    /// Binarized dense layer with latent weights `w`.
    pub fn qdense(
        &mut self,
        x: Var,
        w: Var,
        cfg: &QLayerConfig,
        ste: SteConfig,
        kernel: QKernel,
        fixed_alpha: Option<T>,
    ) -> Result<Var> {
        self.quant(x, w, cfg, ste, kernel, fixed_alpha, true)
    }

    /// Batch norm with batch statistics; returns them for the running update.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (y, cache, stats) = batchnorm_forward_train(
            self.value(x),
            self.value(gamma).values(),
            self.value(beta).values(),
        )?;
        let track = self.needs_grad(&[x, gamma, beta]);
        let v = self.emit(
            y,
            track,
            Some(Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            }),
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let y = batchnorm_forward_eval(
            self.value(x),
            self.value(gamma).values(),
            self.value(beta).values(),
            mean,
            var,
        )?;
        let track = self.needs_grad(&[x, gamma, beta]);
        let eps = T::from_f64(BN_EPS);
        let op = track.then(|| Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std: var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        });
        Ok(self.emit(y, track, op))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = tanh_forward(self.value(x));
        let track = self.needs_grad(&[x]);
        self.emit(y, track, Some(Op::Tanh { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu_forward(self.value(x));
        let track = self.needs_grad(&[x]);
        self.emit(y, track, Some(Op::Relu { x }))
    }

    pub fn max_pool(&mut self, x: Var, geom: &PoolGeometry) -> Result<Var> {
        let (y, cache) = maxpool_forward(self.value(x), geom)?;
        let track = self.needs_grad(&[x]);
        Ok(self.emit(y, track, Some(Op::MaxPool { x, cache })))
    }

    pub fn avg_pool(&mut self, x: Var, geom: &PoolGeometry) -> Result<Var> {
        let y = avgpool_forward(self.value(x), geom)?;
        let track = self.needs_grad(&[x]);
        Ok(self.emit(y, track, Some(Op::AvgPool { x, geom: *geom })))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = global_avgpool_forward(self.value(x))?;
        let track = self.needs_grad(&[x]);
        Ok(self.emit(y, track, Some(Op::GlobalAvgPool { x })))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let track = self.needs_grad(&[x]);
        Ok(self.emit(y, track, Some(Op::Reshape { x })))
    }

    /// `N×…` to `N×F`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.batch(), t.item_len()];
        self.reshape(x, shape)
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = concat_forward(&refs)?;
        let track = self.needs_grad(xs);
        Ok(self.emit(y, track, Some(Op::Concat { xs: xs.to_vec() })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = layers::residual_add(self.value(a), self.value(b))?;
        let track = self.needs_grad(&[a, b]);
        Ok(self.emit(y, track, Some(Op::Add { a, b })))
    }

    fn loss(&mut self, x: Var, out: layers::LossOutput<T>) -> Var {
        let track = self.needs_grad(&[x]);
        let op = Op::Loss { x, grad: out.grad };
        self.emit(Tensor::scalar(out.loss), track, Some(op))
    }

    /// Mean softmax cross-entropy of `N×C` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = layers::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.loss(logits, out))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let out = layers::mse_loss(self.value(pred), target)?;
        Ok(self.loss(pred, out))
    }

    /// `Σ x·c` for a constant `c`; a linear probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(weights)?;
        let total = xv
            .values()
            .iter()
            .zip(weights.values())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.loss(
            x,
            layers::LossOutput {
                loss: total,
                grad: weights.clone(),
            },
        ))
    }

    /// Gradients of the scalar slot `loss` with respect to every slot that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(BnnError::State(
                "backward on a tape that did not record the forward".into(),
            ));
        }
        if loss.0 >= self.values.len() {
            return Err(BnnError::State(format!(
                "slot {} was never written",
                loss.0
            )));
        }
        if self.values[loss.0].len() != 1 {
            return Err(BnnError::invalid(format!(
                "loss must be a scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        let shapes = self.values.iter().map(|v| v.shape().to_vec()).collect();
        if self.requires_grad[loss.0] {
            grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape().to_vec(), T::one()));
        }
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out.0].take() else {
                continue;
            };
            self.node_backward(node, &g, &mut grads)?;
            grads[node.out.0] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.requires_grad[v.0] {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                if g.shape() != self.values[v.0].shape() {
                    return Err(BnnError::Internal(format!(
                        "gradient {:?} for slot of shape {:?}",
                        g.shape(),
                        self.values[v.0].shape()
                    )));
                }
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn node_backward(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Sign { x, ste } => {
                let gx = sign_backward(g, self.value(*x), ste)?;
                self.accumulate(grads, *x, gx)
            }
            Op::Float {
                x,
                w,
                b,
                cache,
                dense,
            } => {
                let need_x = self.requires_grad[x.0];
                let r = if *dense {
                    layers::dense_backward(Some(cache), g, b.is_some(), need_x)?
                } else {
                    layers::conv_backward(Some(cache), g, b.is_some(), need_x)?
                };
                if let Some(gx) = r.input {
                    self.accumulate(grads, *x, gx)?;
                }
                self.accumulate(grads, *w, r.weight)?;
                if let (Some(b), Some(gb)) = (b, r.bias) {
                    self.accumulate(grads, *b, gb)?;
                }
                Ok(())
            }
            Op::Quant {
                x,
                w,
                cache,
                ste,
                dense,
            } => {
                let r = if *dense {
                    layers::qdense_backward(Some(cache), g, ste)?
                } else {
                    layers::qconv_backward(Some(cache), g, ste)?
                };
                if let Some(gx) = r.input {
                    self.accumulate(grads, *x, gx)?;
                }
                self.accumulate(grads, *w, r.weight)
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = batchnorm_backward(cache, self.value(*gamma).values(), g)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![dg.len()], dg)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![db.len()], db)?)
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).values();
                let (n, c) = (xv.dim(0), xv.dim(1));
                let s: usize = xv.shape()[2..].iter().product();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                // One pass writes dx and accumulates both channel sums.
                #[allow(clippy::needless_range_loop)]
                for img in 0..n {
                    for ch in 0..c {
                        for i in (img * c + ch) * s..(img * c + ch + 1) * s {
                            let gi = g.values()[i];
                            let xhat = (xv.values()[i] - mean[ch]) * inv_std[ch];
                            dx[i] = gi * gam[ch] * inv_std[ch];
                            dg[ch] = dg[ch] + gi * xhat;
                            db[ch] = db[ch] + gi;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dg)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], db)?)
            }
            Op::Tanh { x } => {
                let gx = tanh_backward(self.value(node.out), g)?;
                self.accumulate(grads, *x, gx)
            }
            Op::Relu { x } => {
                let gx = relu_backward(self.value(*x), g)?;
                self.accumulate(grads, *x, gx)
            }
            Op::MaxPool { x, cache } => {
                let gx = maxpool_backward(cache, g)?;
                self.accumulate(grads, *x, gx)
            }
            Op::AvgPool { x, geom } => {
                let gx = avgpool_backward(self.value(*x).shape(), geom, g)?;
                self.accumulate(grads, *x, gx)
            }
            Op::GlobalAvgPool { x } => {
                let gx = global_avgpool_backward(self.value(*x).shape(), g)?;
                self.accumulate(grads, *x, gx)
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, gx)
            }
            Op::Concat { xs } => {
                let channels: Vec<usize> = xs.iter().map(|v| self.value(*v).dim(1)).collect();
                for (v, part) in xs.iter().zip(concat_backward(g, &channels)?) {
                    self.accumulate(grads, *v, part)?;
                }
                Ok(())
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())
            }
            Op::Loss { x, grad } => {
                let up = g.values()[0];
                self.accumulate(grads, *x, grad.scale(up))
            }
        }
    }
}
