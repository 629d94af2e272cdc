//! A [`ModelGraph`] together with its weights, and its forward pass on a
//! [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{LayerKind, ModelGraph, Precision};
use crate::autodiff::{SteConfig, Tape, Var};
use crate::data::NormStats;
use crate::error::{BnnError, Result};
use crate::layers::{compute_scaling_factor, BatchStats, LatentWeights, QKernel, BN_MOMENTUM};
use crate::tensor::FloatTensor;

/// Running batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub phase: Phase,
    pub ste: SteConfig,
    pub kernel: QKernel,
}

impl ForwardOptions {
    pub fn eval(kernel: QKernel) -> Self {
        ForwardOptions {
            phase: Phase::Eval,
            ste: SteConfig::default(),
            kernel,
        }
    }
}

/// Slots created by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter slots per node, in [`crate::arch::LayerNode::params`] order.
    pub params: Vec<Vec<Var>>,
    /// Batch statistics of each batch-norm node (training phase only).
    pub bn_stats: Vec<Option<BatchStats<f32>>>,
    /// Output slot of each node.
    pub outputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: ModelGraph,
    /// Parameter tensors per node, in [`crate::arch::LayerNode::params`] order.
    pub params: Vec<Vec<FloatTensor>>,
    pub running: Vec<Option<BnRunning>>,
    /// Frozen scaling factors of deployed binary layers.
    pub alphas: Vec<Option<f32>>,
    /// Normalization of raw inputs.
    pub norm: NormStats,
}

impl Model {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(graph: ModelGraph, norm: NormStats, seed: u64) -> Result<Model> {
        if norm.channels() != graph.input_shape[0] {
            return Err(BnnError::shape(format!(
                "normalization has {} channels, model input has {}",
                norm.channels(),
                graph.input_shape[0]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(graph.nodes.len());
        let mut running = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let mut tensors = Vec::new();
            for spec in node.params() {
                let t = match spec.name {
                    "weight" => {
                        let receptive: usize = spec.shape[2..].iter().product();
                        let fan_in = spec.shape[1] * receptive;
                        let fan_out = spec.shape[0] * receptive;
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                        FloatTensor::from_fn(spec.shape.clone(), |_| rng.gen_range(-limit..limit))
                    }
                    "gamma" => FloatTensor::full(spec.shape.clone(), 1.0),
                    _ => FloatTensor::zeros(spec.shape.clone()),
                };
                tensors.push(t);
            }
            params.push(tensors);
            running.push(match node.kind {
                LayerKind::BatchNorm { channels } => Some(BnRunning::new(channels)),
                _ => None,
            });
        }
        let alphas = vec![None; graph.nodes.len()];
        Ok(Model {
            graph,
            params,
            running,
            alphas,
            norm,
        })
    }

    /// Checks that every parameter tensor matches the graph.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.nodes.len();
        if self.params.len() != n || self.running.len() != n || self.alphas.len() != n {
            return Err(BnnError::shape("parameter tables do not match the graph"));
        }
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let specs = node.params();
            if specs.len() != self.params[i].len() {
                return Err(BnnError::shape(format!(
                    "node {} has {} tensors, expected {}",
                    node.name,
                    self.params[i].len(),
                    specs.len()
                )));
            }
            for (s, t) in specs.iter().zip(&self.params[i]) {
                if s.shape != t.shape() {
                    return Err(BnnError::shape(format!(
                        "{}.{} has shape {:?}, expected {:?}",
                        node.name,
                        s.name,
                        t.shape(),
                        s.shape
                    )));
                }
            }
            let want = node.running_stat_channels();
            match &self.running[i] {
                Some(r) if r.mean.len() == want && r.var.len() == want && want > 0 => {}
                None if want == 0 => {}
                _ => {
                    return Err(BnnError::shape(format!(
                        "running statistics of {} do not match",
                        node.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.graph.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes
    }

    /// Runs the graph on the batch in slot `x`.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        let xs = tape.value(x).shape();
        if xs.len() != 4 || xs[1..] != self.graph.input_shape[..] {
            return Err(BnnError::shape(format!(
                "model expects N×{:?} input, got {:?}",
                self.graph.input_shape, xs
            )));
        }
        let n = self.graph.nodes.len();
        let mut outputs: Vec<Var> = Vec::with_capacity(n);
        let mut param_vars = Vec::with_capacity(n);
        let mut bn_stats = vec![None; n];
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let pv: Vec<Var> = self.params[i]
                .iter()
                .map(|t| tape.param(t.clone()))
                .collect();
            let ins: Vec<Var> = node.inputs.iter().map(|&j| outputs[j]).collect();
            let mut eval_node = || -> Result<Var> {
                Ok(match &node.kind {
                    LayerKind::Input => x,
                    LayerKind::Conv {
                        geom,
                        bias,
                        precision,
                    } => match precision {
                        Precision::Full => tape.conv(ins[0], pv[0], bias.then(|| pv[1]), geom)?,
                        Precision::Binary { .. } => {
                            let cfg = node.kind.qconfig().expect("binary conv has a Q config");
                            tape.qconv(ins[0], pv[0], &cfg, opts.ste, opts.kernel, self.alphas[i])?
                        }
                    },
                    LayerKind::Dense {
                        bias, precision, ..
                    } => match precision {
                        Precision::Full => tape.dense(ins[0], pv[0], bias.then(|| pv[1]))?,
                        Precision::Binary { .. } => {
                            let cfg = node.kind.qconfig().expect("binary dense has a Q config");
                            tape.qdense(ins[0], pv[0], &cfg, opts.ste, opts.kernel, self.alphas[i])?
                        }
                    },
                    LayerKind::BatchNorm { .. } => match opts.phase {
                        Phase::Train => {
                            let (v, stats) = tape.batchnorm_train(ins[0], pv[0], pv[1])?;
                            bn_stats[i] = Some(stats);
                            v
                        }
                        Phase::Eval => {
                            let r = self.running[i].as_ref().ok_or_else(|| {
                                BnnError::State(format!(
                                    "batch norm {} has no running statistics",
                                    node.name
                                ))
                            })?;
                            tape.batchnorm_eval(ins[0], pv[0], pv[1], &r.mean, &r.var)?
                        }
                    },
                    LayerKind::Tanh => tape.tanh(ins[0]),
                    LayerKind::Relu => tape.relu(ins[0]),
                    LayerKind::MaxPool(g) => tape.max_pool(ins[0], g)?,
                    LayerKind::AvgPool(g) => tape.avg_pool(ins[0], g)?,
                    LayerKind::GlobalAvgPool => tape.global_avg_pool(ins[0])?,
                    LayerKind::Flatten => tape.flatten(ins[0])?,
                    LayerKind::Concat => tape.concat(&ins)?,
                    LayerKind::Add => tape.add(ins[0], ins[1])?,
                })
            };
            let out = eval_node().map_err(|e| match e {
                BnnError::Numeric(msg) => {
                    let source = self
                        .graph
                        .nodes
                        .iter()
                        .zip(&outputs)
                        .find(|(_, &v)| !tape.value(v).all_finite())
                        .map_or_else(|| "none".to_string(), |(n, _)| n.name.clone());
                    BnnError::Numeric(format!(
                        "at layer {}: {msg}; first non-finite output at layer {source}",
                        node.name
                    ))
                }
                other => other,
            })?;
            outputs.push(out);
            param_vars.push(pv);
        }
        Ok(ForwardPass {
            logits: outputs[n - 1],
            params: param_vars,
            bn_stats,
            outputs,
        })
    }

    /// Name of the first node whose output in `pass` holds NaN or ±∞.
    pub fn first_non_finite(&self, tape: &Tape<f32>, pass: &ForwardPass) -> Option<String> {
        self.graph
            .nodes
            .iter()
            .zip(&pass.outputs)
            .find(|(_, &v)| !tape.value(v).all_finite())
            .map(|(n, _)| n.name.clone())
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running(&mut self, pass: &ForwardPass) {
        for (r, s) in self.running.iter_mut().zip(&pass.bn_stats) {
            if let (Some(r), Some(s)) = (r, s) {
                s.update_running(&mut r.mean, &mut r.var, BN_MOMENTUM as f32);
            }
        }
    }

    /// Eval-phase logits of a normalized `N×C×H×W` batch.
    pub fn logits(&self, images: &FloatTensor, kernel: QKernel) -> Result<FloatTensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let pass = self.forward(&mut tape, x, &ForwardOptions::eval(kernel))?;
        Ok(tape.take_value(pass.logits))
    }

    /// [`Model::logits`] over a large batch in chunks of `chunk` items.
    pub fn logits_chunked(
        &self,
        images: &FloatTensor,
        chunk: usize,
        kernel: QKernel,
    ) -> Result<FloatTensor> {
        let n = images.batch();
        let item = images.item_len();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n * self.num_classes());
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = FloatTensor::new(shape, images.values()[start * item..end * item].to_vec())?;
            out.extend_from_slice(self.logits(&part, kernel)?.values());
        }
        FloatTensor::new(vec![n, self.num_classes()], out)
    }

    /// Clamps the latent weights of binary layers to `[-1, 1]`.
    pub fn clip_latent(&mut self) {
        for (node, tensors) in self.graph.nodes.iter().zip(&mut self.params) {
            if node.kind.precision().is_some_and(Precision::is_binary) {
                let mut w = LatentWeights::new(std::mem::replace(
                    &mut tensors[0],
                    FloatTensor::zeros(vec![0]),
                ));
                w.clip();
                tensors[0] = w.values;
            }
        }
    }

    /// Scaling factor a forward pass applies in each binary layer.
    pub fn layer_alphas(&self) -> Result<Vec<Option<f32>>> {
        self.graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if !node.kind.precision().is_some_and(Precision::is_binary) {
                    return Ok(None);
                }
                match self.alphas[i] {
                    Some(a) => Ok(Some(a)),
                    None => compute_scaling_factor(&LatentWeights::new(self.params[i][0].clone()))
                        .map(Some),
                }
            })
            .collect()
    }

    /// The model as deployed: binary weights replaced by their signs and the
    /// scaling factors frozen.
    pub fn deployed(&self) -> Result<Model> {
        let mut m = self.clone();
        m.alphas = self.layer_alphas()?;
        for (node, tensors) in m.graph.nodes.iter().zip(&mut m.params) {
            if node.kind.precision().is_some_and(Precision::is_binary) {
                tensors[0] = tensors[0].map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            }
        }
        Ok(m)
    }
}
