//! Model graphs and the LeNet, ResNet and DenseNet builders.
//!
//! A [`ModelGraph`] is an ordered list of nodes whose inputs always refer to
//! earlier nodes, so the order is a topological order. Shapes are inferred
//! and checked while building, so a finished graph always type-checks.
//!
//! Counted depth: convolution and dense layers count one each, projection
//! shortcuts count zero, and a plain dense block's single 3×3 convolution
//! counts two, the depth of the 1×1 + 3×3 bottleneck block it replaces. This
//! gives the usual DenseNet depth `8·b + 5` (stem, `4·b` two-layer blocks,
//! three transitions, classifier) for both block variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};
use crate::layers::{ConvGeometry, PoolGeometry, QLayerConfig, ScalingMode};

/// Storage and arithmetic class of a weight layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Full,
    /// Sign-binarized weights; `binarize_input` also signs the activations.
    Binary {
        binarize_input: bool,
        scaling: ScalingMode,
    },
}

impl Precision {
    pub const BINARY: Precision = Precision::Binary {
        binarize_input: true,
        scaling: ScalingMode::N,
    };

    pub fn is_binary(self) -> bool {
        matches!(self, Precision::Binary { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv {
        geom: ConvGeometry,
        bias: bool,
        precision: Precision,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
        precision: Precision,
    },
    BatchNorm {
        channels: usize,
    },
    Tanh,
    Relu,
    MaxPool(PoolGeometry),
    AvgPool(PoolGeometry),
    GlobalAvgPool,
    Flatten,
    Concat,
    Add,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Tanh => "tanh",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::AvgPool(_) => "avgpool",
            LayerKind::GlobalAvgPool => "global_avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
        }
    }

    pub fn precision(&self) -> Option<Precision> {
        match self {
            LayerKind::Conv { precision, .. } | LayerKind::Dense { precision, .. } => {
                Some(*precision)
            }
            _ => None,
        }
    }

    /// Q-layer configuration of a binary conv or dense layer.
    pub fn qconfig(&self) -> Option<QLayerConfig> {
        match *self {
            LayerKind::Conv {
                geom,
                precision:
                    Precision::Binary {
                        binarize_input,
                        scaling,
                    },
                ..
            } => Some(QLayerConfig {
                in_channels: geom.in_channels,
                out_channels: geom.out_channels,
                kernel: geom.kernel,
                stride: geom.stride,
                padding: geom.padding,
                scaling_mode: scaling,
                binarize_input,
            }),
            LayerKind::Dense {
                in_features,
                out_features,
                precision:
                    Precision::Binary {
                        binarize_input,
                        scaling,
                    },
                ..
            } => Some(
                QLayerConfig::dense(in_features, out_features)
                    .with_scaling(scaling)
                    .with_binarize_input(binarize_input),
            ),
            _ => None,
        }
    }
}

/// How a parameter tensor is stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageClass {
    PackedBinary,
    Float32,
}

/// One parameter tensor of a layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Eligible for 1-bit storage (weights of a binary layer).
    pub binarizable: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bits per packed row: everything but the leading (output) axis.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Output shape without the batch axis.
    pub out_shape: Vec<usize>,
    pub depth_weight: u32,
}

impl LayerNode {
    /// Trainable parameter tensors, in storage order.
    pub fn params(&self) -> Vec<ParamSpec> {
        match &self.kind {
            LayerKind::Conv {
                geom,
                bias,
                precision,
            } => {
                let mut v = vec![ParamSpec {
                    name: "weight",
                    shape: geom.weight_shape(),
                    binarizable: precision.is_binary(),
                }];
                if *bias {
                    v.push(ParamSpec {
                        name: "bias",
                        shape: vec![geom.out_channels],
                        binarizable: false,
                    });
                }
                v
            }
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
                precision,
            } => {
                let mut v = vec![ParamSpec {
                    name: "weight",
                    shape: vec![*out_features, *in_features],
                    binarizable: precision.is_binary(),
                }];
                if *bias {
                    v.push(ParamSpec {
                        name: "bias",
                        shape: vec![*out_features],
                        binarizable: false,
                    });
                }
                v
            }
            LayerKind::BatchNorm { channels } => vec![
                ParamSpec {
                    name: "gamma",
                    shape: vec![*channels],
                    binarizable: false,
                },
                ParamSpec {
                    name: "beta",
                    shape: vec![*channels],
                    binarizable: false,
                },
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(ParamSpec::len).sum()
    }

    /// Channels of running statistics kept by a batch-norm node (state, not
    /// parameters).
    pub fn running_stat_channels(&self) -> usize {
        match self.kind {
            LayerKind::BatchNorm { channels } => channels,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    /// `C×H×W` of one input item.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub nodes: Vec<LayerNode>,
}

pub type NodeId = usize;

impl ModelGraph {
    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn count_params(&self) -> usize {
        count_params(self)
    }

    /// Sum of node depth weights; see the module docs for the convention.
    pub fn counted_depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth_weight).sum()
    }

    pub fn num_binary_layers(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind.precision().is_some_and(Precision::is_binary))
            .count()
    }

    pub fn num_weight_layers(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind.precision().is_some())
            .count()
    }

    /// Copy with every binary layer switched to `mode`.
    pub fn with_scaling_mode(&self, mode: ScalingMode) -> ModelGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            match &mut n.kind {
                LayerKind::Conv { precision, .. } | LayerKind::Dense { precision, .. } => {
                    if let Precision::Binary { scaling, .. } = precision {
                        *scaling = mode;
                    }
                }
                _ => {}
            }
        }
        g
    }

    /// Re-runs shape inference and structural checks; used on graphs read
    /// from untrusted input.
    pub fn validate(&self) -> Result<()> {
        let mut b = GraphBuilder::new(&self.name, self.input_shape.clone(), self.num_classes)?;
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(BnnError::invalid(format!("node {i} reads a later node")));
            }
            let id = b.push(&n.name, n.kind.clone(), &n.inputs, n.depth_weight)?;
            if b.graph.nodes[id].out_shape != n.out_shape {
                return Err(BnnError::shape(format!(
                    "node {i} declares shape {:?}, inferred {:?}",
                    n.out_shape, b.graph.nodes[id].out_shape
                )));
            }
        }
        if self.nodes.first().map(|n| &n.kind) != Some(&LayerKind::Input) {
            return Err(BnnError::invalid("graph must start with its input node"));
        }
        b.finish().map(|_| ())
    }

    /// Human-readable layer table.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}  input {:?}  classes {}",
            self.name, self.input_shape, self.num_classes
        );
        let _ = writeln!(
            s,
            "{:>4}  {:<24} {:<14} {:<18} {:>12}  storage",
            "id", "name", "kind", "output", "params"
        );
        for (i, n) in self.nodes.iter().enumerate() {
            let storage = match n.kind.precision() {
                Some(Precision::Full) => "float32",
                Some(Precision::Binary { .. }) => "packed_binary",
                None if n.param_count() > 0 => "float32",
                None => "-",
            };
            let _ = writeln!(
                s,
                "{:>4}  {:<24} {:<14} {:<18} {:>12}  {}",
                i,
                n.name,
                n.kind.tag(),
                format!("{:?}", n.out_shape),
                n.param_count(),
                storage
            );
        }
        let _ = writeln!(s, "total parameters: {}", self.count_params());
        let _ = writeln!(s, "counted depth: {}", self.counted_depth());
        s
    }

    /// Machine-readable layer table.
    pub fn summary_json(&self) -> serde_json::Value {
        let layers: Vec<_> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let storage = match n.kind.precision() {
                    Some(Precision::Binary { .. }) => "packed_binary",
                    _ if n.param_count() > 0 => "float32",
                    _ => "none",
                };
                serde_json::json!({
                    "id": i,
                    "name": n.name,
                    "kind": n.kind.tag(),
                    "inputs": n.inputs,
                    "output_shape": n.out_shape,
                    "params": n.param_count(),
                    "storage": storage,
                })
            })
            .collect();
        serde_json::json!({
            "name": self.name,
            "input_shape": self.input_shape,
            "num_classes": self.num_classes,
            "total_params": self.count_params(),
            "counted_depth": self.counted_depth(),
            "layers": layers,
        })
    }
}

/// Sum of every parameter tensor's element count. Batch-norm running
/// statistics are state, not parameters, and are excluded.
pub fn count_params(g: &ModelGraph) -> usize {
    g.nodes.iter().map(LayerNode::param_count).sum()
}

/// Bytes of the serialized model; see [`crate::modelio`] for the layout.
pub fn model_size_bytes(g: &ModelGraph, binary_storage: bool) -> u64 {
    crate::modelio::predicted_size(g, binary_storage)
}

/// Incremental graph construction with shape inference.
pub struct GraphBuilder {
    graph: ModelGraph,
}

impl GraphBuilder {
    pub fn new(name: &str, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(BnnError::invalid(format!(
                "input shape must be C×H×W, got {input_shape:?}"
            )));
        }
        if num_classes < 2 {
            return Err(BnnError::invalid("a classifier needs at least 2 classes"));
        }
        Ok(GraphBuilder {
            graph: ModelGraph {
                name: name.to_string(),
                input_shape: input_shape.clone(),
                num_classes,
                nodes: vec![LayerNode {
                    name: "input".into(),
                    kind: LayerKind::Input,
                    inputs: Vec::new(),
                    out_shape: input_shape,
                    depth_weight: 0,
                }],
            },
        })
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.graph.nodes[id].out_shape
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.graph.nodes[id].out_shape[0]
    }

    fn single(&self, inputs: &[NodeId]) -> Result<&[usize]> {
        match inputs {
            [i] => Ok(self.shape(*i)),
            _ => Err(BnnError::invalid("layer takes exactly one input")),
        }
    }

    fn infer(&self, kind: &LayerKind, inputs: &[NodeId]) -> Result<Vec<usize>> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.graph.nodes.len()) {
            return Err(BnnError::invalid(format!(
                "input node {bad} does not exist"
            )));
        }
        let map3 = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match s {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(BnnError::shape(format!("expected a C×H×W map, got {s:?}"))),
            }
        };
        Ok(match kind {
            LayerKind::Input => return Err(BnnError::invalid("only the first node is an input")),
            LayerKind::Conv { geom, .. } => {
                geom.validate()?;
                let (c, h, w) = map3(self.single(inputs)?)?;
                if c != geom.in_channels {
                    return Err(BnnError::shape(format!(
                        "conv expects {} channels, input has {c}",
                        geom.in_channels
                    )));
                }
                let (oh, ow) = geom.output_hw(h, w)?;
                vec![geom.out_channels, oh, ow]
            }
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => {
                let s = self.single(inputs)?;
                if s != [*in_features] {
                    return Err(BnnError::shape(format!(
                        "dense expects [{in_features}], input is {s:?}"
                    )));
                }
                if *out_features == 0 {
                    return Err(BnnError::invalid("dense layer with zero outputs"));
                }
                vec![*out_features]
            }
            LayerKind::BatchNorm { channels } => {
                let s = self.single(inputs)?;
                if s.first() != Some(channels) {
                    return Err(BnnError::shape(format!(
                        "batch norm over {channels} channels, input {s:?}"
                    )));
                }
                s.to_vec()
            }
            LayerKind::Tanh | LayerKind::Relu => self.single(inputs)?.to_vec(),
            LayerKind::MaxPool(g) | LayerKind::AvgPool(g) => {
                let (c, h, w) = map3(self.single(inputs)?)?;
                if matches!(kind, LayerKind::AvgPool(_)) && g.padding != 0 {
                    return Err(BnnError::invalid(
                        "average pooling does not support padding",
                    ));
                }
                let (oh, ow) = g.output_hw(h, w)?;
                vec![c, oh, ow]
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = map3(self.single(inputs)?)?;
                vec![c]
            }
            LayerKind::Flatten => vec![self.single(inputs)?.iter().product()],
            LayerKind::Concat => {
                let first = self.shape(
                    *inputs
                        .first()
                        .ok_or_else(|| BnnError::invalid("empty concat"))?,
                );
                let mut c = 0;
                for &i in inputs {
                    let s = self.shape(i);
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(BnnError::shape(format!(
                            "cannot concat {first:?} with {s:?}"
                        )));
                    }
                    c += s[0];
                }
                let mut out = first.to_vec();
                out[0] = c;
                out
            }
            LayerKind::Add => {
                let [a, b] = inputs else {
                    return Err(BnnError::invalid("add takes exactly two inputs"));
                };
                if self.shape(*a) != self.shape(*b) {
                    return Err(BnnError::shape(format!(
                        "residual add of {:?} and {:?}",
                        self.shape(*a),
                        self.shape(*b)
                    )));
                }
                self.shape(*a).to_vec()
            }
        })
    }

    pub fn push(
        &mut self,
        name: &str,
        kind: LayerKind,
        inputs: &[NodeId],
        depth_weight: u32,
    ) -> Result<NodeId> {
        let out_shape = self.infer(&kind, inputs)?;
        self.graph.nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            inputs: inputs.to_vec(),
            out_shape,
            depth_weight,
        });
        Ok(self.graph.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        from: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        precision: Precision,
    ) -> Result<NodeId> {
        let geom = ConvGeometry::new(self.channels(from), out_channels, kernel, stride, padding);
        self.push(
            name,
            LayerKind::Conv {
                geom,
                bias,
                precision,
            },
            &[from],
            1,
        )
    }

    pub fn dense(
        &mut self,
        name: &str,
        from: NodeId,
        out: usize,
        bias: bool,
        precision: Precision,
    ) -> Result<NodeId> {
        let s = self.shape(from);
        if s.len() != 1 {
            return Err(BnnError::shape(format!(
                "dense needs a flat input, got {s:?}"
            )));
        }
        let kind = LayerKind::Dense {
            in_features: s[0],
            out_features: out,
            bias,
            precision,
        };
        self.push(name, kind, &[from], 1)
    }

    pub fn batchnorm(&mut self, name: &str, from: NodeId) -> Result<NodeId> {
        let channels = self.channels(from);
        self.push(name, LayerKind::BatchNorm { channels }, &[from], 0)
    }

    pub fn simple(&mut self, name: &str, kind: LayerKind, from: NodeId) -> Result<NodeId> {
        self.push(name, kind, &[from], 0)
    }

    pub fn set_depth_weight(&mut self, id: NodeId, w: u32) {
        self.graph.nodes[id].depth_weight = w;
    }

    pub fn finish(self) -> Result<ModelGraph> {
        let g = self.graph;
        let out = g.nodes.last().expect("builder always holds the input node");
        if out.out_shape != [g.num_classes] {
            return Err(BnnError::shape(format!(
                "output shape {:?} does not match {} classes",
                out.out_shape, g.num_classes
            )));
        }
        let weight_layers: Vec<&LayerNode> = g
            .nodes
            .iter()
            .filter(|n| n.kind.precision().is_some())
            .collect();
        let first_last_full =
            weight_layers
                .first()
                .zip(weight_layers.last())
                .is_some_and(|(f, l)| {
                    f.kind.precision() == Some(Precision::Full)
                        && l.kind.precision() == Some(Precision::Full)
                });
        if !first_last_full {
            return Err(BnnError::invalid(
                "first and last weight layers must be full precision",
            ));
        }
        if !matches!(out.kind, LayerKind::Dense { .. }) {
            return Err(BnnError::invalid("the classifier must be a dense layer"));
        }
        Ok(g)
    }
}

fn bin_or_full(binary: bool) -> Precision {
    if binary {
        Precision::BINARY
    } else {
        Precision::Full
    }
}

/// Binary LeNet for 1×28×28 input.
///
/// `conv 5×5/64 → tanh → pool → BN → qconv 5×5/64 → BN → pool → qdense 1000
/// → BN → tanh → dense`. The inner layers are binary when `binary` is set;
/// the full-precision variant has the same parameters.
pub fn build_lenet(binary: bool, num_classes: usize) -> Result<ModelGraph> {
    let name = if binary { "lenet-binary" } else { "lenet" };
    let mut b = GraphBuilder::new(name, vec![1, 28, 28], num_classes)?;
    let q = bin_or_full(binary);
    let pool = LayerKind::MaxPool(PoolGeometry::new(2, 2, 0));
    let x = b.conv("conv1", b.input(), 64, 5, 1, 0, true, Precision::Full)?;
    let x = b.simple("tanh1", LayerKind::Tanh, x)?;
    let x = b.simple("pool1", pool.clone(), x)?;
    let x = b.batchnorm("bn1", x)?;
    let x = b.conv("conv2", x, 64, 5, 1, 0, false, q)?;
    let x = b.batchnorm("bn2", x)?;
    let x = b.simple("pool2", pool, x)?;
    let x = b.simple("flatten", LayerKind::Flatten, x)?;
    let x = b.dense("fc1", x, 1000, false, q)?;
    let x = b.batchnorm("bn3", x)?;
    let x = b.simple("tanh3", LayerKind::Tanh, x)?;
    b.dense("fc2", x, num_classes, true, Precision::Full)?;
    b.finish()
}

/// Input stem of the ResNet and DenseNet builders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stem {
    /// 7×7 stride-2 convolution then 3×3 stride-2 max pooling.
    ImageNet,
    /// 3×3 stride-1 convolution, for CIFAR-sized inputs.
    Small,
}

impl Stem {
    pub fn for_input(input_shape: &[usize]) -> Stem {
        if input_shape.get(1).copied().unwrap_or(0) >= 128 {
            Stem::ImageNet
        } else {
            Stem::Small
        }
    }
}

pub const IMAGENET_INPUT: [usize; 3] = [3, 224, 224];
pub const CIFAR_INPUT: [usize; 3] = [3, 32, 32];

fn build_stem(b: &mut GraphBuilder, stem: Stem, filters: usize) -> Result<NodeId> {
    let x = match stem {
        Stem::ImageNet => b.conv(
            "stem_conv",
            b.input(),
            filters,
            7,
            2,
            3,
            false,
            Precision::Full,
        )?,
        Stem::Small => b.conv(
            "stem_conv",
            b.input(),
            filters,
            3,
            1,
            1,
            false,
            Precision::Full,
        )?,
    };
    let x = b.batchnorm("stem_bn", x)?;
    let x = b.simple("stem_relu", LayerKind::Relu, x)?;
    match stem {
        Stem::ImageNet => b.simple(
            "stem_pool",
            LayerKind::MaxPool(PoolGeometry::new(3, 2, 1)),
            x,
        ),
        Stem::Small => Ok(x),
    }
}

/// `BN → activation`: relu for full-precision layers; binary layers sign
/// their input themselves.
fn pre_activation(b: &mut GraphBuilder, name: &str, from: NodeId, binary: bool) -> Result<NodeId> {
    let x = b.batchnorm(&format!("{name}_bn"), from)?;
    if binary {
        Ok(x)
    } else {
        b.simple(&format!("{name}_relu"), LayerKind::Relu, x)
    }
}

/// Bottleneck width divisor of ResNet bottleneck blocks.
pub const RESNET_BOTTLENECK_REDUCTION: usize = 4;

/// Pre-activation residual block appended at `from`.
///
/// Plain: two 3×3 convolutions at full width. Bottleneck: 1×1 reduce, 3×3,
/// 1×1 expand. The shortcut is the identity when shapes match, otherwise a
/// 1×1 strided projection.
pub fn build_resnet_block(
    b: &mut GraphBuilder,
    name: &str,
    from: NodeId,
    filters: usize,
    stride: usize,
    bottleneck: bool,
    binary: bool,
) -> Result<NodeId> {
    if filters == 0 || stride == 0 {
        return Err(BnnError::invalid(
            "block filters and stride must be positive",
        ));
    }
    let q = bin_or_full(binary);
    let act = pre_activation(b, &format!("{name}_a"), from, binary)?;
    let body = if bottleneck {
        let mid = (filters / RESNET_BOTTLENECK_REDUCTION).max(1);
        let x = b.conv(&format!("{name}_conv1"), act, mid, 1, 1, 0, false, q)?;
        let x = pre_activation(b, &format!("{name}_b"), x, binary)?;
        let x = b.conv(&format!("{name}_conv2"), x, mid, 3, stride, 1, false, q)?;
        let x = pre_activation(b, &format!("{name}_c"), x, binary)?;
        b.conv(&format!("{name}_conv3"), x, filters, 1, 1, 0, false, q)?
    } else {
        let x = b.conv(
            &format!("{name}_conv1"),
            act,
            filters,
            3,
            stride,
            1,
            false,
            q,
        )?;
        let x = pre_activation(b, &format!("{name}_b"), x, binary)?;
        b.conv(&format!("{name}_conv2"), x, filters, 3, 1, 1, false, q)?
    };
    let shortcut = if b.shape(body) == b.shape(from) {
        from
    } else {
        let p = b.conv(
            &format!("{name}_proj"),
            act,
            filters,
            1,
            stride,
            0,
            false,
            q,
        )?;
        b.set_depth_weight(p, 0);
        p
    };
    b.push(&format!("{name}_add"), LayerKind::Add, &[body, shortcut], 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetSpec {
    /// Blocks per stage.
    pub units: Vec<usize>,
    /// Stem filters followed by one entry per stage.
    pub filters: Vec<usize>,
    pub bottleneck: bool,
    pub binary: bool,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

pub const RESNET_THIN: [usize; 5] = [64, 64, 128, 256, 512];
pub const RESNET_WIDE: [usize; 5] = [64, 128, 256, 512, 1024];
pub const RESNET_BOTTLENECK_FILTERS: [usize; 5] = [64, 256, 512, 1024, 2048];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResNetWidth {
    Thin,
    Wide,
}

impl ResNetSpec {
    /// Standard depth presets: 18, 34, 68 (plain) and 26, 50 (bottleneck).
    /// Defaults to ImageNet input and 1000 classes.
    pub fn preset(depth: usize, width: ResNetWidth) -> Result<Self> {
        let (units, bottleneck) = match depth {
            18 => (vec![2, 2, 2, 2], false),
            34 => (vec![3, 4, 6, 3], false),
            68 => (vec![3, 4, 23, 3], false),
            26 => (vec![2, 2, 2, 2], true),
            50 => (vec![3, 4, 6, 3], true),
            other => {
                return Err(BnnError::invalid(format!(
                    "no ResNet preset for depth {other} (choose 18, 26, 34, 50 or 68)"
                )))
            }
        };
        let filters = match (bottleneck, width) {
            (true, _) => RESNET_BOTTLENECK_FILTERS.to_vec(),
            (false, ResNetWidth::Thin) => RESNET_THIN.to_vec(),
            (false, ResNetWidth::Wide) => RESNET_WIDE.to_vec(),
        };
        Ok(ResNetSpec {
            units,
            filters,
            bottleneck,
            binary: true,
            num_classes: 1000,
            input_shape: IMAGENET_INPUT.to_vec(),
        })
    }

    pub fn depth(&self) -> usize {
        let per = if self.bottleneck { 3 } else { 2 };
        self.units.iter().sum::<usize>() * per + 2
    }
}

pub fn build_resnet(spec: &ResNetSpec) -> Result<ModelGraph> {
    if spec.units.is_empty() || spec.filters.len() != spec.units.len() + 1 {
        return Err(BnnError::invalid(
            "ResNet needs at least one stage and one filter count per stage plus the stem",
        ));
    }
    if spec.units.contains(&0) || spec.filters.contains(&0) {
        return Err(BnnError::invalid(
            "ResNet stages and filters must be positive",
        ));
    }
    let name = format!(
        "resnet{}{}",
        spec.depth(),
        if spec.binary { "-binary" } else { "" }
    );
    let mut b = GraphBuilder::new(&name, spec.input_shape.clone(), spec.num_classes)?;
    let mut x = build_stem(&mut b, Stem::for_input(&spec.input_shape), spec.filters[0])?;
    for (s, (&units, &filters)) in spec.units.iter().zip(&spec.filters[1..]).enumerate() {
        for u in 0..units {
            let stride = if s > 0 && u == 0 { 2 } else { 1 };
            x = build_resnet_block(
                &mut b,
                &format!("stage{}_unit{}", s + 1, u + 1),
                x,
                filters,
                stride,
                spec.bottleneck,
                spec.binary,
            )?;
        }
    }
    let x = b.batchnorm("final_bn", x)?;
    let x = b.simple("final_relu", LayerKind::Relu, x)?;
    let x = b.simple("global_pool", LayerKind::GlobalAvgPool, x)?;
    b.dense("fc", x, spec.num_classes, true, Precision::Full)?;
    b.finish()
}

/// Bottleneck width of DenseNet bottleneck blocks, as a multiple of `k`.
pub const DENSENET_BOTTLENECK_WIDTH: usize = 4;

/// Dense block appended at `from`: `BN → conv` emitting `k` channels,
/// concatenated with the block input.
pub fn build_densenet_block(
    b: &mut GraphBuilder,
    name: &str,
    from: NodeId,
    k: usize,
    bottleneck: bool,
    binary: bool,
) -> Result<NodeId> {
    if k == 0 {
        return Err(BnnError::invalid("growth rate must be positive"));
    }
    let q = bin_or_full(binary);
    let x = pre_activation(b, &format!("{name}_a"), from, binary)?;
    let new = if bottleneck {
        let x = b.conv(
            &format!("{name}_conv1"),
            x,
            DENSENET_BOTTLENECK_WIDTH * k,
            1,
            1,
            0,
            false,
            q,
        )?;
        let x = pre_activation(b, &format!("{name}_b"), x, binary)?;
        b.conv(&format!("{name}_conv2"), x, k, 3, 1, 1, false, q)?
    } else {
        let c = b.conv(&format!("{name}_conv"), x, k, 3, 1, 1, false, q)?;
        b.set_depth_weight(c, 2);
        c
    };
    b.push(
        &format!("{name}_concat"),
        LayerKind::Concat,
        &[from, new],
        0,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetSpec {
    /// Growth rate.
    pub k: usize,
    /// Blocks per unit.
    pub b: usize,
    /// Transition compression factor in `(0, 1]`.
    pub reduction: f64,
    pub num_classes: usize,
    pub bottleneck: bool,
    pub binary: bool,
    pub input_shape: Vec<usize>,
}

pub const DENSENET_UNITS: usize = 4;

impl DenseNetSpec {
    /// Binary plain-block DenseNet on ImageNet-shaped input with 1000 classes.
    pub fn new(k: usize, b: usize) -> Self {
        DenseNetSpec {
            k,
            b,
            reduction: 0.5,
            num_classes: 1000,
            bottleneck: false,
            binary: true,
            input_shape: IMAGENET_INPUT.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(BnnError::invalid("growth rate k must be positive"));
        }
        if self.b == 0 {
            return Err(BnnError::invalid("blocks per unit b must be positive"));
        }
        if !(self.reduction > 0.0 && self.reduction <= 1.0) {
            return Err(BnnError::invalid(format!(
                "reduction must lie in (0, 1], got {}",
                self.reduction
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> Result<usize> {
        densenet_depth(self.b)
    }
}

/// Counted depth `8·b + 5` of a DenseNet with `b` blocks per unit.
pub fn densenet_depth(b: usize) -> Result<usize> {
    if b == 0 {
        return Err(BnnError::invalid("blocks per unit must be at least 1"));
    }
    Ok(8 * b + 5)
}

pub fn build_densenet(spec: &DenseNetSpec) -> Result<ModelGraph> {
    spec.validate()?;
    let name = format!(
        "densenet{}-k{}{}",
        densenet_depth(spec.b)?,
        spec.k,
        if spec.binary { "-binary" } else { "" }
    );
    let mut b = GraphBuilder::new(&name, spec.input_shape.clone(), spec.num_classes)?;
    let q = bin_or_full(spec.binary);
    let mut x = build_stem(&mut b, Stem::for_input(&spec.input_shape), 2 * spec.k)?;
    for unit in 0..DENSENET_UNITS {
        for blk in 0..spec.b {
            x = build_densenet_block(
                &mut b,
                &format!("unit{}_block{}", unit + 1, blk + 1),
                x,
                spec.k,
                spec.bottleneck,
                spec.binary,
            )?;
        }
        if unit + 1 < DENSENET_UNITS {
            let c = b.channels(x);
            let out = ((c as f64 * spec.reduction).floor() as usize).max(1);
            let t = pre_activation(&mut b, &format!("transition{}", unit + 1), x, spec.binary)?;
            let t = b.conv(
                &format!("transition{}_conv", unit + 1),
                t,
                out,
                1,
                1,
                0,
                false,
                q,
            )?;
            x = b.simple(
                &format!("transition{}_pool", unit + 1),
                LayerKind::AvgPool(PoolGeometry::new(2, 2, 0)),
                t,
            )?;
        }
    }
    let x = b.batchnorm("final_bn", x)?;
    let x = b.simple("final_relu", LayerKind::Relu, x)?;
    let x = b.simple("global_pool", LayerKind::GlobalAvgPool, x)?;
    b.dense("fc", x, spec.num_classes, true, Precision::Full)?;
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_count(g: &ModelGraph) -> usize {
        g.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv { .. }))
            .count()
    }

    #[test]
    fn densenet_depth_examples() {
        assert_eq!(densenet_depth(1).unwrap(), 13);
        assert_eq!(densenet_depth(2).unwrap(), 21);
        assert_eq!(densenet_depth(8).unwrap(), 69);
        assert!(matches!(
            densenet_depth(0),
            Err(BnnError::InvalidArgument(_))
        ));
    }

    #[test]
    fn lenet_shape_and_precision() {
        let g = build_lenet(true, 10).unwrap();
        assert_eq!(g.nodes[g.output()].out_shape, vec![10]);
        assert_eq!(g.num_binary_layers(), 2);
        let fp = build_lenet(false, 10).unwrap();
        assert_eq!(fp.num_binary_layers(), 0);
        assert_eq!(fp.count_params(), g.count_params());
        assert!(build_lenet(true, 1).is_err());
    }

    #[test]
    fn resnet_block_conv_counts() {
        for (bottleneck, want) in [(false, 2), (true, 3)] {
            let mut b = GraphBuilder::new("blk", vec![64, 8, 8], 10).unwrap();
            let before = b.graph.nodes.len();
            let out = build_resnet_block(&mut b, "u", 0, 64, 1, bottleneck, true).unwrap();
            assert_eq!(b.shape(out), &[64, 8, 8]);
            let convs = b.graph.nodes[before..]
                .iter()
                .filter(|n| matches!(n.kind, LayerKind::Conv { .. }))
                .count();
            assert_eq!(convs, want);
        }
    }

    #[test]
    fn densenet_block_grows_by_k() {
        let mut b = GraphBuilder::new("blk", vec![16, 8, 8], 10).unwrap();
        let mut x = 0;
        for i in 0..3 {
            x = build_densenet_block(&mut b, &format!("b{i}"), x, 12, false, true).unwrap();
        }
        assert_eq!(b.channels(x), 16 + 3 * 12);
    }

    #[test]
    fn resnet18_layer_structure() {
        let g = build_resnet(&ResNetSpec::preset(18, ResNetWidth::Thin).unwrap()).unwrap();
        assert_eq!(g.counted_depth(), 18);
        // 16 block convs, 3 projections, stem
        assert_eq!(conv_count(&g), 16 + 3 + 1);
    }

    #[test]
    fn densenet_first_conv_and_depth() {
        for b in 1..=4 {
            let g = build_densenet(&DenseNetSpec::new(32, b)).unwrap();
            assert_eq!(g.counted_depth() as usize, 8 * b + 5);
        }
        let g = build_densenet(&DenseNetSpec::new(128, 2)).unwrap();
        let first = g
            .nodes
            .iter()
            .find(|n| matches!(n.kind, LayerKind::Conv { .. }))
            .unwrap();
        assert_eq!(first.out_shape[0], 256);
    }

    #[test]
    fn mismatched_add_is_rejected() {
        let mut b = GraphBuilder::new("bad", vec![3, 8, 8], 10).unwrap();
        let a = b.conv("a", 0, 4, 3, 1, 1, false, Precision::Full).unwrap();
        let c = b.conv("c", 0, 5, 3, 1, 1, false, Precision::Full).unwrap();
        assert!(matches!(
            b.push("add", LayerKind::Add, &[a, c], 0),
            Err(BnnError::Shape(_))
        ));
    }

    #[test]
    fn summary_lists_every_layer() {
        let g = build_lenet(true, 10).unwrap();
        let j = g.summary_json();
        assert_eq!(j["layers"].as_array().unwrap().len(), g.nodes.len());
        assert!(g.summary_text().contains("packed_binary"));
    }

    #[test]
    fn validate_accepts_built_graphs() {
        build_lenet(true, 10).unwrap().validate().unwrap();
        build_densenet(&DenseNetSpec::new(32, 1))
            .unwrap()
            .validate()
            .unwrap();
    }
}
