//! Declarative model graphs for the compact plain network and its
//! three-branch context variant.
//!
//! A graph is one ordered layer list. Layers before the join (`Flatten` or
//! `Concat`) form the convolutional trunk, which runs once per branch; the
//! layers after it form the cascade head `Feat (dense → softmax) → Pred`.

mod forward;
mod serialize;

pub use forward::{Prediction, Recorded};
pub use serialize::{deserialize, serialize};

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::BinGrid;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Tensor};

pub const INPUT_SIZE: usize = 64;
pub const TRUNK_CHANNELS: usize = 32;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const SE_SQUEEZE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatMode {
    /// Flatten each `4×4×32` bottleneck and concatenate.
    Flatten,
    /// Average each bottleneck over space to 32 values, then concatenate.
    Pooled,
}

impl ConcatMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConcatMode::Flatten => "flatten",
            ConcatMode::Pooled => "pooled",
        }
    }
}

impl std::str::FromStr for ConcatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten" | "flatten-concat" => Ok(ConcatMode::Flatten),
            "pooled" | "pooled-concat" => Ok(ConcatMode::Pooled),
            _ => Err(Error::invalid(format!(
                "unknown concat mode {s:?} (expected flatten or pooled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        window: usize,
        stride: usize,
    },
    /// Squeeze-and-excitation gate; both dense layers are bias-free.
    Se {
        channels: usize,
        squeeze: usize,
    },
    /// Identity shortcut: adds the output of layer `from`.
    Residual {
        from: String,
    },
    Flatten,
    Concat {
        mode: ConcatMode,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    /// Stored arrays of this layer, in serialization order.
    pub fn slots(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => vec![
                ("kernel", vec![kernel, kernel, in_channels, out_channels]),
                ("bias", vec![out_channels]),
            ],
            LayerKind::BatchNorm { channels } => vec![
                ("gamma", vec![channels]),
                ("beta", vec![channels]),
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
            ],
            LayerKind::Se { channels, squeeze } => vec![
                ("squeeze", vec![channels, channels / squeeze]),
                ("excite", vec![channels / squeeze, channels]),
            ],
            LayerKind::Dense { inputs, outputs } => {
                vec![("weight", vec![inputs, outputs]), ("bias", vec![outputs])]
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.name)?;
        match &self.kind {
            LayerKind::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
            } => write!(
                f,
                "conv k={kernel} in={in_channels} out={out_channels} stride={stride}"
            ),
            LayerKind::BatchNorm { channels } => write!(f, "batchnorm c={channels}"),
            LayerKind::Relu => write!(f, "relu"),
            LayerKind::AvgPool { window, stride } => {
                write!(f, "avgpool window={window} stride={stride}")
            }
            LayerKind::Se { channels, squeeze } => write!(f, "se c={channels} squeeze={squeeze}"),
            LayerKind::Residual { from } => write!(f, "residual from={from}"),
            LayerKind::Flatten => write!(f, "flatten"),
            LayerKind::Concat { mode } => write!(f, "concat mode={}", mode.as_str()),
            LayerKind::Dropout { rate } => write!(f, "dropout rate={rate}"),
            LayerKind::Dense { inputs, outputs } => write!(f, "dense in={inputs} out={outputs}"),
            LayerKind::Softmax => write!(f, "softmax"),
        }
    }
}

/// Options for [`build`]. The plain model is `branches = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub branches: usize,
    pub concat: ConcatMode,
    pub use_se: bool,
    pub use_residual: bool,
    pub shared_weights: bool,
    pub dropout: f64,
    pub n_bins: usize,
}

impl Architecture {
    pub fn plain() -> Self {
        Architecture {
            branches: 1,
            concat: ConcatMode::Flatten,
            use_se: false,
            use_residual: false,
            shared_weights: true,
            dropout: 0.0,
            n_bins: BinGrid::default_training().n_bins(),
        }
    }

    pub fn full() -> Self {
        Architecture {
            branches: 3,
            ..Self::plain()
        }
    }

    pub fn is_plain(&self) -> bool {
        self.branches == 1 && self.concat == ConcatMode::Flatten
    }
}

/// Layer graph plus its parameter store and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    branches: usize,
    shared_weights: bool,
    input_shape: [usize; 3],
    bn_momentum: f64,
    bn_epsilon: f64,
    params: BTreeMap<String, Tensor>,
    stats: BTreeMap<String, BatchNormStats>,
}

/// Plain model: five convolutions and the two-layer cascade head.
pub fn build_plain(use_se: bool, use_residual: bool) -> ModelGraph {
    build(&Architecture {
        use_se,
        use_residual,
        ..Architecture::plain()
    })
    .expect("plain architecture is valid")
}

/// Context model: shared trunk over `branches` crops, joined per `concat`.
pub fn build_full(branches: usize, concat: ConcatMode, use_se: bool) -> Result<ModelGraph> {
    build(&Architecture {
        branches,
        concat,
        use_se,
        ..Architecture::full()
    })
}

fn trunk_layers(use_se: bool, use_residual: bool) -> Vec<LayerSpec> {
    let c = TRUNK_CHANNELS;
    let conv = |i: usize, kernel: usize, in_channels: usize| {
        LayerSpec::new(
            format!("Conv{i}"),
            LayerKind::Conv {
                kernel,
                in_channels,
                out_channels: c,
                stride: 1,
            },
        )
    };
    let se = |i: usize| {
        LayerSpec::new(
            format!("SE{i}"),
            LayerKind::Se {
                channels: c,
                squeeze: SE_SQUEEZE,
            },
        )
    };
    let mut layers = Vec::new();
    for i in 1..=4 {
        layers.push(conv(i, 3, if i == 1 { 3 } else { c }));
        layers.push(LayerSpec::new(
            format!("BN{i}"),
            LayerKind::BatchNorm { channels: c },
        ));
        layers.push(LayerSpec::new(format!("ReLU{i}"), LayerKind::Relu));
        if i < 4 {
            layers.push(LayerSpec::new(
                format!("Pool{i}"),
                LayerKind::AvgPool { window: 2, stride: 2 },
            ));
        }
        if use_se {
            layers.push(se(i));
        }
    }
    let before_conv5 = layers.last().map(|l| l.name.clone()).unwrap_or_default();
    layers.push(conv(5, 1, c));
    if use_residual {
        // Conv2–Conv4 are valid 3×3 convolutions that shrink the map, so the
        // 1×1 Conv5 is the only block whose input and output shapes agree.
        layers.push(LayerSpec::new("Res5", LayerKind::Residual { from: before_conv5 }));
    }
    layers
}

pub fn build(arch: &Architecture) -> Result<ModelGraph> {
    if arch.branches == 0 {
        return Err(Error::invalid("a model needs at least one branch"));
    }
    if !(0.0..1.0).contains(&arch.dropout) {
        return Err(Error::invalid(format!(
            "dropout rate must be in [0, 1), got {}",
            arch.dropout
        )));
    }
    if arch.n_bins < 2 {
        return Err(Error::invalid("the distribution head needs at least two bins"));
    }
    let mut layers = trunk_layers(arch.use_se, arch.use_residual);
    let (join, width) = if arch.is_plain() {
        (
            LayerSpec::new("Flatten", LayerKind::Flatten),
            4 * 4 * TRUNK_CHANNELS,
        )
    } else {
        let per_branch = match arch.concat {
            ConcatMode::Flatten => 4 * 4 * TRUNK_CHANNELS,
            ConcatMode::Pooled => TRUNK_CHANNELS,
        };
        (
            LayerSpec::new("Concat", LayerKind::Concat { mode: arch.concat }),
            per_branch * arch.branches,
        )
    };
    layers.push(join);
    layers.push(LayerSpec::new(
        "Dropout",
        LayerKind::Dropout { rate: arch.dropout },
    ));
    layers.push(LayerSpec::new(
        "Feat",
        LayerKind::Dense {
            inputs: width,
            outputs: arch.n_bins,
        },
    ));
    layers.push(LayerSpec::new("FeatSoftmax", LayerKind::Softmax));
    layers.push(LayerSpec::new(
        "Pred",
        LayerKind::Dense {
            inputs: arch.n_bins,
            outputs: 1,
        },
    ));
    let mut graph = ModelGraph::from_layers(
        layers,
        arch.branches,
        arch.shared_weights,
        [INPUT_SIZE, INPUT_SIZE, 3],
        DEFAULT_BN_MOMENTUM,
        DEFAULT_BN_EPSILON,
    )?;
    let bins: Vec<f64> = if arch.n_bins == BinGrid::default_training().n_bins() {
        BinGrid::default_training().bins().to_vec()
    } else {
        (0..arch.n_bins).map(|i| 10.0 * i as f64).collect()
    };
    graph.initialize(0, &bins)?;
    Ok(graph)
}

/// Output shape of one layer (per sample, no batch axis).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl ModelGraph {
    /// Assembles and validates a graph with zeroed parameters.
    pub fn from_layers(
        layers: Vec<LayerSpec>,
        branches: usize,
        shared_weights: bool,
        input_shape: [usize; 3],
        bn_momentum: f64,
        bn_epsilon: f64,
    ) -> Result<Self> {
        if branches == 0 {
            return Err(Error::invalid("a model needs at least one branch"));
        }
        if bn_epsilon <= 0.0 || !(0.0..=1.0).contains(&bn_momentum) {
            return Err(Error::invalid(format!(
                "batch-norm momentum {bn_momentum} / epsilon {bn_epsilon} out of range"
            )));
        }
        let mut graph = ModelGraph {
            layers,
            branches,
            shared_weights,
            input_shape,
            bn_momentum,
            bn_epsilon,
            params: BTreeMap::new(),
            stats: BTreeMap::new(),
        };
        graph.validate()?;
        let slots: Vec<(String, LayerKind, Vec<usize>)> = graph
            .slot_list()
            .into_iter()
            .map(|(k, l, s)| (k, l.kind.clone(), s))
            .collect();
        for (key, kind, shape) in slots {
            match (&kind, key.rsplit('.').next()) {
                (LayerKind::BatchNorm { channels }, Some("running_mean")) => {
                    graph.stats.insert(
                        key.trim_end_matches(".running_mean").to_string(),
                        BatchNormStats::new(*channels),
                    );
                }
                (LayerKind::BatchNorm { .. }, Some("running_var")) => {}
                _ => {
                    graph.params.insert(key, Tensor::zeros(shape)?.requiring_grad());
                }
            }
        }
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if l.name.is_empty() || l.name.contains(char::is_whitespace) || l.name.contains(['/', '.']) {
                return Err(Error::invalid(format!("invalid layer name {:?}", l.name)));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name {:?}", l.name)));
            }
            match &l.kind {
                LayerKind::Se { channels, squeeze } => {
                    if *squeeze == 0 || channels % squeeze != 0 {
                        return Err(Error::invalid(format!(
                            "{}: squeeze factor {squeeze} does not divide {channels} channels",
                            l.name
                        )));
                    }
                }
                LayerKind::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(Error::invalid(format!("{}: dropout rate {rate}", l.name)));
                }
                LayerKind::Conv { kernel, stride, .. } if *kernel == 0 || *stride == 0 => {
                    return Err(Error::invalid(format!("{}: zero kernel or stride", l.name)));
                }
                _ => {}
            }
        }
        let joins: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Flatten | LayerKind::Concat { .. }))
            .map(|(i, _)| i)
            .collect();
        if joins.len() != 1 {
            return Err(Error::invalid(
                "graph needs exactly one Flatten or Concat join layer",
            ));
        }
        if self.branches > 1 && matches!(self.layers[joins[0]].kind, LayerKind::Flatten) {
            return Err(Error::invalid("multi-branch graphs must join with Concat"));
        }
        let head: Vec<&LayerKind> = self.layers[joins[0] + 1..]
            .iter()
            .map(|l| &l.kind)
            .filter(|k| !matches!(k, LayerKind::Dropout { .. }))
            .collect();
        let head_ok = matches!(
            head.as_slice(),
            [LayerKind::Dense { outputs: n, .. }, LayerKind::Softmax, LayerKind::Dense { inputs, outputs: 1 }]
                if n == inputs
        );
        if !head_ok {
            return Err(Error::invalid(
                "head must be [Dropout] → Dense → Softmax → Dense(→1)",
            ));
        }
        self.shape_trace().map(|_| ())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn shared_weights(&self) -> bool {
        self.shared_weights
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Copy of the graph for a different input size; fails if shapes no longer propagate.
    pub fn with_input_shape(&self, input_shape: [usize; 3]) -> Result<ModelGraph> {
        let mut g = self.clone();
        g.input_shape = input_shape;
        g.shape_trace()?;
        Ok(g)
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    pub fn bn_epsilon(&self) -> f64 {
        self.bn_epsilon
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("batch-norm momentum {momentum}")));
        }
        self.bn_momentum = momentum;
        Ok(())
    }

    pub fn concat_mode(&self) -> Option<ConcatMode> {
        self.layers.iter().find_map(|l| match l.kind {
            LayerKind::Concat { mode } => Some(mode),
            _ => None,
        })
    }

    pub fn n_bins(&self) -> usize {
        match self.layers[self.feat_index()].kind {
            LayerKind::Dense { outputs, .. } => outputs,
            _ => unreachable!("validated head"),
        }
    }

    pub(crate) fn join_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Flatten | LayerKind::Concat { .. }))
            .expect("validated join")
    }

    pub(crate) fn feat_index(&self) -> usize {
        let j = self.join_index();
        j + 1
            + self.layers[j + 1..]
                .iter()
                .position(|l| matches!(l.kind, LayerKind::Dense { .. }))
                .expect("validated head")
    }

    pub fn feat_layer(&self) -> &LayerSpec {
        &self.layers[self.feat_index()]
    }

    pub fn pred_layer(&self) -> &LayerSpec {
        self.layers.last().expect("validated head")
    }

    pub fn trunk(&self) -> &[LayerSpec] {
        &self.layers[..self.join_index()]
    }

    pub fn head(&self) -> &[LayerSpec] {
        &self.layers[self.join_index()..]
    }

    /// Number of distinct trunk parameter copies (1 when shared).
    pub fn trunk_copies(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.branches
        }
    }

    /// Store key of a slot. `copy` is the trunk copy for unshared trunks, `None` for head layers.
    pub(crate) fn key(&self, copy: Option<usize>, layer: &str, slot: &str) -> String {
        match copy {
            Some(b) if !self.shared_weights => format!("b{b}/{layer}.{slot}"),
            _ => format!("{layer}.{slot}"),
        }
    }

    /// Every stored array in declaration order: trunk (once per copy), then head.
    pub(crate) fn slot_list(&self) -> Vec<(String, &LayerSpec, Vec<usize>)> {
        let mut out = Vec::new();
        for copy in 0..self.trunk_copies() {
            for layer in self.trunk() {
                for (slot, shape) in layer.slots() {
                    out.push((self.key(Some(copy), &layer.name, slot), layer, shape));
                }
            }
        }
        for layer in self.head() {
            for (slot, shape) in layer.slots() {
                out.push((self.key(None, &layer.name, slot), layer, shape));
            }
        }
        out
    }

    /// Static per-sample shapes of the trunk (one branch) and head.
    pub fn shape_trace(&self) -> Result<Vec<LayerShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<usize> = self.input_shape.to_vec();
        let mut by_name: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for layer in &self.layers {
            let input = cur.clone();
            let err = |msg: String| Error::shape(format!("{}: {msg} (input {input:?})", layer.name));
            cur = match &layer.kind {
                LayerKind::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                } => match *input.as_slice() {
                    [h, w, c] if c == *in_channels && h >= *kernel && w >= *kernel => vec![
                        (h - kernel) / stride + 1,
                        (w - kernel) / stride + 1,
                        *out_channels,
                    ],
                    _ => return Err(err("incompatible convolution".into())),
                },
                LayerKind::BatchNorm { channels } | LayerKind::Se { channels, .. } => {
                    if input.last() != Some(channels) || input.len() != 3 {
                        return Err(err(format!("expected {channels} channels")));
                    }
                    input.clone()
                }
                LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::Softmax => input.clone(),
                LayerKind::AvgPool { window, stride } => match *input.as_slice() {
                    [h, w, c] if h >= *window && w >= *window => {
                        vec![(h - window) / stride + 1, (w - window) / stride + 1, c]
                    }
                    _ => return Err(err("pool window too large".into())),
                },
                LayerKind::Residual { from } => {
                    let other = by_name
                        .get(from.as_str())
                        .ok_or_else(|| err(format!("unknown shortcut source {from:?}")))?;
                    if *other != input {
                        return Err(err(format!("shortcut shape {other:?} differs")));
                    }
                    input.clone()
                }
                LayerKind::Flatten => vec![input.iter().product()],
                LayerKind::Concat { mode } => match (mode, input.as_slice()) {
                    (ConcatMode::Flatten, _) => {
                        vec![input.iter().product::<usize>() * self.branches]
                    }
                    (ConcatMode::Pooled, [_, _, c]) => vec![c * self.branches],
                    _ => return Err(err("pooled concat needs an image bottleneck".into())),
                },
                LayerKind::Dense { inputs, outputs } => {
                    if input != [*inputs] {
                        return Err(err(format!("dense expects {inputs} inputs")));
                    }
                    vec![*outputs]
                }
            };
            by_name.insert(layer.name.as_str(), cur.clone());
            shapes.push(LayerShape {
                name: layer.name.clone(),
                input,
                output: cur.clone(),
            });
        }
        Ok(shapes)
    }

    pub fn param(&self, key: &str) -> Option<&Tensor> {
        self.params.get(key)
    }

    pub fn param_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.params.get_mut(key)
    }

    /// Trainable arrays keyed by `layer.slot` (`bN/layer.slot` for unshared trunks).
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn bn_stats(&self, key: &str) -> Option<&BatchNormStats> {
        self.stats.get(key)
    }

    pub fn bn_stats_mut(&mut self, key: &str) -> Option<&mut BatchNormStats> {
        self.stats.get_mut(key)
    }

    /// Count of every stored number: trainable parameters plus running statistics.
    pub fn stored_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum::<usize>()
            + self
                .stats
                .values()
                .map(|s| s.mean.len() + s.var.len())
                .sum::<usize>()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Kaiming-uniform fan-in init for convolution and dense weights, zero
    /// biases, unit BN scale, and a `Pred` layer that starts at the bin values.
    /// Values are rounded to `f32` so a fresh model round-trips through a weight file exactly.
    pub fn initialize(&mut self, seed: u64, bin_values: &[f64]) -> Result<()> {
        if bin_values.len() != self.n_bins() {
            return Err(Error::shape(format!(
                "{} bin values for a {}-bin head",
                bin_values.len(),
                self.n_bins()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = self.pred_layer().name.clone();
        let slots: Vec<(String, String, Vec<usize>)> = self
            .slot_list()
            .into_iter()
            .map(|(k, l, s)| (k, l.name.clone(), s))
            .collect();
        for (key, layer, shape) in slots {
            let slot = key.rsplit('.').next().unwrap_or_default().to_string();
            if let Some(stats) = key
                .strip_suffix(".running_mean")
                .and_then(|k| self.stats.get_mut(k))
            {
                *stats = BatchNormStats::new(stats.mean.len());
                continue;
            }
            let Some(p) = self.params.get_mut(&key) else {
                continue;
            };
            match slot.as_str() {
                "bias" | "beta" => p.data_mut().fill(0.0),
                "gamma" => p.data_mut().fill(1.0),
                "weight" if layer == pred => p.data_mut().copy_from_slice(bin_values),
                _ => {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for v in p.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
            p.round_to_f32();
            p.zero_grad();
        }
        Ok(())
    }

    /// Rounds every stored value to `f32`, the weight-file precision.
    pub fn round_to_storage_precision(&mut self) {
        self.params.values_mut().for_each(Tensor::round_to_f32);
        for s in self.stats.values_mut() {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Sets the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        for l in &mut self.layers {
            if let LayerKind::Dropout { rate: r } = &mut l.kind {
                *r = rate;
            }
        }
        Ok(())
    }

    /// Text form of the graph: a header line, then one layer per line.
    pub fn describe(&self) -> String {
        let [h, w, c] = self.input_shape;
        let mut s = format!(
            "graph branches={} shared={} input={h}x{w}x{c} bn_momentum={} bn_epsilon={}\n",
            self.branches,
            u8::from(self.shared_weights),
            self.bn_momentum,
            self.bn_epsilon
        );
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }
}
