//! ReLU networks: fully connected and 3x3 same-padding convolutional layers,
//! forward evaluation with activation capture, reverse-mode gradients and the
//! input Jacobian.
//!
//! Every hidden layer realizes `f^i(x) = g(W_i f^{i-1}(x) + b_i)` and the
//! final layer is affine, `f(x) = W_n f^{n-1}(x) + b_n`. Convolution kernels
//! are stored as `out_channels x (in_channels * 9)` matrices, which is the
//! im2col form of the same affine map.

mod checkpoint;
mod conv;
mod forward;
mod jacobian;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::rng::{self, Stream};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::ConvGeometry;
pub use forward::{
    backward, batch_gradient, batch_logits, forward, softmax, softmax_xent, vjp, ActivationTrace,
    Backward, ForwardRecord, Gradients, LayerGradient,
};
pub use jacobian::{jacobian_masked_product, jacobian_reverse, output_jacobian};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("layer index {index} out of range 1..={n_layers}")]
    LayerIndex { index: usize, n_layers: usize },
    #[error("invalid scale factor {0} (must be positive and finite)")]
    ScaleFactor(f64),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Hidden-layer nonlinearity. `Identity` exists for linear control networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputShape {
    Flat(usize),
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat(n) => n,
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSpec {
    /// Fully connected layer with the given output width.
    Dense(usize),
    /// 3x3 convolution, stride 1, zero "same" padding, with the given number
    /// of output channels.
    Conv2d(usize),
}

/// Architecture description. The final `Dense(n_classes)` layer is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub hidden: Vec<LayerSpec>,
    pub n_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Concrete shape of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
}

impl LayerKind {
    pub fn input_len(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv(g) => g.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv(g) => g.output_len(),
        }
    }

    fn weight_shape(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { inputs, outputs } => (outputs, inputs),
            LayerKind::Conv(g) => (g.out_channels, g.in_channels * 9),
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv(g) => g.out_channels,
        }
    }

    fn fan_in(&self) -> usize {
        self.weight_shape().1
    }
}

impl NetworkSpec {
    /// Fully connected ReLU network with the given hidden widths.
    pub fn dense(inputs: usize, hidden: &[usize], n_classes: usize) -> Self {
        Self {
            input: InputShape::Flat(inputs),
            hidden: hidden.iter().map(|&w| LayerSpec::Dense(w)).collect(),
            n_classes,
            activation: Activation::Relu,
        }
    }

    /// `depth` same-padding conv layers of `channels` channels each, flattened
    /// into the final dense layer.
    pub fn conv(
        height: usize,
        width: usize,
        channels: usize,
        depth: usize,
        hidden_channels: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            input: InputShape::Image {
                height,
                width,
                channels,
            },
            hidden: vec![LayerSpec::Conv2d(hidden_channels); depth],
            n_classes,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(NnError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.n_classes == 0 || self.input.is_empty() {
            return Err(NnError::InvalidSpec("input size and n_classes must be positive".into()));
        }
        if let InputShape::Image {
            height,
            width,
            channels,
        } = self.input
        {
            if height == 0 || width == 0 || channels == 0 {
                return Err(NnError::InvalidSpec("image dimensions must be positive".into()));
            }
        }
        let mut seen_dense = false;
        for layer in &self.hidden {
            match *layer {
                LayerSpec::Dense(0) | LayerSpec::Conv2d(0) => {
                    return Err(NnError::InvalidSpec("layer widths must be positive".into()))
                }
                LayerSpec::Dense(_) => seen_dense = true,
                LayerSpec::Conv2d(_) => {
                    if seen_dense {
                        return Err(NnError::InvalidSpec(
                            "conv layers must precede dense layers".into(),
                        ));
                    }
                    if !matches!(self.input, InputShape::Image { .. }) {
                        return Err(NnError::InvalidSpec("conv layers need an image input".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Concrete layer shapes, final classifier layer included.
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut kinds = Vec::with_capacity(self.hidden.len() + 1);
        let mut flat = self.input.len();
        let mut image = match self.input {
            InputShape::Image {
                height,
                width,
                channels,
            } => Some((height, width, channels)),
            InputShape::Flat(_) => None,
        };
        for layer in &self.hidden {
            match *layer {
                LayerSpec::Dense(w) => {
                    kinds.push(LayerKind::Dense {
                        inputs: flat,
                        outputs: w,
                    });
                    flat = w;
                    image = None;
                }
                LayerSpec::Conv2d(c) => {
                    let (h, w, in_c) = image.expect("validated: conv follows image input");
                    let g = ConvGeometry {
                        in_channels: in_c,
                        out_channels: c,
                        height: h,
                        width: w,
                    };
                    kinds.push(LayerKind::Conv(g));
                    flat = g.output_len();
                    image = Some((h, w, c));
                }
            }
        }
        kinds.push(LayerKind::Dense {
            inputs: flat,
            outputs: self.n_classes,
        });
        kinds
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_kinds()
            .iter()
            .map(|k| {
                let (r, c) = k.weight_shape();
                r * c + k.bias_len()
            })
            .sum()
    }

    pub fn is_dense_only(&self) -> bool {
        self.hidden.iter().all(|l| matches!(l, LayerSpec::Dense(_)))
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense(w) => write!(f, "dense({w})"),
            LayerSpec::Conv2d(c) => write!(f, "conv({c})"),
        }
    }
}

/// Short architecture label used in experiment tables, e.g. `dense:2x100` or
/// `conv:3x12`. Only uniform-width architectures are described this way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arch {
    Dense { depth: usize, width: usize },
    Conv { depth: usize, channels: usize },
}

impl Arch {
    pub fn to_spec(self, input: InputShape, n_classes: usize) -> Result<NetworkSpec> {
        let spec = match self {
            Arch::Dense { depth, width } => NetworkSpec {
                input,
                hidden: vec![LayerSpec::Dense(width); depth],
                n_classes,
                activation: Activation::Relu,
            },
            Arch::Conv { depth, channels } => NetworkSpec {
                input,
                hidden: vec![LayerSpec::Conv2d(channels); depth],
                n_classes,
                activation: Activation::Relu,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Arch::Conv { .. })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Dense { depth, width } => write!(f, "dense:{depth}x{width}"),
            Arch::Conv { depth, channels } => write!(f, "conv:{depth}x{channels}"),
        }
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("invalid architecture '{s}' (expected dense:DxW or conv:DxC)");
        let (kind, dims) = s.trim().split_once(':').ok_or_else(bad)?;
        let (a, b) = dims.split_once('x').ok_or_else(bad)?;
        let depth: usize = a.parse().map_err(|_| bad())?;
        let size: usize = b.parse().map_err(|_| bad())?;
        if depth == 0 || size == 0 {
            return Err(bad());
        }
        match kind {
            "dense" => Ok(Arch::Dense { depth, width: size }),
            "conv" => Ok(Arch::Conv {
                depth,
                channels: size,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Arch {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Arch> for String {
    fn from(a: Arch) -> String {
        a.to_string()
    }
}

/// One affine layer and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(kind: LayerKind) -> Self {
        let (r, c) = kind.weight_shape();
        Self {
            kind,
            weight: Matrix::zeros(r, c),
            bias: vec![0.0; kind.bias_len()],
        }
    }

    /// `W a + b` for a single input.
    pub fn affine(&self, input: &[f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense { .. } => {
                let mut z = self.weight.matvec(input).expect("layer input length");
                for (zi, bi) in z.iter_mut().zip(&self.bias) {
                    *zi += bi;
                }
                z
            }
            LayerKind::Conv(g) => conv::forward_direct(&g, self.weight.as_slice(), &self.bias, input),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// A realized network: spec, the seed it was initialized from, and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    seed: u64,
    layers: Vec<Layer>,
}

impl Network {
    /// Initialize with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and zero
    /// biases, deterministically from `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed, Stream::Init);
        let layers = spec
            .layer_kinds()
            .into_iter()
            .map(|kind| {
                let mut layer = Layer::zeros(kind);
                let bound = (1.0 / kind.fan_in() as f64).sqrt();
                for w in layer.weight.as_mut_slice() {
                    *w = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            seed,
            layers,
        })
    }

    /// Build a network from explicit parameters.
    pub fn from_layers(spec: NetworkSpec, seed: u64, params: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        spec.validate()?;
        let kinds = spec.layer_kinds();
        if kinds.len() != params.len() {
            return Err(NnError::Shape(format!(
                "spec has {} layers, got parameters for {}",
                kinds.len(),
                params.len()
            )));
        }
        let mut layers = Vec::with_capacity(kinds.len());
        for (i, (kind, (weight, bias))) in kinds.into_iter().zip(params).enumerate() {
            if weight.shape() != kind.weight_shape() || bias.len() != kind.bias_len() {
                return Err(NnError::Shape(format!(
                    "layer {}: expected weight {:?} and bias {}, got {:?} and {}",
                    i + 1,
                    kind.weight_shape(),
                    kind.bias_len(),
                    weight.shape(),
                    bias.len()
                )));
            }
            if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
                return Err(NnError::Shape(format!("layer {}: non-finite parameters", i + 1)));
            }
            layers.push(Layer { kind, weight, bias });
        }
        Ok(Self { spec, seed, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(NnError::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Network computing exactly `c * f`: scales `W_i` and `b_i` at layer
    /// `layer` (1-based) and the biases of every later layer.
    pub fn scale_at_layer(&self, layer: usize, c: f64) -> Result<Network> {
        let n_layers = self.layers.len();
        if layer == 0 || layer > n_layers {
            return Err(NnError::LayerIndex {
                index: layer,
                n_layers,
            });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(NnError::ScaleFactor(c));
        }
        let mut out = self.clone();
        let first = &mut out.layers[layer - 1];
        first.weight = first.weight.scaled(c);
        for l in &mut out.layers[layer - 1..] {
            l.bias.iter_mut().for_each(|b| *b *= c);
        }
        Ok(out)
    }
}

pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    Network::init(spec, seed)
}

pub fn scale_at_layer(net: &Network, layer: usize, c: f64) -> Result<Network> {
    net.scale_at_layer(layer, c)
}
