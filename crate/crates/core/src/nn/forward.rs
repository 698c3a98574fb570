//! Forward evaluation, softmax cross-entropy and reverse-mode gradients.
//!
//! Two paths exist on purpose: per-sample code with plain loops, used for
//! slope/Jacobian work and as the gradient reference, and a batched gemm
//! path used by the training loop.

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeometry};
use super::{Activation, LayerKind, Network, NnError, Result};
use crate::linalg::{gemm, Matrix, Trans};

/// Per hidden layer, which units have a nonzero derivative. For ReLU this is
/// `pre_activation > 0` (so the derivative at exactly 0 is taken as 0); for
/// identity layers every unit is on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub masks: Vec<Vec<bool>>,
}

impl ActivationTrace {
    pub fn active_count(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub logits: Vec<f64>,
    pub trace: ActivationTrace,
    /// Hidden-layer pre-activations `W_i f^{i-1}(x) + b_i`.
    pub pre_activations: Vec<Vec<f64>>,
    /// Hidden-layer outputs `f^i(x)`.
    pub post_activations: Vec<Vec<f64>>,
}

impl ForwardRecord {
    /// Distance of the closest ReLU pre-activation to its kink, `inf` when
    /// there are no ReLU units.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pre_activations
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn activate(act: Activation, z: f64) -> (f64, bool) {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                (z, true)
            } else {
                (0.0, false)
            }
        }
        Activation::Identity => (z, true),
    }
}

fn check_input(net: &Network, x: &[f64]) -> Result<()> {
    if x.len() != net.input_len() {
        return Err(NnError::Shape(format!(
            "network expects input of length {}, got {}",
            net.input_len(),
            x.len()
        )));
    }
    Ok(())
}

pub fn forward(net: &Network, x: &[f64]) -> Result<ForwardRecord> {
    check_input(net, x)?;
    let act = net.spec().activation;
    let layers = net.layers();
    let n_hidden = layers.len() - 1;
    let mut pre_activations = Vec::with_capacity(n_hidden);
    let mut post_activations = Vec::with_capacity(n_hidden);
    let mut masks = Vec::with_capacity(n_hidden);

    let mut current: Vec<f64> = x.to_vec();
    for layer in &layers[..n_hidden] {
        let z = layer.affine(&current);
        let mut a = Vec::with_capacity(z.len());
        let mut m = Vec::with_capacity(z.len());
        for &zi in &z {
            let (ai, mi) = activate(act, zi);
            a.push(ai);
            m.push(mi);
        }
        pre_activations.push(z);
        masks.push(m);
        current = a.clone();
        post_activations.push(a);
    }
    let logits = layers[n_hidden].affine(&current);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("logits".into()));
    }
    Ok(ForwardRecord {
        logits,
        trace: ActivationTrace { masks },
        pre_activations,
        post_activations,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy `-log softmax(logits)[label]` and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(NnError::Label {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = max + sum.ln();
    let loss = log_sum - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Parameter gradient of one layer, laid out like the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weight: vec![0.0; l.weight.as_slice().len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= c);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Gradients,
    pub input_grad: Vec<f64>,
    pub loss: f64,
}

/// Pulls a logit cotangent back through the network recorded in `record`.
///
/// Returns the input cotangent and, when `param_grads` is given, accumulates
/// parameter gradients into it.
pub fn vjp(
    net: &Network,
    x: &[f64],
    record: &ForwardRecord,
    cotangent: &[f64],
    mut param_grads: Option<&mut Gradients>,
) -> Result<Vec<f64>> {
    check_input(net, x)?;
    if cotangent.len() != net.n_classes() {
        return Err(NnError::Shape(format!(
            "cotangent of length {} for {} classes",
            cotangent.len(),
            net.n_classes()
        )));
    }
    let layers = net.layers();
    let mut delta = cotangent.to_vec();
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let input: &[f64] = if li == 0 { x } else { &record.post_activations[li - 1] };
        if let Some(g) = param_grads.as_deref_mut() {
            let lg = &mut g.layers[li];
            match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    for o in 0..outputs {
                        let d = delta[o];
                        lg.bias[o] += d;
                        if d != 0.0 {
                            let row = &mut lg.weight[o * inputs..(o + 1) * inputs];
                            row.iter_mut().zip(input).for_each(|(w, a)| *w += d * a);
                        }
                    }
                }
                LayerKind::Conv(geom) => {
                    conv::param_grad_direct(&geom, input, &delta, &mut lg.weight, &mut lg.bias);
                }
            }
        }
        let mut back = match layer.kind {
            LayerKind::Dense { inputs, outputs } => {
                let w = layer.weight.as_slice();
                let mut back = vec![0.0; inputs];
                for o in 0..outputs {
                    let d = delta[o];
                    if d != 0.0 {
                        back.iter_mut()
                            .zip(&w[o * inputs..(o + 1) * inputs])
                            .for_each(|(b, wv)| *b += d * wv);
                    }
                }
                back
            }
            LayerKind::Conv(geom) => conv::input_grad_direct(&geom, layer.weight.as_slice(), &delta),
        };
        if li > 0 {
            for (b, &m) in back.iter_mut().zip(&record.trace.masks[li - 1]) {
                if !m {
                    *b = 0.0;
                }
            }
        }
        delta = back;
    }
    Ok(delta)
}

/// Exact gradients of `softmax_xent(f(x), label)` with respect to every
/// parameter and to the input.
pub fn backward(net: &Network, x: &[f64], label: usize) -> Result<Backward> {
    let record = forward(net, x)?;
    let (loss, dlogits) = softmax_xent(&record.logits, label)?;
    let mut grads = Gradients::zeros_like(net);
    let input_grad = vjp(net, x, &record, &dlogits, Some(&mut grads))?;
    Ok(Backward {
        grads,
        input_grad,
        loss,
    })
}

/// Batched affine map of one layer: rows of `input` are samples.
fn layer_affine_batch(layer: &super::Layer, input: &[f64], batch: usize) -> Vec<f64> {
    let out_len = layer.kind.output_len();
    let mut z = vec![0.0; batch * out_len];
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            for row in z.chunks_exact_mut(outputs) {
                row.copy_from_slice(&layer.bias);
            }
            gemm(
                batch,
                inputs,
                outputs,
                1.0,
                input,
                Trans::No,
                layer.weight.as_slice(),
                Trans::Yes,
                1.0,
                &mut z,
            );
        }
        LayerKind::Conv(geom) => {
            let in_len = geom.input_len();
            let mut cols = vec![0.0; geom.in_channels * 9 * geom.height * geom.width];
            for (s, out) in z.chunks_exact_mut(out_len).enumerate() {
                conv::forward_gemm(
                    &geom,
                    layer.weight.as_slice(),
                    &layer.bias,
                    &input[s * in_len..(s + 1) * in_len],
                    &mut cols,
                    out,
                );
            }
        }
    }
    z
}

/// Logits for every row of `xs` (one sample per row).
pub fn batch_logits(net: &Network, xs: &Matrix) -> Result<Matrix> {
    if xs.cols() != net.input_len() {
        return Err(NnError::Shape(format!(
            "batch rows have length {}, network expects {}",
            xs.cols(),
            net.input_len()
        )));
    }
    let batch = xs.rows();
    let act = net.spec().activation;
    let layers = net.layers();
    let mut current = xs.as_slice().to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let mut z = layer_affine_batch(layer, &current, batch);
        if li + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = activate(act, *v).0);
        }
        current = z;
    }
    Ok(Matrix::new(batch, net.n_classes(), current)?)
}

/// Mean softmax cross-entropy over a batch and its exact parameter gradient,
/// computed with batched gemm.
pub fn batch_gradient(net: &Network, xs: &Matrix, labels: &[usize]) -> Result<(Gradients, f64)> {
    let batch = xs.rows();
    if labels.len() != batch {
        return Err(NnError::Shape(format!("{} labels for {batch} samples", labels.len())));
    }
    if xs.cols() != net.input_len() {
        return Err(NnError::Shape(format!(
            "batch rows have length {}, network expects {}",
            xs.cols(),
            net.input_len()
        )));
    }
    let act = net.spec().activation;
    let layers = net.layers();
    let n = layers.len();

    // activations[0] is the input; activations[i] is the output of layer i.
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(n - 1);
    activations.push(xs.as_slice().to_vec());
    let mut logits = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        let z = layer_affine_batch(layer, &activations[li], batch);
        if li + 1 < n {
            let mut a = Vec::with_capacity(z.len());
            let mut m = Vec::with_capacity(z.len());
            for zi in z {
                let (ai, mi) = activate(act, zi);
                a.push(ai);
                m.push(mi);
            }
            activations.push(a);
            masks.push(m);
        } else {
            logits = z;
        }
    }

    let n_classes = net.n_classes();
    let inv_batch = 1.0 / batch as f64;
    let mut total_loss = 0.0;
    let mut delta = vec![0.0; batch * n_classes];
    for (s, &label) in labels.iter().enumerate() {
        let (loss, g) = softmax_xent(&logits[s * n_classes..(s + 1) * n_classes], label)?;
        total_loss += loss;
        for (d, gv) in delta[s * n_classes..(s + 1) * n_classes].iter_mut().zip(g) {
            *d = gv * inv_batch;
        }
    }

    let mut grads = Gradients::zeros_like(net);
    for li in (0..n).rev() {
        let layer = &layers[li];
        let input = &activations[li];
        let lg = &mut grads.layers[li];
        let in_len = layer.kind.input_len();
        let out_len = layer.kind.output_len();
        let mut back = vec![0.0; batch * in_len];
        match layer.kind {
            LayerKind::Dense { inputs, outputs } => {
                gemm(outputs, batch, inputs, 1.0, &delta, Trans::Yes, input, Trans::No, 0.0, &mut lg.weight);
                for row in delta.chunks_exact(outputs) {
                    lg.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                }
                if li > 0 {
                    gemm(
                        batch,
                        outputs,
                        inputs,
                        1.0,
                        &delta,
                        Trans::No,
                        layer.weight.as_slice(),
                        Trans::No,
                        0.0,
                        &mut back,
                    );
                }
            }
            LayerKind::Conv(geom) => {
                conv_batch_backward(&geom, layer.weight.as_slice(), input, &delta, batch, lg, &mut back, li > 0);
            }
        }
        if li > 0 {
            for (b, &m) in back.iter_mut().zip(&masks[li - 1]) {
                if !m {
                    *b = 0.0;
                }
            }
        }
        debug_assert_eq!(delta.len(), batch * out_len);
        delta = back;
    }
    Ok((grads, total_loss * inv_batch))
}

#[allow(clippy::too_many_arguments)]
fn conv_batch_backward(
    g: &ConvGeometry,
    kernel: &[f64],
    input: &[f64],
    delta: &[f64],
    batch: usize,
    lg: &mut LayerGradient,
    back: &mut [f64],
    want_input: bool,
) {
    let plane = g.height * g.width;
    let k = g.in_channels * 9;
    let in_len = g.input_len();
    let out_len = g.output_len();
    let mut cols = vec![0.0; k * plane];
    let mut dcols = vec![0.0; k * plane];
    for s in 0..batch {
        let ds = &delta[s * out_len..(s + 1) * out_len];
        conv::im2col(g, &input[s * in_len..(s + 1) * in_len], &mut cols);
        gemm(g.out_channels, plane, k, 1.0, ds, Trans::No, &cols, Trans::Yes, 1.0, &mut lg.weight);
        for (o, b) in lg.bias.iter_mut().enumerate() {
            *b += ds[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        if want_input {
            gemm(k, g.out_channels, plane, 1.0, kernel, Trans::Yes, ds, Trans::No, 0.0, &mut dcols);
            conv::col2im(g, &dcols, &mut back[s * in_len..(s + 1) * in_len]);
        }
    }
}
