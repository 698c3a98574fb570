//! Input Jacobian `J_f(x)` of a network.
//!
//! Dense-only networks use the explicit masked product
//! `W_n Z_{n-1} W_{n-1} ... Z_1 W_1`, where `Z_i` is the 0/1 diagonal of the
//! activation trace. Networks with convolutions are differentiated row by row
//! with one reverse pass per class.

use super::forward::{forward, vjp, ForwardRecord};
use super::{LayerKind, Network, NnError, Result};
use crate::linalg::Matrix;

/// Masked-product Jacobian for a dense-only network.
pub fn jacobian_masked_product(net: &Network, record: &ForwardRecord) -> Result<Matrix> {
    let layers = net.layers();
    if layers.iter().any(|l| matches!(l.kind, LayerKind::Conv(_))) {
        return Err(NnError::InvalidSpec(
            "masked-product Jacobian needs a dense-only network".into(),
        ));
    }
    let last = layers.len() - 1;
    let mut acc = layers[last].weight.clone();
    for li in (0..last).rev() {
        let mask = &record.trace.masks[li];
        let cols = acc.cols();
        for r in 0..acc.rows() {
            let row = acc.row_mut(r);
            for (c, &m) in mask.iter().enumerate().take(cols) {
                if !m {
                    row[c] = 0.0;
                }
            }
        }
        acc = acc.matmul(&layers[li].weight)?;
    }
    Ok(acc)
}

/// Jacobian assembled from `n_classes` reverse-mode passes seeded with unit
/// cotangents.
pub fn jacobian_reverse(net: &Network, x: &[f64], record: &ForwardRecord) -> Result<Matrix> {
    let n_classes = net.n_classes();
    let mut data = Vec::with_capacity(n_classes * net.input_len());
    let mut seed = vec![0.0; n_classes];
    for k in 0..n_classes {
        seed.iter_mut().for_each(|v| *v = 0.0);
        seed[k] = 1.0;
        data.extend(vjp(net, x, record, &seed, None)?);
    }
    Ok(Matrix::new(n_classes, net.input_len(), data)?)
}

/// `J_f(x)` as an `n_classes x n_inputs` matrix, using the masked product for
/// dense-only networks and reverse mode otherwise.
pub fn output_jacobian(net: &Network, x: &[f64]) -> Result<Matrix> {
    let record = forward(net, x)?;
    if net.spec().is_dense_only() {
        jacobian_masked_product(net, &record)
    } else {
        jacobian_reverse(net, x, &record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, InputShape, LayerSpec, NetworkSpec};
    use crate::rng::{seeded, Stream};
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = seeded(seed, Stream::Custom(17));
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Forward finite differences, column by column.
    fn fd_jacobian(net: &Network, x: &[f64], h: f64) -> Matrix {
        let f0 = forward(net, x).unwrap().logits;
        let n = x.len();
        let mut j = Matrix::zeros(f0.len(), n);
        for c in 0..n {
            let mut xp = x.to_vec();
            xp[c] += h;
            let f1 = forward(net, &xp).unwrap().logits;
            for r in 0..f0.len() {
                j.set(r, c, (f1[r] - f0[r]) / h);
            }
        }
        j
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn all_active_net_is_plain_weight_product() {
        let spec = NetworkSpec::dense(3, &[4], 2).with_activation(Activation::Identity);
        let net = Network::init(&spec, 3).unwrap();
        let j = output_jacobian(&net, &rand_vec(3, 1)).unwrap();
        let l = net.layers();
        let prod = l[1].weight.matmul(&l[0].weight).unwrap();
        assert_close(&j, &prod, 1e-15);
    }

    #[test]
    fn dense_paths_agree_and_match_finite_differences() {
        let net = Network::init(&NetworkSpec::dense(6, &[16, 12], 4), 7).unwrap();
        let mut checked = 0;
        for s in 0..30 {
            let x = rand_vec(6, 50 + s);
            let rec = forward(&net, &x).unwrap();
            let a = jacobian_masked_product(&net, &rec).unwrap();
            let b = jacobian_reverse(&net, &x, &rec).unwrap();
            assert_close(&a, &b, 1e-12);
            if rec.min_abs_pre_activation() > 1e-6 * 100.0 {
                assert_close(&a, &fd_jacobian(&net, &x, 1e-7), 1e-5);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn conv_jacobian_matches_finite_differences() {
        let spec = NetworkSpec {
            input: InputShape::Image {
                height: 4,
                width: 4,
                channels: 1,
            },
            hidden: vec![LayerSpec::Conv2d(2), LayerSpec::Conv2d(2)],
            n_classes: 3,
            activation: Activation::Relu,
        };
        let mut net = Network::init(&spec, 2).unwrap();
        for l in net.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = 0.03);
        }
        let x = rand_vec(16, 4);
        let rec = forward(&net, &x).unwrap();
        assert!(rec.min_abs_pre_activation() > 1e-5);
        let j = output_jacobian(&net, &x).unwrap();
        assert_close(&j, &fd_jacobian(&net, &x, 1e-7), 1e-5);
        assert!(jacobian_masked_product(&net, &rec).is_err());
    }
}
