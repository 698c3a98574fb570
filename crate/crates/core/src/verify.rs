//! Self-check suite behind `slope verify`: norm oracles, slope against
//! directional derivatives, gradients against finite differences, and the
//! scaling, loss, Lipschitz, boundary and distance properties.
//!
//! A [`Fault`] can be injected to confirm that the checks actually bite.

use rand::Rng as _;
use serde::Serialize;

use crate::data::gaussian_pair_distances;
use crate::linalg::{frobenius_norm, gram_spectral, matrix_opnorm, vector_pnorm, Matrix, PNorm, PowerIteration};
use crate::nn::{
    backward, forward, jacobian_reverse, output_jacobian, scale_at_layer, softmax_xent, Network, NetworkSpec, Result,
};
use crate::rng::{seeded, Rng, Stream};
use crate::slope::{lipschitz_check, random_point, slope_at, weight_product_bound, SlopeOracle};
use crate::stats::{mean, std_dev};

/// Deliberate defects for negative-control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// Compute the Jacobian as if every ReLU were active.
    JacobianIgnoresMasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub quick: bool,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            quick: false,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst value observed, in the units of `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed,
            measured,
            tolerance,
            detail,
        }
    }
}

/// Random dense ReLU network with random biases.
pub fn random_mlp(rng: &mut Rng, n0: usize, max_depth: usize, max_width: usize, n_classes: usize) -> Network {
    let depth = rng.random_range(1..=max_depth);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=max_width)).collect();
    let mut net = Network::init(&NetworkSpec::dense(n0, &hidden, n_classes), rng.random()).expect("valid spec");
    for layer in net.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    net
}

fn jacobian(net: &Network, x: &[f64], fault: Option<Fault>) -> Result<Matrix> {
    match fault {
        None => output_jacobian(net, x),
        Some(Fault::JacobianIgnoresMasks) => {
            let layers = net.layers();
            let mut acc = layers[layers.len() - 1].weight.clone();
            for l in layers[..layers.len() - 1].iter().rev() {
                acc = acc.matmul(&l.weight)?;
            }
            Ok(acc)
        }
    }
}

/// Direction attaining `||J||_p` for `p` in {1, inf}: the unit vector of
/// the largest column (p = 1) or the sign pattern of the largest row.
pub fn attaining_direction(j: &Matrix, p: PNorm) -> Vec<f64> {
    let mut v = vec![0.0; j.cols()];
    match p {
        PNorm::One => {
            let best = (0..j.cols())
                .max_by(|&a, &b| vector_pnorm(&j.column(a), p).total_cmp(&vector_pnorm(&j.column(b), p)))
                .unwrap_or(0);
            v[best] = 1.0;
        }
        PNorm::Infinity => {
            let best = (0..j.rows())
                .max_by(|&a, &b| vector_pnorm(j.row(a), PNorm::One).total_cmp(&vector_pnorm(j.row(b), PNorm::One)))
                .unwrap_or(0);
            for (vi, &jv) in v.iter_mut().zip(j.row(best)) {
                *vi = if jv < 0.0 { -1.0 } else { 1.0 };
            }
        }
        PNorm::Two => unreachable!("no closed-form attaining vector for p = 2"),
    }
    v
}

/// `||f(x + t v) - f(x)||_p / (t ||v||_p)` with the largest `t` in
/// `1e-1, 1e-2, ..., 1e-12` for which `x + t v` keeps the activation pattern
/// of `x`. Activation regions are convex, so the whole segment lies in one
/// affine piece and the quotient is exact up to rounding.
pub fn in_region_directional_value(net: &Network, x: &[f64], v: &[f64], p: PNorm) -> Result<Option<f64>> {
    let base = forward(net, x)?;
    let vn = vector_pnorm(v, p);
    for k in 1..=12 {
        let t = 10f64.powi(-k);
        let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
        let rec = forward(net, &y)?;
        if rec.trace == base.trace {
            let diff: Vec<f64> = rec.logits.iter().zip(&base.logits).map(|(a, b)| a - b).collect();
            return Ok(Some(vector_pnorm(&diff, p) / (t * vn)));
        }
    }
    Ok(None)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn check_norm_fixtures() -> CheckOutcome {
    let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
    let one = matrix_opnorm(&m, PNorm::One).unwrap_or(f64::NAN);
    let inf = matrix_opnorm(&m, PNorm::Infinity).unwrap_or(f64::NAN);
    let two = matrix_opnorm(&Matrix::diag(&[3.0, 4.0]), PNorm::Two).unwrap_or(f64::NAN);
    let frob = frobenius_norm(&Matrix::diag(&[3.0, 4.0]));
    let err = [(one, 6.0), (inf, 7.0), (two, 4.0), (frob, 5.0)]
        .iter()
        .map(|&(a, b)| rel(a, b))
        .fold(0.0, f64::max);
    CheckOutcome::new(
        "norm fixtures",
        err <= 1e-12,
        err,
        1e-12,
        format!("||.||_1={one} ||.||_inf={inf} ||diag(3,4)||_2={two} ||diag(3,4)||_F={frob}"),
    )
}

fn check_spectral_paths(opts: &VerifyOptions, rng: &mut Rng) -> CheckOutcome {
    let trials = if opts.quick { 3 } else { 10 };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let data: Vec<f64> = (0..10 * 784).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Matrix::new(10, 784, data).expect("shape");
        let a = gram_spectral(&m).unwrap_or(f64::NAN);
        let b = PowerIteration {
            tolerance: 1e-14,
            max_iterations: 100_000,
            ..PowerIteration::default()
        }
        .spectral_norm(&m)
        .unwrap_or(f64::NAN);
        worst = worst.max(rel(a, b));
    }
    CheckOutcome::new(
        "spectral norm: Gram eigensolve vs power iteration",
        worst <= 1e-8,
        worst,
        1e-8,
        format!("{trials} random 10x784 matrices, power iteration stopped at 1e-14 quotient change"),
    )
}

fn check_prop1(opts: &VerifyOptions, rng: &mut Rng) -> Result<Vec<CheckOutcome>> {
    let (nets, pts, dirs) = if opts.quick { (5, 4, 1000) } else { (50, 20, 5000) };
    let mut worst2: f64 = 0.0;
    let mut worst1: f64 = 0.0;
    let mut over: f64 = 0.0;
    let mut evaluated = 0;
    for _ in 0..nets {
        let n0 = rng.random_range(2..=10);
        let n_classes = rng.random_range(2..=6);
        let net = random_mlp(rng, n0, 3, 16, n_classes);
        let mut done = 0;
        while done < pts {
            let x = random_point(n0, 1.0, rng);
            if forward(&net, &x)?.min_abs_pre_activation() < 1e-6 {
                continue;
            }
            done += 1;
            evaluated += 1;
            let j = jacobian(&net, &x, opts.fault)?;
            let s2 = matrix_opnorm(&j, PNorm::Two)?;
            let cfg = SlopeOracle {
                n_directions: dirs,
                seed: rng.random(),
                ..SlopeOracle::default()
            };
            let oracle = cfg.estimate(&net, &x, PNorm::Two)?;
            worst2 = worst2.max(rel(oracle, s2));
            let slack = cfg.rounding_slack(vector_pnorm(&forward(&net, &x)?.logits, PNorm::Two));
            over = over.max((oracle - slack) / s2 - 1.0);
            for p in [PNorm::One, PNorm::Infinity] {
                let s = matrix_opnorm(&j, p)?;
                let v = attaining_direction(&j, p);
                if let Some(d) = in_region_directional_value(&net, &x, &v, p)? {
                    worst1 = worst1.max(rel(d, s));
                }
            }
        }
    }
    let tol2 = 0.01;
    Ok(vec![
        CheckOutcome::new(
            "slope = ||J||_2 matches directional oracle (p=2)",
            worst2 <= tol2 && over <= 1e-9,
            worst2,
            tol2,
            format!("{evaluated} points, {dirs} directions + refinement, max oracle excess beyond rounding slack {over:.2e}"),
        ),
        CheckOutcome::new(
            "slope = ||J||_p matches attaining directional value (p=1, inf)",
            worst1 <= 1e-9,
            worst1,
            1e-9,
            format!("{evaluated} points"),
        ),
    ])
}

fn check_gradients(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let net = {
        let mut n = Network::init(&NetworkSpec::dense(5, &[7, 6, 5], 4), rng.random())?;
        for l in n.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        n
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let points = if opts.quick { 2 } else { 5 };
    let mut tried = 0;
    while checked < points && tried < 100 {
        tried += 1;
        let x = random_point(5, 1.0, rng);
        if forward(&net, &x)?.min_abs_pre_activation() < 1e-3 {
            continue;
        }
        checked += 1;
        let label = rng.random_range(0..4);
        let b = backward(&net, &x, label)?;
        let loss = |n: &Network, x: &[f64]| -> Result<f64> { Ok(softmax_xent(&forward(n, x)?.logits, label)?.0) };
        let params = net.flat_params();
        let grads = b.grads.flat();
        for (k, g) in grads.iter().enumerate() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut pp = params.clone();
            pp[k] += h;
            plus.set_flat_params(&pp)?;
            pp[k] -= 2.0 * h;
            minus.set_flat_params(&pp)?;
            let fd = (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * h);
            worst = worst.max((fd - g).abs() / g.abs().max(1e-6).max(fd.abs()));
        }
        for (k, g) in b.input_grad.iter().enumerate() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (loss(&net, &xp)? - loss(&net, &xm)?) / (2.0 * h);
            worst = worst.max((fd - g).abs() / g.abs().max(1e-6).max(fd.abs()));
        }
    }
    Ok(CheckOutcome::new(
        "gradients match central differences",
        worst < 1e-4,
        worst,
        1e-4,
        format!("{checked} points, every parameter and input coordinate"),
    ))
}

fn check_prop6(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let cases = if opts.quick { 100 } else { 1000 };
    let (mut found, mut violations) = (0, 0);
    while found < cases {
        let net = random_mlp(rng, 4, 2, 8, 3);
        let x = random_point(4, 1.0, rng);
        let rec = forward(&net, &x)?;
        let label = rec.predicted_class();
        let logits = rec.logits;
        if logits.iter().enumerate().any(|(i, &z)| i != label && z >= logits[label]) {
            continue;
        }
        found += 1;
        let base = softmax_xent(&logits, label)?.0;
        for c in [1.5, 2.0, 10.0] {
            let scaled: Vec<f64> = logits.iter().map(|z| c * z).collect();
            if softmax_xent(&scaled, label)?.0 >= base {
                violations += 1;
            }
        }
    }
    Ok(CheckOutcome::new(
        "loss decreases when correct logits are scaled by c > 1",
        violations == 0,
        violations as f64,
        0.0,
        format!("{cases} correctly classified cases, c in {{1.5, 2, 10}}"),
    ))
}

fn check_scaling(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let points = if opts.quick { 20 } else { 100 };
    let net = random_mlp(rng, 6, 3, 12, 4);
    let mut worst: f64 = 0.0;
    for layer in 1..=net.layers().len() {
        let scaled = scale_at_layer(&net, layer, 2.0)?;
        for _ in 0..points {
            let x = random_point(6, 1.0, rng);
            let f = forward(&net, &x)?.logits;
            let g = forward(&scaled, &x)?.logits;
            let scale = vector_pnorm(&f, PNorm::Infinity).max(1e-300);
            for (a, b) in f.iter().zip(&g) {
                worst = worst.max((b - 2.0 * a).abs() / scale);
            }
            worst = worst.max(rel(slope_at(&scaled, &x, PNorm::Two)?, 2.0 * slope_at(&net, &x, PNorm::Two)?));
        }
    }
    Ok(CheckOutcome::new(
        "scaling one layer's parameters (and later biases) by c doubles f and its slope",
        worst < 1e-10,
        worst,
        1e-10,
        format!("{points} points per layer, c = 2"),
    ))
}

fn check_lipschitz(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let (nets, pairs) = if opts.quick { (3, 1000) } else { (20, 10_000) };
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..nets {
        let net = random_mlp(rng, 5, 3, 10, 3);
        for p in PNorm::ALL {
            let k = weight_product_bound(&net, p)?.operator;
            let ps: Vec<(Vec<f64>, Vec<f64>)> =
                (0..pairs).map(|_| (random_point(5, 2.0, rng), random_point(5, 2.0, rng))).collect();
            let c = lipschitz_check(&net, &ps, k, p)?;
            violations += c.violations.len();
            worst_ratio = worst_ratio.max(c.max_ratio / k);
        }
    }
    Ok(CheckOutcome::new(
        "||f(x)-f(y)|| <= K ||x-y|| with K the weight-norm product",
        violations == 0,
        worst_ratio,
        1.0,
        format!("{nets} nets x {pairs} pairs x p in {{1,2,inf}}; measured = max ratio / K"),
    ))
}

fn check_boundary(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let trials = if opts.quick { 20 } else { 200 };
    let eps = 1e-4;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let mut net = random_mlp(rng, 4, 3, 8, 3);
        let x = random_point(4, 1.0, rng);
        let unit = rng.random_range(0..net.layers()[0].bias.len());
        let w_row = net.layers()[0].weight.row(unit).to_vec();
        let pre = crate::linalg::dot(&w_row, &x);
        net.layers_mut()[0].bias[unit] = -pre;
        let rec = forward(&net, &x)?;
        if rec.pre_activations[0][unit] != 0.0 {
            continue;
        }
        let norm = vector_pnorm(&w_row, PNorm::Two);
        let normal: Vec<f64> = w_row.iter().map(|w| eps * w / norm).collect();
        let xp: Vec<f64> = x.iter().zip(&normal).map(|(a, b)| a + b).collect();
        let xm: Vec<f64> = x.iter().zip(&normal).map(|(a, b)| a - b).collect();
        let s = slope_at(&net, &x, PNorm::Two)?;
        let side = slope_at(&net, &xp, PNorm::Two)?.max(slope_at(&net, &xm, PNorm::Two)?);
        worst = worst.max(s - side);
    }
    Ok(CheckOutcome::new(
        "slope on a region boundary <= max slope of the adjacent regions",
        worst <= 1e-8,
        worst,
        1e-8,
        format!("{trials} constructed boundary points, eps = {eps}"),
    ))
}

fn check_lemma2(opts: &VerifyOptions) -> CheckOutcome {
    let pairs = if opts.quick { 2000 } else { 10_000 };
    let d = gaussian_pair_distances(784, pairs, opts.seed);
    let (m, s) = (mean(&d), std_dev(&d));
    let target = (2.0f64 * 784.0).sqrt();
    let tol = if opts.quick { 0.1 } else { 0.05 };
    let d4 = gaussian_pair_distances(4 * 784, pairs, opts.seed ^ 1);
    let ratio = mean(&d4) / m;
    let passed = (m - target).abs() < tol && (0.9..=1.1).contains(&s) && (1.98..=2.02).contains(&ratio);
    CheckOutcome::new(
        "Gaussian pair distances ~ N(sqrt(2n), 1) and double when n is quadrupled",
        passed,
        (m - target).abs(),
        tol,
        format!("n=784, {pairs} pairs: mean {m:.4} (target {target:.4}), std {s:.4}, ratio 4n/n {ratio:.4}"),
    )
}

fn check_piecewise_linear(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let trials = if opts.quick { 20 } else { 200 };
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for _ in 0..trials {
        let net = random_mlp(rng, 5, 3, 10, 3);
        let x = random_point(5, 1.0, rng);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect();
        let (rx, ry) = (forward(&net, &x)?, forward(&net, &y)?);
        if rx.trace != ry.trace {
            continue;
        }
        used += 1;
        let j = jacobian(&net, &x, opts.fault)?;
        let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let pred = j.matvec(&d)?;
        let diff: Vec<f64> = ry.logits.iter().zip(&rx.logits).map(|(a, b)| a - b).collect();
        let err: Vec<f64> = pred.iter().zip(&diff).map(|(a, b)| a - b).collect();
        worst = worst.max(vector_pnorm(&err, PNorm::Two) / vector_pnorm(&diff, PNorm::Two).max(1e-300));
    }
    Ok(CheckOutcome::new(
        "f(y) - f(x) = J(x)(y - x) inside one activation region",
        worst <= 1e-8,
        worst,
        1e-8,
        format!("{used} pairs sharing a trace"),
    ))
}

fn check_dual_path(opts: &VerifyOptions, rng: &mut Rng) -> Result<CheckOutcome> {
    let trials = if opts.quick { 10 } else { 50 };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let net = random_mlp(rng, 6, 3, 12, 4);
        let x = random_point(6, 1.0, rng);
        let a = jacobian(&net, &x, opts.fault)?;
        let b = jacobian_reverse(&net, &x, &forward(&net, &x)?)?;
        let scale = b.as_slice().iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            worst = worst.max((u - v).abs() / scale);
        }
    }
    Ok(CheckOutcome::new(
        "masked-product Jacobian equals reverse-mode Jacobian",
        worst <= 1e-12,
        worst,
        1e-12,
        format!("{trials} random networks"),
    ))
}

/// Runs every check and returns their outcomes in a fixed order.
pub fn run_checks(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let mut rng = seeded(opts.seed, Stream::Custom(0x7e51));
    let mut out = vec![check_norm_fixtures(), check_spectral_paths(opts, &mut rng)];
    out.extend(check_prop1(opts, &mut rng)?);
    out.push(check_dual_path(opts, &mut rng)?);
    out.push(check_piecewise_linear(opts, &mut rng)?);
    out.push(check_gradients(opts, &mut rng)?);
    out.push(check_prop6(opts, &mut rng)?);
    out.push(check_scaling(opts, &mut rng)?);
    out.push(check_lipschitz(opts, &mut rng)?);
    out.push(check_boundary(opts, &mut rng)?);
    out.push(check_lemma2(opts));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let out = run_checks(&VerifyOptions {
            quick: true,
            ..VerifyOptions::default()
        })
        .unwrap();
        for c in &out {
            assert!(c.passed, "{}: {} ({})", c.name, c.measured, c.detail);
        }
    }

    #[test]
    fn injected_jacobian_fault_is_caught() {
        let out = run_checks(&VerifyOptions {
            quick: true,
            fault: Some(Fault::JacobianIgnoresMasks),
            ..VerifyOptions::default()
        })
        .unwrap();
        let prop1 = out.iter().find(|c| c.name.contains("(p=2)")).unwrap();
        assert!(!prop1.passed);
    }
}
