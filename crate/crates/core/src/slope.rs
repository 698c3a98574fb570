//! Slope of a network: the operator p-norm of its input Jacobian at a point,
//! averaged over a sample of points, plus the weight-product upper bound, a
//! Lipschitz checker and a derivative-free directional oracle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{frobenius_norm, matrix_opnorm, vector_pnorm, Matrix, PNorm};
use crate::nn::{batch_logits, forward, output_jacobian, LayerKind, Network, NnError, Result};
use crate::rng::{seeded, Stream};
use crate::stats::Summary;

/// `||J_f(x)||_p`.
pub fn slope_at(net: &Network, x: &[f64], p: PNorm) -> Result<f64> {
    Ok(matrix_opnorm(&output_jacobian(net, x)?, p)?)
}

/// `||f(x + t v) - f(x)||_p / (t ||v||_p)` for each row `v` of `dirs`.
///
/// `f(x)` is evaluated through the same batched path as the perturbed points
/// so that rounding in the difference stays at the level of the logits.
pub fn directional_ratios(net: &Network, x: &[f64], dirs: &Matrix, t: f64, p: PNorm) -> Result<Vec<f64>> {
    let n = x.len();
    let mut data = Vec::with_capacity((dirs.rows() + 1) * n);
    data.extend_from_slice(x);
    for r in 0..dirs.rows() {
        data.extend(x.iter().zip(dirs.row(r)).map(|(xi, vi)| xi + t * vi));
    }
    let pts = Matrix::new(dirs.rows() + 1, n, data)?;
    let out = batch_logits(net, &pts)?;
    let f0 = out.row(0);
    let mut diff = vec![0.0; f0.len()];
    Ok((0..dirs.rows())
        .map(|r| {
            for ((d, a), b) in diff.iter_mut().zip(out.row(r + 1)).zip(f0) {
                *d = a - b;
            }
            vector_pnorm(&diff, p) / (t * vector_pnorm(dirs.row(r), p))
        })
        .collect())
}

/// Derivative-free lower estimate of the slope from forward evaluations only.
///
/// Candidates are the `2 n_0` signed coordinate directions plus
/// `n_directions` random Gaussian directions. The best candidate is then
/// polished by a (1+1) random search with step-size adaptation for
/// `refine_steps` rounds; every evaluated value is itself a finite-difference
/// ratio, so the result never exceeds the true local slope beyond rounding.
/// That rounding is of order `eps * ||f(x)||_p / t`, see
/// [`SlopeOracle::rounding_slack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeOracle {
    pub n_directions: usize,
    pub t: f64,
    pub seed: u64,
    pub refine_steps: usize,
}

impl Default for SlopeOracle {
    fn default() -> Self {
        Self {
            n_directions: 5000,
            t: 1e-6,
            seed: 0,
            refine_steps: 400,
        }
    }
}

impl SlopeOracle {
    /// Absolute allowance for floating-point error in one difference
    /// quotient when `||f(x)||_p = fx_norm`.
    pub fn rounding_slack(&self, fx_norm: f64) -> f64 {
        16.0 * f64::EPSILON * fx_norm.max(1.0) / self.t
    }

    pub fn estimate(&self, net: &Network, x: &[f64], p: PNorm) -> Result<f64> {
        let n = x.len();
        let mut rng = seeded(self.seed, Stream::Directions);
        let mut dirs = Matrix::zeros(2 * n + self.n_directions, n);
        for i in 0..n {
            dirs.set(2 * i, i, 1.0);
            dirs.set(2 * i + 1, i, -1.0);
        }
        for r in 2 * n..dirs.rows() {
            for v in dirs.row_mut(r) {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        let mut best_val = f64::NEG_INFINITY;
        let mut best = vec![0.0; n];
        for chunk_start in (0..dirs.rows()).step_by(1024) {
            let end = (chunk_start + 1024).min(dirs.rows());
            let chunk = Matrix::new(end - chunk_start, n, dirs.as_slice()[chunk_start * n..end * n].to_vec())?;
            for (r, v) in directional_ratios(net, x, &chunk, self.t, p)?.into_iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best.copy_from_slice(chunk.row(r));
                }
            }
        }
        normalize(&mut best, p);

        let mut sigma = 0.3;
        const BATCH: usize = 8;
        for _ in 0..self.refine_steps {
            let mut cand = Matrix::zeros(BATCH, n);
            for r in 0..BATCH {
                for (c, b) in cand.row_mut(r).iter_mut().zip(&best) {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *c = b + sigma * g / (n as f64).sqrt();
                }
                normalize(cand.row_mut(r), p);
            }
            let vals = directional_ratios(net, x, &cand, self.t, p)?;
            let (r, v) = vals
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            if v > best_val {
                best_val = v;
                best.copy_from_slice(cand.row(r));
                sigma *= 1.5;
            } else {
                sigma *= 0.8;
            }
            if sigma < 1e-9 {
                break;
            }
        }
        Ok(best_val.max(0.0))
    }
}

fn normalize(v: &mut [f64], p: PNorm) {
    let norm = vector_pnorm(v, p);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// [`SlopeOracle`] with the given direction count and step, default seed.
pub fn slope_oracle(net: &Network, x: &[f64], p: PNorm, n_directions: usize, t: f64) -> Result<f64> {
    SlopeOracle {
        n_directions,
        t,
        ..SlopeOracle::default()
    }
    .estimate(net, x, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSlope {
    pub point_id: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub p: PNorm,
    pub points: Vec<PointSlope>,
    pub summary: Summary,
}

impl SlopeReport {
    pub fn from_points(p: PNorm, points: Vec<PointSlope>) -> SlopeReport {
        let values: Vec<f64> = points.iter().map(|s| s.slope).collect();
        SlopeReport {
            p,
            summary: Summary::of(&values),
            points,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|s| s.slope).collect()
    }

    pub fn mean(&self) -> f64 {
        self.summary.mean
    }

    /// `point_id,slope` with a header line; values use shortest round-trip
    /// formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("point_id,slope\n");
        for pt in &self.points {
            let _ = writeln!(s, "{},{:?}", pt.point_id, pt.slope);
        }
        s
    }

    pub fn from_csv(p: PNorm, text: &str) -> std::result::Result<SlopeReport, String> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("point_id,slope") {
            return Err("missing 'point_id,slope' header".into());
        }
        let points = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                let (id, v) = l.split_once(',').ok_or(format!("line {}: expected two fields", i + 2))?;
                Ok(PointSlope {
                    point_id: id.trim().parse().map_err(|e| format!("line {}: {e}", i + 2))?,
                    slope: v.trim().parse().map_err(|e| format!("line {}: {e}", i + 2))?,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        if points.is_empty() {
            return Err("no rows".into());
        }
        Ok(SlopeReport::from_points(p, points))
    }

    /// Writes `<stem>.csv` and `<stem>.summary.json` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let summary = serde_json::json!({ "p": self.p, "summary": self.summary });
        fs::write(
            dir.join(format!("{stem}.summary.json")),
            serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
        )
    }
}

/// Slope at every row of `points`, with `ids[i]` naming row `i`.
///
/// Points are processed in parallel but collected in input order, so the
/// report does not depend on the thread count.
pub fn mean_slope_with_ids(net: &Network, points: &Matrix, ids: &[usize], p: PNorm) -> Result<SlopeReport> {
    if points.rows() == 0 {
        return Err(NnError::Shape("slope of an empty point set".into()));
    }
    if ids.len() != points.rows() {
        return Err(NnError::Shape(format!("{} ids for {} points", ids.len(), points.rows())));
    }
    let slopes = (0..points.rows())
        .into_par_iter()
        .map(|r| slope_at(net, points.row(r), p))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SlopeReport::from_points(
        p,
        ids.iter()
            .zip(slopes)
            .map(|(&point_id, slope)| PointSlope { point_id, slope })
            .collect(),
    ))
}

pub fn mean_slope(net: &Network, points: &Matrix, p: PNorm) -> Result<SlopeReport> {
    let ids: Vec<usize> = (0..points.rows()).collect();
    mean_slope_with_ids(net, points, &ids, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBound {
    pub p: PNorm,
    /// `prod_i ||W_i||_p`.
    pub operator: f64,
    /// `prod_i ||W_i||_F`, only for `p = 2`.
    pub frobenius: Option<f64>,
}

/// Product of per-layer operator norms. Dense-only networks.
pub fn weight_product_bound(net: &Network, p: PNorm) -> Result<WeightBound> {
    let mut operator = 1.0;
    let mut frob = 1.0;
    for layer in net.layers() {
        if let LayerKind::Conv(_) = layer.kind {
            return Err(NnError::InvalidSpec(
                "weight-product bound is only defined here for dense layers".into(),
            ));
        }
        operator *= matrix_opnorm(&layer.weight, p)?;
        frob *= frobenius_norm(&layer.weight);
    }
    Ok(WeightBound {
        p,
        operator,
        frobenius: (p == PNorm::Two).then_some(frob),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub holds: bool,
    pub max_ratio: f64,
    /// Indices of pairs with `x == y`.
    pub skipped: Vec<usize>,
    /// Indices of pairs where the ratio exceeded `K`.
    pub violations: Vec<usize>,
}

/// Relative slack granted to `K` for floating-point rounding in `f(x) - f(y)`.
pub const LIPSCHITZ_RTOL: f64 = 1e-12;

/// Checks `||f(x) - f(y)||_p <= K ||x - y||_p` on every pair.
pub fn lipschitz_check(net: &Network, pairs: &[(Vec<f64>, Vec<f64>)], k: f64, p: PNorm) -> Result<LipschitzCheck> {
    let mut out = LipschitzCheck {
        holds: true,
        max_ratio: 0.0,
        skipped: Vec::new(),
        violations: Vec::new(),
    };
    for (i, (x, y)) in pairs.iter().enumerate() {
        let dx: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let denom = vector_pnorm(&dx, p);
        if denom == 0.0 {
            out.skipped.push(i);
            continue;
        }
        let fx = forward(net, x)?.logits;
        let fy = forward(net, y)?.logits;
        let df: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
        let ratio = vector_pnorm(&df, p) / denom;
        out.max_ratio = out.max_ratio.max(ratio);
        if ratio > k * (1.0 + LIPSCHITZ_RTOL) {
            out.violations.push(i);
        }
    }
    out.holds = out.violations.is_empty();
    Ok(out)
}

/// Uniform random point in `[-scale, scale]^n`, used by tests and verify.
pub fn random_point(n: usize, scale: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scale_at_layer, Activation, NetworkSpec};

    fn linear_net(w: Matrix) -> Network {
        let spec = NetworkSpec::dense(w.cols(), &[w.cols()], w.rows()).with_activation(Activation::Identity);
        let n = w.cols();
        Network::from_layers(
            spec,
            0,
            vec![(Matrix::identity(n), vec![0.0; n]), (w, vec![0.5; 2])],
        )
        .unwrap()
    }

    #[test]
    fn affine_map_slope_is_weight_norm_everywhere() {
        let net = linear_net(Matrix::diag(&[3.0, 4.0]));
        let mut rng = seeded(1, Stream::Custom(0));
        for _ in 0..5 {
            let x = random_point(2, 10.0, &mut rng);
            assert_eq!(slope_at(&net, &x, PNorm::Two).unwrap(), 4.0);
        }
        let r = mean_slope(&net, &Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]), PNorm::Two).unwrap();
        assert_eq!(r.summary.std, 0.0);
        let b = weight_product_bound(&net, PNorm::Two).unwrap();
        assert_eq!(b.operator, 4.0);
    }

    #[test]
    fn p1_oracle_is_exact_on_affine_regions() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        let net = linear_net(w);
        let o = slope_oracle(&net, &[0.2, 0.1], PNorm::One, 1000, 1e-6).unwrap();
        assert!((o - 6.0).abs() < 1e-8, "{o}");
    }

    #[test]
    fn oracle_never_exceeds_slope_and_gets_close_for_p2() {
        let net = Network::init(&NetworkSpec::dense(6, &[12, 12], 4), 5).unwrap();
        let mut rng = seeded(2, Stream::Custom(0));
        for _ in 0..5 {
            let x = random_point(6, 1.0, &mut rng);
            if forward(&net, &x).unwrap().min_abs_pre_activation() < 1e-4 {
                continue;
            }
            let s = slope_at(&net, &x, PNorm::Two).unwrap();
            let o = slope_oracle(&net, &x, PNorm::Two, 1000, 1e-6).unwrap();
            let fx = vector_pnorm(&forward(&net, &x).unwrap().logits, PNorm::Two);
            let slack = SlopeOracle::default().rounding_slack(fx);
            assert!(o <= s * (1.0 + 1e-9) + slack, "{o} > {s}");
            assert!(o >= 0.99 * s, "{o} << {s}");
        }
    }

    #[test]
    fn report_summary_and_scaling() {
        let net = Network::init(&NetworkSpec::dense(5, &[8], 3), 9).unwrap();
        let mut rng = seeded(3, Stream::Custom(0));
        let pts = Matrix::from_rows(&(0..10).map(|_| random_point(5, 1.0, &mut rng)).collect::<Vec<_>>());
        let r = mean_slope(&net, &pts, PNorm::Two).unwrap();
        let single = mean_slope(&net, &Matrix::from_rows(&[pts.row(0).to_vec()]), PNorm::Two).unwrap();
        assert_eq!(single.mean(), r.points[0].slope);
        assert_eq!(single.summary.std, 0.0);
        let scaled = scale_at_layer(&net, 1, 2.0).unwrap();
        let r2 = mean_slope(&scaled, &pts, PNorm::Two).unwrap();
        for (a, b) in r.points.iter().zip(&r2.points) {
            assert!((b.slope - 2.0 * a.slope).abs() <= 1e-12 * a.slope);
        }
        let parsed = SlopeReport::from_csv(PNorm::Two, &r.to_csv()).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn conv_nets_have_no_weight_bound() {
        let net = Network::init(&NetworkSpec::conv(4, 4, 1, 1, 2, 3), 0).unwrap();
        assert!(weight_product_bound(&net, PNorm::Two).is_err());
    }

    #[test]
    fn lipschitz_skips_coincident_pairs() {
        let net = linear_net(Matrix::diag(&[3.0, 4.0]));
        let pairs = vec![(vec![1.0, 1.0], vec![1.0, 1.0]), (vec![0.0, 0.0], vec![0.0, 1.0])];
        let c = lipschitz_check(&net, &pairs, 4.0, PNorm::Two).unwrap();
        assert!(c.holds);
        assert_eq!(c.skipped, vec![0]);
        assert_eq!(c.max_ratio, 4.0);
        let c = lipschitz_check(&net, &pairs, 3.9, PNorm::Two).unwrap();
        assert_eq!(c.violations, vec![1]);
    }
}
