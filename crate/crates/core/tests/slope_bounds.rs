use nalgebra::DMatrix;
use slope_core::linalg::{matrix_opnorm, vector_pnorm, Matrix, PNorm};
use slope_core::nn::{forward, output_jacobian, Activation, Network, NetworkSpec};
use slope_core::rng::{seeded, Stream};
use slope_core::slope::{
    lipschitz_check, mean_slope, random_point, slope_at, slope_oracle, weight_product_bound, SlopeOracle,
    SlopeReport,
};
use slope_core::verify::random_mlp;

/// `x -> W x + b` with an identity hidden layer in front.
fn linear_net(w: Matrix, b: Vec<f64>) -> Network {
    let n = w.cols();
    let spec = NetworkSpec::dense(n, &[n], w.rows()).with_activation(Activation::Identity);
    Network::from_layers(spec, 0, vec![(Matrix::identity(n), vec![0.0; n]), (w, b)]).unwrap()
}

fn fixture() -> Matrix {
    Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]])
}

fn rows(m: usize, n: usize, scale: f64, stream: u64) -> Matrix {
    let mut rng = seeded(stream, Stream::Custom(21));
    Matrix::from_rows(&(0..m).map(|_| random_point(n, scale, &mut rng)).collect::<Vec<_>>())
}

#[test]
fn linear_net_slope_bound_and_oracle_agree_with_weight_norm() {
    let net = linear_net(Matrix::diag(&[3.0, 4.0]), vec![0.5, -1.0]);
    let pts = rows(50, 2, 10.0, 1);
    for p in PNorm::ALL {
        let rep = mean_slope(&net, &pts, p).unwrap();
        assert!(rep.values().iter().all(|&s| s == 4.0));
        assert_eq!(rep.summary.std, 0.0);
        assert_eq!(weight_product_bound(&net, p).unwrap().operator, 4.0);
    }
    let net = linear_net(fixture(), vec![0.0, 0.0]);
    let x = [0.3, -0.7];
    assert_eq!(slope_at(&net, &x, PNorm::One).unwrap(), 6.0);
    assert_eq!(slope_at(&net, &x, PNorm::Infinity).unwrap(), 7.0);
    for p in PNorm::ALL {
        let s = slope_at(&net, &x, p).unwrap();
        let o = slope_oracle(&net, &x, p, 5000, 1e-6).unwrap();
        assert!((o - s).abs() / s < 1e-3, "{p}: oracle {o} vs {s}");
    }
}

#[test]
fn single_point_report_has_zero_spread() {
    let mut rng = seeded(3, Stream::Custom(22));
    let net = random_mlp(&mut rng, 4, 2, 8, 3);
    let pts = rows(1, 4, 1.0, 2);
    let rep = mean_slope(&net, &pts, PNorm::Two).unwrap();
    assert_eq!(rep.summary.n, 1);
    assert_eq!(rep.summary.mean, slope_at(&net, pts.row(0), PNorm::Two).unwrap());
    assert_eq!(rep.summary.std, 0.0);
}

#[test]
fn weight_product_bound_holds_on_ten_thousand_pairs_per_net() {
    let mut rng = seeded(5, Stream::Custom(23));
    for _ in 0..20 {
        let n0 = rng_n0(&mut rng);
        let net = random_mlp(&mut rng, n0, 3, 16, 4);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..10_000)
            .map(|_| (random_point(n0, 3.0, &mut rng), random_point(n0, 3.0, &mut rng)))
            .collect();
        for p in PNorm::ALL {
            let k = weight_product_bound(&net, p).unwrap().operator;
            let check = lipschitz_check(&net, &pairs, k, p).unwrap();
            assert!(check.holds, "{p}: ratio {} > K {k}", check.max_ratio);
            assert!(check.max_ratio <= k * (1.0 + 1e-12));
        }
    }
}

fn rng_n0(rng: &mut slope_core::rng::Rng) -> usize {
    use rand::Rng;
    rng.random_range(1..=10)
}

#[test]
fn linear_net_is_lipschitz_with_its_weight_norm() {
    let net = linear_net(fixture(), vec![1.0, 2.0]);
    let mut rng = seeded(6, Stream::Custom(24));
    let pairs: Vec<_> = (0..1000).map(|_| (random_point(2, 5.0, &mut rng), random_point(2, 5.0, &mut rng))).collect();
    for p in PNorm::ALL {
        let k = matrix_opnorm(&fixture(), p).unwrap();
        let check = lipschitz_check(&net, &pairs, k, p).unwrap();
        assert!(check.holds);
        assert!(check.max_ratio <= k * (1.0 + 1e-12));
    }
}

#[test]
fn half_the_local_slope_is_violated_along_the_top_singular_direction() {
    let mut rng = seeded(8, Stream::Custom(25));
    let mut found = 0;
    for _ in 0..20 {
        let net = random_mlp(&mut rng, 5, 2, 10, 3);
        let x = random_point(5, 1.0, &mut rng);
        let j = output_jacobian(&net, &x).unwrap();
        let svd = DMatrix::from_row_slice(j.rows(), j.cols(), j.as_slice()).svd(true, true);
        let (i, _) = svd.singular_values.argmax();
        let v: Vec<f64> = svd.v_t.unwrap().row(i).iter().copied().collect();
        let base = forward(&net, &x).unwrap();
        // shrink until x + v stays in the region of x
        let mut t = 1e-1;
        let y = loop {
            let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + t * b).collect();
            if forward(&net, &y).unwrap().trace == base.trace || t < 1e-12 {
                break y;
            }
            t /= 2.0;
        };
        if forward(&net, &y).unwrap().trace != base.trace {
            continue;
        }
        let s = slope_at(&net, &x, PNorm::Two).unwrap();
        if s == 0.0 {
            continue;
        }
        let check = lipschitz_check(&net, &[(x.clone(), y)], 0.5 * s, PNorm::Two).unwrap();
        assert!(!check.holds);
        assert!((check.max_ratio - s).abs() < 1e-6 * s);
        found += 1;
    }
    assert!(found >= 15);
}

#[test]
fn slope_at_a_region_boundary_is_dominated_by_a_neighbouring_side() {
    let mut rng = seeded(9, Stream::Custom(26));
    for _ in 0..50 {
        let net = random_mlp(&mut rng, 4, 3, 8, 3);
        let x0 = random_point(4, 1.0, &mut rng);
        let first = &net.layers()[0];
        let unit = 0;
        let w = first.weight.row(unit).to_vec();
        let ww: f64 = w.iter().map(|a| a * a).sum();
        let z: f64 = w.iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>() + first.bias[unit];
        let x: Vec<f64> = x0.iter().zip(&w).map(|(a, b)| a - z / ww * b).collect();
        let normal: Vec<f64> = w.iter().map(|a| a / ww.sqrt()).collect();
        let eps = 1e-4;
        let plus: Vec<f64> = x.iter().zip(&normal).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = x.iter().zip(&normal).map(|(a, b)| a - eps * b).collect();
        for p in PNorm::ALL {
            let s = slope_at(&net, &x, p).unwrap();
            let side = slope_at(&net, &plus, p).unwrap().max(slope_at(&net, &minus, p).unwrap());
            assert!(s <= side + 1e-8, "{p}: {s} > {side}");
        }
    }
}

#[test]
fn oracle_stays_below_slope_across_step_sizes() {
    let mut rng = seeded(10, Stream::Custom(27));
    for _ in 0..5 {
        let net = random_mlp(&mut rng, 6, 3, 10, 4);
        let x = random_point(6, 1.0, &mut rng);
        let fx = vector_pnorm(&forward(&net, &x).unwrap().logits, PNorm::Two);
        let s = slope_at(&net, &x, PNorm::Two).unwrap();
        for t in [1e-5, 1e-6, 1e-7] {
            let cfg = SlopeOracle {
                t,
                n_directions: 2000,
                ..SlopeOracle::default()
            };
            let o = cfg.estimate(&net, &x, PNorm::Two).unwrap();
            assert!(o <= s * (1.0 + 1e-9) + cfg.rounding_slack(fx), "t={t}: {o} > {s}");
            assert!(o >= 0.9 * s, "t={t}: {o} << {s}");
        }
    }
}

#[test]
fn report_files_round_trip_and_are_reproducible() {
    let mut rng = seeded(11, Stream::Custom(28));
    let net = random_mlp(&mut rng, 3, 2, 6, 2);
    let pts = rows(20, 3, 1.0, 4);
    let a = mean_slope(&net, &pts, PNorm::Two).unwrap();
    let b = mean_slope(&net, &pts, PNorm::Two).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.write(&dir.path().join("a"), "slopes").unwrap();
    b.write(&dir.path().join("b"), "slopes").unwrap();
    for f in ["slopes.csv", "slopes.summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let text = std::fs::read_to_string(dir.path().join("a/slopes.csv")).unwrap();
    assert_eq!(SlopeReport::from_csv(PNorm::Two, &text).unwrap(), a);
}
