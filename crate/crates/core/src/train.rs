//! SGD with heavy-ball momentum, per-epoch slope tracking on a fixed sample,
//! and selection of the epoch with the lowest validation loss.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::{Matrix, PNorm};
use crate::nn::{batch_gradient, batch_logits, save_checkpoint, softmax_xent, Gradients, Network, NnError};
use crate::rng::{permutation, seeded, Stream};
use crate::slope::{mean_slope_with_ids, SlopeReport};
use crate::stats::Summary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("non-finite {what} at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub slope_sample_size: usize,
    pub p: PNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.8,
            batch_size: 64,
            epochs: 150,
            seed: 0,
            slope_sample_size: 750,
            p: PNorm::Two,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.slope_sample_size == 0 {
            return Err(TrainError::Config("slope_sample_size must be positive".into()));
        }
        Ok(())
    }
}

/// Velocity buffers, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Gradients,
}

impl MomentumState {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: Gradients::zeros_like(net),
        }
    }
}

/// One heavy-ball step on the mean batch loss: `v <- mu v + g`, then
/// `theta <- theta - lr v`. Returns the batch loss before the update.
pub fn sgd_step(
    net: &mut Network,
    xs: &Matrix,
    labels: &[usize],
    state: &mut MomentumState,
    cfg: &TrainConfig,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset("batch"));
    }
    let (grads, loss) = batch_gradient(net, xs, labels)?;
    apply_gradient(net, &grads, state, cfg);
    Ok(loss)
}

/// The parameter update of [`sgd_step`] for an already computed gradient.
pub fn apply_gradient(net: &mut Network, grads: &Gradients, state: &mut MomentumState, cfg: &TrainConfig) {
    let (mu, lr) = (cfg.momentum, cfg.learning_rate);
    for ((layer, v), g) in net
        .layers_mut()
        .iter_mut()
        .zip(&mut state.velocity.layers)
        .zip(&grads.layers)
    {
        for ((w, vi), gi) in layer.weight.as_mut_slice().iter_mut().zip(&mut v.weight).zip(&g.weight) {
            *vi = mu * *vi + gi;
            *w -= lr * *vi;
        }
        for ((b, vi), gi) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
            *vi = mu * *vi + gi;
            *b -= lr * *vi;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean per-sample cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    /// `loss / n`, the mean loss divided again by the number of samples.
    pub loss_over_n: f64,
}

const EVAL_CHUNK: usize = 1000;

/// Mean loss and accuracy over a dataset. Predictions use the first maximal
/// logit.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let (mut total, mut correct) = (0.0, 0usize);
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let chunk = ds.select(&idx);
        let logits = batch_logits(net, &chunk.features)?;
        for (r, &label) in chunk.labels.iter().enumerate() {
            let row = logits.row(r);
            total += softmax_xent(row, label)?.0;
            if first_argmax(row) == label {
                correct += 1;
            }
        }
    }
    let n = ds.len() as f64;
    let loss = total / n;
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / n,
        loss_over_n: loss / n,
    })
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Metrics after a given number of completed epochs (0 = initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// `val_loss / batch_size`, kept for comparison with tables that report
    /// losses on that scale.
    pub val_loss_per_batch: f64,
    pub slope: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    /// Earliest epoch with the minimum validation loss; 0 when no epoch ran.
    pub optimal_epoch: usize,
}

impl TrainLog {
    /// One JSON object per line: the initial record, then each epoch.
    pub fn to_jsonl(&self) -> String {
        std::iter::once(&self.initial)
            .chain(&self.epochs)
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<TrainLog, serde_json::Error> {
        let mut recs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<EpochRecord>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if recs.is_empty() {
            return Err(serde::de::Error::custom("empty train log"));
        }
        let initial = recs.remove(0);
        let optimal_epoch = optimal_epoch(&recs);
        Ok(TrainLog {
            initial,
            epochs: recs,
            optimal_epoch,
        })
    }

    /// Mean slope for epochs 0..=E.
    pub fn slope_curve(&self) -> Vec<f64> {
        std::iter::once(&self.initial)
            .chain(&self.epochs)
            .map(|r| r.slope.mean)
            .collect()
    }

    pub fn record(&self, epoch: usize) -> &EpochRecord {
        if epoch == 0 {
            &self.initial
        } else {
            &self.epochs[epoch - 1]
        }
    }
}

fn optimal_epoch(epochs: &[EpochRecord]) -> usize {
    let mut best: Option<&EpochRecord> = None;
    for r in epochs {
        if best.is_none_or(|b| r.val_loss < b.val_loss) {
            best = Some(r);
        }
    }
    best.map_or(0, |r| r.epoch)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub log: TrainLog,
    pub initial: Network,
    pub optimal: Network,
    pub final_net: Network,
    /// Training-set indices of the fixed slope sample.
    pub slope_sample: Vec<usize>,
    pub initial_slopes: SlopeReport,
    pub optimal_slopes: SlopeReport,
}

impl TrainOutcome {
    /// Writes `train_log.jsonl`, `initial.ckpt`, `optimal.ckpt`, `final.ckpt`
    /// and the per-point slope reports into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("train_log.jsonl"))?;
        f.write_all(self.log.to_jsonl().as_bytes())?;
        save_checkpoint(&self.initial, &dir.join("initial.ckpt"))?;
        save_checkpoint(&self.optimal, &dir.join("optimal.ckpt"))?;
        save_checkpoint(&self.final_net, &dir.join("final.ckpt"))?;
        self.initial_slopes.write(dir, "slopes_initial")?;
        self.optimal_slopes.write(dir, "slopes_optimal")?;
        Ok(())
    }
}

/// Seeded choice of `min(k, n)` distinct training indices, in ascending order.
pub fn slope_sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx = permutation(n, &mut seeded(seed, Stream::SlopeSample));
    idx.truncate(k.min(n));
    idx.sort_unstable();
    idx
}

/// Trains `net` on `train_set`, evaluating on `val_set` and measuring the
/// slope on a fixed training sample after every epoch.
pub fn train(net: Network, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(net, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress(
    mut net: Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let slope_sample = slope_sample_indices(train_set.len(), cfg.slope_sample_size, cfg.seed);
    let slope_points = train_set.select(&slope_sample).features;

    let measure = |net: &Network, epoch: usize| -> Result<(EpochRecord, SlopeReport)> {
        let tr = evaluate(net, train_set)?;
        let va = evaluate(net, val_set)?;
        let report = mean_slope_with_ids(net, &slope_points, &slope_sample, cfg.p)?;
        if !(tr.loss.is_finite() && va.loss.is_finite() && report.summary.mean.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "epoch metrics",
                epoch,
                batch: 0,
                loss: tr.loss,
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            val_accuracy: va.accuracy,
            val_loss_per_batch: va.loss / cfg.batch_size as f64,
            slope: report.summary,
        };
        Ok((rec, report))
    };

    let initial = net.clone();
    let (initial_rec, initial_slopes) = measure(&net, 0)?;
    on_epoch(&initial_rec);

    let mut state = MomentumState::new(&net);
    let mut shuffle = seeded(cfg.seed, Stream::Shuffle);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut optimal = net.clone();
    let mut optimal_slopes = initial_slopes.clone();
    let mut best_val = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        let order = permutation(train_set.len(), &mut shuffle);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.select(idx);
            let loss = sgd_step(&mut net, &batch.features, &batch.labels, &mut state, cfg)?;
            if !loss.is_finite() || !state.velocity.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "batch loss or gradient",
                    epoch,
                    batch: b,
                    loss,
                });
            }
        }
        let (rec, report) = measure(&net, epoch)?;
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.4} slope {:.4}",
            rec.train_loss,
            rec.val_loss,
            rec.val_accuracy,
            rec.slope.mean
        );
        on_epoch(&rec);
        if rec.val_loss < best_val {
            best_val = rec.val_loss;
            optimal = net.clone();
            optimal_slopes = report;
        }
        epochs.push(rec);
    }

    let optimal_epoch = optimal_epoch(&epochs);
    if epochs.is_empty() {
        optimal = initial.clone();
    }
    Ok(TrainOutcome {
        config: cfg.clone(),
        log: TrainLog {
            initial: initial_rec,
            epochs,
            optimal_epoch,
        },
        initial,
        optimal,
        final_net: net,
        slope_sample,
        initial_slopes,
        optimal_slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, InputShape, NetworkSpec};

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed, Stream::Custom(1));
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let p = crate::slope::random_point(4, 1.0, &mut rng);
            labels.push(usize::from(p[0] + 0.5 * p[1] > 0.0) + usize::from(p[2] > 0.5));
            feats.extend(p);
        }
        Dataset::new(Matrix::new(n, 4, feats).unwrap(), labels, 3, InputShape::Flat(4)).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            epochs,
            batch_size: 16,
            slope_sample_size: 30,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn vanilla_step_moves_by_lr_times_gradient() {
        let ds = toy(10, 1);
        let net = Network::init(&NetworkSpec::dense(4, &[5], 3), 0).unwrap();
        let (g, _) = batch_gradient(&net, &ds.features, &ds.labels).unwrap();
        let c = TrainConfig {
            momentum: 0.0,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut stepped = net.clone();
        sgd_step(&mut stepped, &ds.features, &ds.labels, &mut MomentumState::new(&net), &c).unwrap();
        for ((a, b), gi) in net.flat_params().iter().zip(stepped.flat_params()).zip(g.flat()) {
            assert_eq!(b, a - 0.1 * gi);
        }
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut net = Network::init(&NetworkSpec::dense(2, &[2], 2), 0).unwrap();
        let before = net.flat_params();
        let mut state = MomentumState::new(&net);
        state.velocity.layers[0].weight[0] = 1.0;
        let zero = Gradients::zeros_like(&net);
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        apply_gradient(&mut net, &zero, &mut state, &c);
        assert_eq!(net.flat_params(), before);
        assert_eq!(state.velocity.layers[0].weight[0], 0.8);
    }

    #[test]
    fn repeated_gradient_second_step_is_1_8_times_first() {
        let mut net = Network::init(&NetworkSpec::dense(2, &[3], 2), 0).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers.iter_mut().for_each(|l| l.weight.iter_mut().for_each(|w| *w = 0.5));
        let c = TrainConfig::default();
        let mut state = MomentumState::new(&net);
        let p0 = net.flat_params();
        apply_gradient(&mut net, &g, &mut state, &c);
        let p1 = net.flat_params();
        apply_gradient(&mut net, &g, &mut state, &c);
        let p2 = net.flat_params();
        for i in 0..p0.len() {
            let (d1, d2) = (p1[i] - p0[i], p2[i] - p1[i]);
            if d1 != 0.0 {
                assert!((d2 / d1 - 1.8).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let (tr, va) = (toy(40, 1), toy(10, 2));
        let net = Network::init(&NetworkSpec::dense(4, &[6], 3), 1).unwrap();
        let out = train(net.clone(), &tr, &va, &cfg(0)).unwrap();
        assert!(out.log.epochs.is_empty());
        assert_eq!(out.log.optimal_epoch, 0);
        assert_eq!(out.optimal, net);
        assert_eq!(out.final_net, net);
    }

    #[test]
    fn zero_learning_rate_keeps_everything_constant() {
        let (tr, va) = (toy(40, 1), toy(10, 2));
        let net = Network::init(&NetworkSpec::dense(4, &[6], 3), 1).unwrap();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg(3)
        };
        let out = train(net.clone(), &tr, &va, &c).unwrap();
        assert_eq!(out.final_net, net);
        for r in &out.log.epochs {
            assert_eq!(r.slope, out.log.initial.slope);
        }
    }

    #[test]
    fn training_is_deterministic_and_optimal_epoch_is_argmin() {
        let (tr, va) = (toy(200, 1), toy(50, 2));
        let net = Network::init(&NetworkSpec::dense(4, &[16], 3), 1).unwrap();
        let a = train(net.clone(), &tr, &va, &cfg(6)).unwrap();
        let b = train(net, &tr, &va, &cfg(6)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_net, b.final_net);
        let best = a.log.record(a.log.optimal_epoch).val_loss;
        assert!(a.log.epochs.iter().all(|r| best <= r.val_loss));
        assert!(a.log.epochs.last().unwrap().val_accuracy > a.log.initial.val_accuracy);
        let parsed = TrainLog::from_jsonl(&a.log.to_jsonl()).unwrap();
        assert_eq!(parsed, a.log);
    }

    #[test]
    fn evaluate_matches_scalar_loop() {
        let ds = toy(100, 5);
        let net = Network::init(&NetworkSpec::dense(4, &[7, 5], 3), 2).unwrap();
        let e = evaluate(&net, &ds).unwrap();
        let (mut loss, mut hits) = (0.0, 0);
        for i in 0..ds.len() {
            let rec = forward(&net, ds.point(i)).unwrap();
            loss += softmax_xent(&rec.logits, ds.labels[i]).unwrap().0;
            hits += usize::from(rec.predicted_class() == ds.labels[i]);
        }
        assert!((e.loss - loss / 100.0).abs() < 1e-12);
        assert_eq!(e.accuracy, hits as f64 / 100.0);
    }
}
