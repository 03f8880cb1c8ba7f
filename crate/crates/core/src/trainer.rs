//! Composite objective and the optimization loop.
//!
//! The loss on a batch is `(1 - alpha) * mse + alpha * bce`, where `mse` is
//! the per-sequence time-averaged squared L2 distance between predicted and
//! target embeddings and `bce` compares classifier probabilities on the
//! prediction with soft labels from the target track. Each sequence's first
//! hour is excluded because its target equals its input.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamWConfig, Graph, LrSchedule, OptimizerState, Real, Reduction, Tensor, Var};
use crate::classifier::{Mlp, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{shift_right, DecoderInput, Model, SeqRef};
use crate::rng;
use crate::trajectory::{PatientWindow, EMBED_DIM};

pub const BCE_EPS: f64 = 1e-7;

/// How the cross-entropy term is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BceNormalization {
    /// Mean over loss hours and classes, then over sequences.
    PerHour,
    /// Sum over hours and classes, mean over sequences.
    Strict,
}

/// Which track the classifier scores inside the cross-entropy term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// The decoder output.
    Predicted,
    /// The previous-CXR track; the term then carries no gradient.
    Previous,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub num_classes: usize,
    pub grad_clip_norm: f64,
    pub split: SplitFractions,
    pub bce_normalization: BceNormalization,
    pub classifier_input: ClassifierInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            epochs: 100,
            early_stop_patience: 10,
            batch_size: 32,
            warmup_fraction: 0.10,
            dropout: 0.1,
            alpha: 0.5,
            num_classes: NUM_CLASSES,
            grad_clip_norm: 1.0,
            split: SplitFractions {
                train: 0.70,
                val: 0.15,
                test: 0.15,
            },
            bce_normalization: BceNormalization::PerHour,
            classifier_input: ClassifierInput::Predicted,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("train.learning_rate", self.learning_rate),
            ("train.grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} ({v}) must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("train.weight_decay ({}) must be >= 0", self.weight_decay));
        }
        for (name, v) in [
            ("train.epochs", self.epochs),
            ("train.early_stop_patience", self.early_stop_patience),
            ("train.batch_size", self.batch_size),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            out.push(format!("train.warmup_fraction ({}) must lie in [0, 1)", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("train.dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            out.push(format!("train.alpha ({}) must lie in [0, 1]", self.alpha));
        }
        if self.num_classes != NUM_CLASSES {
            out.push(format!("train.num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|&f| !(f > 0.0)) || ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            out.push(format!(
                "train.split fractions ({}, {}, {}) must be positive and sum to 1",
                s.train, s.val, s.test
            ));
        }
        out
    }
}

/// Per-row weights realizing a mean over sequences of per-sequence means
/// over loss hours, each row's terms additionally divided by `per_row`.
/// `norm_count` is the number of sequences the mean runs over.
pub fn row_weights<F: Real>(lengths: &[usize], skip_first: bool, per_row: f64, time_mean: bool, norm_count: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(lengths.iter().sum());
    for &len in lengths {
        let first = usize::from(skip_first);
        let hours = len.saturating_sub(first).max(1) as f64;
        let w = 1.0 / (norm_count as f64 * per_row * if time_mean { hours } else { 1.0 });
        for r in 0..len {
            out.push(if r < first { F::zero() } else { F::of(w) });
        }
    }
    out
}

/// Mean over sequences of the time-averaged squared L2 distance.
pub fn loss_mse<F: Real>(g: &mut Graph<F>, pred: Var, target: Var, lengths: &[usize], skip_first: bool) -> Result<Var> {
    loss_mse_over(g, pred, target, lengths, skip_first, lengths.len())
}

fn loss_mse_over<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    target: Var,
    lengths: &[usize],
    skip_first: bool,
    norm_count: usize,
) -> Result<Var> {
    let w = row_weights(lengths, skip_first, 1.0, true, norm_count);
    g.sq_err(pred, target, Reduction::RowWeighted(w))
}

/// Negative Bernoulli log-likelihood of soft labels `y` under `p`, clamped
/// at [`BCE_EPS`].
pub fn loss_bce<F: Real>(
    g: &mut Graph<F>,
    p: Var,
    y: Var,
    lengths: &[usize],
    skip_first: bool,
    norm: BceNormalization,
) -> Result<Var> {
    loss_bce_over(g, p, y, lengths, skip_first, norm, lengths.len())
}

fn loss_bce_over<F: Real>(
    g: &mut Graph<F>,
    p: Var,
    y: Var,
    lengths: &[usize],
    skip_first: bool,
    norm: BceNormalization,
    norm_count: usize,
) -> Result<Var> {
    let classes = *g.shape(p).last().unwrap_or(&1) as f64;
    let w = match norm {
        BceNormalization::PerHour => row_weights(lengths, skip_first, classes, true, norm_count),
        BceNormalization::Strict => row_weights(lengths, skip_first, 1.0, false, norm_count),
    };
    g.bce(p, y, BCE_EPS, Reduction::RowWeighted(w))
}

/// `(1 - alpha) * mse + alpha * bce`.
pub fn loss_total<F: Real>(g: &mut Graph<F>, mse: Var, bce: Var, alpha: f64) -> Result<Var> {
    let a = g.scale(mse, F::of(1.0 - alpha))?;
    let b = g.scale(bce, F::of(alpha))?;
    g.add(a, b)
}

/// A patient window prepared for the model: fused inputs, shifted decoder
/// inputs, targets and the classifier's view of them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSeq<F> {
    pub patient_id: String,
    pub inputs: Vec<F>,
    pub decoder_inputs: Vec<F>,
    pub target: Vec<F>,
    /// Classifier probabilities on the target track, `[len, 10]`.
    pub soft_labels: Vec<F>,
    /// Classifier probabilities on the previous-CXR track, `[len, 10]`.
    pub previous_probs: Vec<F>,
}

impl<F: Real> TrainSeq<F> {
    pub fn from_window(w: &PatientWindow, mlp: &Mlp<F>, decoder: DecoderInput) -> Result<Self> {
        let fused = w.fused()?;
        let conv = |v: &[f32]| v.iter().map(|&x| F::of(x as f64)).collect::<Vec<F>>();
        let target = conv(&w.track.target);
        let prime = conv(&w.events[0].embedding);
        let previous = conv(&w.track.previous);
        Ok(TrainSeq {
            patient_id: w.patient_id.clone(),
            inputs: conv(&fused.data),
            decoder_inputs: match decoder {
                DecoderInput::Previous => previous.clone(),
                DecoderInput::Target => shift_right(&prime, &target, EMBED_DIM),
            },
            soft_labels: mlp.soft_labels(&target)?,
            previous_probs: mlp.predict_rows(&previous)?,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len() / EMBED_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub mse: Var,
    pub bce: Var,
    pub total: Var,
    pub params: Vec<Var>,
}

/// Record the composite loss of `batch` on `g`. `norm_count` is the number of
/// sequences the loss averages over (the batch size, or a whole split when
/// batches are summed).
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    model: &Model<F>,
    mlp: &Mlp<F>,
    batch: &[&TrainSeq<F>],
    config: &TrainConfig,
    rng: &mut R,
    train: bool,
    norm_count: usize,
) -> Result<BatchLoss> {
    let refs: Vec<SeqRef<F>> = batch
        .iter()
        .map(|s| SeqRef {
            inputs: &s.inputs,
            decoder_inputs: &s.decoder_inputs,
        })
        .collect();
    let pass = model.build(g, &refs, rng, train)?;
    let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
    let rows: usize = lengths.iter().sum();
    let target = g.constant(Tensor::new(
        [rows, EMBED_DIM],
        batch.iter().flat_map(|s| s.target.iter().copied()).collect(),
    )?);
    let y = g.constant(Tensor::new(
        [rows, NUM_CLASSES],
        batch.iter().flat_map(|s| s.soft_labels.iter().copied()).collect(),
    )?);
    let p = match config.classifier_input {
        ClassifierInput::Predicted => mlp.apply(g, pass.output)?,
        ClassifierInput::Previous => g.constant(Tensor::new(
            [rows, NUM_CLASSES],
            batch.iter().flat_map(|s| s.previous_probs.iter().copied()).collect(),
        )?),
    };
    let mse = loss_mse_over(g, pass.output, target, &lengths, true, norm_count)?;
    let bce = loss_bce_over(g, p, y, &lengths, true, config.bce_normalization, norm_count)?;
    let total = loss_total(g, mse, bce, config.alpha)?;
    Ok(BatchLoss {
        mse,
        bce,
        total,
        params: pass.params,
    })
}

/// Composite loss over a whole split, teacher-forced with dropout off.
pub fn evaluate_loss<F: Real>(
    model: &Model<F>,
    mlp: &Mlp<F>,
    seqs: &[TrainSeq<F>],
    config: &TrainConfig,
) -> Result<LossValues> {
    let mut total = LossValues::default();
    // dropout is off, so this generator is never drawn from
    let mut idle = rng::substream(0, "evaluation");
    for chunk in seqs.chunks(config.batch_size) {
        let batch: Vec<&TrainSeq<F>> = chunk.iter().collect();
        let mut g = Graph::new();
        let l = batch_loss(&mut g, model, mlp, &batch, config, &mut idle, false, seqs.len())?;
        total.mse += g.value(l.mse).item().f64();
        total.bce += g.value(l.bce).item().f64();
        total.total += g.value(l.total).item().f64();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mse: f64,
    pub bce: f64,
    pub total: f64,
}

/// Stops once the monitored loss has not improved for `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record `loss` for 1-based `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub mse: f64,
    pub bce: f64,
    pub total: f64,
    /// Filled on the last step of each epoch.
    pub val_total: Option<f64>,
}

pub const LOG_COLUMNS: [&str; 8] = ["step", "epoch", "lr", "grad_norm", "mse", "bce", "total", "val_total"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val_total: f64,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(LOG_COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<LogRow>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model<f32>,
    pub log: TrainLog,
    pub epochs_run: usize,
    /// Set when a non-finite loss aborted training at this step.
    pub diverged_at: Option<usize>,
    pub dropout_rng: rand_chacha::ChaCha8Rng,
}

/// Seeded patient-level split into train, validation and test index sets.
pub fn split_indices(n: usize, fractions: SplitFractions, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, rng::SPLIT));
    let n_train = (n as f64 * fractions.train).round() as usize;
    let n_val = ((n as f64 * fractions.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    [idx, val, test]
}

/// Teacher-forced training with AdamW, warmup-cosine schedule, global-norm
/// clipping and early stopping on the validation loss. Returns the best
/// validation checkpoint.
pub fn train(
    train_set: &[TrainSeq<f32>],
    val_set: &[TrainSeq<f32>],
    mut model: Model<f32>,
    mlp: &Mlp<f32>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation splits, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    if (model.config.dropout_rate - config.dropout).abs() > 0.0 {
        return Err(Error::Config(vec![format!(
            "model.dropout_rate ({}) and train.dropout ({}) disagree",
            model.config.dropout_rate, config.dropout
        )]));
    }
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = LrSchedule::new(config.learning_rate, total_steps, config.warmup_fraction);
    let adam = AdamWConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let params_now: Vec<Tensor<f32>> = model.params.iter().map(|p| (**p).clone()).collect();
    let mut opt = OptimizerState::new(&params_now, adam);
    drop(params_now);
    let mut data_rng = rng::substream(seed, rng::DATA);
    let mut dropout_rng = rng::substream(seed, rng::DROPOUT);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut log = TrainLog::default();
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut epochs_run = 0;
    let mut diverged_at = None;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut data_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainSeq<f32>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = schedule.lr_at(step)?;
            let mut g = Graph::new();
            let outcome = batch_loss(&mut g, &model, mlp, &batch, config, &mut dropout_rng, true, batch.len())
                .and_then(|l| g.backward(l.total).map(|_| l));
            let l = match outcome {
                Ok(l) => l,
                Err(Error::NonFinite { op }) => {
                    log::error!("non-finite value in {op} at step {step}; keeping the last good checkpoint");
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grads: Vec<Tensor<f32>> = l
                .params
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            let values = LossValues {
                mse: g.value(l.mse).item() as f64,
                bce: g.value(l.bce).item() as f64,
                total: g.value(l.total).item() as f64,
            };
            drop(g);
            let grad_norm = clip_global_norm(&mut grads, config.grad_clip_norm);
            opt.set_lr(lr);
            opt.step_shared(&mut model.params, &grads)?;
            log.rows.push(LogRow {
                step,
                epoch,
                lr,
                grad_norm,
                mse: values.mse,
                bce: values.bce,
                total: values.total,
                val_total: None,
            });
            step += 1;
        }
        epochs_run = epoch;
        let val = match evaluate_loss(&model, mlp, val_set, config) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                log::error!("non-finite validation value in {op} after epoch {epoch}");
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(last) = log.rows.last_mut() {
            last.val_total = Some(val.total);
        }
        let (improved, stop) = stopper.observe(epoch, val.total);
        if improved {
            best = model.clone();
        }
        log::info!(
            "epoch {epoch}: train total {:.5}, val total {:.5} (mse {:.5}, bce {:.5}){}",
            log.rows.last().map(|r| r.total).unwrap_or(f64::NAN),
            val.total,
            val.mse,
            val.bce,
            if improved { " *" } else { "" }
        );
        if stop {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch;
    log.best_val_total = stopper.best;
    Ok(TrainOutcome {
        model: best,
        log,
        epochs_run,
        diverged_at,
        dropout_rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn mse_example_and_mean_semantics() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full([1, 512], 0.1));
        let t = g.constant(Tensor::zeros([1, 512]));
        let l = loss_mse(&mut g, p, t, &[1], false).unwrap();
        assert!((scalar(&g, l) - 5.12).abs() < 1e-12);
        let same = loss_mse(&mut g, p, p, &[1], false).unwrap();
        assert_eq!(scalar(&g, same), 0.0);

        let a = Tensor::from_fn([3, 4], |i| i as f64 * 0.1);
        let mut twice = a.data().to_vec();
        twice.extend_from_slice(a.data());
        let p1 = g.constant(a);
        let t1 = g.constant(Tensor::zeros([3, 4]));
        let p2 = g.constant(Tensor::new([6, 4], twice).unwrap());
        let t2 = g.constant(Tensor::zeros([6, 4]));
        let one = loss_mse(&mut g, p1, t1, &[3], true).unwrap();
        let two = loss_mse(&mut g, p2, t2, &[3, 3], true).unwrap();
        assert!((scalar(&g, one) - scalar(&g, two)).abs() < 1e-15);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let half = g.constant(Tensor::full([2, 10], 0.5));
        let y = g.constant(Tensor::from_fn([2, 10], |i| (i % 3) as f64 / 2.0));
        let l = loss_bce(&mut g, half, y, &[2], false, BceNormalization::PerHour).unwrap();
        assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-15);
        let strict = loss_bce(&mut g, half, y, &[2], false, BceNormalization::Strict).unwrap();
        assert!((scalar(&g, strict) - 20.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let hard = g.constant(Tensor::from_fn([1, 10], |i| (i % 2) as f64));
        let l = loss_bce(&mut g, hard, hard, &[1], false, BceNormalization::PerHour).unwrap();
        assert!(scalar(&g, l) < 1e-6);
    }

    #[test]
    fn total_is_the_convex_combination() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(4.0));
        for (alpha, want) in [(0.0, 2.0), (1.0, 4.0), (0.5, 3.0)] {
            let t = loss_total(&mut g, m, b, alpha).unwrap();
            assert_eq!(scalar(&g, t), want);
        }
    }

    #[test]
    fn patience_example() {
        let mut s = EarlyStopping::new(10);
        let losses = [1.0, 0.9, 0.95, 0.9, 1.2, 0.91, 0.99, 0.9, 1.0, 0.93, 0.9, 0.97];
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if s.observe(i + 1, l).1 {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(12));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn split_is_a_partition() {
        let f = TrainConfig::default().split;
        let [a, b, c] = split_indices(1000, f, 3);
        assert_eq!((a.len(), b.len(), c.len()), (700, 150, 150));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, f, 3)[0], a);
    }

    #[test]
    fn default_recipe() {
        let c = TrainConfig::default();
        assert!(c.problems().is_empty());
        assert_eq!(
            (c.learning_rate, c.weight_decay, c.epochs, c.early_stop_patience, c.batch_size),
            (5e-4, 0.01, 100, 10, 32)
        );
        assert_eq!((c.warmup_fraction, c.dropout, c.alpha, c.num_classes), (0.1, 0.1, 0.5, 10));
    }
}
