//! Multi-label finding classifier on CXR embeddings.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, Graph, OptimizerState, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::trajectory::EMBED_DIM;

/// Radiological findings, in the order every artifact stores them.
pub const FINDINGS: [&str; 10] = [
    "No Finding",
    "Cardiomegaly",
    "Lung Opacity",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
];

pub const NUM_CLASSES: usize = FINDINGS.len();

pub fn finding_names() -> Vec<String> {
    FINDINGS.iter().map(|s| s.to_string()).collect()
}

/// Reject class lists that differ from [`FINDINGS`] in content or order.
pub fn check_classes(classes: &[String]) -> Result<()> {
    if classes.len() != NUM_CLASSES || classes.iter().zip(FINDINGS).any(|(a, b)| a != b) {
        return Err(Error::Schema(format!(
            "class list {classes:?} does not match the expected finding order {FINDINGS:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub embedding: Vec<f32>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of examples held out for the per-class AUROC report.
    pub holdout_fraction: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_dim: 256,
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            holdout_fraction: 0.2,
        }
    }
}

impl MlpConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden_dim == 0 {
            out.push("classifier.hidden_dim must be positive".into());
        }
        if self.epochs == 0 {
            out.push("classifier.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("classifier.batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("classifier.learning_rate ({}) must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("classifier.weight_decay ({}) must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            out.push(format!(
                "classifier.holdout_fraction ({}) must lie in [0, 1)",
                self.holdout_fraction
            ));
        }
        out
    }
}

/// `sigmoid(gelu(x W1 + b1) W2 + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub w1: Arc<Tensor<F>>,
    pub b1: Arc<Tensor<F>>,
    pub w2: Arc<Tensor<F>>,
    pub b2: Arc<Tensor<F>>,
}

pub const MLP_TENSORS: [&str; 4] = ["hidden.weight", "hidden.bias", "output.weight", "output.bias"];

impl<F: Real> Mlp<F> {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Tensor::from_fn([rows, cols], |_| F::of(rng.random_range(-bound..bound)))
        };
        let w1 = uniform(EMBED_DIM, hidden);
        let w2 = uniform(hidden, NUM_CLASSES);
        Mlp {
            w1: Arc::new(w1),
            b1: Arc::new(Tensor::zeros([hidden])),
            w2: Arc::new(w2),
            b2: Arc::new(Tensor::zeros([NUM_CLASSES])),
        }
    }

    pub fn from_tensors(mut tensors: Vec<Tensor<F>>) -> Result<Self> {
        if tensors.len() != 4 {
            return Err(Error::Schema(format!("classifier expects 4 tensors, found {}", tensors.len())));
        }
        let b2 = tensors.pop().unwrap();
        let w2 = tensors.pop().unwrap();
        let b1 = tensors.pop().unwrap();
        let w1 = tensors.pop().unwrap();
        let h = b1.len();
        let ok = w1.shape() == [EMBED_DIM, h] && w2.shape() == [h, NUM_CLASSES] && b2.shape() == [NUM_CLASSES];
        if !ok {
            return Err(Error::Schema(format!(
                "classifier tensor shapes {:?} {:?} {:?} {:?} are inconsistent",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        for t in [&w1, &b1, &w2, &b2] {
            if !t.is_finite() {
                return Err(Error::non_finite("classifier checkpoint"));
            }
        }
        Ok(Mlp {
            w1: Arc::new(w1),
            b1: Arc::new(b1),
            w2: Arc::new(w2),
            b2: Arc::new(b2),
        })
    }

    pub fn tensors(&self) -> [&Tensor<F>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        Mlp {
            w1: Arc::new(self.w1.cast()),
            b1: Arc::new(self.b1.cast()),
            w2: Arc::new(self.w2.cast()),
            b2: Arc::new(self.b2.cast()),
        }
    }

    fn logits_on(&self, g: &mut Graph<F>, x: Var, params: [Var; 4]) -> Result<Var> {
        let h = g.linear(x, params[0], Some(params[1]))?;
        let h = g.gelu(h)?;
        g.linear(h, params[2], Some(params[3]))
    }

    /// Probabilities for rows `x: [rows, 512]` with the weights held fixed.
    pub fn apply(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let params = [
            g.constant_shared(self.w1.clone()),
            g.constant_shared(self.b1.clone()),
            g.constant_shared(self.w2.clone()),
            g.constant_shared(self.b2.clone()),
        ];
        let z = self.logits_on(g, x, params)?;
        g.sigmoid(z)
    }

    /// Probabilities for each 512-wide row of `rows`, `[n, 10]` row-major.
    pub fn predict_rows(&self, rows: &[F]) -> Result<Vec<F>> {
        let n = rows.len() / EMBED_DIM;
        if n * EMBED_DIM != rows.len() {
            return Err(Error::Dimension {
                op: "mlp_predict",
                lhs: vec![rows.len()],
                rhs: vec![EMBED_DIM],
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("mlp_predict input"));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([n, EMBED_DIM], rows.to_vec())?);
        let p = self.apply(&mut g, x)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn predict(&self, embedding: &[F]) -> Result<Vec<F>> {
        self.predict_rows(embedding)
    }

    /// Per-hour classifier probabilities on the interpolated target track.
    pub fn soft_labels(&self, target_track: &[F]) -> Result<Vec<F>> {
        self.predict_rows(target_track)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub auroc: Option<f64>,
    pub positives: usize,
    pub n: usize,
}

fn validate_examples(examples: &[LabeledEmbedding]) -> Result<()> {
    for (i, e) in examples.iter().enumerate() {
        if e.embedding.len() != EMBED_DIM || e.labels.len() != NUM_CLASSES {
            return Err(Error::Data(format!(
                "example {i} has {} embedding values and {} labels, expected {EMBED_DIM} and {NUM_CLASSES}",
                e.embedding.len(),
                e.labels.len()
            )));
        }
        if e.labels.iter().any(|&l| l > 1) {
            return Err(Error::Data(format!("example {i} has labels outside {{0, 1}}")));
        }
        if e.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("example {i} has a non-finite embedding value")));
        }
    }
    Ok(())
}

/// Fit the classifier with per-class binary cross-entropy and report
/// per-class AUROC on a held-out split.
pub fn mlp_train<R: Rng + ?Sized>(
    examples: &[LabeledEmbedding],
    config: &MlpConfig,
    rng: &mut R,
) -> Result<(Mlp<f32>, Vec<ClassReport>)> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    validate_examples(examples)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let n_hold = (examples.len() as f64 * config.holdout_fraction).floor() as usize;
    let (held, train) = order.split_at(n_hold);
    for (c, name) in FINDINGS.iter().enumerate() {
        if !train.iter().any(|&i| examples[i].labels[c] == 1) {
            return Err(Error::Data(format!("class '{name}' has no positive training example")));
        }
    }

    let mut mlp: Mlp<f32> = Mlp::init(config.hidden_dim, rng);
    let adam = AdamWConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&mlp.tensors().map(|t| t.clone()), adam);
    let mut train: Vec<usize> = train.to_vec();
    for _ in 0..config.epochs {
        train.shuffle(rng);
        for batch in train.chunks(config.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(
                [batch.len(), EMBED_DIM],
                batch.iter().flat_map(|&i| examples[i].embedding.iter().copied()).collect(),
            )?);
            let y = g.constant(Tensor::new(
                [batch.len(), NUM_CLASSES],
                batch
                    .iter()
                    .flat_map(|&i| examples[i].labels.iter().map(|&l| l as f32))
                    .collect(),
            )?);
            let params = [
                g.param(mlp.w1.clone()),
                g.param(mlp.b1.clone()),
                g.param(mlp.w2.clone()),
                g.param(mlp.b2.clone()),
            ];
            let z = mlp.logits_on(&mut g, x, params)?;
            let loss = g.bce_with_logits(z, y)?;
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = params
                .iter()
                .map(|&p| g.take_grad(p).expect("classifier parameter gradient"))
                .collect();
            drop(g);
            let mut weights = [mlp.w1.clone(), mlp.b1.clone(), mlp.w2.clone(), mlp.b2.clone()];
            [mlp.w1, mlp.b1, mlp.w2, mlp.b2] = [(); 4].map(|_| Arc::new(Tensor::zeros([0])));
            opt.step_shared(&mut weights, &grads)?;
            [mlp.w1, mlp.b1, mlp.w2, mlp.b2] = weights;
        }
    }

    let rows: Vec<f32> = held.iter().flat_map(|&i| examples[i].embedding.iter().copied()).collect();
    let probs = mlp.predict_rows(&rows)?;
    let report = FINDINGS
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let scores: Vec<f64> = (0..held.len()).map(|r| probs[r * NUM_CLASSES + c] as f64).collect();
            let labels: Vec<bool> = held.iter().map(|&i| examples[i].labels[c] == 1).collect();
            ClassReport {
                class: name.to_string(),
                auroc: auroc(&scores, &labels),
                positives: labels.iter().filter(|&&l| l).count(),
                n: labels.len(),
            }
        })
        .collect();
    Ok((mlp, report))
}
