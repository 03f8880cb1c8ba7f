use std::sync::Arc;

use cxrcast::autodiff::Tensor;
use cxrcast::classifier::{mlp_train, LabeledEmbedding, Mlp, MlpConfig};
use cxrcast::metrics::{EvalReport, ReportRow};
use cxrcast::model::{DecoderInput, Model, ModelConfig, FUSED_DIM};
use cxrcast::trainer::{evaluate_loss, train, TrainConfig, TrainSeq};
use cxrcast::trajectory::EMBED_DIM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CLASSES: usize = 10;

fn separable(n: usize, seed: u64) -> Vec<LabeledEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut embedding: Vec<f32> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let labels: Vec<u8> = (0..CLASSES).map(|_| rng.random_bool(0.3) as u8).collect();
            // one coordinate per class carries the label with a unit margin
            for (c, &l) in labels.iter().enumerate() {
                let m = 1.0 + embedding[c * 3].abs();
                embedding[c * 3] = if l == 1 { m } else { -m };
            }
            LabeledEmbedding { embedding, labels }
        })
        .collect()
}

fn small_mlp_config() -> MlpConfig {
    MlpConfig {
        hidden_dim: 32,
        epochs: 25,
        batch_size: 32,
        learning_rate: 3e-3,
        weight_decay: 0.01,
        holdout_fraction: 0.25,
    }
}

#[test]
fn classifier_separates_linearly_separable_classes() {
    let data = separable(3000, 1);
    let (_, report) = mlp_train(&data, &small_mlp_config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for r in &report {
        let a = r.auroc.unwrap();
        assert!(a > 0.99, "{}: held-out AUROC {a}", r.class);
    }
}

#[test]
fn classifier_training_is_deterministic() {
    let data = separable(300, 5);
    let cfg = MlpConfig { epochs: 2, ..small_mlp_config() };
    let (a, ra) = mlp_train(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let (b, rb) = mlp_train(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn classifier_forward_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hidden = 5;
    let mut t = |shape: &[usize]| {
        Arc::new(Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-0.2f64..0.2)))
    };
    let mlp = Mlp { w1: t(&[EMBED_DIM, hidden]), b1: t(&[hidden]), w2: t(&[hidden, CLASSES]), b2: t(&[CLASSES]) };
    let x: Vec<f64> = (0..2 * EMBED_DIM).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    let got = mlp.predict_rows(&x).unwrap();
    for r in 0..2 {
        let row = &x[r * EMBED_DIM..(r + 1) * EMBED_DIM];
        let h: Vec<f64> = (0..hidden)
            .map(|j| gelu(mlp.b1.data()[j] + (0..EMBED_DIM).map(|i| row[i] * mlp.w1.data()[i * hidden + j]).sum::<f64>()))
            .collect();
        for c in 0..CLASSES {
            let z = mlp.b2.data()[c] + (0..hidden).map(|j| h[j] * mlp.w2.data()[j * CLASSES + c]).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            assert!((got[r * CLASSES + c] - p).abs() < 1e-12);
        }
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        ff_dim: 32,
        dropout_rate: 0.1,
        max_sequence_hours: 32,
        ..ModelConfig::default()
    }
}

fn random_seqs(n: usize, mlp: &Mlp<f32>, seed: u64) -> Vec<TrainSeq<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(3..10);
            let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>();
            let target = v(len * EMBED_DIM);
            let previous = v(len * EMBED_DIM);
            TrainSeq {
                patient_id: format!("P{i}"),
                inputs: v(len * FUSED_DIM),
                decoder_inputs: previous.clone(),
                soft_labels: mlp.predict_rows(&target).unwrap(),
                previous_probs: mlp.predict_rows(&previous).unwrap(),
                target,
            }
        })
        .collect()
}

fn recipe(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, ..TrainConfig::default() }
}

#[test]
fn validation_loss_leaves_state_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mlp: Mlp<f32> = Mlp::init(16, &mut rng);
    let model: Model<f32> = Model::init(tiny_model(), &mut rng).unwrap();
    let before = model.clone();
    let seqs = random_seqs(5, &mlp, 8);
    let a = evaluate_loss(&model, &mlp, &seqs, &recipe(1)).unwrap();
    let b = evaluate_loss(&model, &mlp, &seqs, &recipe(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
    assert!((a.total - (0.5 * a.mse + 0.5 * a.bce)).abs() < 1e-4 * a.total.abs());
}

#[test]
fn training_is_reproducible_and_logs_every_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mlp: Mlp<f32> = Mlp::init(16, &mut rng);
    let model: Model<f32> = Model::init(tiny_model(), &mut rng).unwrap();
    let seqs = random_seqs(7, &mlp, 12);
    let (tr, val) = seqs.split_at(5);
    let a = train(tr, val, model.clone(), &mlp, &recipe(3), 42).unwrap();
    let b = train(tr, val, model.clone(), &mlp, &recipe(3), 42).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.rows, b.log.rows);
    assert_eq!(a.log.rows.len(), 3 * 3);
    let schedule = cxrcast::autodiff::LrSchedule::new(5e-4, 9, 0.1);
    for r in &a.log.rows {
        assert_eq!(r.lr, schedule.lr_at(r.step).unwrap());
    }
    assert!(a.log.rows.iter().all(|r| r.grad_norm.is_finite()));
    let vals: Vec<f64> = a.log.rows.iter().filter_map(|r| r.val_total).collect();
    assert_eq!(vals.len(), 3);
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(a.log.best_val_total, best);
    assert_eq!(vals[a.log.best_epoch - 1], best);
    assert_eq!(evaluate_loss(&a.model, &mlp, val, &recipe(3)).unwrap().total, best);
    let c = train(tr, val, model, &mlp, &recipe(3), 43).unwrap();
    assert_ne!(a.log.rows, c.log.rows);
}

#[test]
fn dropout_disagreement_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mlp: Mlp<f32> = Mlp::init(8, &mut rng);
    let model: Model<f32> = Model::init(ModelConfig { dropout_rate: 0.2, ..tiny_model() }, &mut rng).unwrap();
    let seqs = random_seqs(3, &mlp, 2);
    assert!(train(&seqs[..2], &seqs[2..], model, &mlp, &recipe(1), 0).is_err());
}

#[test]
fn decoder_input_modes_differ_only_in_decoder_track() {
    use cxrcast::trajectory::{CxrEvent, PatientWindow};
    let events: Vec<CxrEvent> = [2usize, 6, 9]
        .iter()
        .enumerate()
        .map(|(k, &hour)| CxrEvent { hour, embedding: vec![k as f32; EMBED_DIM], labels: None })
        .collect();
    let vars = cxrcast::clinical::VariableSet::default_icu();
    let w = PatientWindow::build("P", &[], &events, 12, &vars).unwrap();
    let mlp: Mlp<f32> = Mlp::init(8, &mut ChaCha8Rng::seed_from_u64(0));
    let prev = TrainSeq::from_window(&w, &mlp, DecoderInput::Previous).unwrap();
    let tgt = TrainSeq::from_window(&w, &mlp, DecoderInput::Target).unwrap();
    assert_eq!(prev.inputs, tgt.inputs);
    assert_eq!(prev.target, tgt.target);
    assert_eq!(prev.decoder_inputs, w.track.previous);
    // target mode: first row is the first CXR, then the target shifted by one hour
    assert_eq!(&tgt.decoder_inputs[..EMBED_DIM], events[0].embedding.as_slice());
    assert_eq!(&tgt.decoder_inputs[EMBED_DIM..], &tgt.target[..tgt.target.len() - EMBED_DIM]);
}

#[test]
fn report_csv_round_trips() {
    let rows = vec![
        ReportRow {
            class: "Edema".into(),
            horizon: "12h".into(),
            system: "model".into(),
            auroc: Some(0.8125),
            auprc: None,
            accuracy: Some(0.75),
            prevalence: Some(0.25),
            n: 40,
        },
        ReportRow {
            class: "Average".into(),
            horizon: "current".into(),
            system: "baseline".into(),
            auroc: Some(1.0 / 3.0),
            auprc: Some(0.1),
            accuracy: None,
            prevalence: None,
            n: 0,
        },
    ];
    let report = EvalReport { rows };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    report.write_csv(&path).unwrap();
    assert_eq!(EvalReport::read_csv(&path).unwrap(), report);
}
