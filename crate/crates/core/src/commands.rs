//! The six pipeline commands. Each validates its configuration before doing
//! any work, writes into a fresh run directory and leaves a manifest there.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{check_classes, finding_names, mlp_train, Mlp, FINDINGS, MLP_TENSORS, NUM_CLASSES};
use crate::clinical::VariableSet;
use crate::config::{fresh_run_dir, Command, FileHash, RunConfig, RunManifest};
use crate::error::{Error, Result};
use crate::io::{read_blob, read_checkpoint, read_cohort, read_jsonl, sha256_file, write_blob, write_checkpoint, SCHEMA_VERSION};
use crate::metrics::{evaluate_scores, headline};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{build_windows, predict_window, score_window, train_sequences};
use crate::rng::{self, RngState};
use crate::synth::generate;
use crate::trainer::{split_indices, train, TrainConfig};
use crate::trajectory::{CxrEvent, PatientWindow, EMBED_DIM};

pub const CONFIG_FILE: &str = "config.json";
pub const TENSOR_DIR: &str = "tensors";
pub const TENSOR_INDEX: &str = "index.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const CLASSIFIER_REPORT: &str = "classifier_report.csv";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const LEAD_CURVE: &str = "lead_curve.csv";
pub const PREDICTIONS: &str = "predictions.csv";
const CLASSIFIER_STREAM: &str = "classifier";

/// Inputs read and outputs written so far.
#[derive(Default)]
struct Ledger {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ledger {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn outputs(&mut self, ps: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(ps);
    }
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Run `command` into `out` (or a fresh directory under the output root).
pub fn run(command: Command, config: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    config.validate(command)?;
    let dir = fresh_run_dir(out, command, &config.hash())?;
    let mut manifest = RunManifest::start(command, config);
    manifest.write(&dir)?;
    let mut ledger = Ledger::default();
    let result = write_config(&dir, config, &mut ledger).and_then(|_| match command {
        Command::Synth => synth(config, &dir, &mut ledger),
        Command::Preprocess => preprocess(config, &dir, &mut ledger),
        Command::TrainClassifier => train_classifier(config, &dir, &mut ledger),
        Command::Train => train_model(config, &dir, &mut ledger),
        Command::Evaluate => evaluate(config, &dir, &mut ledger),
        Command::Predict => predict(config, &dir, &mut ledger),
    });
    manifest.inputs = hash_all(&ledger.inputs, None);
    manifest.outputs = hash_all(&ledger.outputs, Some(&dir));
    manifest.outputs_hash = RunManifest::outputs_digest(&manifest.outputs);
    manifest.finished_unix = Some(crate::config::now_unix());
    manifest.complete = result.is_ok();
    manifest.error = result.as_ref().err().map(|e| e.to_string());
    manifest.write(&dir)?;
    result.map(|_| RunOutcome { dir, manifest })
}

fn hash_all(paths: &[PathBuf], base: Option<&Path>) -> Vec<FileHash> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| FileHash {
            path: base
                .and_then(|b| p.strip_prefix(b).ok())
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned(),
            sha256: sha256_file(p).unwrap_or_default(),
        })
        .collect()
}

fn write_config(dir: &Path, config: &RunConfig, ledger: &mut Ledger) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, config.canonical_json()).map_err(|e| Error::io(&path, e))?;
    ledger.outputs([path]);
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(vec![format!("{name} is required")]))
}

fn variables(config: &RunConfig, ledger: &mut Ledger) -> Result<VariableSet> {
    match &config.preprocess.variables {
        Some(p) => VariableSet::load(&ledger.input(p)),
        None => Ok(VariableSet::default_icu()),
    }
}

fn synth(config: &RunConfig, dir: &Path, ledger: &mut Ledger) -> Result<()> {
    let vars = variables(config, ledger)?;
    let cohort = generate(&config.synth, &vars, config.seed)?;
    log::info!(
        "generated {} patients and {} labeled embeddings",
        cohort.patients.len(),
        cohort.labeled.len()
    );
    ledger.outputs(cohort.write(dir, config.synth.write_latent_truth)?);
    Ok(())
}

/// Index of a preprocessed tensor directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndex {
    pub schema_version: u32,
    pub columns: Vec<String>,
    /// Blob manifest file per patient, in cohort order.
    pub patients: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub patient_id: String,
    pub blob: String,
}

/// Write a window as a tensor blob; returns the `.bin` and `.json` paths.
pub fn write_window(dir: &Path, w: &PatientWindow) -> Result<[PathBuf; 2]> {
    let k = w.events.len();
    let len = w.len();
    let mask: Vec<f32> = w.observed_mask.iter().map(|&m| f32::from(u8::from(m))).collect();
    let hours: Vec<f32> = w.events.iter().map(|e| e.hour as f32).collect();
    let embeddings: Vec<f32> = w.events.iter().flat_map(|e| e.embedding.iter().copied()).collect();
    let labels: Vec<f32> = w
        .events
        .iter()
        .flat_map(|e| match &e.labels {
            Some(l) => l.iter().map(|&v| v as f32).collect(),
            None => vec![-1.0; NUM_CLASSES],
        })
        .collect();
    write_blob(
        dir,
        &w.patient_id,
        (w.track.t_first, w.track.t_last),
        &[
            ("features", vec![len, w.n_features], &w.features),
            ("observed_mask", vec![len, w.n_features], &mask),
            ("anchor_hours", vec![k], &hours),
            ("anchor_embeddings", vec![k, EMBED_DIM], &embeddings),
            ("anchor_labels", vec![k, NUM_CLASSES], &labels),
        ],
    )
}

/// Rebuild a window from its blob manifest.
pub fn read_window(sidecar: &Path) -> Result<PatientWindow> {
    let blob = read_blob(sidecar)?;
    let features = blob.get("features")?;
    let n = *features.shape().last().unwrap_or(&0);
    let mask = blob.get("observed_mask")?.data().iter().map(|&v| v != 0.0).collect();
    let hours = blob.get("anchor_hours")?.data();
    let embeddings = blob.get("anchor_embeddings")?.data();
    let labels = blob.get("anchor_labels")?.data();
    if embeddings.len() != hours.len() * EMBED_DIM || labels.len() != hours.len() * NUM_CLASSES {
        return Err(Error::Schema(format!("{}: anchor arrays disagree in length", sidecar.display())));
    }
    let events = hours
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let l = &labels[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            CxrEvent {
                hour: h as usize,
                embedding: embeddings[i * EMBED_DIM..(i + 1) * EMBED_DIM].to_vec(),
                labels: (l[0] >= 0.0).then(|| l.iter().map(|&v| v as u8).collect()),
            }
        })
        .collect();
    let w = PatientWindow::from_parts(
        blob.manifest.patient_id.clone(),
        features.data().to_vec(),
        mask,
        n,
        events,
    )?;
    if [w.track.t_first, w.track.t_last] != blob.manifest.window {
        return Err(Error::Schema(format!(
            "{}: window {:?} does not match anchors {}..={}",
            sidecar.display(),
            blob.manifest.window,
            w.track.t_first,
            w.track.t_last
        )));
    }
    Ok(w)
}

fn preprocess(config: &RunConfig, dir: &Path, ledger: &mut Ledger) -> Result<()> {
    let vars = variables(config, ledger)?;
    let cohort_path = ledger.input(required(&config.preprocess.cohort, "preprocess.cohort")?);
    let records = read_cohort(&cohort_path)?;
    let windows = build_windows(&records, &vars)?;
    let tdir = dir.join(TENSOR_DIR);
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut patients = Vec::with_capacity(windows.len());
    for w in &windows {
        let [bin, json] = write_window(&tdir, w)?;
        patients.push(IndexEntry {
            patient_id: w.patient_id.clone(),
            blob: json.file_name().unwrap().to_string_lossy().into_owned(),
        });
        ledger.outputs([bin, json]);
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = patients.iter().find(|p| !seen.insert(p.blob.as_str())) {
        return Err(Error::Data(format!("two patients map to blob {}", dup.blob)));
    }
    let index = TensorIndex {
        schema_version: SCHEMA_VERSION,
        columns: vars.column_names(),
        patients,
    };
    let path = tdir.join(TENSOR_INDEX);
    write_pretty(&path, &index)?;
    ledger.outputs([path]);
    log::info!("wrote {} patient windows", windows.len());
    Ok(())
}

/// Windows of a tensor directory, in index order.
pub fn load_tensors(tdir: &Path) -> Result<Vec<PatientWindow>> {
    let path = tdir.join(TENSOR_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: TensorIndex = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if index.schema_version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: index.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    index.patients.iter().map(|p| read_window(&tdir.join(&p.blob))).collect()
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_classifier(config: &RunConfig, dir: &Path, ledger: &mut Ledger) -> Result<()> {
    let path = ledger.input(required(
        &config.train_classifier.labeled_embeddings,
        "train_classifier.labeled_embeddings",
    )?);
    let examples = read_jsonl(&path)?;
    let mut rng = rng::substream(config.seed, CLASSIFIER_STREAM);
    let (mlp, report) = mlp_train(&examples, &config.train_classifier.mlp, &mut rng)?;
    for r in &report {
        log::info!("{}: held-out AUROC {:?} ({} positives of {})", r.class, r.auroc, r.positives, r.n);
    }
    let ckpt = dir.join(CLASSIFIER_FILE);
    let tensors: Vec<(String, &crate::autodiff::Tensor<f32>)> = MLP_TENSORS
        .iter()
        .map(|n| n.to_string())
        .zip(mlp.tensors())
        .collect();
    ledger.outputs(write_checkpoint(
        &ckpt,
        serde_json::to_value(&config.train_classifier.mlp)?,
        Some(finding_names()),
        &tensors,
        serde_json::to_value(RngState::capture(&rng))?,
    )?);
    let csv_path = dir.join(CLASSIFIER_REPORT);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &report {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    ledger.outputs([csv_path]);
    Ok(())
}

/// Configuration stored in a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpointConfig {
    pub model: ModelConfig,
    pub recipe: TrainConfig,
    pub seed: u64,
}

pub fn load_classifier(path: &Path) -> Result<Mlp<f32>> {
    let (manifest, tensors) = read_checkpoint(path)?;
    let classes = manifest
        .classes
        .ok_or_else(|| Error::Schema(format!("{}: classifier checkpoint lists no classes", path.display())))?;
    check_classes(&classes)?;
    Mlp::from_tensors(tensors)
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, ModelCheckpointConfig)> {
    let (manifest, tensors) = read_checkpoint(path)?;
    let cfg: ModelCheckpointConfig =
        serde_json::from_value(manifest.config).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let expected: Vec<String> = cfg.model.layout().into_iter().map(|(n, _)| n).collect();
    let found: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if found != expected {
        return Err(Error::Schema(format!(
            "{}: tensor names do not match the model layout",
            path.display()
        )));
    }
    Ok((Model::from_tensors(cfg.model.clone(), tensors)?, cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn split_windows(windows: &[PatientWindow], recipe: &TrainConfig, seed: u64) -> [Vec<PatientWindow>; 3] {
    split_indices(windows.len(), recipe.split, seed).map(|ix| ix.iter().map(|&i| windows[i].clone()).collect())
}

fn train_model(config: &RunConfig, dir: &Path, ledger: &mut Ledger) -> Result<()> {
    let tdir = required(&config.train.tensors, "train.tensors")?;
    ledger.input(&tdir.join(TENSOR_INDEX));
    let windows = load_tensors(tdir)?;
    let mlp = load_classifier(&ledger.input(required(&config.train.classifier, "train.classifier")?))?;
    let recipe = &config.train.recipe;
    let [train_w, val_w, test_w] = split_windows(&windows, recipe, config.seed);
    log::info!(
        "split {} patients into {} train, {} validation, {} test",
        windows.len(),
        train_w.len(),
        val_w.len(),
        test_w.len()
    );
    let decoder = config.model.decoder_input;
    let train_set = train_sequences(&train_w, &mlp, decoder)?;
    let val_set = train_sequences(&val_w, &mlp, decoder)?;
    let model = Model::init(config.model.clone(), &mut rng::substream(config.seed, rng::INIT))?;
    log::info!("model has {} parameters", model.param_count());
    let outcome = train(&train_set, &val_set, model, &mlp, recipe, config.seed)?;
    if let Some(step) = outcome.diverged_at {
        log::warn!("training stopped early by a non-finite value at step {step}");
    }

    let ckpt = dir.join(MODEL_FILE);
    let names = outcome.model.names();
    let tensors: Vec<(String, &crate::autodiff::Tensor<f32>)> =
        names.into_iter().zip(outcome.model.params.iter().map(|p| &**p)).collect();
    let stored = ModelCheckpointConfig {
        model: config.model.clone(),
        recipe: recipe.clone(),
        seed: config.seed,
    };
    ledger.outputs(write_checkpoint(
        &ckpt,
        serde_json::to_value(&stored)?,
        None,
        &tensors,
        serde_json::to_value(RngState::capture(&outcome.dropout_rng))?,
    )?);
    let log_path = dir.join(TRAIN_LOG);
    outcome.log.write_csv(&log_path)?;
    let ids = |ws: &[PatientWindow]| ws.iter().map(|w| w.patient_id.clone()).collect();
    let split_path = dir.join(SPLIT_FILE);
    write_pretty(
        &split_path,
        &SplitRecord {
            train: ids(&train_w),
            val: ids(&val_w),
            test: ids(&test_w),
        },
    )?;
    ledger.outputs([log_path, split_path]);
    if let Some(d) = outcome.diverged_at {
        return Err(Error::Diverged { step: d });
    }
    Ok(())
}

fn evaluate(config: &RunConfig, dir: &Path, ledger: &mut Ledger) -> Result<()> {
    let sec = &config.evaluate;
    let tdir = required(&sec.tensors, "evaluate.tensors")?;
    ledger.input(&tdir.join(TENSOR_INDEX));
    let windows = load_tensors(tdir)?;
    let (model, stored) = load_model(&ledger.input(required(&sec.model, "evaluate.model")?))?;
    let mlp = load_classifier(&ledger.input(required(&sec.classifier, "evaluate.classifier")?))?;
    let windows = if sec.test_split_only {
        let [_, _, test] = split_windows(&windows, &stored.recipe, stored.seed);
        test
    } else {
        windows
    };
    let scores = windows
        .iter()
        .map(|w| score_window(&model, &mlp, w))
        .collect::<Result<Vec<_>>>()?;
    let (report, curve, skipped) = evaluate_scores(&scores, &sec.metrics);
    if skipped > 0 {
        log::warn!("{skipped} anchor events without report labels were skipped");
    }
    for ((horizon, system), v) in headline(&report) {
        log::info!("{horizon:>15} {system:>8} macro AUROC {}", v.map_or("n/a".into(), |v| format!("{v:.4}")));
    }
    let (rp, cp) = (dir.join(EVAL_REPORT), dir.join(LEAD_CURVE));
    report.write_csv(&rp)?;
    curve.write_csv(&cp)?;
    ledger.outputs([rp, cp]);
    Ok(())
}

/// Header of the predictions file: `hour` then one column per finding.
pub fn prediction_columns() -> Vec<String> {
    std::iter::once("hour".to_string())
        .chain(FINDINGS.iter().map(|f| f.to_string()))
        .collect()
}

fn predict(config: &RunConfig, dir: &Path, ledger: &mut Ledger) -> Result<()> {
    let sec = &config.predict;
    let w = read_window(&ledger.input(required(&sec.patient, "predict.patient")?))?;
    let (model, _) = load_model(&ledger.input(required(&sec.model, "predict.model")?))?;
    let mlp = load_classifier(&ledger.input(required(&sec.classifier, "predict.classifier")?))?;
    let probs = mlp.predict_rows(&predict_window(&model, &w)?)?;
    let path = dir.join(PREDICTIONS);
    let mut out = csv::Writer::from_path(&path)?;
    out.write_record(prediction_columns())?;
    for (r, row) in probs.chunks(NUM_CLASSES).enumerate() {
        let mut rec = vec![(w.track.t_first + r).to_string()];
        rec.extend(row.iter().map(|p| format!("{p}")));
        out.write_record(rec)?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    ledger.outputs([path]);
    Ok(())
}
