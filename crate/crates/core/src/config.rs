//! Run configuration: one JSON document with a root seed and a section per
//! command, plus the manifest every command leaves next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::MlpConfig;
use crate::error::{Error, Result};
use crate::io::sha256_bytes;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::synth::GeneratorConfig;
use crate::trainer::TrainConfig;

/// Environment variable that replaces the default output root.
pub const OUT_ROOT_ENV: &str = "CXRCAST_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Synth,
    Preprocess,
    TrainClassifier,
    Train,
    Evaluate,
    Predict,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Synth,
        Command::Preprocess,
        Command::TrainClassifier,
        Command::Train,
        Command::Evaluate,
        Command::Predict,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::TrainClassifier => "train-classifier",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Predict => "predict",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Cohort JSON-lines file.
    pub cohort: Option<PathBuf>,
    /// Variable list; the bundled ICU list when absent.
    pub variables: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// Labeled-embedding JSON-lines file.
    pub labeled_embeddings: Option<PathBuf>,
    pub mlp: MlpConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Directory written by `preprocess`.
    pub tensors: Option<PathBuf>,
    /// Classifier checkpoint manifest.
    pub classifier: Option<PathBuf>,
    pub recipe: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub tensors: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    /// Evaluate only the held-out test patients of the training split.
    pub test_split_only: bool,
    pub metrics: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Blob manifest of one patient, as written by `preprocess`.
    pub patient: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: GeneratorConfig,
    pub preprocess: PreprocessSection,
    pub train_classifier: ClassifierSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub predict: PredictSection,
}

impl RunConfig {
    /// Parse, reporting unknown or malformed keys as configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Load a config and resolve relative input paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.preprocess.cohort);
        fix(&mut self.preprocess.variables);
        fix(&mut self.train_classifier.labeled_embeddings);
        fix(&mut self.train.tensors);
        fix(&mut self.train.classifier);
        fix(&mut self.evaluate.tensors);
        fix(&mut self.evaluate.model);
        fix(&mut self.evaluate.classifier);
        fix(&mut self.predict.patient);
        fix(&mut self.predict.model);
        fix(&mut self.predict.classifier);
    }

    /// Sorted-key JSON; loading and re-serializing is byte-identical.
    pub fn canonical_json(&self) -> String {
        canonical(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn hash(&self) -> String {
        sha256_bytes(self.canonical_json().as_bytes())
    }

    /// Everything wrong with the sections `command` uses, one entry each.
    pub fn problems(&self, command: Command) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |name: &str, v: &Option<PathBuf>| {
            if v.is_none() {
                p.push(format!("{name} is required for {}", command.name()));
            }
        };
        match command {
            Command::Synth => {}
            Command::Preprocess => need("preprocess.cohort", &self.preprocess.cohort),
            Command::TrainClassifier => need(
                "train_classifier.labeled_embeddings",
                &self.train_classifier.labeled_embeddings,
            ),
            Command::Train => {
                need("train.tensors", &self.train.tensors);
                need("train.classifier", &self.train.classifier);
            }
            Command::Evaluate => {
                need("evaluate.tensors", &self.evaluate.tensors);
                need("evaluate.model", &self.evaluate.model);
                need("evaluate.classifier", &self.evaluate.classifier);
            }
            Command::Predict => {
                need("predict.patient", &self.predict.patient);
                need("predict.model", &self.predict.model);
                need("predict.classifier", &self.predict.classifier);
            }
        }
        match command {
            Command::Synth => p.extend(self.synth.problems()),
            Command::TrainClassifier => p.extend(self.train_classifier.mlp.problems()),
            Command::Train => {
                p.extend(self.model.problems());
                p.extend(self.train.recipe.problems());
                if self.model.dropout_rate != self.train.recipe.dropout {
                    p.push(format!(
                        "model.dropout_rate ({}) must equal train.recipe.dropout ({})",
                        self.model.dropout_rate, self.train.recipe.dropout
                    ));
                }
            }
            Command::Evaluate => p.extend(self.evaluate.metrics.problems()),
            Command::Preprocess | Command::Predict => {}
        }
        p
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        let p = self.problems(command);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Pretty JSON with object keys in sorted order.
pub fn canonical(value: &serde_json::Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled
    let sorted: serde_json::Value = serde_json::from_str(&value.to_string()).expect("round trip");
    let mut s = serde_json::to_string_pretty(&sorted).expect("value serializes");
    s.push('\n');
    s
}

/// Output root: `CXRCAST_OUT_ROOT` when set, else `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// A fresh directory for a run: `explicit` when given (it must not exist or
/// be empty), otherwise `<root>/<command>-<config hash>-<n>` for the first
/// unused `n`.
pub fn fresh_run_dir(explicit: Option<&Path>, command: Command, config_hash: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => {
            if d.exists() {
                let empty = std::fs::read_dir(d).map_err(|e| Error::io(d, e))?.next().is_none();
                if !empty {
                    return Err(Error::Usage(format!(
                        "output directory {} is not empty; runs never overwrite earlier outputs",
                        d.display()
                    )));
                }
            }
            d.to_path_buf()
        }
        None => {
            let root = out_root();
            let stem = format!("{}-{}", command.name(), &config_hash[..12]);
            (0..)
                .map(|n| root.join(format!("{stem}-{n}")))
                .find(|d| !d.exists())
                .expect("unbounded search")
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileHash>,
    /// Hash over the sorted `(path, sha256)` list of outputs.
    pub outputs_hash: String,
    pub versions: std::collections::BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn start(command: Command, config: &RunConfig) -> Self {
        let mut versions = std::collections::BTreeMap::new();
        versions.insert("cxrcast".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("schema_version".to_string(), crate::io::SCHEMA_VERSION.to_string());
        RunManifest {
            command: command.name().to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            outputs_hash: String::new(),
            versions,
            started_unix: now_unix(),
            finished_unix: None,
            complete: false,
            error: None,
        }
    }

    pub fn outputs_digest(outputs: &[FileHash]) -> String {
        let mut items: Vec<String> = outputs.iter().map(|f| format!("{} {}\n", f.sha256, f.path)).collect();
        items.sort();
        sha256_bytes(items.concat().as_bytes())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
