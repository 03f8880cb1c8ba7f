//! Seeded synthetic ICU cohorts with known latent dynamics.
//!
//! Every numeric variable follows an AR(1) deviation `d` around its healthy
//! midpoint (value = midpoint + d * half-width, clamped to physiological
//! bounds). A latent state relaxes toward a per-patient severity plus a
//! linear readout of the deviations,
//!
//! `z[t+1] = a z[t] + (1 - a) (m + B d[t]) + noise`,
//!
//! and the hourly embedding is `e[t] = C z[t] + noise`. Findings are
//! `R e - theta > 0` with `R = U C^T`, so labels depend on the embedding only.
//! With `B = 0` the features carry no information about the embeddings.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{LabeledEmbedding, NUM_CLASSES};
use crate::clinical::{ObsValue, Observation, VariableKind, VariableSet, VariableSpec};
use crate::error::{Error, Result};
use crate::io::{write_jsonl, PatientRecord};
use crate::rng;
use crate::trajectory::{CxrEvent, EMBED_DIM};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const LABELED_FILE: &str = "labeled_embeddings.jsonl";
pub const LATENT_FILE: &str = "latent_truth.jsonl";
pub const TRUTH_FILE: &str = "generator_truth.json";

const STATIC_VARS: [&str; 4] = ["age", "weight", "height", "bmi"];
const MARKOV_VARS: [&str; 2] = ["ventilation_mode", "oxygen_device"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub min_stay_hours: usize,
    pub max_stay_hours: usize,
    pub mean_cxr_interval_hours: f64,
    /// First CXR hour is uniform on `[0, first_cxr_max_hour)`.
    pub first_cxr_max_hour: usize,
    pub latent_dim: usize,
    /// Diagonal of `A`.
    pub latent_persistence: f64,
    /// Standard deviation of the per-patient latent severity `m`.
    pub severity_scale: f64,
    /// Scale of `B`; entries are N(0, (scale / sqrt(n_numeric))^2). Zero
    /// gives the negative control.
    pub coupling_scale: f64,
    /// Drive the latent from an unobserved copy of the feature process, so
    /// features carry no information while latent dynamics keep their scale.
    pub hidden_drive: bool,
    pub latent_noise: f64,
    pub embedding_noise: f64,
    /// AR(1) coefficient of every numeric deviation.
    pub feature_ar: f64,
    /// Stationary standard deviation of the AR(1) part, in half-widths.
    pub feature_noise: f64,
    /// Standard deviation of the per-patient deviation offsets.
    pub feature_offset_scale: f64,
    /// Hourly switching probability of ventilation mode and oxygen device.
    pub device_switch_rate: f64,
    pub missingness: f64,
    /// Target positive rate per finding, in classifier order.
    pub label_prevalence: Vec<f64>,
    pub prevalence_tolerance: f64,
    /// Patients simulated to set the readout thresholds.
    pub calibration_patients: usize,
    pub n_labeled_embeddings: usize,
    pub max_retries: usize,
    pub write_latent_truth: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            min_stay_hours: 48,
            max_stay_hours: 240,
            mean_cxr_interval_hours: 24.0,
            first_cxr_max_hour: 12,
            latent_dim: 10,
            latent_persistence: 0.9,
            severity_scale: 0.0,
            coupling_scale: 3.0,
            hidden_drive: false,
            latent_noise: 0.02,
            embedding_noise: 0.01,
            feature_ar: 0.95,
            feature_noise: 0.6,
            feature_offset_scale: 0.0,
            device_switch_rate: 0.02,
            missingness: 0.2,
            label_prevalence: vec![0.25, 0.2, 0.35, 0.2, 0.12, 0.15, 0.3, 0.1, 0.28, 0.08],
            prevalence_tolerance: 0.07,
            calibration_patients: 1000,
            n_labeled_embeddings: 5000,
            max_retries: 100,
            write_latent_truth: true,
        }
    }
}

impl GeneratorConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut rate = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                p.push(format!("synth.{name} must be in [0, 1], got {v}"));
            }
        };
        rate("latent_persistence", self.latent_persistence);
        rate("missingness", self.missingness);
        rate("device_switch_rate", self.device_switch_rate);
        rate("prevalence_tolerance", self.prevalence_tolerance);
        if self.feature_ar.abs() >= 1.0 || !self.feature_ar.is_finite() {
            p.push(format!("synth.feature_ar must be in (-1, 1), got {}", self.feature_ar));
        }
        if self.n_patients == 0 {
            p.push("synth.n_patients must be positive".into());
        }
        if self.min_stay_hours < 2 || self.min_stay_hours > self.max_stay_hours {
            p.push(format!(
                "synth stay range must satisfy 2 <= min_stay_hours <= max_stay_hours, got {}..{}",
                self.min_stay_hours, self.max_stay_hours
            ));
        }
        if !(self.mean_cxr_interval_hours >= 1.0 && self.mean_cxr_interval_hours.is_finite()) {
            p.push(format!(
                "synth.mean_cxr_interval_hours must be at least 1, got {}",
                self.mean_cxr_interval_hours
            ));
        }
        if self.first_cxr_max_hour == 0 || self.first_cxr_max_hour >= self.min_stay_hours {
            p.push(format!(
                "synth.first_cxr_max_hour must be in 1..min_stay_hours, got {}",
                self.first_cxr_max_hour
            ));
        }
        if self.latent_dim == 0 {
            p.push("synth.latent_dim must be positive".into());
        }
        for (name, v) in [
            ("severity_scale", self.severity_scale),
            ("coupling_scale", self.coupling_scale),
            ("latent_noise", self.latent_noise),
            ("embedding_noise", self.embedding_noise),
            ("feature_noise", self.feature_noise),
            ("feature_offset_scale", self.feature_offset_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("synth.{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.label_prevalence.len() != NUM_CLASSES {
            p.push(format!(
                "synth.label_prevalence needs {NUM_CLASSES} entries, got {}",
                self.label_prevalence.len()
            ));
        }
        if let Some(v) = self.label_prevalence.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            p.push(format!("synth.label_prevalence entries must be in (0, 1), got {v}"));
        }
        if self.calibration_patients == 0 {
            p.push("synth.calibration_patients must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// The structural matrices behind a cohort, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub latent_dim: usize,
    pub numeric_vars: Vec<String>,
    pub persistence: f64,
    /// `[latent_dim, n_numeric]`.
    pub coupling: Vec<f64>,
    /// `[EMBED_DIM, latent_dim]`.
    pub embedding: Vec<f64>,
    /// `[NUM_CLASSES, latent_dim]`, unit rows.
    pub label_directions: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl GeneratorTruth {
    fn sample(cfg: &GeneratorConfig, numeric_vars: Vec<String>, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.latent_dim;
        let nv = numeric_vars.len().max(1);
        let b_sd = cfg.coupling_scale / (nv as f64).sqrt();
        let coupling = (0..k * numeric_vars.len()).map(|_| b_sd * normal(rng)).collect();
        let c_sd = 1.0 / (EMBED_DIM as f64).sqrt();
        let embedding = (0..EMBED_DIM * k).map(|_| c_sd * normal(rng)).collect();
        let mut label_directions = Vec::with_capacity(NUM_CLASSES * k);
        for _ in 0..NUM_CLASSES {
            let u: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            label_directions.extend(u.iter().map(|v| v / norm));
        }
        GeneratorTruth {
            latent_dim: k,
            numeric_vars,
            persistence: cfg.latent_persistence,
            coupling,
            embedding,
            label_directions,
            thresholds: vec![0.0; NUM_CLASSES],
        }
    }

    /// `e = C z + noise`.
    fn embed(&self, z: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let k = self.latent_dim;
        (0..EMBED_DIM)
            .map(|i| {
                let row = &self.embedding[i * k..(i + 1) * k];
                let v: f64 = row.iter().zip(z).map(|(c, z)| c * z).sum();
                (v + noise * normal(rng)) as f32
            })
            .collect()
    }

    /// Readout scores `U C^T e`, before thresholds.
    pub fn scores(&self, e: &[f32]) -> Vec<f64> {
        let k = self.latent_dim;
        let mut ct_e = vec![0.0; k];
        for (i, &v) in e.iter().enumerate() {
            for (j, acc) in ct_e.iter_mut().enumerate() {
                *acc += self.embedding[i * k + j] * v as f64;
            }
        }
        (0..NUM_CLASSES)
            .map(|c| {
                self.label_directions[c * k..(c + 1) * k]
                    .iter()
                    .zip(&ct_e)
                    .map(|(u, v)| u * v)
                    .sum()
            })
            .collect()
    }

    pub fn labels(&self, e: &[f32]) -> Vec<u8> {
        self.scores(e)
            .iter()
            .zip(&self.thresholds)
            .map(|(s, t)| u8::from(s > t))
            .collect()
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Hourly simulation of one patient before observation sampling.
struct Simulated {
    stay_hours: usize,
    /// `[stay, n_vars]` native values; categoricals hold the category index.
    values: Vec<f64>,
    latent: Vec<f64>,
    cxr_hours: Vec<usize>,
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    vars: &'a VariableSet,
    truth: GeneratorTruth,
    numeric: Vec<usize>,
    /// Hourly CXR probability.
    hazard: f64,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a GeneratorConfig, vars: &'a VariableSet, seed: u64) -> Self {
        let numeric: Vec<usize> = vars
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == VariableKind::Numeric)
            .map(|(i, _)| i)
            .collect();
        let names = numeric.iter().map(|&i| vars.specs()[i].name.clone()).collect();
        let truth = GeneratorTruth::sample(cfg, names, &mut rng::substream(seed, "structure"));
        Generator {
            cfg,
            vars,
            truth,
            numeric,
            hazard: 1.0 / cfg.mean_cxr_interval_hours,
        }
    }

    /// Stays cut off long gaps, so observed intervals run shorter than the
    /// geometric mean. Pick the hazard whose observed mean matches the
    /// configured one on a pilot set of schedules.
    fn calibrate_hazard(&mut self, seed: u64) -> Result<()> {
        const PILOT: usize = 4000;
        let cfg = self.cfg;
        let mut r = rng::substream(seed, "cxr_schedule");
        let pilot: Vec<(usize, usize, Vec<f64>)> = (0..PILOT)
            .map(|_| {
                let stay = r.random_range(cfg.min_stay_hours..=cfg.max_stay_hours);
                let first = r.random_range(0..cfg.first_cxr_max_hour);
                (first, stay, (0..stay).map(|_| r.random::<f64>()).collect())
            })
            .collect();
        let observed = |h: f64| {
            let (mut sum, mut n) = (0usize, 0usize);
            for (first, stay, u) in &pilot {
                let hours = schedule(*first, *stay, h, u.iter().copied());
                if hours.len() >= 2 {
                    sum += hours[hours.len() - 1] - hours[0];
                    n += hours.len() - 1;
                }
            }
            (n > 0).then(|| sum as f64 / n as f64)
        };
        let target = cfg.mean_cxr_interval_hours;
        // the observed mean peaks at a low hazard and falls toward zero
        // beyond it, so walk down from 1/target to bracket the crossing
        let mut hi = (1.0 / target).min(1.0);
        let mut lo = None;
        for _ in 0..80 {
            let h = hi * 0.9;
            if observed(h).is_some_and(|m| m >= target) {
                lo = Some(h);
                break;
            }
            hi = h;
        }
        let Some(mut lo) = lo else {
            return Err(Error::Config(vec![format!(
                "synth.mean_cxr_interval_hours {target} is unreachable with stays of {}..{} hours",
                cfg.min_stay_hours, cfg.max_stay_hours
            )]));
        };
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if observed(mid).is_some_and(|m| m >= target) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.hazard = (lo * hi).sqrt();
        Ok(())
    }

    fn cxr_hours(&self, stay: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let first = rng.random_range(0..self.cfg.first_cxr_max_hour);
        schedule(first, stay, self.hazard, std::iter::repeat_with(|| rng.random::<f64>()))
    }

    fn simulate(&self, rng: &mut ChaCha8Rng) -> Result<Simulated> {
        let cfg = self.cfg;
        for _ in 0..=cfg.max_retries {
            let stay = rng.random_range(cfg.min_stay_hours..=cfg.max_stay_hours);
            let cxr_hours = self.cxr_hours(stay, rng);
            if cxr_hours.len() < 2 {
                continue;
            }
            let (values, latent) = self.paths(stay, rng);
            return Ok(Simulated {
                stay_hours: stay,
                values,
                latent,
                cxr_hours,
            });
        }
        Err(Error::Data(format!(
            "no patient with at least two CXRs after {} retries; lengthen stays or shorten the CXR interval",
            cfg.max_retries
        )))
    }

    fn paths(&self, stay: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let cfg = self.cfg;
        let specs = self.vars.specs();
        let nv = specs.len();
        let k = cfg.latent_dim;
        let nn = self.numeric.len();
        let innovation = cfg.feature_noise * (1.0 - cfg.feature_ar * cfg.feature_ar).sqrt();

        let offsets: Vec<f64> = (0..nn).map(|_| cfg.feature_offset_scale * normal(rng)).collect();
        let mut dev: Vec<f64> = offsets.iter().map(|o| o + cfg.feature_noise * normal(rng)).collect();
        let is_static: Vec<bool> = self
            .numeric
            .iter()
            .map(|&i| STATIC_VARS.contains(&specs[i].name.as_str()))
            .collect();
        let mut cats: Vec<usize> = specs
            .iter()
            .map(|s| s.categories.as_ref().map_or(0, |c| rng.random_range(0..c.len())))
            .collect();
        let severity: Vec<f64> = (0..k).map(|_| cfg.severity_scale * normal(rng)).collect();

        let drift = |dev: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|r| {
                    let row = &self.truth.coupling[r * nn..(r + 1) * nn];
                    severity[r] + row.iter().zip(dev).map(|(b, d)| b * d).sum::<f64>()
                })
                .collect()
        };
        let mut hidden: Option<Vec<f64>> = cfg
            .hidden_drive
            .then(|| (0..nn).map(|_| cfg.feature_noise * normal(rng)).collect());
        let mut z = drift(hidden.as_deref().unwrap_or(&dev));
        let mut values = vec![0.0; stay * nv];
        let mut latent = vec![0.0; stay * k];
        let a = cfg.latent_persistence;
        for t in 0..stay {
            let row = &mut values[t * nv..(t + 1) * nv];
            for (j, &i) in self.numeric.iter().enumerate() {
                row[i] = native(&specs[i], dev[j]);
            }
            for (i, s) in specs.iter().enumerate() {
                if let Some(c) = &s.categories {
                    if MARKOV_VARS.contains(&s.name.as_str()) && rng.random::<f64>() < cfg.device_switch_rate {
                        cats[i] = rng.random_range(0..c.len());
                    }
                    row[i] = cats[i] as f64;
                }
            }
            latent[t * k..(t + 1) * k].copy_from_slice(&z);

            let target = drift(hidden.as_deref().unwrap_or(&dev));
            for r in 0..k {
                z[r] = a * z[r] + (1.0 - a) * target[r] + cfg.latent_noise * normal(rng);
            }
            for j in 0..nn {
                if !is_static[j] {
                    dev[j] = offsets[j] + cfg.feature_ar * (dev[j] - offsets[j]) + innovation * normal(rng);
                }
            }
            if let Some(h) = hidden.as_mut() {
                for (j, x) in h.iter_mut().enumerate() {
                    if !is_static[j] {
                        *x = cfg.feature_ar * *x + innovation * normal(rng);
                    }
                }
            }
        }
        (values, latent)
    }

    fn embedding_at(&self, sim: &Simulated, hour: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let k = self.cfg.latent_dim;
        self.truth
            .embed(&sim.latent[hour * k..(hour + 1) * k], self.cfg.embedding_noise, rng)
    }

    fn record(&self, patient_id: String, sim: &Simulated, rng: &mut ChaCha8Rng) -> PatientRecord {
        let specs = self.vars.specs();
        let nv = specs.len();
        let mut observations = Vec::new();
        for t in 0..sim.stay_hours {
            for (i, s) in specs.iter().enumerate() {
                if rng.random::<f64>() < self.cfg.missingness {
                    continue;
                }
                let hour = t as f64 + (rng.random_range(0..100u32) as f64) / 100.0;
                let v = sim.values[t * nv + i];
                let value = match &s.categories {
                    Some(c) => ObsValue::Label(c[v as usize].clone()),
                    None => ObsValue::Number(round2(v, s)),
                };
                observations.push(Observation {
                    var: s.name.clone(),
                    hour,
                    value,
                });
            }
        }
        let cxr_events = sim
            .cxr_hours
            .iter()
            .map(|&h| {
                let embedding = self.embedding_at(sim, h, rng);
                let labels = Some(self.truth.labels(&embedding));
                CxrEvent {
                    hour: h,
                    embedding,
                    labels,
                }
            })
            .collect();
        PatientRecord {
            patient_id,
            stay_hours: sim.stay_hours,
            observations,
            cxr_events,
        }
    }

    /// Set thresholds to the target quantiles of hourly readout scores.
    fn calibrate(&mut self, seed: u64) -> Result<()> {
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); NUM_CLASSES];
        for i in 0..self.cfg.calibration_patients {
            let mut r = rng::indexed(seed, "calibration", i as u64);
            let sim = self.simulate(&mut r)?;
            for h in 0..sim.stay_hours {
                let e = self.embedding_at(&sim, h, &mut r);
                for (c, s) in self.truth.scores(&e).into_iter().enumerate() {
                    scores[c].push(s);
                }
            }
        }
        for (c, s) in scores.iter_mut().enumerate() {
            s.sort_by(f64::total_cmp);
            let q = 1.0 - self.cfg.label_prevalence[c];
            let idx = ((q * s.len() as f64) as usize).min(s.len() - 1);
            self.truth.thresholds[c] = s[idx];
        }
        Ok(())
    }
}

/// CXR hours from `first` with geometric gaps drawn from `uniforms`, stopping
/// at the end of the stay.
fn schedule(first: usize, stay: usize, hazard: f64, mut uniforms: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut hours = vec![first];
    let log_q = (1.0 - hazard).ln();
    loop {
        let gap = match uniforms.next() {
            Some(u) if hazard < 1.0 => ((1.0 - u).ln() / log_q).ceil().max(1.0) as usize,
            Some(_) => 1,
            None => return hours,
        };
        let next = hours[hours.len() - 1] + gap;
        if next >= stay {
            return hours;
        }
        hours.push(next);
    }
}

fn native(spec: &VariableSpec, dev: f64) -> f64 {
    let (lo, hi) = (spec.healthy_lo.unwrap_or(0.0), spec.healthy_hi.unwrap_or(1.0));
    let v = lo + 0.5 * (hi - lo) + dev * 0.5 * (hi - lo);
    v.clamp(spec.phys_lo.unwrap_or(f64::MIN), spec.phys_hi.unwrap_or(f64::MAX))
}

/// Two decimals, kept inside the physiological bounds.
fn round2(v: f64, spec: &VariableSpec) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    r.clamp(spec.phys_lo.unwrap_or(f64::MIN), spec.phys_hi.unwrap_or(f64::MAX))
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:05}")
}

/// Hourly latent state of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub patient_id: String,
    pub latent: Vec<Vec<f64>>,
}

pub struct SyntheticCohort {
    pub patients: Vec<PatientRecord>,
    pub labeled: Vec<LabeledEmbedding>,
    pub latent: Vec<LatentTruth>,
    pub truth: GeneratorTruth,
}

impl SyntheticCohort {
    pub fn write(&self, dir: &Path, with_latent: bool) -> Result<Vec<std::path::PathBuf>> {
        let mut out = vec![dir.join(COHORT_FILE), dir.join(LABELED_FILE)];
        write_jsonl(&out[0], &self.patients)?;
        write_jsonl(&out[1], &self.labeled)?;
        if with_latent {
            out.push(dir.join(LATENT_FILE));
            write_jsonl(&out[2], &self.latent)?;
        }
        let truth = dir.join(TRUTH_FILE);
        let mut text = serde_json::to_string(&self.truth)?;
        text.push('\n');
        std::fs::write(&truth, text).map_err(|e| Error::io(&truth, e))?;
        out.push(truth);
        Ok(out)
    }
}

/// Generate a cohort and a labeled-embedding set for the classifier.
pub fn generate(cfg: &GeneratorConfig, vars: &VariableSet, seed: u64) -> Result<SyntheticCohort> {
    cfg.validate()?;
    let mut gen = Generator::new(cfg, vars, seed);
    gen.calibrate_hazard(seed)?;
    gen.calibrate(seed)?;
    let k = cfg.latent_dim;

    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut latent = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut r = rng::indexed(seed, "patient", i as u64);
        let sim = gen.simulate(&mut r)?;
        let id = patient_id(i);
        patients.push(gen.record(id.clone(), &sim, &mut r));
        if cfg.write_latent_truth {
            latent.push(LatentTruth {
                patient_id: id,
                latent: sim.latent.chunks(k).map(<[f64]>::to_vec).collect(),
            });
        }
    }

    // a few random hours from each of a separate set of patients
    const PER_PATIENT: usize = 5;
    let mut labeled = Vec::with_capacity(cfg.n_labeled_embeddings);
    let mut j = 0u64;
    while labeled.len() < cfg.n_labeled_embeddings {
        let mut r = rng::indexed(seed, "labeled", j);
        j += 1;
        let sim = gen.simulate(&mut r)?;
        for _ in 0..PER_PATIENT.min(cfg.n_labeled_embeddings - labeled.len()) {
            let h = r.random_range(0..sim.stay_hours);
            let embedding = gen.embedding_at(&sim, h, &mut r);
            let labels = gen.truth.labels(&embedding);
            labeled.push(LabeledEmbedding { embedding, labels });
        }
    }
    Ok(SyntheticCohort {
        patients,
        labeled,
        latent,
        truth: gen.truth,
    })
}

/// Stand-in for the vision encoder: looks up stored CXR embeddings by
/// `"<patient_id>:<hour>"`.
pub struct EmbeddingStore {
    map: HashMap<String, Vec<f32>>,
}

pub fn image_id(patient_id: &str, hour: usize) -> String {
    format!("{patient_id}:{hour}")
}

impl EmbeddingStore {
    pub fn new(patients: &[PatientRecord]) -> Self {
        let map = patients
            .iter()
            .flat_map(|p| {
                p.cxr_events
                    .iter()
                    .map(|e| (image_id(&p.patient_id, e.hour), e.embedding.clone()))
            })
            .collect();
        EmbeddingStore { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn encode_stub(&self, id: &str) -> Result<&[f32]> {
        self.map
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no CXR with id {id:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::featurize;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: n,
            calibration_patients: 20,
            n_labeled_embeddings: 50,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn hidden_drive_keeps_latent_scale() {
        let vars = VariableSet::default_icu();
        let spread = |cfg: GeneratorConfig| {
            let c = generate(&cfg, &vars, 4).unwrap();
            let z: Vec<f64> = c.latent.iter().flat_map(|l| l.latent.iter().flatten().copied()).collect();
            z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64
        };
        let observed = spread(small(40));
        let hidden = spread(GeneratorConfig { hidden_drive: true, ..small(40) });
        let zeroed = spread(GeneratorConfig { coupling_scale: 0.0, ..small(40) });
        assert!(hidden > 0.5 * observed && hidden < 2.0 * observed, "{hidden} vs {observed}");
        assert!(zeroed < 0.05 * observed, "{zeroed} vs {observed}");
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let vars = VariableSet::default_icu();
        let a = generate(&small(3), &vars, 9).unwrap();
        let b = generate(&small(3), &vars, 9).unwrap();
        let c = generate(&small(3), &vars, 10).unwrap();
        let text = |c: &SyntheticCohort| serde_json::to_string(&c.patients).unwrap();
        assert_eq!(text(&a), text(&b));
        assert_ne!(text(&a), text(&c));
        assert_eq!(a.labeled, b.labeled);
    }

    #[test]
    fn patients_do_not_depend_on_cohort_size() {
        let vars = VariableSet::default_icu();
        let a = generate(&small(2), &vars, 4).unwrap();
        let b = generate(&small(5), &vars, 4).unwrap();
        assert_eq!(a.patients[..], b.patients[..2]);
    }

    #[test]
    fn zero_missingness_observes_everything() {
        let vars = VariableSet::default_icu();
        let cfg = GeneratorConfig {
            missingness: 0.0,
            ..small(2)
        };
        let c = generate(&cfg, &vars, 1).unwrap();
        for p in &c.patients {
            let feats = featurize(&p.observations, &vars, p.stay_hours).unwrap();
            assert_eq!(feats.len(), p.stay_hours);
            assert!(feats.iter().all(|f| f.observed_mask.iter().all(|&m| m)));
        }
    }

    #[test]
    fn values_respect_bounds_and_events_are_valid() {
        let vars = VariableSet::default_icu();
        let c = generate(&small(20), &vars, 2).unwrap();
        for p in &c.patients {
            let bins = crate::clinical::bin_hourly(&p.observations, &vars, p.stay_hours).unwrap();
            assert_eq!(bins.discarded, 0);
            assert!(p.cxr_events.len() >= 2);
            assert!(p.cxr_events.windows(2).all(|w| w[0].hour < w[1].hour));
            assert!(p.cxr_events.iter().all(|e| e.hour < p.stay_hours && e.embedding.len() == EMBED_DIM));
            assert!((48..=240).contains(&p.stay_hours));
        }
    }

    #[test]
    fn encode_stub_returns_stored_vectors() {
        let vars = VariableSet::default_icu();
        let c = generate(&small(2), &vars, 3).unwrap();
        let store = EmbeddingStore::new(&c.patients);
        let ev = &c.patients[1].cxr_events[1];
        let id = image_id(&c.patients[1].patient_id, ev.hour);
        assert_eq!(store.encode_stub(&id).unwrap(), &ev.embedding[..]);
        assert_eq!(store.encode_stub(&id).unwrap(), store.encode_stub(&id).unwrap());
        assert_eq!(store.encode_stub(&id).unwrap().len(), 512);
        assert!(matches!(store.encode_stub("nobody:3"), Err(Error::Lookup(_))));
    }

    #[test]
    fn labels_follow_the_readout() {
        let vars = VariableSet::default_icu();
        let c = generate(&small(3), &vars, 5).unwrap();
        for p in &c.patients {
            for e in &p.cxr_events {
                assert_eq!(e.labels.as_ref().unwrap(), &c.truth.labels(&e.embedding));
            }
        }
    }

    #[test]
    fn invalid_config_is_itemized() {
        let cfg = GeneratorConfig {
            missingness: 1.5,
            label_prevalence: vec![0.5; 3],
            min_stay_hours: 10,
            max_stay_hours: 5,
            ..GeneratorConfig::default()
        };
        let p = cfg.problems();
        assert!(p.len() >= 3, "{p:?}");
        assert!(p.iter().any(|s| s.contains("missingness")));
    }

    #[test]
    fn impossible_cohorts_fail_after_retries() {
        let vars = VariableSet::default_icu();
        let cfg = GeneratorConfig {
            min_stay_hours: 3,
            max_stay_hours: 3,
            first_cxr_max_hour: 2,
            mean_cxr_interval_hours: 1000.0,
            max_retries: 5,
            ..small(1)
        };
        assert!(matches!(generate(&cfg, &vars, 0), Err(Error::Config(_))));
        let mut gen = Generator::new(&cfg, &vars, 0);
        gen.hazard = 1e-12;
        let r = gen.simulate(&mut rng::substream(0, "test"));
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
