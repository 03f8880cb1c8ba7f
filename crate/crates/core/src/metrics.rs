//! Ranking and threshold metrics, horizon sampling, and evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{FINDINGS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::trajectory::CxrEvent;

fn check_len(scores: &[f64], labels: &[bool]) {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counting
/// one half. `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    check_len(scores, labels);
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // walk tie groups from the lowest score up, counting doubled credit
    let mut idx = descending(scores);
    idx.reverse();
    let mut below_neg = 0u64;
    let mut credit2 = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut p, mut q) = (0u64, 0u64);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                p += 1;
            } else {
                q += 1;
            }
            i += 1;
        }
        credit2 += 2 * p * below_neg + p * q;
        below_neg += q;
    }
    Some(credit2 as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over descending unique
/// score thresholds. `None` without positives.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    check_len(scores, labels);
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let idx = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let before = tp;
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        ap += average_precision_term(tp - before, pos, tp, fp);
    }
    Some(ap)
}

/// Contribution of one threshold: recall gain times precision.
pub fn average_precision_term(new_tp: usize, pos: usize, tp: usize, fp: usize) -> f64 {
    if new_tp == 0 {
        return 0.0;
    }
    (new_tp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64)
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Option<f64> {
    check_len(scores, labels);
    if scores.is_empty() {
        return None;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Some(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
    pub class: usize,
    pub lead_hours: usize,
    pub patient_id: String,
    pub hour: usize,
}

/// Classifier outputs along one patient's window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientScores {
    pub patient_id: String,
    pub t_first: usize,
    /// `[len, 10]` on the predicted track.
    pub model: Vec<f32>,
    /// `[len, 10]` on the previous-CXR track.
    pub baseline: Vec<f32>,
    /// `[len, 10]` on the interpolated target track.
    pub target: Vec<f32>,
    /// Anchor events in hour order.
    pub events: Vec<CxrEvent>,
}

impl PatientScores {
    pub fn len(&self) -> usize {
        self.model.len() / NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    pub fn t_last(&self) -> usize {
        self.t_first + self.len() - 1
    }

    fn at(track: &[f32], row: usize, class: usize) -> f64 {
        track[row * NUM_CLASSES + class] as f64
    }
}

/// Model and baseline samples side by side, in the same order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HorizonSamples {
    pub model: Vec<ScoredSample>,
    pub baseline: Vec<ScoredSample>,
    /// Events without report labels that were passed over.
    pub skipped_unlabeled: usize,
}

impl HorizonSamples {
    fn push(&mut self, p: &PatientScores, row: usize, class: usize, label: bool, lead: usize) {
        let hour = p.t_first + row;
        let sample = |score| ScoredSample {
            score,
            label,
            class,
            lead_hours: lead,
            patient_id: p.patient_id.clone(),
            hour,
        };
        self.model.push(sample(PatientScores::at(&p.model, row, class)));
        self.baseline.push(sample(PatientScores::at(&p.baseline, row, class)));
    }
}

/// Samples scored `lead` hours before each CXR after a patient's first,
/// labeled with that CXR's report. Scoring hours outside the window emit
/// nothing.
pub fn extract_horizon_samples(patients: &[PatientScores], lead: usize) -> HorizonSamples {
    let mut out = HorizonSamples::default();
    for p in patients {
        for e in p.events.iter().skip(1) {
            let Some(labels) = &e.labels else {
                out.skipped_unlabeled += 1;
                continue;
            };
            let Some(h) = e.hour.checked_sub(lead) else { continue };
            if h < p.t_first || h > p.t_last() {
                continue;
            }
            for (c, &l) in labels.iter().enumerate().take(NUM_CLASSES) {
                out.push(p, h - p.t_first, c, l == 1, lead);
            }
        }
    }
    out
}

/// Current-hour samples over `(t_first, t_last]`, labeled by thresholding the
/// target-track probabilities.
pub fn current_samples(patients: &[PatientScores], threshold: f64) -> HorizonSamples {
    let mut out = HorizonSamples::default();
    for p in patients {
        for row in 1..p.len() {
            for c in 0..NUM_CLASSES {
                let label = PatientScores::at(&p.target, row, c) >= threshold;
                out.push(p, row, c, label, 0);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub horizon: String,
    pub system: String,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: Option<f64>,
    pub prevalence: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub class: String,
    pub lead_hours: usize,
    pub system: String,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub n: usize,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "class",
    "horizon",
    "system",
    "auroc",
    "auprc",
    "accuracy",
    "prevalence",
    "n",
];
pub const CURVE_COLUMNS: [&str; 6] = ["class", "lead_hours", "system", "auroc", "auprc", "n"];
pub const AVERAGE: &str = "Average";
pub const SYSTEMS: [&str; 2] = ["model", "baseline"];

fn by_class(samples: &[ScoredSample]) -> Vec<(Vec<f64>, Vec<bool>)> {
    let mut out = vec![(Vec::new(), Vec::new()); NUM_CLASSES];
    for s in samples {
        out[s.class].0.push(s.score);
        out[s.class].1.push(s.label);
    }
    out
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class rows plus a macro-average row for one horizon and system.
pub fn summarize(samples: &[ScoredSample], horizon: &str, system: &str, threshold: f64) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = by_class(samples)
        .into_iter()
        .enumerate()
        .map(|(c, (s, l))| ReportRow {
            class: FINDINGS[c].to_string(),
            horizon: horizon.to_string(),
            system: system.to_string(),
            auroc: auroc(&s, &l),
            auprc: auprc(&s, &l),
            accuracy: accuracy(&s, &l, threshold),
            prevalence: (!l.is_empty()).then(|| l.iter().filter(|&&x| x).count() as f64 / l.len() as f64),
            n: l.len(),
        })
        .collect();
    let avg = ReportRow {
        class: AVERAGE.to_string(),
        horizon: horizon.to_string(),
        system: system.to_string(),
        auroc: mean_defined(rows.iter().map(|r| r.auroc)),
        auprc: mean_defined(rows.iter().map(|r| r.auprc)),
        accuracy: mean_defined(rows.iter().map(|r| r.accuracy)),
        prevalence: mean_defined(rows.iter().map(|r| r.prevalence)),
        n: rows.iter().map(|r| r.n).sum(),
    };
    rows.push(avg);
    rows
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Macro-average AUROC of one horizon and system.
    pub fn macro_auroc(&self, horizon: &str, system: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.class == AVERAGE && r.horizon == horizon && r.system == system)
            .and_then(|r| r.auroc)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &REPORT_COLUMNS, &self.rows)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        rows_to_string(&REPORT_COLUMNS, &self.rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(EvalReport {
            rows: read_rows(path, &REPORT_COLUMNS)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeadCurve {
    pub rows: Vec<CurveRow>,
}

impl LeadCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &CURVE_COLUMNS, &self.rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(LeadCurve {
            rows: read_rows(path, &CURVE_COLUMNS)?,
        })
    }

    pub fn macro_auroc(&self, lead: usize, system: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.class == AVERAGE && r.lead_hours == lead && r.system == system)
            .and_then(|r| r.auroc)
    }
}

fn rows_to_string<T: Serialize>(columns: &[&str], rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_rows<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<()> {
    let text = rows_to_string(columns, rows)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != columns {
        return Err(Error::Schema(format!(
            "{}: header {header:?} does not match {columns:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fixed leads reported next to the current horizon.
    pub lead_times: Vec<usize>,
    /// Longest lead of the lead-time curve.
    pub max_lead_hours: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lead_times: vec![12, 24],
            max_lead_hours: 48,
            threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lead_times.iter().any(|&l| l == 0) {
            out.push("evaluate.lead_times must be positive hours".into());
        }
        if self.max_lead_hours == 0 {
            out.push("evaluate.max_lead_hours must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            out.push(format!("evaluate.threshold ({}) must lie in [0, 1]", self.threshold));
        }
        out
    }
}

pub const CURRENT: &str = "current";
pub const CURRENT_REPORT: &str = "current_report";

pub fn lead_horizon(lead: usize) -> String {
    format!("{lead}h")
}

/// Report and lead-time curve over already-scored patients.
pub fn evaluate_scores(patients: &[PatientScores], config: &EvalConfig) -> (EvalReport, LeadCurve, usize) {
    let mut horizons: Vec<(String, HorizonSamples)> = vec![
        (CURRENT.to_string(), current_samples(patients, config.threshold)),
        (CURRENT_REPORT.to_string(), extract_horizon_samples(patients, 0)),
    ];
    for &lead in &config.lead_times {
        horizons.push((lead_horizon(lead), extract_horizon_samples(patients, lead)));
    }
    let skipped = horizons[1].1.skipped_unlabeled;
    let mut report = EvalReport::default();
    for (name, s) in &horizons {
        report.rows.extend(summarize(&s.model, name, SYSTEMS[0], config.threshold));
        report.rows.extend(summarize(&s.baseline, name, SYSTEMS[1], config.threshold));
    }
    let mut curve = LeadCurve::default();
    for lead in 1..=config.max_lead_hours {
        let s = extract_horizon_samples(patients, lead);
        for (system, samples) in [(SYSTEMS[0], &s.model), (SYSTEMS[1], &s.baseline)] {
            let rows = summarize(samples, "", system, config.threshold);
            curve.rows.extend(rows.into_iter().map(|r| CurveRow {
                class: r.class,
                lead_hours: lead,
                system: system.to_string(),
                auroc: r.auroc,
                auprc: r.auprc,
                n: r.n,
            }));
        }
    }
    (report, curve, skipped)
}

/// Macro AUROC per horizon and system, for logging.
pub fn headline(report: &EvalReport) -> BTreeMap<(String, String), Option<f64>> {
    report
        .rows
        .iter()
        .filter(|r| r.class == AVERAGE)
        .map(|r| ((r.horizon.clone(), r.system.clone()), r.auroc))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auroc(&[0.1, 0.4], &[true, true]), None);
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        let ap = auprc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.3; 4], &[true, false, false, false]), Some(0.25));
        assert_eq!(auprc(&[0.3, 0.2], &[false, false]), None);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.6, 0.4], &[true, false], 0.5), Some(1.0));
        assert_eq!(accuracy(&[0.9, 0.2, 0.8, 0.1], &[true, true, false, false], 0.5), Some(0.5));
        assert_eq!(accuracy(&[], &[], 0.5), None);
    }

    fn patient(t_first: usize, len: usize, events: Vec<CxrEvent>) -> PatientScores {
        let track = |bias: f32| (0..len * NUM_CLASSES).map(|i| bias + (i / NUM_CLASSES) as f32 * 0.001).collect();
        PatientScores {
            patient_id: "p".into(),
            t_first,
            model: track(0.1),
            baseline: track(0.2),
            target: track(0.3),
            events,
        }
    }

    fn event(hour: usize, labels: Option<Vec<u8>>) -> CxrEvent {
        CxrEvent {
            hour,
            embedding: vec![],
            labels,
        }
    }

    #[test]
    fn lead_sampling_reads_scores_before_the_event() {
        let p = patient(0, 51, vec![event(0, Some(vec![0; 10])), event(50, Some(vec![1; 10]))]);
        let s = extract_horizon_samples(std::slice::from_ref(&p), 12);
        assert_eq!(s.model.len(), NUM_CLASSES);
        assert!(s.model.iter().all(|x| x.hour == 38 && x.label && x.lead_hours == 12));
        assert!((s.model[0].score - 0.138).abs() < 1e-6);

        let early = patient(0, 9, vec![event(0, None), event(8, Some(vec![1; 10]))]);
        assert!(extract_horizon_samples(&[early.clone()], 12).model.is_empty());
        let now = extract_horizon_samples(&[early], 0);
        assert!(now.model.iter().all(|x| x.hour == 8));
    }

    #[test]
    fn unlabeled_events_are_counted() {
        let p = patient(0, 20, vec![event(0, None), event(10, None), event(19, Some(vec![0; 10]))]);
        let s = extract_horizon_samples(&[p], 0);
        assert_eq!(s.skipped_unlabeled, 1);
        assert_eq!(s.model.len(), NUM_CLASSES);
    }

    #[test]
    fn identical_systems_give_identical_columns() {
        let mut p = patient(3, 30, vec![event(3, None), event(20, Some(vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0])), event(32, Some(vec![0; 10]))]);
        p.baseline = p.model.clone();
        let (report, _, _) = evaluate_scores(&[p], &EvalConfig::default());
        let pick = |system: &str| -> Vec<_> {
            report
                .rows
                .iter()
                .filter(|r| r.system == system)
                .map(|r| (r.auroc, r.auprc, r.accuracy, r.n))
                .collect()
        };
        assert_eq!(pick("model"), pick("baseline"));
    }
}
