//! WebAssembly bindings for the browser demo. Each export has a plain Rust
//! counterpart so the logic is testable natively; exports return JSON.

use cxrcast::autodiff::LrSchedule;
use cxrcast::clinical::{bin_hourly, impute, ObsValue, Observation, VariableSet, VariableSpec};
use cxrcast::metrics::{auprc, auroc};
use cxrcast::trajectory::{build_track, CxrEvent};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Learning rate at every optimizer step `0..=total_steps`.
pub fn lr_values(peak: f64, total_steps: usize, warmup_fraction: f64) -> Result<Vec<f64>, String> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err("peak learning rate must be positive".into());
    }
    if total_steps == 0 || total_steps > 1_000_000 {
        return Err("total steps must lie in 1..=1000000".into());
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err("warmup fraction must lie in [0, 1)".into());
    }
    let s = LrSchedule::new(peak, total_steps, warmup_fraction);
    (0..=total_steps).map(|t| s.lr_at(t).map_err(|e| e.to_string())).collect()
}

#[derive(Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub hours: Vec<usize>,
    /// Linear interpolation between anchors.
    pub target: Vec<f64>,
    /// Value of the latest anchor strictly before each hour.
    pub previous: Vec<f64>,
}

/// Target and previous-CXR tracks for scalar anchors.
pub fn trajectory(anchor_hours: &[u32], anchor_values: &[f64]) -> Result<Trajectory, String> {
    if anchor_hours.len() != anchor_values.len() {
        return Err("need one value per anchor hour".into());
    }
    let events: Vec<CxrEvent> = anchor_hours
        .iter()
        .zip(anchor_values)
        .map(|(&hour, &v)| CxrEvent {
            hour: hour as usize,
            embedding: vec![v as f32],
            labels: None,
        })
        .collect();
    let track = build_track(&events).map_err(|e| e.to_string())?;
    Ok(Trajectory {
        hours: (track.t_first..=track.t_last).collect(),
        target: track.target.iter().map(|&x| x as f64).collect(),
        previous: track.previous.iter().map(|&x| x as f64).collect(),
    })
}

#[derive(Debug, PartialEq, Serialize)]
pub struct FilledSeries {
    /// Normalized value per hour after forward fill and backstop.
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub discarded: usize,
}

/// Hourly binning, forward fill and healthy-range normalization of one
/// numeric variable.
pub fn forward_fill(
    stay_hours: usize,
    obs_hours: &[f64],
    obs_values: &[f64],
    healthy: (f64, f64),
    bounds: (f64, f64),
) -> Result<FilledSeries, String> {
    if obs_hours.len() != obs_values.len() {
        return Err("need one value per observation hour".into());
    }
    if stay_hours == 0 || stay_hours > 10_000 {
        return Err("stay must last 1..=10000 hours".into());
    }
    let vars = VariableSet::new(vec![VariableSpec::numeric("x", bounds, healthy)]).map_err(|e| e.to_string())?;
    let obs: Vec<Observation> = obs_hours
        .iter()
        .zip(obs_values)
        .map(|(&hour, &v)| Observation {
            var: "x".into(),
            hour,
            value: ObsValue::Number(v),
        })
        .collect();
    let bins = bin_hourly(&obs, &vars, stay_hours).map_err(|e| e.to_string())?;
    let rows = impute(&bins, &vars);
    Ok(FilledSeries {
        values: rows.iter().map(|r| r.values[0]).collect(),
        observed: rows.iter().map(|r| r.observed_mask[0]).collect(),
        discarded: bins.discarded,
    })
}

#[derive(Debug, PartialEq, Serialize)]
pub struct Curves {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    /// `(false positive rate, true positive rate)` at each distinct threshold.
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)` at each distinct threshold.
    pub pr: Vec<(f64, f64)>,
}

/// AUROC, AUPRC and the curves behind them, sweeping thresholds from high to low.
pub fn curves(scores: &[f64], labels: &[bool]) -> Result<Curves, String> {
    if scores.len() != labels.len() {
        return Err("need one label per score".into());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err("scores must be finite".into());
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if neg > 0 && pos > 0 {
            roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
        if pos > 0 {
            pr.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    if neg == 0 || pos == 0 {
        roc.clear();
    }
    Ok(Curves {
        auroc: auroc(scores, labels),
        auprc: auprc(scores, labels),
        roc,
        pr,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string())))
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve(peak: f64, total_steps: u32, warmup_fraction: f64) -> Result<Vec<f64>, JsError> {
    lr_values(peak, total_steps as usize, warmup_fraction).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trajectoryJson)]
pub fn trajectory_json(anchor_hours: Vec<u32>, anchor_values: Vec<f64>) -> Result<String, JsError> {
    to_js(trajectory(&anchor_hours, &anchor_values))
}

#[wasm_bindgen(js_name = forwardFillJson)]
pub fn forward_fill_json(
    stay_hours: u32,
    obs_hours: Vec<f64>,
    obs_values: Vec<f64>,
    healthy_lo: f64,
    healthy_hi: f64,
    phys_lo: f64,
    phys_hi: f64,
) -> Result<String, JsError> {
    to_js(forward_fill(
        stay_hours as usize,
        &obs_hours,
        &obs_values,
        (healthy_lo, healthy_hi),
        (phys_lo, phys_hi),
    ))
}

#[wasm_bindgen(js_name = curvesJson)]
pub fn curves_json(scores: Vec<f64>, labels: Vec<u8>) -> Result<String, JsError> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    to_js(curves(&scores, &labels))
}
