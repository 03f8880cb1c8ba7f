//! Per-patient embedding tracks on the hourly grid.
//!
//! Between consecutive CXR anchors the target track is the straight line in
//! embedding space; the previous track holds the latest CXR strictly before
//! each hour. Only hours from the first to the last CXR form the window.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::clinical::{featurize, FeatureVector, Observation, VariableSet};
use crate::error::{Error, Result};

/// Width of a CXR embedding.
pub const EMBED_DIM: usize = 512;

/// A recorded chest X-ray, represented by its embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CxrEvent {
    pub hour: usize,
    pub embedding: Vec<f32>,
    /// Report-derived findings, one 0/1 entry per class, when available.
    #[serde(default)]
    pub labels: Option<Vec<u8>>,
}

/// Sort events by hour and check the invariants the tracks depend on.
pub fn ordered_events(events: &[CxrEvent]) -> Result<Vec<&CxrEvent>> {
    if events.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two CXR events, found {}",
            events.len()
        )));
    }
    let mut sorted: Vec<&CxrEvent> = events.iter().collect();
    sorted.sort_by_key(|e| e.hour);
    for pair in sorted.windows(2) {
        if pair[0].hour == pair[1].hour {
            return Err(Error::Data(format!("duplicate CXR anchor at hour {}", pair[0].hour)));
        }
    }
    let dim = sorted[0].embedding.len();
    if let Some(e) = sorted.iter().find(|e| e.embedding.len() != dim) {
        return Err(Error::Data(format!(
            "embedding at hour {} has {} values, expected {dim}",
            e.hour,
            e.embedding.len()
        )));
    }
    Ok(sorted)
}

/// Hourly rows `[first anchor, last anchor]` of the piecewise-linear path
/// through `anchors` (sorted, strictly increasing hours). Arithmetic runs in
/// `f64`; anchor rows are copied verbatim.
pub fn interpolate_track<F: Real>(anchors: &[(usize, &[F])]) -> Result<Vec<F>> {
    if anchors.len() < 2 {
        return Err(Error::Data("interpolation needs at least two anchors".into()));
    }
    let dim = anchors[0].1.len();
    let (first, last) = (anchors[0].0, anchors[anchors.len() - 1].0);
    let mut out = Vec::with_capacity((last - first + 1) * dim);
    for (seg, pair) in anchors.windows(2).enumerate() {
        let (k1, a) = pair[0];
        let (k2, b) = pair[1];
        if k2 <= k1 {
            return Err(Error::Data(format!("anchor hours must increase strictly, got {k1} then {k2}")));
        }
        if a.len() != dim || b.len() != dim {
            return Err(Error::Data("anchor embeddings differ in length".into()));
        }
        if seg == 0 {
            out.extend_from_slice(a);
        }
        let span = (k2 - k1) as f64;
        for h in k1 + 1..k2 {
            let w = (h - k1) as f64 / span;
            out.extend(a.iter().zip(b).map(|(&x, &y)| {
                let (x, y) = (x.f64(), y.f64());
                F::of((x + w * (y - x)).clamp(x.min(y), x.max(y)))
            }));
        }
        out.extend_from_slice(b);
    }
    Ok(out)
}

/// The per-hour tracks for one patient's window.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTrack {
    pub t_first: usize,
    pub t_last: usize,
    /// Interpolated targets, `[len, dim]` row-major.
    pub target: Vec<f32>,
    /// Latest CXR strictly before each hour (the first CXR at `t_first`).
    pub previous: Vec<f32>,
    pub anchor_hours: Vec<usize>,
    pub dim: usize,
}

impl EmbeddingTrack {
    pub fn len(&self) -> usize {
        self.t_last - self.t_first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, hour: usize) -> bool {
        (self.t_first..=self.t_last).contains(&hour)
    }

    pub fn target_at(&self, hour: usize) -> &[f32] {
        let r = hour - self.t_first;
        &self.target[r * self.dim..(r + 1) * self.dim]
    }

    pub fn previous_at(&self, hour: usize) -> &[f32] {
        let r = hour - self.t_first;
        &self.previous[r * self.dim..(r + 1) * self.dim]
    }
}

/// Target track between the first and last CXR.
pub fn interpolate_targets(events: &[CxrEvent]) -> Result<Vec<f32>> {
    let sorted = ordered_events(events)?;
    let anchors: Vec<(usize, &[f32])> = sorted.iter().map(|e| (e.hour, e.embedding.as_slice())).collect();
    interpolate_track(&anchors)
}

/// Previous-CXR track over `[t_first, t_last]`, forward-filled with the
/// strictly-before rule.
pub fn fill_previous(events: &[CxrEvent], window: (usize, usize)) -> Result<Vec<f32>> {
    let sorted = ordered_events(events)?;
    let dim = sorted[0].embedding.len();
    let (t_first, t_last) = window;
    let mut out = Vec::with_capacity((t_last + 1 - t_first) * dim);
    let mut cur = 0;
    for t in t_first..=t_last {
        while cur + 1 < sorted.len() && sorted[cur + 1].hour < t {
            cur += 1;
        }
        out.extend_from_slice(&sorted[cur].embedding);
    }
    Ok(out)
}

pub fn build_track(events: &[CxrEvent]) -> Result<EmbeddingTrack> {
    let sorted = ordered_events(events)?;
    let t_first = sorted[0].hour;
    let t_last = sorted[sorted.len() - 1].hour;
    Ok(EmbeddingTrack {
        t_first,
        t_last,
        target: interpolate_targets(events)?,
        previous: fill_previous(events, (t_first, t_last))?,
        anchor_hours: sorted.iter().map(|e| e.hour).collect(),
        dim: sorted[0].embedding.len(),
    })
}

/// Model inputs for one window: clinical features then the previous-CXR
/// embedding, per hour.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedInput {
    pub t_first: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FusedInput {
    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width..(r + 1) * self.width]
    }
}

/// Concatenate window features with the previous track, clinical block first.
pub fn fuse(features: &[FeatureVector], track: &EmbeddingTrack) -> Result<FusedInput> {
    let span = |f: &[FeatureVector]| match (f.first(), f.last()) {
        (Some(a), Some(b)) => (a.hour, b.hour),
        _ => (usize::MAX, usize::MAX),
    };
    let fs = span(features);
    if fs != (track.t_first, track.t_last) || features.len() != track.len() {
        return Err(Error::Alignment {
            features: fs,
            track: (track.t_first, track.t_last),
        });
    }
    let n = features[0].values.len();
    let width = n + track.dim;
    let mut data = Vec::with_capacity(width * features.len());
    for (r, f) in features.iter().enumerate() {
        data.extend(f.values.iter().map(|&v| v as f32));
        data.extend_from_slice(&track.previous[r * track.dim..(r + 1) * track.dim]);
    }
    Ok(FusedInput {
        t_first: track.t_first,
        width,
        data,
    })
}

/// Everything the model and evaluator need for one patient, restricted to
/// the inclusion window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientWindow {
    pub patient_id: String,
    /// Clinical features over the window, `[len, n]`.
    pub features: Vec<f32>,
    pub observed_mask: Vec<bool>,
    pub n_features: usize,
    pub track: EmbeddingTrack,
    /// Anchor events in hour order (embedding and report labels).
    pub events: Vec<CxrEvent>,
}

impl PatientWindow {
    /// Featurize the stay and cut it to the window of the patient's CXRs.
    pub fn build(
        patient_id: &str,
        observations: &[Observation],
        events: &[CxrEvent],
        stay_hours: usize,
        vars: &VariableSet,
    ) -> Result<Self> {
        let track = build_track(events)?;
        if track.t_last >= stay_hours {
            return Err(Error::Data(format!(
                "patient {patient_id}: CXR at hour {} is past the {stay_hours}-hour stay",
                track.t_last
            )));
        }
        let feats = featurize(observations, vars, stay_hours)?;
        let window = &feats[track.t_first..=track.t_last];
        let n = vars.width();
        let mut events: Vec<CxrEvent> = events.to_vec();
        events.sort_by_key(|e| e.hour);
        Ok(PatientWindow {
            patient_id: patient_id.to_string(),
            features: window.iter().flat_map(|f| f.values.iter().map(|&v| v as f32)).collect(),
            observed_mask: window.iter().flat_map(|f| f.observed_mask.iter().copied()).collect(),
            n_features: n,
            track,
            events,
        })
    }

    /// Rebuild from stored features and anchor events.
    pub fn from_parts(
        patient_id: String,
        features: Vec<f32>,
        observed_mask: Vec<bool>,
        n_features: usize,
        events: Vec<CxrEvent>,
    ) -> Result<Self> {
        let track = build_track(&events)?;
        if features.len() != track.len() * n_features || observed_mask.len() != features.len() {
            return Err(Error::Alignment {
                features: (track.t_first, track.t_first + features.len() / n_features.max(1)),
                track: (track.t_first, track.t_last),
            });
        }
        Ok(PatientWindow {
            patient_id,
            features,
            observed_mask,
            n_features,
            track,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.track.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn feature_vectors(&self) -> Vec<FeatureVector> {
        (0..self.len())
            .map(|r| FeatureVector {
                hour: self.track.t_first + r,
                values: self.features[r * self.n_features..(r + 1) * self.n_features]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
                observed_mask: self.observed_mask[r * self.n_features..(r + 1) * self.n_features].to_vec(),
            })
            .collect()
    }

    pub fn fused(&self) -> Result<FusedInput> {
        fuse(&self.feature_vectors(), &self.track)
    }
}
