//! Hourly clinical feature matrix from irregular EMR observations.
//!
//! Raw observations are validated against physiological bounds, binned per
//! hour, forward-filled, backstopped with the healthy-range midpoint, scaled
//! by the healthy reference range and finally one-hot expanded.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of feature columns produced by the bundled ICU variable list.
pub const DEFAULT_FEATURE_DIM: usize = 82;

const DEFAULT_VARIABLES: &str = include_str!("../data/icu_variables.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Categorical,
}

/// Validation and normalization rules for one clinical variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phys_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phys_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub healthy_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub healthy_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl VariableSpec {
    pub fn numeric(name: &str, phys: (f64, f64), healthy: (f64, f64)) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind: VariableKind::Numeric,
            phys_lo: Some(phys.0),
            phys_hi: Some(phys.1),
            healthy_lo: Some(healthy.0),
            healthy_hi: Some(healthy.1),
            categories: None,
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind: VariableKind::Categorical,
            phys_lo: None,
            phys_hi: None,
            healthy_lo: None,
            healthy_hi: None,
            categories: Some(categories.iter().map(|c| c.to_string()).collect()),
        }
    }

    pub fn width(&self) -> usize {
        match self.kind {
            VariableKind::Numeric => 1,
            VariableKind::Categorical => self.categories.as_ref().map_or(0, Vec::len),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(format!("{}: {msg}", self.name)));
        match self.kind {
            VariableKind::Numeric => {
                let (Some(pl), Some(ph), Some(hl), Some(hh)) =
                    (self.phys_lo, self.phys_hi, self.healthy_lo, self.healthy_hi)
                else {
                    return bad("numeric variable needs phys_lo, phys_hi, healthy_lo, healthy_hi".into());
                };
                if self.categories.is_some() {
                    return bad("numeric variable cannot list categories".into());
                }
                if ![pl, ph, hl, hh].iter().all(|v| v.is_finite()) {
                    return bad("bounds must be finite".into());
                }
                if hl == hh {
                    return bad(format!("degenerate healthy range [{hl}, {hh}]"));
                }
                if !(pl < ph && pl <= hl && hl < hh && hh <= ph) {
                    return bad(format!(
                        "need phys_lo < phys_hi and phys_lo <= healthy_lo < healthy_hi <= phys_hi, got phys [{pl}, {ph}] healthy [{hl}, {hh}]"
                    ));
                }
            }
            VariableKind::Categorical => {
                let Some(cats) = &self.categories else {
                    return bad("categorical variable needs categories".into());
                };
                if cats.is_empty() {
                    return bad("empty category list".into());
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = cats.iter().find(|c| !seen.insert(c.as_str())) {
                    return bad(format!("duplicate category {dup:?}"));
                }
            }
        }
        Ok(())
    }

    /// Healthy-range midpoint in native units.
    pub fn healthy_midpoint(&self) -> Option<f64> {
        Some(self.healthy_lo? + 0.5 * (self.healthy_hi? - self.healthy_lo?))
    }

    /// Min-max scaling by the healthy reference range. Not clamped: values
    /// outside the healthy range land outside `[0, 1]`. The midpoint maps to
    /// exactly 0.5.
    pub fn normalize(&self, value: f64) -> f64 {
        let (lo, hi) = (
            self.healthy_lo.expect("numeric spec"),
            self.healthy_hi.expect("numeric spec"),
        );
        let width = hi - lo;
        let mid = lo + 0.5 * width;
        (value - mid) / width + 0.5
    }

    fn in_bounds(&self, value: f64) -> bool {
        match (self.phys_lo, self.phys_hi) {
            (Some(lo), Some(hi)) => value.is_finite() && value >= lo && value <= hi,
            _ => false,
        }
    }
}

/// A validated list of variables and the feature columns they expand to.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableSet {
    specs: Vec<VariableSpec>,
    offsets: Vec<usize>,
    index: HashMap<String, usize>,
    width: usize,
}

impl VariableSet {
    pub fn new(specs: Vec<VariableSpec>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut offsets = Vec::with_capacity(specs.len());
        let mut width = 0;
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if index.insert(s.name.clone(), i).is_some() {
                return Err(Error::Spec(format!("duplicate variable {}", s.name)));
            }
            offsets.push(width);
            width += s.width();
        }
        Ok(VariableSet {
            specs,
            offsets,
            index,
            width,
        })
    }

    /// The bundled ICU variable list (82 feature columns).
    pub fn default_icu() -> Self {
        let specs: Vec<VariableSpec> = serde_json::from_str(DEFAULT_VARIABLES).expect("bundled variable list parses");
        VariableSet::new(specs).expect("bundled variable list is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        VariableSet::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        VariableSet::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.specs).expect("specs serialize")
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    /// Total number of feature columns after one-hot expansion.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// First feature column of variable `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Column names, with one-hot columns written `variable=category`.
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width);
        for s in &self.specs {
            match s.kind {
                VariableKind::Numeric => out.push(s.name.clone()),
                VariableKind::Categorical => {
                    for c in s.categories.as_deref().unwrap_or_default() {
                        out.push(format!("{}={c}", s.name));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObsValue {
    Number(f64),
    Label(String),
}

/// One raw measurement. `hour` is fractional hours since ICU admission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub var: String,
    pub hour: f64,
    pub value: ObsValue,
}

/// One hourly bin of a single variable, in native units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binned {
    Numeric(f64),
    Category(usize),
}

/// Per-hour, per-variable bins; `None` marks an empty bin.
#[derive(Clone, Debug, PartialEq)]
pub struct HourlyBins {
    pub hours: usize,
    pub n_vars: usize,
    cells: Vec<Option<Binned>>,
    /// Observations dropped for being out of bounds or outside the stay.
    pub discarded: usize,
}

impl HourlyBins {
    pub fn get(&self, hour: usize, var: usize) -> Option<Binned> {
        self.cells[hour * self.n_vars + var]
    }
}

/// Bin observations into `[h, h + 1)` hours. Numeric readings outside the
/// physiological bounds are dropped and the rest averaged; a categorical bin
/// keeps the last valid label in the hour.
pub fn bin_hourly(observations: &[Observation], vars: &VariableSet, stay_hours: usize) -> Result<HourlyBins> {
    if stay_hours == 0 {
        return Err(Error::Data("stay_hours must be at least 1".into()));
    }
    let n_vars = vars.specs.len();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); stay_hours * n_vars];
    // (timestamp, category) is a total order independent of input order
    let mut latest: Vec<Option<(f64, usize)>> = vec![None; stay_hours * n_vars];
    let mut discarded = 0;
    for obs in observations {
        let vi = vars
            .position(&obs.var)
            .ok_or_else(|| Error::Schema(format!("unknown variable {:?}", obs.var)))?;
        let spec = &vars.specs[vi];
        if !obs.hour.is_finite() || obs.hour < 0.0 {
            return Err(Error::Data(format!(
                "observation of {} has invalid timestamp {}",
                obs.var, obs.hour
            )));
        }
        let hour = obs.hour.floor() as usize;
        if hour >= stay_hours {
            discarded += 1;
            continue;
        }
        let cell = hour * n_vars + vi;
        match (&obs.value, spec.kind) {
            (ObsValue::Number(v), VariableKind::Numeric) => {
                if spec.in_bounds(*v) {
                    numeric[cell].push(*v);
                } else {
                    discarded += 1;
                }
            }
            (ObsValue::Label(label), VariableKind::Categorical) => {
                let cats = spec.categories.as_deref().unwrap_or_default();
                match cats.iter().position(|c| c == label) {
                    Some(ci) => {
                        let key = (obs.hour, ci);
                        let newer = match latest[cell] {
                            None => true,
                            Some(prev) => key.0.total_cmp(&prev.0).then(key.1.cmp(&prev.1)).is_gt(),
                        };
                        if newer {
                            latest[cell] = Some(key);
                        }
                    }
                    None => discarded += 1,
                }
            }
            (ObsValue::Number(_), VariableKind::Categorical) => {
                return Err(Error::Schema(format!("{} is categorical but got a number", obs.var)));
            }
            (ObsValue::Label(_), VariableKind::Numeric) => {
                return Err(Error::Schema(format!("{} is numeric but got a label", obs.var)));
            }
        }
    }
    let cells = numeric
        .into_iter()
        .zip(latest)
        .map(|(mut vals, cat)| {
            if let Some((_, ci)) = cat {
                return Some(Binned::Category(ci));
            }
            if vals.is_empty() {
                return None;
            }
            // sorted summation keeps the mean independent of arrival order
            vals.sort_by(f64::total_cmp);
            Some(Binned::Numeric(vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    Ok(HourlyBins {
        hours: stay_hours,
        n_vars,
        cells,
        discarded,
    })
}

/// The clinical vector for one hour.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub hour: usize,
    pub values: Vec<f64>,
    /// True where a measurement in this hour, not imputation, produced the value.
    pub observed_mask: Vec<bool>,
}

/// Forward-fill, backstop, normalize and one-hot encode binned values.
///
/// Hours before a variable's first observation take the healthy midpoint
/// (0.5 after scaling); categorical variables fall back to their first
/// listed category.
pub fn impute(bins: &HourlyBins, vars: &VariableSet) -> Vec<FeatureVector> {
    let mut carried: Vec<Option<Binned>> = vec![None; bins.n_vars];
    (0..bins.hours)
        .map(|h| {
            let mut values = vec![0.0; vars.width];
            let mut observed_mask = vec![false; vars.width];
            for (vi, spec) in vars.specs.iter().enumerate() {
                let fresh = bins.get(h, vi);
                if fresh.is_some() {
                    carried[vi] = fresh;
                }
                let off = vars.offsets[vi];
                let observed = fresh.is_some();
                match spec.kind {
                    VariableKind::Numeric => {
                        values[off] = match carried[vi] {
                            Some(Binned::Numeric(v)) => spec.normalize(v),
                            _ => 0.5,
                        };
                        observed_mask[off] = observed;
                    }
                    VariableKind::Categorical => {
                        let ci = match carried[vi] {
                            Some(Binned::Category(ci)) => ci,
                            _ => 0,
                        };
                        values[off + ci] = 1.0;
                        observed_mask[off..off + spec.width()].fill(observed);
                    }
                }
            }
            FeatureVector {
                hour: h,
                values,
                observed_mask,
            }
        })
        .collect()
}

/// `bin_hourly` followed by `impute`.
pub fn featurize(observations: &[Observation], vars: &VariableSet, stay_hours: usize) -> Result<Vec<FeatureVector>> {
    Ok(impute(&bin_hourly(observations, vars, stay_hours)?, vars))
}
