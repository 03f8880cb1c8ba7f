//! In-memory stages shared by the commands: windowing a cohort, preparing
//! training sequences and scoring windows for evaluation.

use crate::classifier::Mlp;
use crate::clinical::VariableSet;
use crate::error::{Error, Result};
use crate::io::PatientRecord;
use crate::metrics::PatientScores;
use crate::model::{DecoderInput, Model};
use crate::trainer::TrainSeq;
use crate::trajectory::PatientWindow;

/// Windows for every patient, in input order.
pub fn build_windows(records: &[PatientRecord], vars: &VariableSet) -> Result<Vec<PatientWindow>> {
    records
        .iter()
        .map(|r| {
            PatientWindow::build(&r.patient_id, &r.observations, &r.cxr_events, r.stay_hours, vars)
                .map_err(|e| Error::Data(format!("patient {}: {e}", r.patient_id)))
        })
        .collect()
}

pub fn train_sequences(windows: &[PatientWindow], mlp: &Mlp<f32>, decoder: DecoderInput) -> Result<Vec<TrainSeq<f32>>> {
    windows.iter().map(|w| TrainSeq::from_window(w, mlp, decoder)).collect()
}

/// Predicted embeddings for a window. No anchor after an hour reaches the
/// prediction for that hour: the decoder reads either the previous-CXR track
/// or, for target-trained models, its own outputs from the first CXR on.
pub fn predict_window(model: &Model<f32>, w: &PatientWindow) -> Result<Vec<f32>> {
    let fused = w.fused()?;
    let out = match model.config.decoder_input {
        DecoderInput::Previous => model.forward(&fused.data, &w.track.previous)?,
        DecoderInput::Target => model.generate(&fused.data, &w.events[0].embedding)?,
    };
    Ok(out.into_data())
}

/// Classifier outputs on the predicted, previous-CXR and target tracks.
pub fn score_window(model: &Model<f32>, mlp: &Mlp<f32>, w: &PatientWindow) -> Result<PatientScores> {
    let predicted = predict_window(model, w)?;
    Ok(PatientScores {
        patient_id: w.patient_id.clone(),
        t_first: w.track.t_first,
        model: mlp.predict_rows(&predicted)?,
        baseline: mlp.predict_rows(&w.track.previous)?,
        target: mlp.predict_rows(&w.track.target)?,
        events: w.events.clone(),
    })
}
