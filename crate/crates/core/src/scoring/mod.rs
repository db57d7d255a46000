//! Trial scoring by Euclidean distance, EER and DET computation, and
//! confidence-based score polarization.

mod eer;
mod io;
mod polarize;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Trial, TrialLabel};
use crate::error::{invalid, Result};

pub use eer::{compute_eer, det_curve, eer_from_scores, DetPoint, EerResult, ScoreKind};
pub use io::{attach_scores, read_det, read_scores, write_det, write_scores, ScoreRow};
pub use polarize::{
    age_confidence, combined_confidence, gender_confidence, polarize, polarize_file, polarize_scores, write_audit,
    AuditEntry, ConfidenceConfig, Direction,
};

/// A scored face–voice trial. Higher scores mean the two samples are more
/// likely to come from different people.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub trial_id: String,
    pub face_sample_id: String,
    pub voice_sample_id: String,
    pub label: TrialLabel,
    pub score: f64,
    pub adjusted_score: Option<f64>,
    pub confidence: Option<f64>,
}

impl TrialScore {
    pub fn value(&self, kind: ScoreKind) -> Option<f64> {
        match kind {
            ScoreKind::Raw => Some(self.score),
            ScoreKind::Adjusted => self.adjusted_score,
        }
    }
}

/// A trial that could not be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedTrial {
    pub trial_id: String,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub scores: Vec<TrialScore>,
    pub rejected: Vec<RejectedTrial>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("embedding lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Euclidean distance between the face and voice embeddings of each trial.
/// Trials with a missing embedding are listed in `rejected`; output is
/// ordered by trial id.
pub fn trial_scores(
    trials: &[Trial],
    faces: &HashMap<String, Vec<f64>>,
    voices: &HashMap<String, Vec<f64>>,
) -> Result<ScoreReport> {
    let results: Vec<Result<std::result::Result<TrialScore, RejectedTrial>>> = trials
        .par_iter()
        .map(|t| {
            let f = faces.get(&t.face_sample_id);
            let v = voices.get(&t.voice_sample_id);
            match (f, v) {
                (Some(f), Some(v)) => Ok(Ok(TrialScore {
                    trial_id: t.trial_id.clone(),
                    face_sample_id: t.face_sample_id.clone(),
                    voice_sample_id: t.voice_sample_id.clone(),
                    label: t.label,
                    score: euclidean(f, v)?,
                    adjusted_score: None,
                    confidence: None,
                })),
                _ => {
                    let mut missing = Vec::new();
                    if f.is_none() {
                        missing.push(t.face_sample_id.clone());
                    }
                    if v.is_none() {
                        missing.push(t.voice_sample_id.clone());
                    }
                    Ok(Err(RejectedTrial {
                        trial_id: t.trial_id.clone(),
                        missing,
                    }))
                }
            }
        })
        .collect();
    let mut report = ScoreReport::default();
    for r in results {
        match r? {
            Ok(s) => report.scores.push(s),
            Err(rej) => report.rejected.push(rej),
        }
    }
    report.scores.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    report.rejected.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    Ok(report)
}
