use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::io::{attach_scores, read_scores, write_scores};
use super::TrialScore;
use crate::dataset::{load_attributes, load_trials, AttributeRecord};
use crate::error::{config_err, invalid, FvError, Result};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceConfig {
    pub w_a: f64,
    pub w_g: f64,
    /// Confidence threshold `T`.
    pub threshold: f64,
    pub alpha_pol: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            w_a: 0.5,
            w_g: 0.5,
            threshold: 0.6,
            alpha_pol: 1.2,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_a >= 0.0 && self.w_g >= 0.0) {
            return Err(config_err(format!("confidence weights must be nonnegative, got {} and {}", self.w_a, self.w_g)));
        }
        if (self.w_a + self.w_g - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(config_err(format!("w_a + w_g must equal 1, got {}", self.w_a + self.w_g)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(config_err(format!("confidence threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if !(self.alpha_pol >= 1.0 && self.alpha_pol.is_finite()) {
            return Err(config_err(format!("alpha_pol must be at least 1, got {}", self.alpha_pol)));
        }
        Ok(())
    }
}

/// `1 / (1 + |age_a − age_f|)` for ages in [1, 100].
pub fn age_confidence(age_a: f64, age_f: f64) -> Result<f64> {
    for a in [age_a, age_f] {
        if !(1.0..=100.0).contains(&a) {
            return Err(invalid(format!("age {a} outside [1, 100]")));
        }
    }
    Ok(1.0 / (1.0 + (age_a - age_f).abs()))
}

/// Probability that two independent gender predictions agree.
pub fn gender_confidence(p_a: f64, p_f: f64) -> Result<f64> {
    for p in [p_a, p_f] {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("gender probability {p} outside [0, 1]")));
        }
    }
    Ok(p_a * p_f + (1.0 - p_a) * (1.0 - p_f))
}

pub fn combined_confidence(c_a: f64, c_g: f64, config: &ConfidenceConfig) -> Result<f64> {
    if !(c_a > 0.0 && c_a <= 1.0) {
        return Err(invalid(format!("age confidence {c_a} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&c_g) {
        return Err(invalid(format!("gender confidence {c_g} outside [0, 1]")));
    }
    Ok(config.w_a * c_a + config.w_g * c_g)
}

/// Shrinks the distance of a confident match and stretches every other one.
/// `C = T` counts as not confident.
pub fn polarize(score: f64, confidence: f64, config: &ConfidenceConfig) -> Result<f64> {
    if !(score >= 0.0 && score.is_finite()) {
        return Err(invalid(format!("score {score} must be a nonnegative number")));
    }
    if !(0.0..=1.0).contains(&confidence) {
        return Err(invalid(format!("confidence {confidence} outside [0, 1]")));
    }
    Ok(if confidence > config.threshold {
        score / config.alpha_pol
    } else {
        score * config.alpha_pol
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
    Unadjusted,
}

/// One line of the polarization audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub trial_id: String,
    pub c_a: Option<f64>,
    pub c_g: Option<f64>,
    pub c: Option<f64>,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

/// Polarizes every trial whose face and voice both have attribute
/// predictions. Other trials keep their raw score and are flagged in the
/// audit log.
pub fn polarize_scores(
    scores: &[TrialScore],
    attributes: &[AttributeRecord],
    config: &ConfidenceConfig,
) -> Result<(Vec<TrialScore>, Vec<AuditEntry>)> {
    config.validate()?;
    let mut by_id: HashMap<&str, &AttributeRecord> = HashMap::with_capacity(attributes.len());
    for a in attributes {
        if by_id.insert(a.sample_id.as_str(), a).is_some() {
            return Err(invalid(format!("duplicate attribute record for {}", a.sample_id)));
        }
    }
    let mut out = Vec::with_capacity(scores.len());
    let mut audit = Vec::with_capacity(scores.len());
    let mut flagged = 0usize;
    for s in scores {
        let face = by_id.get(s.face_sample_id.as_str());
        let voice = by_id.get(s.voice_sample_id.as_str());
        let mut adjusted = s.clone();
        let entry = match (face, voice) {
            (Some(f), Some(v)) => {
                let c_a = age_confidence(v.age, f.age)?;
                let c_g = gender_confidence(v.gender_prob, f.gender_prob)?;
                let c = combined_confidence(c_a, c_g, config)?;
                adjusted.adjusted_score = Some(polarize(s.score, c, config)?);
                adjusted.confidence = Some(c);
                AuditEntry {
                    trial_id: s.trial_id.clone(),
                    c_a: Some(c_a),
                    c_g: Some(c_g),
                    c: Some(c),
                    direction: if c > config.threshold { Direction::Down } else { Direction::Up },
                    missing: Vec::new(),
                }
            }
            _ => {
                flagged += 1;
                adjusted.adjusted_score = Some(s.score);
                adjusted.confidence = None;
                let missing = [(&s.face_sample_id, face.is_none()), (&s.voice_sample_id, voice.is_none())]
                    .into_iter()
                    .filter(|(_, absent)| *absent)
                    .map(|(id, _)| id.clone())
                    .collect();
                AuditEntry {
                    trial_id: s.trial_id.clone(),
                    c_a: None,
                    c_g: None,
                    c: None,
                    direction: Direction::Unadjusted,
                    missing,
                }
            }
        };
        out.push(adjusted);
        audit.push(entry);
    }
    if flagged > 0 {
        warn!("{flagged} of {} trials lack attribute predictions and keep their raw score", scores.len());
    }
    Ok((out, audit))
}

pub fn write_audit(path: &Path, audit: &[AuditEntry]) -> Result<()> {
    let mut text = String::new();
    for e in audit {
        text.push_str(&serde_json::to_string(e).map_err(|e| invalid(format!("serializing audit entry: {e}")))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| FvError::io(path, e))
}

/// File front end of [`polarize_scores`]: reads a score file, the trial list
/// it was computed from and the attribute predictions, then writes the
/// adjusted score file and a JSON-lines audit log.
pub fn polarize_file(
    scores_path: &Path,
    trials_path: &Path,
    attributes_path: &Path,
    config: &ConfidenceConfig,
    out_path: &Path,
    audit_path: &Path,
) -> Result<(Vec<TrialScore>, Vec<AuditEntry>)> {
    let trials = load_trials(trials_path)?;
    let rows = read_scores(scores_path)?;
    let scores = attach_scores(&trials, &rows)?;
    let attributes = load_attributes(attributes_path)?;
    let (adjusted, audit) = polarize_scores(&scores, &attributes, config)?;
    write_scores(out_path, &adjusted)?;
    write_audit(audit_path, &audit)?;
    Ok((adjusted, audit))
}
