use serde::{Deserialize, Serialize};

use super::TrialScore;
use crate::dataset::TrialLabel;
use crate::error::{invalid, Result};

/// Which score column of a trial to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Raw,
    Adjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// Threshold where the linearly interpolated FAR and FRR curves meet.
    pub threshold: f64,
    pub det: Vec<DetPoint>,
}

/// Targets are the low-score class: a trial is accepted when its score is
/// at most the threshold. FRR(t) is the fraction of targets above `t`, FAR(t)
/// the fraction of nontargets at or below `t`. The curve is evaluated at
/// every unique score and at both infinities, sorted by ascending threshold.
pub fn det_curve(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(invalid(format!(
            "EER needs both classes, got {} target and {} nontarget trials",
            targets.len(),
            nontargets.len()
        )));
    }
    if let Some(x) = targets.iter().chain(nontargets).find(|x| !x.is_finite()) {
        return Err(invalid(format!("non-finite score {x}")));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut points = Vec::with_capacity(all.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    let (mut t_le, mut n_le) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let u = all[i].0;
        while i < all.len() && all[i].0 == u {
            if all[i].1 {
                t_le += 1;
            } else {
                n_le += 1;
            }
            i += 1;
        }
        points.push(DetPoint {
            threshold: u,
            far: n_le as f64 / nn,
            frr: (targets.len() - t_le) as f64 / nt,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 1.0,
        frr: 0.0,
    });
    Ok(points)
}

/// Equal error rate, interpolating linearly across the sign change of
/// FAR − FRR along the DET curve.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    let det = det_curve(targets, nontargets)?;
    let gap = |p: &DetPoint| p.far - p.frr;
    let k = det
        .iter()
        .position(|p| gap(p) >= 0.0)
        .expect("the +inf endpoint has FAR - FRR = 1");
    let (eer, threshold) = if gap(&det[k]) == 0.0 {
        (det[k].far, det[k].threshold)
    } else {
        let (a, b) = (&det[k - 1], &det[k]);
        let lambda = -gap(a) / (gap(b) - gap(a));
        let threshold = if a.threshold.is_finite() && b.threshold.is_finite() {
            a.threshold + lambda * (b.threshold - a.threshold)
        } else if a.threshold.is_finite() {
            a.threshold
        } else {
            b.threshold
        };
        (a.far + lambda * (b.far - a.far), threshold)
    };
    Ok(EerResult { eer, threshold, det })
}

/// EER over labelled trials; trials with unknown labels are ignored.
pub fn compute_eer(scores: &[TrialScore], kind: ScoreKind) -> Result<EerResult> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for s in scores {
        let v = s
            .value(kind)
            .ok_or_else(|| invalid(format!("trial {} has no adjusted score", s.trial_id)))?;
        match s.label {
            TrialLabel::Same => targets.push(v),
            TrialLabel::Different => nontargets.push(v),
            TrialLabel::Unknown => {}
        }
    }
    eer_from_scores(&targets, &nontargets)
}
