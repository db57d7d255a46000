use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use super::{DetPoint, TrialScore};
use crate::dataset::Trial;
use crate::error::{invalid, FvError, Result};

const RAW_HEADER: [&str; 2] = ["trial_id", "score"];
const ADJUSTED_HEADER: [&str; 4] = ["trial_id", "score", "adjusted_score", "confidence"];
const DET_HEADER: [&str; 3] = ["threshold", "far", "frr"];

/// One row of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub trial_id: String,
    pub score: f64,
    pub adjusted_score: Option<f64>,
    pub confidence: Option<f64>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> FvError {
    FvError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| invalid(format!("creating {}: {e}", path.display())))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `trial_id,score`, or the four-column layout when any trial carries
/// an adjusted score. Floats use the shortest round-trip representation.
pub fn write_scores(path: &Path, scores: &[TrialScore]) -> Result<()> {
    let adjusted = scores.iter().any(|s| s.adjusted_score.is_some());
    let mut w = writer(path)?;
    let err = |e: csv::Error| invalid(format!("writing {}: {e}", path.display()));
    if adjusted {
        w.write_record(ADJUSTED_HEADER).map_err(err)?;
        for s in scores {
            w.write_record([
                s.trial_id.clone(),
                s.score.to_string(),
                opt(s.adjusted_score),
                opt(s.confidence),
            ])
            .map_err(err)?;
        }
    } else {
        w.write_record(RAW_HEADER).map_err(err)?;
        for s in scores {
            w.write_record([s.trial_id.clone(), s.score.to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|e| FvError::io(path, e))
}

fn parse_float(path: &Path, line: usize, field: &str, text: &str) -> Result<f64> {
    text.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{field} {text:?} is not a number")))
}

fn parse_opt(path: &Path, line: usize, field: &str, text: &str) -> Result<Option<f64>> {
    if text.trim().is_empty() {
        Ok(None)
    } else {
        parse_float(path, line, field, text).map(Some)
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = File::open(path).map_err(|e| FvError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let wide = if headers == ADJUSTED_HEADER {
        true
    } else if headers == RAW_HEADER {
        false
    } else {
        return Err(parse_err(
            path,
            1,
            format!("expected header {} or {}", RAW_HEADER.join(","), ADJUSTED_HEADER.join(",")),
        ));
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let n = i + 2;
        let row = row.map_err(|e| parse_err(path, n, e.to_string()))?;
        if !seen.insert(row[0].to_string()) {
            return Err(parse_err(path, n, format!("duplicate trial_id {}", &row[0])));
        }
        let score = parse_float(path, n, "score", &row[1])?;
        if !(score >= 0.0 && score.is_finite()) {
            return Err(parse_err(path, n, format!("score {score} must be a nonnegative number")));
        }
        let (adjusted_score, confidence) = if wide {
            (parse_opt(path, n, "adjusted_score", &row[2])?, parse_opt(path, n, "confidence", &row[3])?)
        } else {
            (None, None)
        };
        out.push(ScoreRow {
            trial_id: row[0].to_string(),
            score,
            adjusted_score,
            confidence,
        });
    }
    Ok(out)
}

/// Joins score rows with the trial list that supplies sample ids and
/// labels. Trials without a score row are skipped; score rows for unknown
/// trials are an error. Output is ordered by trial id.
pub fn attach_scores(trials: &[Trial], rows: &[ScoreRow]) -> Result<Vec<TrialScore>> {
    let by_id: HashMap<&str, &Trial> = trials.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let t = by_id
            .get(r.trial_id.as_str())
            .ok_or_else(|| invalid(format!("score for unknown trial {}", r.trial_id)))?;
        out.push(TrialScore {
            trial_id: r.trial_id.clone(),
            face_sample_id: t.face_sample_id.clone(),
            voice_sample_id: t.voice_sample_id.clone(),
            label: t.label,
            score: r.score,
            adjusted_score: r.adjusted_score,
            confidence: r.confidence,
        });
    }
    out.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    Ok(out)
}

pub fn write_det(path: &Path, det: &[DetPoint]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e: csv::Error| invalid(format!("writing {}: {e}", path.display()));
    w.write_record(DET_HEADER).map_err(err)?;
    for p in det {
        w.write_record([p.threshold.to_string(), p.far.to_string(), p.frr.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| FvError::io(path, e))
}

pub fn read_det(path: &Path) -> Result<Vec<DetPoint>> {
    let file = File::open(path).map_err(|e| FvError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != DET_HEADER {
        return Err(parse_err(path, 1, format!("expected header {}", DET_HEADER.join(","))));
    }
    rdr.records()
        .enumerate()
        .map(|(i, row)| {
            let n = i + 2;
            let row = row.map_err(|e| parse_err(path, n, e.to_string()))?;
            Ok(DetPoint {
                threshold: parse_float(path, n, "threshold", &row[0])?,
                far: parse_float(path, n, "far", &row[1])?,
                frr: parse_float(path, n, "frr", &row[2])?,
            })
        })
        .collect()
}
