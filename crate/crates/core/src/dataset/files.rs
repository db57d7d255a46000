use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_record, Dataset, FeatureRecord};
use crate::error::{invalid, FvError, Result};
use crate::model::Modality;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| FvError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| FvError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> FvError {
    FvError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a JSON-lines features file.
pub fn load_features(path: &Path, face_dim: Option<usize>, voice_dim: Option<usize>) -> Result<Dataset> {
    parse_features(BufReader::new(open(path)?), path, face_dim, voice_dim)
}

/// Parses JSON-lines feature records; `origin` only labels diagnostics.
pub fn parse_features(reader: impl BufRead, origin: &Path, face_dim: Option<usize>, voice_dim: Option<usize>) -> Result<Dataset> {
    let mut face_dim = face_dim;
    let mut voice_dim = voice_dim;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| FvError::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FeatureRecord = serde_json::from_str(&line).map_err(|e| parse_err(origin, n, e.to_string()))?;
        check_record(&r, &mut face_dim, &mut voice_dim).map_err(|msg| parse_err(origin, n, msg))?;
        if !seen.insert(r.sample_id.clone()) {
            return Err(parse_err(origin, n, format!("duplicate sample_id {}", r.sample_id)));
        }
        records.push(r);
    }
    Dataset::new(records, face_dim, voice_dim)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    write_json_lines(path, records)
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| invalid(format!("serializing {}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| FvError::io(path, e))?;
    }
    w.flush().map_err(|e| FvError::io(path, e))
}

/// Age and gender predictions for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRecord {
    pub sample_id: String,
    pub modality: Modality,
    pub age: f64,
    /// Probability of the reference gender class.
    pub gender_prob: f64,
}

pub fn load_attributes(path: &Path) -> Result<Vec<AttributeRecord>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| FvError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: AttributeRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        if !(1.0..=100.0).contains(&r.age) {
            return Err(parse_err(path, n, format!("age {} outside [1, 100]", r.age)));
        }
        if !(0.0..=1.0).contains(&r.gender_prob) {
            return Err(parse_err(path, n, format!("gender_prob {} outside [0, 1]", r.gender_prob)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_attributes(path: &Path, records: &[AttributeRecord]) -> Result<()> {
    write_json_lines(path, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialLabel {
    Same,
    Different,
    Unknown,
}

impl TrialLabel {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1" => Some(TrialLabel::Same),
            "0" => Some(TrialLabel::Different),
            "" => Some(TrialLabel::Unknown),
            _ => None,
        }
    }

    fn as_csv(self) -> &'static str {
        match self {
            TrialLabel::Same => "1",
            TrialLabel::Different => "0",
            TrialLabel::Unknown => "",
        }
    }
}

/// One face–voice verification trial (also used for pair lists).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub trial_id: String,
    pub face_sample_id: String,
    pub voice_sample_id: String,
    pub label: TrialLabel,
}

const TRIAL_HEADER: [&str; 4] = ["trial_id", "face_sample_id", "voice_sample_id", "label"];

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    read_trials(open(path)?, path)
}

pub(crate) fn read_trials(reader: impl Read, path: &Path) -> Result<Vec<Trial>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != TRIAL_HEADER {
        return Err(parse_err(path, 1, format!("expected header {}", TRIAL_HEADER.join(","))));
    }
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let n = i + 2;
        let row = row.map_err(|e| parse_err(path, n, e.to_string()))?;
        let label = TrialLabel::parse(&row[3]).ok_or_else(|| parse_err(path, n, format!("label must be 1, 0 or empty, got {:?}", &row[3])))?;
        if !ids.insert(row[0].to_string()) {
            return Err(parse_err(path, n, format!("duplicate trial_id {}", &row[0])));
        }
        out.push(Trial {
            trial_id: row[0].to_string(),
            face_sample_id: row[1].to_string(),
            voice_sample_id: row[2].to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let io = |e: csv::Error| invalid(format!("writing {}: {e}", path.display()));
    w.write_record(TRIAL_HEADER).map_err(io)?;
    for t in trials {
        w.write_record([t.trial_id.as_str(), &t.face_sample_id, &t.voice_sample_id, t.label.as_csv()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| FvError::io(path, e))
}

/// Ground-truth attributes of one sample, for test assertions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub sample_id: String,
    pub identity: String,
    pub age: u32,
    /// 1 for the reference gender class.
    pub gender: u8,
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| invalid(format!("writing {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| FvError::io(path, e))
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| parse_err(path, i + 2, e.to_string())))
        .collect()
}
