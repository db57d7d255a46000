//! Feature records, pair construction, identity splits, batching and the
//! synthetic data generator.

mod files;
mod pairs;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use diffcore::DiffArray;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Modality;

pub use files::{
    load_attributes, load_features, load_trials, load_truth, parse_features, write_attributes, write_features,
    write_trials, write_truth, AttributeRecord, Trial, TrialLabel, TruthRow,
};
pub use pairs::{augment_pairs, index_pairs, make_batches, split_unseen, Pair, PairList, PairOrigin};
pub use synthetic::{gen_synthetic, make_trials, SyntheticData, SyntheticSpec};

/// One embedding sample of either modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub identity: String,
    pub scene: String,
    pub language: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Validated records with a sample-id index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<FeatureRecord>,
    face_dim: usize,
    voice_dim: usize,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Checks unique sample ids and per-modality vector lengths. Dimensions
    /// missing from `dims` are taken from the first record of that modality.
    pub fn new(records: Vec<FeatureRecord>, face_dim: Option<usize>, voice_dim: Option<usize>) -> Result<Self> {
        let mut face_dim = face_dim;
        let mut voice_dim = voice_dim;
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            check_record(r, &mut face_dim, &mut voice_dim).map_err(|msg| invalid(format!("record {i}: {msg}")))?;
            if index.insert(r.sample_id.clone(), i).is_some() {
                return Err(invalid(format!("duplicate sample_id {}", r.sample_id)));
            }
        }
        Ok(Self {
            records,
            face_dim: face_dim.unwrap_or(0),
            voice_dim: voice_dim.unwrap_or(0),
            index,
        })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn face_dim(&self) -> usize {
        self.face_dim
    }

    pub fn voice_dim(&self) -> usize {
        self.voice_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&FeatureRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    pub fn identities(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.identity.clone()).collect()
    }

    /// Stacks the vectors of the given samples into a matrix.
    pub fn matrix(&self, sample_ids: &[&str], modality: Modality) -> Result<DiffArray> {
        let dim = match modality {
            Modality::Face => self.face_dim,
            Modality::Voice => self.voice_dim,
        };
        let mut data = Vec::with_capacity(sample_ids.len() * dim);
        for id in sample_ids {
            let r = self
                .get(id)
                .ok_or_else(|| invalid(format!("unknown sample_id {id}")))?;
            if r.modality != modality {
                return Err(invalid(format!("sample {id} is a {} sample, expected {modality}", r.modality)));
            }
            data.extend_from_slice(&r.vector);
        }
        Ok(DiffArray::new(vec![sample_ids.len(), dim], data)?)
    }

    /// Restricts to records matching `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&FeatureRecord) -> bool) -> Result<Dataset> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(records, Some(self.face_dim), Some(self.voice_dim))
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut ids = BTreeSet::new();
        let mut scenes = BTreeSet::new();
        let mut languages = BTreeSet::new();
        let (mut faces, mut voices) = (0, 0);
        for r in &self.records {
            ids.insert(r.identity.as_str());
            scenes.insert((r.identity.as_str(), r.scene.as_str()));
            languages.insert(r.language.clone());
            match r.modality {
                Modality::Face => faces += 1,
                Modality::Voice => voices += 1,
            }
        }
        let (pairs, _) = index_pairs(&self.records);
        DatasetSummary {
            identities: ids.len(),
            scenes: scenes.len(),
            face_samples: faces,
            voice_samples: voices,
            original_pairs: pairs.len(),
            languages: languages.into_iter().collect(),
            face_dim: self.face_dim,
            voice_dim: self.voice_dim,
        }
    }
}

fn check_record(r: &FeatureRecord, face_dim: &mut Option<usize>, voice_dim: &mut Option<usize>) -> std::result::Result<(), String> {
    if r.sample_id.is_empty() {
        return Err("empty sample_id".into());
    }
    if r.identity.is_empty() {
        return Err(format!("sample {} has an empty identity", r.sample_id));
    }
    let dim = match r.modality {
        Modality::Face => face_dim,
        Modality::Voice => voice_dim,
    };
    let expected = *dim.get_or_insert(r.vector.len());
    if r.vector.len() != expected || expected == 0 {
        return Err(format!(
            "sample {} has a {}-length {} vector, dataset dimension is {expected}",
            r.sample_id,
            r.vector.len(),
            r.modality
        ));
    }
    if let Some(x) = r.vector.iter().find(|x| !x.is_finite()) {
        return Err(format!("sample {} contains non-finite value {x}", r.sample_id));
    }
    Ok(())
}

/// Dataset statistics in the layout of a data-statistics table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub identities: usize,
    pub scenes: usize,
    pub face_samples: usize,
    pub voice_samples: usize,
    pub original_pairs: usize,
    pub languages: Vec<String>,
    pub face_dim: usize,
    pub voice_dim: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "identities      {}", self.identities)?;
        writeln!(f, "scenes          {}", self.scenes)?;
        writeln!(f, "face samples    {} (dim {})", self.face_samples, self.face_dim)?;
        writeln!(f, "voice samples   {} (dim {})", self.voice_samples, self.voice_dim)?;
        writeln!(f, "original pairs  {}", self.original_pairs)?;
        write!(f, "languages       {}", self.languages.join(", "))
    }
}

/// Summaries of an identity split.
pub fn split_summary(train: &Dataset, test: &Dataset) -> BTreeMap<&'static str, DatasetSummary> {
    BTreeMap::from([("train", train.summary()), ("test", test.summary())])
}

#[cfg(test)]
mod tests;
