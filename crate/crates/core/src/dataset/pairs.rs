use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureRecord};
use crate::error::{config_err, invalid, Result};
use crate::model::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub face: String,
    pub voice: String,
    pub identity: String,
    pub origin: PairOrigin,
}

pub type PairList = Vec<Pair>;

#[derive(Default)]
struct SceneSamples<'a> {
    faces: Vec<&'a str>,
    voices: Vec<&'a str>,
}

/// Scene-matched original pairs: the k-th face of an (identity, scene)
/// pairs with the k-th voice of the same (identity, scene). Unmatched
/// samples are skipped and reported in the returned warnings.
pub fn index_pairs(records: &[FeatureRecord]) -> (PairList, Vec<String>) {
    let mut scenes: BTreeMap<(&str, &str), SceneSamples<'_>> = BTreeMap::new();
    for r in records {
        let entry = scenes.entry((r.identity.as_str(), r.scene.as_str())).or_default();
        match r.modality {
            Modality::Face => entry.faces.push(&r.sample_id),
            Modality::Voice => entry.voices.push(&r.sample_id),
        }
    }
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for ((identity, scene), s) in scenes {
        if s.faces.len() != s.voices.len() {
            warnings.push(format!(
                "identity {identity} scene {scene}: {} faces and {} voices; {} unmatched samples skipped",
                s.faces.len(),
                s.voices.len(),
                s.faces.len().abs_diff(s.voices.len())
            ));
        }
        for (f, v) in s.faces.iter().zip(&s.voices) {
            pairs.push(Pair {
                face: f.to_string(),
                voice: v.to_string(),
                identity: identity.to_string(),
                origin: PairOrigin::Original,
            });
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    (pairs, warnings)
}

/// Original pairs followed by same-identity cross pairs `(f_i, a_j)`,
/// `i ≠ j`, drawn without replacement until the list holds
/// `multiplier × |originals|` pairs or the candidates run out.
pub fn augment_pairs(records: &[FeatureRecord], multiplier: usize, seed: u64) -> Result<PairList> {
    if multiplier == 0 {
        return Err(config_err("augmentation multiplier must be at least 1"));
    }
    let (originals, _) = index_pairs(records);
    let mut by_identity: BTreeMap<&str, Vec<&Pair>> = BTreeMap::new();
    for p in &originals {
        by_identity.entry(p.identity.as_str()).or_default().push(p);
    }
    let mut candidates = Vec::new();
    for group in by_identity.values() {
        for (i, a) in group.iter().enumerate() {
            for (j, b) in group.iter().enumerate() {
                if i != j {
                    candidates.push(Pair {
                        face: a.face.clone(),
                        voice: b.voice.clone(),
                        identity: a.identity.clone(),
                        origin: PairOrigin::Augmented,
                    });
                }
            }
        }
    }
    let wanted = (multiplier - 1).saturating_mul(originals.len());
    let take = wanted.min(candidates.len());
    if take < wanted {
        warn!(
            "only {} augmentation candidates for {wanted} requested pairs; using all of them",
            candidates.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, candidates.len(), take).into_vec();
    chosen.sort_unstable();
    let mut out = originals;
    out.reserve(take);
    let mut slots: Vec<Option<Pair>> = candidates.into_iter().map(Some).collect();
    for i in chosen {
        out.push(slots[i].take().expect("indices are distinct"));
    }
    Ok(out)
}

/// Identity-disjoint split holding out `test_identities`.
pub fn split_unseen(data: &Dataset, test_identities: &BTreeSet<String>) -> Result<(Dataset, Dataset)> {
    let present = data.identities();
    if let Some(unknown) = test_identities.iter().find(|id| !present.contains(*id)) {
        return Err(invalid(format!("held-out identity {unknown} does not occur in the data")));
    }
    if test_identities.len() == present.len() {
        return Err(invalid("holding out every identity leaves no training data"));
    }
    let train = data.filter(|r| !test_identities.contains(&r.identity))?;
    let test = data.filter(|r| test_identities.contains(&r.identity))?;
    Ok((train, test))
}

/// Shuffled pair indices grouped into batches. The shuffle depends only on
/// `(seed, epoch)`; a trailing batch of one pair joins the previous batch.
pub fn make_batches(n_pairs: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(config_err(format!("batch size must be at least 2, got {batch_size}")));
    }
    if n_pairs < 2 {
        return Err(invalid(format!("need at least 2 pairs to form a batch, got {n_pairs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("at least one batch left").extend(last);
    }
    Ok(batches)
}
