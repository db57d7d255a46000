use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::files::{write_attributes, write_features, write_trials, write_truth, AttributeRecord, Trial, TrialLabel, TruthRow};
use super::{index_pairs, Dataset, FeatureRecord};
use crate::error::{config_err, Result};
use crate::model::Modality;

const STREAM_MIXING: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_ATTRIBUTES: u64 = 2;
const STREAM_TRIALS: u64 = 3;

const AGE_NOISE: f64 = 4.0;
const GENDER_NOISE: f64 = 0.1;

/// Shape and noise levels of a generated dataset. Each identity has a latent
/// vector `z`; faces are `A_f·z + scene offset + noise`, voices
/// `A_v·z + language offset + noise`, with mixing matrices shared by all
/// identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_train_identities: usize,
    pub n_test_identities: usize,
    pub scenes_per_identity: usize,
    pub samples_per_scene: usize,
    pub face_dim: usize,
    pub voice_dim: usize,
    pub latent_dim: usize,
    pub scene_noise: f64,
    pub sample_noise: f64,
    pub n_languages: usize,
    pub language_offset: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train_identities: 64,
            n_test_identities: 6,
            scenes_per_identity: 3,
            samples_per_scene: 6,
            face_dim: 4096,
            voice_dim: 512,
            latent_dim: 32,
            scene_noise: 0.5,
            sample_noise: 2.5,
            n_languages: 2,
            language_offset: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_train_identities", self.n_train_identities),
            ("n_test_identities", self.n_test_identities),
            ("scenes_per_identity", self.scenes_per_identity),
            ("samples_per_scene", self.samples_per_scene),
            ("face_dim", self.face_dim),
            ("voice_dim", self.voice_dim),
            ("latent_dim", self.latent_dim),
            ("n_languages", self.n_languages),
        ] {
            if v == 0 {
                return Err(config_err(format!("synthetic.{name} must be positive")));
            }
        }
        if self.n_test_identities < 2 {
            return Err(config_err("synthetic.n_test_identities must be at least 2 to form nontarget trials"));
        }
        for (name, v) in [
            ("scene_noise", self.scene_noise),
            ("sample_noise", self.sample_noise),
            ("language_offset", self.language_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("synthetic.{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn identity_name(i: usize) -> String {
        format!("id{i:04}")
    }

    pub fn language_name(l: usize) -> String {
        format!("lang{l}")
    }

    pub fn language_of_scene(&self, scene: usize) -> usize {
        scene % self.n_languages
    }

    /// Records per modality.
    pub fn samples_per_modality(&self) -> usize {
        (self.n_train_identities + self.n_test_identities) * self.scenes_per_identity * self.samples_per_scene
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub attributes: Vec<AttributeRecord>,
    pub truth: Vec<TruthRow>,
    pub trials: Vec<Trial>,
    pub train_identities: Vec<String>,
    pub test_identities: Vec<String>,
}

impl SyntheticData {
    /// Writes `features.jsonl`, `attributes.jsonl`, `truth.csv` and
    /// `trials.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<BTreeMap<&'static str, PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::FvError::io(dir, e))?;
        let paths = BTreeMap::from([
            ("features", dir.join("features.jsonl")),
            ("attributes", dir.join("attributes.jsonl")),
            ("truth", dir.join("truth.csv")),
            ("trials", dir.join("trials.csv")),
        ]);
        write_features(&paths["features"], self.dataset.records())?;
        write_attributes(&paths["attributes"], &self.attributes)?;
        write_truth(&paths["truth"], &self.truth)?;
        write_trials(&paths["trials"], &self.trials)?;
        Ok(paths)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        })
        .collect()
}

/// `m·z` for a row-major `rows×cols` matrix.
fn mat_vec(m: &[f64], z: &[f64], rows: usize) -> Vec<f64> {
    let cols = z.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    mix_rng.set_stream(STREAM_MIXING);
    let mix_scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let a_f = gaussian_vec(&mut mix_rng, spec.face_dim * spec.latent_dim, mix_scale);
    let a_v = gaussian_vec(&mut mix_rng, spec.voice_dim * spec.latent_dim, mix_scale);
    let lang_offsets: Vec<Vec<f64>> = (0..spec.n_languages)
        .map(|_| gaussian_vec(&mut mix_rng, spec.voice_dim, spec.language_offset))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_SAMPLES);
    let mut attr_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    attr_rng.set_stream(STREAM_ATTRIBUTES);
    let age_noise = Normal::new(0.0, AGE_NOISE).expect("valid sigma");
    let gender_noise = Normal::new(0.0, GENDER_NOISE).expect("valid sigma");

    let n_ids = spec.n_train_identities + spec.n_test_identities;
    let mut records = Vec::with_capacity(2 * spec.samples_per_modality());
    let mut attributes = Vec::with_capacity(2 * spec.samples_per_modality());
    let mut truth = Vec::with_capacity(2 * spec.samples_per_modality());
    for i in 0..n_ids {
        let identity = SyntheticSpec::identity_name(i);
        let z = gaussian_vec(&mut rng, spec.latent_dim, 1.0);
        let age: u32 = attr_rng.random_range(18..=80);
        let gender: u8 = u8::from(attr_rng.random_bool(0.5));
        let face_mean = mat_vec(&a_f, &z, spec.face_dim);
        let voice_mean = mat_vec(&a_v, &z, spec.voice_dim);
        for s in 0..spec.scenes_per_identity {
            let scene = format!("s{s}");
            let lang = spec.language_of_scene(s);
            let language = SyntheticSpec::language_name(lang);
            let scene_offset = gaussian_vec(&mut rng, spec.face_dim, spec.scene_noise);
            for k in 0..spec.samples_per_scene {
                let face_noise = gaussian_vec(&mut rng, spec.face_dim, spec.sample_noise);
                let voice_noise = gaussian_vec(&mut rng, spec.voice_dim, spec.sample_noise);
                let face: Vec<f64> = face_mean
                    .iter()
                    .zip(&scene_offset)
                    .zip(&face_noise)
                    .map(|((m, o), e)| m + o + e)
                    .collect();
                let voice: Vec<f64> = voice_mean
                    .iter()
                    .zip(&lang_offsets[lang])
                    .zip(&voice_noise)
                    .map(|((m, o), e)| m + o + e)
                    .collect();
                for (modality, vector, tag) in [(Modality::Face, face, "f"), (Modality::Voice, voice, "v")] {
                    let sample_id = format!("{identity}_{scene}_{k}_{tag}");
                    let predicted_age = (f64::from(age) + age_noise.sample(&mut attr_rng)).clamp(1.0, 100.0);
                    let gender_prob = (f64::from(gender) + gender_noise.sample(&mut attr_rng)).clamp(0.01, 0.99);
                    attributes.push(AttributeRecord {
                        sample_id: sample_id.clone(),
                        modality,
                        age: predicted_age,
                        gender_prob,
                    });
                    truth.push(TruthRow {
                        sample_id: sample_id.clone(),
                        identity: identity.clone(),
                        age,
                        gender,
                    });
                    records.push(FeatureRecord {
                        sample_id,
                        identity: identity.clone(),
                        scene: scene.clone(),
                        language: language.clone(),
                        modality,
                        vector,
                    });
                }
            }
        }
    }
    let dataset = Dataset::new(records, Some(spec.face_dim), Some(spec.voice_dim))?;
    let train_identities: Vec<String> = (0..spec.n_train_identities).map(SyntheticSpec::identity_name).collect();
    let test_identities: Vec<String> = (spec.n_train_identities..n_ids).map(SyntheticSpec::identity_name).collect();
    let test_records: Vec<FeatureRecord> = dataset
        .records()
        .iter()
        .filter(|r| test_identities.contains(&r.identity))
        .cloned()
        .collect();
    let trials = make_trials(&test_records, spec.seed)?;
    Ok(SyntheticData {
        dataset,
        attributes,
        truth,
        trials,
        train_identities,
        test_identities,
    })
}

/// Balanced trials: every face of an original pair meets its own voice
/// (target) and one random voice of another identity (nontarget), drawn
/// from the face's language when possible.
pub fn make_trials(records: &[FeatureRecord], seed: u64) -> Result<Vec<Trial>> {
    let (pairs, _) = index_pairs(records);
    let language: BTreeMap<&str, &str> = records.iter().map(|r| (r.sample_id.as_str(), r.language.as_str())).collect();
    let voices: Vec<&FeatureRecord> = records.iter().filter(|r| r.modality == Modality::Voice).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_TRIALS);
    let mut trials = Vec::with_capacity(2 * pairs.len());
    for p in &pairs {
        let lang = language[p.face.as_str()];
        let others: Vec<&&FeatureRecord> = voices.iter().filter(|v| v.identity != p.identity).collect();
        if others.is_empty() {
            return Err(config_err("trials need voices from at least two identities"));
        }
        let same_lang: Vec<&&FeatureRecord> = others.iter().copied().filter(|v| v.language == lang).collect();
        let pool = if same_lang.is_empty() { &others } else { &same_lang };
        let nontarget = pool[rng.random_range(0..pool.len())];
        for (voice, label) in [(&p.voice, TrialLabel::Same), (&nontarget.sample_id, TrialLabel::Different)] {
            trials.push(Trial {
                trial_id: format!("t{:06}", trials.len()),
                face_sample_id: p.face.clone(),
                voice_sample_id: voice.clone(),
                label,
            });
        }
    }
    Ok(trials)
}
