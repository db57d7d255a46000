//! End-to-end runs, ablation sweeps and run reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    augment_pairs, gen_synthetic, load_attributes, load_features, load_trials, split_unseen, write_trials,
    AttributeRecord, Dataset, PairList, SyntheticSpec, Trial,
};
use crate::error::{config_err, invalid, FvError, Result};
use crate::model::{save_checkpoint, DualBranchModel, FusionKind, Modality, ModelConfig};
use crate::pairloss::LossConfig;
use crate::scoring::{
    compute_eer, polarize_scores, trial_scores, write_audit, write_det, write_scores, AuditEntry, ConfidenceConfig,
    EerResult, RejectedTrial, ScoreKind, TrialScore,
};
use crate::train::{train_stage1, train_stage2, EpochLoss, TrainConfig};

/// Where the features come from. Without a features file the synthetic
/// generator supplies features, trials and attributes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub features: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    /// Held-out identities. Defaults to every identity occurring in the
    /// trial list.
    pub test_identities: Option<Vec<String>>,
    /// Restricts training samples to one language.
    pub train_language: Option<String>,
    pub synthetic: SyntheticSpec,
    /// Also write generated synthetic files into the run directory.
    pub write_synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainConfig,
    pub augment_multiplier: usize,
    pub confidence: ConfidenceConfig,
    pub polarize: bool,
    pub save_checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            training: TrainConfig::default(),
            augment_multiplier: 4,
            confidence: ConfidenceConfig::default(),
            polarize: true,
            save_checkpoints: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.training.validate()?;
        self.confidence.validate()?;
        if self.augment_multiplier == 0 {
            return Err(config_err("augment_multiplier must be at least 1"));
        }
        match &self.data.features {
            None => {
                let s = &self.data.synthetic;
                s.validate()?;
                if (s.face_dim, s.voice_dim) != (self.model.face_dim, self.model.voice_dim) {
                    return Err(config_err(format!(
                        "model dims {}/{} do not match synthetic dims {}/{}",
                        self.model.face_dim, self.model.voice_dim, s.face_dim, s.voice_dim
                    )));
                }
            }
            Some(features) => {
                let trials = self
                    .data
                    .trials
                    .as_ref()
                    .ok_or_else(|| config_err("data.trials is required with data.features"))?;
                for p in [Some(features), Some(trials), self.data.attributes.as_ref()].into_iter().flatten() {
                    if !p.exists() {
                        return Err(config_err(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reads a run config, or the config snapshot inside a run manifest.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| FvError::io(path, e))?;
        match serde_json::from_str::<RunConfig>(&text) {
            Ok(c) => Ok(c),
            Err(config_error) => match serde_json::from_str::<RunManifest>(&text) {
                Ok(m) => Ok(m.config),
                Err(_) => Err(config_err(format!("{}: {config_error}", path.display()))),
            },
        }
    }
}

/// Data ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub pairs: PairList,
    pub trials: Vec<Trial>,
    pub attributes: Option<Vec<AttributeRecord>>,
    pub languages: Vec<String>,
}

pub fn prepare_data(config: &RunConfig, out_dir: Option<&Path>) -> Result<PreparedData> {
    let (dataset, trials, attributes, held_out) = match &config.data.features {
        None => {
            let synthetic = gen_synthetic(&config.data.synthetic)?;
            if let (true, Some(dir)) = (config.data.write_synthetic, out_dir) {
                synthetic.write(&dir.join("data"))?;
            }
            let held: BTreeSet<String> = match &config.data.test_identities {
                Some(ids) => ids.iter().cloned().collect(),
                None => synthetic.test_identities.iter().cloned().collect(),
            };
            (synthetic.dataset, synthetic.trials, Some(synthetic.attributes), held)
        }
        Some(features) => {
            let dataset = load_features(features, Some(config.model.face_dim), Some(config.model.voice_dim))?;
            let trials_path = config.data.trials.as_ref().ok_or_else(|| config_err("data.trials is required"))?;
            let trials = load_trials(trials_path)?;
            let attributes = config.data.attributes.as_deref().map(load_attributes).transpose()?;
            let held: BTreeSet<String> = match &config.data.test_identities {
                Some(ids) => ids.iter().cloned().collect(),
                None => trials
                    .iter()
                    .flat_map(|t| [&t.face_sample_id, &t.voice_sample_id])
                    .filter_map(|id| dataset.get(id).map(|r| r.identity.clone()))
                    .collect(),
            };
            (dataset, trials, attributes, held)
        }
    };
    let languages: Vec<String> = dataset
        .records()
        .iter()
        .map(|r| r.language.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (train, test) = split_unseen(&dataset, &held_out)?;
    let train = match &config.data.train_language {
        Some(lang) => {
            if !languages.contains(lang) {
                return Err(config_err(format!("train_language {lang} does not occur in the data")));
            }
            train.filter(|r| &r.language == lang)?
        }
        None => train,
    };
    let pairs = augment_pairs(train.records(), config.augment_multiplier, config.seed)?;
    if pairs.len() < 2 {
        return Err(invalid(format!("only {} training pairs", pairs.len())));
    }
    Ok(PreparedData {
        train,
        test,
        pairs,
        trials,
        attributes,
        languages,
    })
}

/// One embedded sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Embeds the given samples of `data`; unknown ids are skipped.
pub fn embed_samples<'a>(
    model: &DualBranchModel,
    data: &Dataset,
    sample_ids: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<EmbeddingRecord>> {
    let mut by_modality: BTreeMap<Modality, BTreeSet<&str>> = BTreeMap::new();
    for id in sample_ids {
        if let Some(r) = data.get(id) {
            by_modality.entry(r.modality).or_default().insert(r.sample_id.as_str());
        }
    }
    let mut out = Vec::new();
    for (modality, ids) in by_modality {
        let ids: Vec<&str> = ids.into_iter().collect();
        let emb = model.embed_modality(&data.matrix(&ids, modality)?, modality)?;
        for (i, id) in ids.iter().enumerate() {
            out.push(EmbeddingRecord {
                sample_id: id.to_string(),
                modality,
                vector: emb.row(i).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| invalid(format!("serializing embedding: {e}")))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| FvError::io(path, e))
}

pub type EmbeddingMap = HashMap<String, Vec<f64>>;

/// Face and voice embeddings keyed by sample id.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingMap, EmbeddingMap)> {
    let text = std::fs::read_to_string(path).map_err(|e| FvError::io(path, e))?;
    let mut faces = HashMap::new();
    let mut voices = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord = serde_json::from_str(line).map_err(|e| FvError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let map = match r.modality {
            Modality::Face => &mut faces,
            Modality::Voice => &mut voices,
        };
        map.insert(r.sample_id, r.vector);
    }
    Ok((faces, voices))
}

fn split_by_modality(records: &[EmbeddingRecord]) -> (EmbeddingMap, EmbeddingMap) {
    let mut faces = HashMap::new();
    let mut voices = HashMap::new();
    for r in records {
        match r.modality {
            Modality::Face => faces.insert(r.sample_id.clone(), r.vector.clone()),
            Modality::Voice => voices.insert(r.sample_id.clone(), r.vector.clone()),
        };
    }
    (faces, voices)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanguageEer {
    pub raw: f64,
    pub adjusted: Option<f64>,
}

/// Scores, EERs and polarization results of one model on one trial list.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub embeddings: Vec<EmbeddingRecord>,
    pub scores: Vec<TrialScore>,
    pub rejected: Vec<RejectedTrial>,
    pub raw: EerResult,
    pub adjusted: Option<EerResult>,
    pub audit: Vec<AuditEntry>,
    pub by_language: BTreeMap<String, LanguageEer>,
}

/// EER per language of the trial's face sample.
pub fn eer_by_language(
    scores: &[TrialScore],
    data: &Dataset,
    kind: ScoreKind,
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<TrialScore>> = BTreeMap::new();
    for s in scores {
        if let Some(r) = data.get(&s.face_sample_id) {
            groups.entry(r.language.clone()).or_default().push(s.clone());
        }
    }
    groups
        .into_iter()
        .map(|(lang, group)| {
            let eer = compute_eer(&group, kind).map_err(|e| invalid(format!("language {lang}: {e}")))?;
            Ok((lang, eer.eer))
        })
        .collect()
}

/// Embeds every sample referenced by `trials`, scores the trials and, when
/// attributes and a confidence config are given, polarizes the scores.
pub fn evaluate(
    model: &DualBranchModel,
    test: &Dataset,
    trials: &[Trial],
    polarization: Option<(&[AttributeRecord], &ConfidenceConfig)>,
) -> Result<Evaluation> {
    let ids = trials.iter().flat_map(|t| [t.face_sample_id.as_str(), t.voice_sample_id.as_str()]);
    let embeddings = embed_samples(model, test, ids)?;
    let (faces, voices) = split_by_modality(&embeddings);
    let report = trial_scores(trials, &faces, &voices)?;
    if !report.rejected.is_empty() {
        warn!("{} trials rejected for missing embeddings", report.rejected.len());
    }
    let raw = compute_eer(&report.scores, ScoreKind::Raw)?;
    let raw_by_lang = eer_by_language(&report.scores, test, ScoreKind::Raw)?;
    let (scores, adjusted, audit, adj_by_lang) = match polarization {
        Some((attributes, confidence)) => {
            let (scores, audit) = polarize_scores(&report.scores, attributes, confidence)?;
            let adjusted = compute_eer(&scores, ScoreKind::Adjusted)?;
            let by_lang = eer_by_language(&scores, test, ScoreKind::Adjusted)?;
            (scores, Some(adjusted), audit, Some(by_lang))
        }
        None => (report.scores, None, Vec::new(), None),
    };
    let by_language = raw_by_lang
        .into_iter()
        .map(|(lang, raw)| {
            let adjusted = adj_by_lang.as_ref().and_then(|m| m.get(&lang).copied());
            (lang, LanguageEer { raw, adjusted })
        })
        .collect();
    Ok(Evaluation {
        embeddings,
        scores,
        rejected: report.rejected,
        raw,
        adjusted,
        audit,
        by_language,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub loss_curve: Vec<EpochLoss>,
    pub eer_raw: f64,
    pub eer_adjusted: Option<f64>,
    pub eer_by_language: BTreeMap<String, LanguageEer>,
    pub train_pairs: usize,
    pub scored_trials: usize,
    pub rejected_trials: usize,
}

/// Everything needed to re-run and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub metrics: RunMetrics,
    pub wall_clock_seconds: f64,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| FvError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| invalid(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| FvError::io(path, e))
}

/// Runs the full pipeline and writes the manifest into the output directory.
pub fn run_experiment(config: &RunConfig) -> Result<RunManifest> {
    run_experiment_detailed(config).map(|(m, _)| m)
}

/// [`run_experiment`] that also returns the in-memory evaluation.
pub fn run_experiment_detailed(config: &RunConfig) -> Result<(RunManifest, Evaluation)> {
    let started = Instant::now();
    config.validate()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| FvError::io(&out, e))?;
    let mut artifacts = BTreeMap::new();
    let mut checkpoints = BTreeMap::new();

    let data = staged("data", prepare_data(config, Some(&out)))?;
    info!(
        "{} training pairs, {} test trials, languages {:?}",
        data.pairs.len(),
        data.trials.len(),
        data.languages
    );
    let mut model = staged("init", DualBranchModel::new(config.model.clone(), config.seed))?;
    let mut curve = staged(
        "stage1",
        train_stage1(&mut model, &data.train, &data.pairs, &config.loss, &config.training),
    )?;
    if config.save_checkpoints {
        let p = out.join("stage1.ckpt.json");
        staged("stage1", save_checkpoint(&model, &p))?;
        checkpoints.insert("stage1".to_string(), p);
    }
    curve.extend(staged(
        "stage2",
        train_stage2(&mut model, &data.train, &data.pairs, &config.loss, &config.training),
    )?);
    if config.save_checkpoints {
        let p = out.join("stage2.ckpt.json");
        staged("stage2", save_checkpoint(&model, &p))?;
        checkpoints.insert("stage2".to_string(), p);
    }

    let polarization = match (&data.attributes, config.polarize) {
        (Some(a), true) => Some((a.as_slice(), &config.confidence)),
        (None, true) => {
            warn!("no attribute predictions available; skipping polarization");
            None
        }
        _ => None,
    };
    let eval = staged("evaluate", evaluate(&model, &data.test, &data.trials, polarization))?;

    staged("write", write_artifacts(&out, &data, &eval, &mut artifacts))?;
    let manifest = RunManifest {
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        checkpoints,
        metrics: RunMetrics {
            loss_curve: curve,
            eer_raw: eval.raw.eer,
            eer_adjusted: eval.adjusted.as_ref().map(|r| r.eer),
            eer_by_language: eval.by_language.clone(),
            train_pairs: data.pairs.len(),
            scored_trials: eval.scores.len(),
            rejected_trials: eval.rejected.len(),
        },
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        artifacts,
    };
    let manifest_path = out.join("manifest.json");
    staged("write", write_json(&manifest_path, &manifest))?;
    info!("run finished: EER raw {:.4}, adjusted {:?}", eval.raw.eer, manifest.metrics.eer_adjusted);
    Ok((manifest, eval))
}

fn write_artifacts(out: &Path, data: &PreparedData, eval: &Evaluation, artifacts: &mut BTreeMap<String, PathBuf>) -> Result<()> {
    let mut put = |key: &str, file: &str| {
        let p = out.join(file);
        artifacts.insert(key.to_string(), p.clone());
        p
    };
    let raw_scores: Vec<TrialScore> = eval
        .scores
        .iter()
        .map(|s| TrialScore {
            adjusted_score: None,
            confidence: None,
            ..s.clone()
        })
        .collect();
    write_scores(&put("scores", "scores.csv"), &raw_scores)?;
    write_det(&put("det", "det.csv"), &eval.raw.det)?;
    write_trials(&put("trials", "trials.csv"), &data.trials)?;
    write_embeddings(&put("embeddings", "embeddings.jsonl"), &eval.embeddings)?;
    if let Some(adj) = &eval.adjusted {
        write_scores(&put("scores_adjusted", "scores_adjusted.csv"), &eval.scores)?;
        write_det(&put("det_adjusted", "det_adjusted.csv"), &adj.det)?;
        write_audit(&put("audit", "polarize_audit.jsonl"), &eval.audit)?;
    }
    if !eval.rejected.is_empty() {
        write_json(&put("rejected", "rejected_trials.json"), &eval.rejected)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepPreset {
    /// Update-branch fusion head, plus a single-branch baseline.
    DualFusion,
    Thresh,
    Augment,
    Polarize,
}

impl SweepPreset {
    pub const ALL: [SweepPreset; 4] = [SweepPreset::DualFusion, SweepPreset::Thresh, SweepPreset::Augment, SweepPreset::Polarize];

    pub fn name(self) -> &'static str {
        match self {
            SweepPreset::DualFusion => "dual-fusion",
            SweepPreset::Thresh => "thresh",
            SweepPreset::Augment => "augment",
            SweepPreset::Polarize => "polarize",
        }
    }

    /// Row labels and the config each row runs with.
    fn grid(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label.to_string(), c)
        };
        match self {
            SweepPreset::DualFusion => vec![
                with("W", &|c| c.model.update_fusion = FusionKind::Scalar),
                with("Att", &|c| c.model.update_fusion = FusionKind::Attention),
                with("Conv", &|c| c.model.update_fusion = FusionKind::Conv),
                with("NoDual", &|c| c.model.dual = false),
            ],
            SweepPreset::Thresh => {
                let mut rows: Vec<_> = [0.4, 0.6, 0.8]
                    .into_iter()
                    .map(|t| with(&format!("thresh={t}"), &|c| c.loss.theta = t))
                    .collect();
                rows.push(with("none", &|c| c.loss.weighting = false));
                rows
            }
            SweepPreset::Augment => [1usize, 2, 4, 6]
                .into_iter()
                .map(|m| with(&format!("{m}x"), &|c| c.augment_multiplier = m))
                .collect(),
            SweepPreset::Polarize => vec![with("trained", &|c| c.polarize = false)],
        }
    }
}

impl FromStr for SweepPreset {
    type Err = FvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual-fusion" | "fusion" => Ok(SweepPreset::DualFusion),
            "thresh" => Ok(SweepPreset::Thresh),
            "augment" => Ok(SweepPreset::Augment),
            "polarize" => Ok(SweepPreset::Polarize),
            other => Err(config_err(format!(
                "unknown sweep preset {other:?}; expected dual-fusion, thresh, augment or polarize"
            ))),
        }
    }
}

pub const POLARIZATION_FACTORS: [f64; 4] = [1.0, 1.1, 1.2, 1.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub train_language: String,
    /// EER per test language, in the table's language order.
    pub eer: Vec<f64>,
    /// Mean over every cell of the row's config group.
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub preset: SweepPreset,
    pub languages: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("config,train_language,{},avg\n", self.languages.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.eer.iter().map(|e| format!("{e:.6}")).collect();
            let _ = writeln!(s, "{},{},{},{:.6}", r.config, r.train_language, cells.join(","), r.avg);
        }
        s
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.avg.is_finite() && r.eer.len() == self.languages.len() && r.eer.iter().all(|e| e.is_finite()))
    }
}

impl std::fmt::Display for SweepTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<12} {:<8}", "config", "train")?;
        for l in &self.languages {
            write!(f, " {l:>8}")?;
        }
        writeln!(f, " {:>8}", "avg")?;
        for r in &self.rows {
            write!(f, "{:<12} {:<8}", r.config, r.train_language)?;
            for e in &r.eer {
                write!(f, " {e:>8.4}")?;
            }
            writeln!(f, " {:>8.4}", r.avg)?;
        }
        Ok(())
    }
}

struct Cell {
    config: String,
    train_language: String,
    eer: BTreeMap<String, f64>,
}

fn cell_dir(out: &Path, label: &str, lang: &str) -> PathBuf {
    let safe: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    out.join(format!("{safe}__train_{lang}"))
}

/// Runs a preset grid once per training language, in parallel, and writes
/// `<preset>.csv` and `sweep.json` into `out`. Table cells are raw EERs,
/// except for the polarize preset whose cells are adjusted EERs.
pub fn ablation_sweep(preset: SweepPreset, base: &RunConfig, out: &Path) -> Result<SweepTable> {
    base.validate()?;
    std::fs::create_dir_all(out).map_err(|e| FvError::io(out, e))?;
    let languages = prepare_data(base, None)?.languages;
    let jobs: Vec<(String, String, RunConfig)> = preset
        .grid(base)
        .into_iter()
        .flat_map(|(label, cfg)| {
            languages.iter().map(move |lang| {
                let mut c = cfg.clone();
                c.data.train_language = Some(lang.clone());
                c.output_dir = cell_dir(out, &label, lang);
                (label.clone(), lang.clone(), c)
            })
        })
        .collect();
    let results: Vec<Result<Vec<Cell>>> = jobs
        .par_iter()
        .map(|(label, lang, cfg)| {
            let (manifest, eval) = run_experiment_detailed(cfg)?;
            if preset != SweepPreset::Polarize {
                let eer = manifest.metrics.eer_by_language.iter().map(|(l, e)| (l.clone(), e.raw)).collect();
                return Ok(vec![Cell {
                    config: label.clone(),
                    train_language: lang.clone(),
                    eer,
                }]);
            }
            let data = prepare_data(cfg, None)?;
            let attributes = data
                .attributes
                .as_ref()
                .ok_or_else(|| config_err("the polarize preset needs attribute predictions"))?;
            POLARIZATION_FACTORS
                .iter()
                .map(|&alpha| {
                    let confidence = ConfidenceConfig {
                        alpha_pol: alpha,
                        ..cfg.confidence.clone()
                    };
                    let (scores, _) = polarize_scores(&eval.scores, attributes, &confidence)?;
                    Ok(Cell {
                        config: format!("alpha={alpha}"),
                        train_language: lang.clone(),
                        eer: eer_by_language(&scores, &data.test, ScoreKind::Adjusted)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?);
    }
    let table = assemble(preset, &languages, cells)?;
    std::fs::write(out.join(format!("{}.csv", preset.name())), table.to_csv()).map_err(|e| FvError::io(out, e))?;
    write_json(&out.join("sweep.json"), &table)?;
    Ok(table)
}

fn assemble(preset: SweepPreset, languages: &[String], cells: Vec<Cell>) -> Result<SweepTable> {
    let mut order: Vec<String> = Vec::new();
    for c in &cells {
        if !order.contains(&c.config) {
            order.push(c.config.clone());
        }
    }
    let mut rows = Vec::new();
    for config in order {
        let group: Vec<&Cell> = cells.iter().filter(|c| c.config == config).collect();
        let mut values = Vec::new();
        let mut group_rows = Vec::new();
        for lang in languages {
            let cell = group
                .iter()
                .find(|c| &c.train_language == lang)
                .ok_or_else(|| invalid(format!("{config}: no run trained on {lang}")))?;
            let eer: Vec<f64> = languages
                .iter()
                .map(|l| {
                    cell.eer
                        .get(l)
                        .copied()
                        .ok_or_else(|| invalid(format!("{config}: no {l} test trials")))
                })
                .collect::<Result<_>>()?;
            values.extend(&eer);
            group_rows.push((lang.clone(), eer));
        }
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        rows.extend(group_rows.into_iter().map(|(train_language, eer)| SweepRow {
            config: config.clone(),
            train_language,
            eer,
            avg,
        }));
    }
    Ok(SweepTable {
        preset,
        languages: languages.to_vec(),
        rows,
    })
}

/// Human-readable summary of run manifests and sweep directories. Paths
/// that cannot be read are listed and skipped.
pub fn report(paths: &[PathBuf]) -> String {
    let mut out = String::new();
    let mut manifests: Vec<(PathBuf, RunManifest)> = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        if p.is_dir() {
            let sweep = p.join("sweep.json");
            let manifest = p.join("manifest.json");
            if let Ok(text) = std::fs::read_to_string(&sweep) {
                match serde_json::from_str::<SweepTable>(&text) {
                    Ok(t) => {
                        let _ = writeln!(out, "== sweep {} ({}) ==\n{t}", t.preset.name(), p.display());
                        continue;
                    }
                    Err(e) => {
                        skipped.push(format!("{}: {e}", sweep.display()));
                        continue;
                    }
                }
            }
            match RunManifest::load(&manifest) {
                Ok(m) => manifests.push((manifest, m)),
                Err(e) => skipped.push(e.to_string()),
            }
        } else {
            match RunManifest::load(p) {
                Ok(m) => manifests.push((p.clone(), m)),
                Err(e) => skipped.push(e.to_string()),
            }
        }
    }
    for (path, m) in &manifests {
        let _ = writeln!(out, "== run {} ==", path.display());
        let _ = writeln!(out, "config hash  {}", m.config_hash);
        let _ = writeln!(out, "seed         {}", m.seed);
        let _ = writeln!(out, "train pairs  {}", m.metrics.train_pairs);
        let _ = writeln!(out, "trials       {} scored, {} rejected", m.metrics.scored_trials, m.metrics.rejected_trials);
        let _ = writeln!(out, "EER raw      {:.4}", m.metrics.eer_raw);
        match m.metrics.eer_adjusted {
            Some(a) => {
                let _ = writeln!(out, "EER adjusted {a:.4}");
            }
            None => {
                let _ = writeln!(out, "EER adjusted -");
            }
        }
        for (lang, e) in &m.metrics.eer_by_language {
            let adj = e.adjusted.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "  {lang:<10} raw {:.4}  adjusted {adj}", e.raw);
        }
        let _ = writeln!(out, "wall clock   {:.1} s", m.wall_clock_seconds);
        let _ = writeln!(out, "loss curve:\nstage,epoch,loss");
        for p in &m.metrics.loss_curve {
            let _ = writeln!(out, "{},{},{:.6}", p.stage, p.epoch, p.loss);
        }
        out.push('\n');
    }
    if manifests.len() > 1 {
        let _ = writeln!(out, "== comparison ==");
        let _ = writeln!(out, "{:<40} {:>10} {:>10}", "run", "raw", "adjusted");
        for (path, m) in &manifests {
            let adj = m.metrics.eer_adjusted.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<40} {:>10.4} {:>10}", path.display().to_string(), m.metrics.eer_raw, adj);
        }
        out.push('\n');
    }
    if !skipped.is_empty() {
        let _ = writeln!(out, "skipped:");
        for s in skipped {
            let _ = writeln!(out, "  {s}");
        }
    }
    out
}
