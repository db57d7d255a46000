use std::path::Path;

use fvcore::dataset::SyntheticSpec;
use fvcore::experiment::{ablation_sweep, report, run_experiment, RunConfig, RunManifest, SweepPreset};
use fvcore::model::{load_checkpoint, ModelConfig, Stage};
use fvcore::train::TrainConfig;

fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.synthetic = SyntheticSpec {
        n_train_identities: 8,
        n_test_identities: 3,
        scenes_per_identity: 3,
        samples_per_scene: 2,
        face_dim: 16,
        voice_dim: 8,
        latent_dim: 4,
        ..SyntheticSpec::default()
    };
    c.model = ModelConfig {
        face_dim: 16,
        voice_dim: 8,
        embed_dim: 8,
        conv_channels: 2,
        ..ModelConfig::default()
    };
    c.training = TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn run_writes_manifest_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(&dir.path().join("run"));
    let m = run_experiment(&config).unwrap();
    for key in ["scores", "scores_adjusted", "det", "audit", "embeddings", "trials"] {
        assert!(m.artifacts[key].exists(), "{key}");
    }
    assert_eq!(m.metrics.loss_curve.len(), 4);
    assert!(m.metrics.eer_adjusted.is_some());
    assert_eq!(m.metrics.eer_by_language.len(), 2);
    assert_eq!(m.config_hash.len(), 64);
    let back = RunManifest::load(&config.output_dir.join("manifest.json")).unwrap();
    assert_eq!(back, m);
    let model = load_checkpoint(&m.checkpoints["stage2"]).unwrap();
    assert_eq!(model.stage(), Stage::Stage2);
    assert_eq!(load_checkpoint(&m.checkpoints["stage1"]).unwrap().stage(), Stage::Stage1);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny(&dir.path().join("a"))).unwrap();
    let b = run_experiment(&tiny(&dir.path().join("b"))).unwrap();
    for key in ["scores", "scores_adjusted", "det", "embeddings"] {
        assert_eq!(std::fs::read(&a.artifacts[key]).unwrap(), std::fs::read(&b.artifacts[key]).unwrap(), "{key}");
    }
    for key in ["stage1", "stage2"] {
        assert_eq!(std::fs::read(&a.checkpoints[key]).unwrap(), std::fs::read(&b.checkpoints[key]).unwrap());
    }
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn unit_polarization_factor_keeps_eer() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&dir.path().join("run"));
    c.confidence.alpha_pol = 1.0;
    let m = run_experiment(&c).unwrap();
    assert_eq!(m.metrics.eer_adjusted, Some(m.metrics.eer_raw));
}

#[test]
fn config_rejects_unknown_keys_and_reloads_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let err = RunConfig::load(&bad).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("learning_rate"));

    let config = tiny(&dir.path().join("run"));
    run_experiment(&config).unwrap();
    let reloaded = RunConfig::load(&config.output_dir.join("manifest.json")).unwrap();
    assert_eq!(reloaded, config);
}

#[test]
fn invalid_configs_fail_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&dir.path().join("run"));
    c.model.face_dim = 17;
    assert!(run_experiment(&c).unwrap_err().is_validation());
    let mut c = tiny(&dir.path().join("run"));
    c.data.features = Some(dir.path().join("missing.jsonl"));
    c.data.trials = Some(dir.path().join("missing.csv"));
    assert!(run_experiment(&c).unwrap_err().is_validation());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn runs_from_files_match_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(&dir.path().join("gen"));
    let data = fvcore::dataset::gen_synthetic(&base.data.synthetic).unwrap();
    let paths = data.write(&dir.path().join("data")).unwrap();
    let mut from_files = tiny(&dir.path().join("files"));
    from_files.data.features = Some(paths["features"].clone());
    from_files.data.trials = Some(paths["trials"].clone());
    from_files.data.attributes = Some(paths["attributes"].clone());
    let a = run_experiment(&base).unwrap();
    let b = run_experiment(&from_files).unwrap();
    assert_eq!(
        std::fs::read(&a.artifacts["scores"]).unwrap(),
        std::fs::read(&b.artifacts["scores"]).unwrap()
    );
}

#[test]
fn sweep_tables_are_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny(&dir.path().join("unused"));
    base.save_checkpoints = false;
    let table = ablation_sweep(SweepPreset::Thresh, &base, &dir.path().join("thresh")).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert_eq!(table.languages, vec!["lang0".to_string(), "lang1".to_string()]);
    assert!(table.is_complete());
    let csv = std::fs::read_to_string(dir.path().join("thresh/thresh.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "config,train_language,lang0,lang1,avg");
    assert_eq!(csv.lines().count(), 9);
    let text = report(&[dir.path().join("thresh")]);
    assert!(text.contains("sweep thresh"));
}

#[test]
fn polarize_sweep_unit_row_matches_raw_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny(&dir.path().join("unused"));
    base.save_checkpoints = false;
    let out = dir.path().join("pol");
    let table = ablation_sweep(SweepPreset::Polarize, &base, &out).unwrap();
    assert_eq!(table.rows.len(), 8);
    for lang in ["lang0", "lang1"] {
        let m = RunManifest::load(&out.join(format!("trained__train_{lang}/manifest.json"))).unwrap();
        let row = table.rows.iter().find(|r| r.config == "alpha=1" && r.train_language == lang).unwrap();
        let raw: Vec<f64> = m.metrics.eer_by_language.values().map(|e| e.raw).collect();
        assert_eq!(row.eer, raw);
    }
}

#[test]
fn unknown_preset_rejected() {
    let err = "tables".parse::<SweepPreset>().unwrap_err();
    assert!(err.is_validation());
    assert_eq!("fusion".parse::<SweepPreset>().unwrap(), SweepPreset::DualFusion);
}

#[test]
fn report_lists_missing_and_compares_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"));
    let mut b = tiny(&dir.path().join("b"));
    b.seed = 5;
    run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();
    let single = report(&[a.output_dir.join("manifest.json")]);
    assert_eq!(single.matches("== run").count(), 1);
    assert!(single.contains("stage,epoch,loss"));
    let both = report(&[a.output_dir.clone(), b.output_dir.join("manifest.json"), dir.path().join("nope.json")]);
    assert!(both.contains("== comparison =="));
    assert!(both.contains("skipped:") && both.contains("nope.json"));
}
