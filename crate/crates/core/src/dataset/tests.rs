use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::error::FvError;

fn rec(id: &str, identity: &str, scene: &str, modality: Modality, vector: Vec<f64>) -> FeatureRecord {
    FeatureRecord {
        sample_id: id.into(),
        identity: identity.into(),
        scene: scene.into(),
        language: "lang0".into(),
        modality,
        vector,
    }
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_train_identities: 5,
        n_test_identities: 3,
        scenes_per_identity: 2,
        samples_per_scene: 3,
        face_dim: 12,
        voice_dim: 7,
        latent_dim: 4,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn features_roundtrip_is_exact() {
    let data = gen_synthetic(&small_spec(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.jsonl");
    write_features(&path, data.dataset.records()).unwrap();
    let back = load_features(&path, None, None).unwrap();
    assert_eq!(back.records(), data.dataset.records());
    for (a, b) in back.records().iter().zip(data.dataset.records()) {
        assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn parse(text: &str, face_dim: Option<usize>) -> crate::Result<Dataset> {
    parse_features(Cursor::new(text), Path::new("mem.jsonl"), face_dim, None)
}

#[test]
fn short_vector_reports_record_and_line() {
    let good = serde_json::to_string(&rec("a", "x", "s", Modality::Face, vec![0.0; 128])).unwrap();
    let bad = serde_json::to_string(&rec("b", "x", "s", Modality::Face, vec![0.0; 127])).unwrap();
    let err = parse(&format!("{good}\n{bad}\n"), Some(128)).unwrap_err();
    match &err {
        FvError::Parse { line, msg, .. } => {
            assert_eq!(*line, 2);
            assert!(msg.contains("sample b") && msg.contains("127"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.is_validation());
}

#[test]
fn duplicate_and_unknown_modality_rejected() {
    let a = serde_json::to_string(&rec("a", "x", "s", Modality::Face, vec![1.0])).unwrap();
    assert!(matches!(parse(&format!("{a}\n{a}\n"), None), Err(FvError::Parse { line: 2, .. })));
    let odd = a.replace("\"face\"", "\"smell\"");
    assert!(matches!(parse(&odd, None), Err(FvError::Parse { line: 1, .. })));
}

#[test]
fn one_sample_each_gives_one_pair() {
    let records = vec![
        rec("f", "x", "s", Modality::Face, vec![1.0]),
        rec("v", "x", "s", Modality::Voice, vec![1.0]),
    ];
    let (pairs, warnings) = index_pairs(&records);
    assert_eq!(pairs.len(), 1);
    assert!(warnings.is_empty());
    assert_eq!((pairs[0].face.as_str(), pairs[0].voice.as_str()), ("f", "v"));
}

#[test]
fn face_only_scene_warns() {
    let records = vec![rec("f", "x", "s", Modality::Face, vec![1.0])];
    let (pairs, warnings) = index_pairs(&records);
    assert!(pairs.is_empty());
    assert_eq!(warnings.len(), 1);
}

#[test]
fn two_scene_candidates_are_the_cross_pairs() {
    let records = vec![
        rec("f1", "x", "s1", Modality::Face, vec![1.0]),
        rec("a1", "x", "s1", Modality::Voice, vec![1.0]),
        rec("f2", "x", "s2", Modality::Face, vec![1.0]),
        rec("a2", "x", "s2", Modality::Voice, vec![1.0]),
    ];
    let out = augment_pairs(&records, 10, 0).unwrap();
    let augmented: BTreeSet<(String, String)> = out
        .iter()
        .filter(|p| p.origin == PairOrigin::Augmented)
        .map(|p| (p.face.clone(), p.voice.clone()))
        .collect();
    let expected = BTreeSet::from([("f1".to_string(), "a2".to_string()), ("f2".to_string(), "a1".to_string())]);
    assert_eq!(augmented, expected);
    assert_eq!(out.len(), 4);
}

#[test]
fn candidate_count_is_n_times_n_minus_one() {
    let n = 5;
    let mut records = Vec::new();
    for i in 0..n {
        records.push(rec(&format!("f{i}"), "x", &format!("s{i}"), Modality::Face, vec![1.0]));
        records.push(rec(&format!("a{i}"), "x", &format!("s{i}"), Modality::Voice, vec![1.0]));
    }
    let out = augment_pairs(&records, 100, 3).unwrap();
    assert_eq!(out.len() - n, n * (n - 1));
}

#[test]
fn multiplier_four_quadruples_pairs() {
    let data = gen_synthetic(&small_spec(2)).unwrap();
    let (orig, _) = index_pairs(data.dataset.records());
    let out = augment_pairs(data.dataset.records(), 4, 9).unwrap();
    assert_eq!(out.len(), 4 * orig.len());
    assert_eq!(&out[..orig.len()], &orig[..]);
    assert!(augment_pairs(data.dataset.records(), 0, 9).is_err());
    assert_eq!(augment_pairs(data.dataset.records(), 1, 9).unwrap(), orig);
}

#[test]
fn augmented_pairs_share_identity_and_differ_in_sample() {
    let data = gen_synthetic(&small_spec(3)).unwrap();
    let ds = &data.dataset;
    let (orig, _) = index_pairs(ds.records());
    let original: BTreeSet<(String, String)> = orig.iter().map(|p| (p.face.clone(), p.voice.clone())).collect();
    let out = augment_pairs(ds.records(), 6, 1).unwrap();
    let mut seen = BTreeSet::new();
    for p in &out {
        assert!(seen.insert((p.face.clone(), p.voice.clone())), "duplicate pair");
        let f = ds.get(&p.face).unwrap();
        let v = ds.get(&p.voice).unwrap();
        assert_eq!(f.identity, v.identity);
        match p.origin {
            PairOrigin::Original => assert_eq!(f.scene, v.scene),
            PairOrigin::Augmented => assert!(!original.contains(&(p.face.clone(), p.voice.clone()))),
        }
    }
}

#[test]
fn split_holds_out_identities() {
    let spec = SyntheticSpec {
        n_train_identities: 8,
        n_test_identities: 2,
        ..small_spec(4)
    };
    let data = gen_synthetic(&spec).unwrap();
    let held: BTreeSet<String> = data.test_identities.iter().cloned().collect();
    let (train, test) = split_unseen(&data.dataset, &held).unwrap();
    assert_eq!(train.identities().len(), 8);
    assert_eq!(test.identities().len(), 2);
    assert!(train.identities().is_disjoint(&test.identities()));

    let all = data.dataset.identities();
    assert!(split_unseen(&data.dataset, &all).is_err());
    let unknown = BTreeSet::from(["nobody".to_string()]);
    assert!(split_unseen(&data.dataset, &unknown).is_err());
}

#[test]
fn batch_sizes_follow_merge_rule() {
    let sizes = |n| -> Vec<usize> { make_batches(n, 64, 1, 0).unwrap().iter().map(Vec::len).collect() };
    assert_eq!(sizes(130), vec![64, 64, 2]);
    assert_eq!(sizes(129), vec![64, 65]);
    assert_eq!(sizes(2), vec![2]);
    assert!(make_batches(1, 64, 1, 0).is_err());
    assert!(make_batches(10, 1, 1, 0).is_err());
}

#[test]
fn batches_are_deterministic_per_epoch() {
    assert_eq!(make_batches(200, 64, 5, 3).unwrap(), make_batches(200, 64, 5, 3).unwrap());
    assert_ne!(make_batches(200, 64, 5, 3).unwrap(), make_batches(200, 64, 5, 4).unwrap());
    let mut all: Vec<usize> = make_batches(200, 64, 5, 3).unwrap().concat();
    all.sort_unstable();
    assert_eq!(all, (0..200).collect::<Vec<_>>());
}

#[test]
fn generator_counts() {
    let spec = SyntheticSpec {
        n_train_identities: 64,
        n_test_identities: 6,
        scenes_per_identity: 2,
        samples_per_scene: 3,
        face_dim: 8,
        voice_dim: 4,
        ..small_spec(5)
    };
    let data = gen_synthetic(&spec).unwrap();
    let faces = data.dataset.records().iter().filter(|r| r.modality == Modality::Face).count();
    assert_eq!(faces, 64 * 2 * 3 + 6 * 2 * 3);
    assert_eq!(data.dataset.len(), 2 * faces);
    let (pairs, _) = index_pairs(data.dataset.records());
    assert_eq!(pairs.len(), faces);
    assert_eq!(data.attributes.len(), data.dataset.len());

    let train: BTreeSet<String> = data.train_identities.iter().cloned().collect();
    let test: BTreeSet<String> = data.test_identities.iter().cloned().collect();
    assert!(train.is_disjoint(&test));
    let (train_ds, _) = split_unseen(&data.dataset, &test).unwrap();
    assert_eq!(train_ds.summary().identities, 64);
}

#[test]
fn generator_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_synthetic(&small_spec(6)).unwrap().write(&dir.path().join("a")).unwrap();
    let b = gen_synthetic(&small_spec(6)).unwrap().write(&dir.path().join("b")).unwrap();
    for key in ["features", "attributes", "truth", "trials"] {
        assert_eq!(std::fs::read(&a[key]).unwrap(), std::fs::read(&b[key]).unwrap(), "{key}");
    }
    let c = gen_synthetic(&small_spec(7)).unwrap();
    assert_ne!(c.dataset, gen_synthetic(&small_spec(6)).unwrap().dataset);
}

#[test]
fn trials_are_balanced_and_correct() {
    let data = gen_synthetic(&small_spec(8)).unwrap();
    let ds = &data.dataset;
    let same = data.trials.iter().filter(|t| t.label == TrialLabel::Same).count();
    assert_eq!(same * 2, data.trials.len());
    for t in &data.trials {
        let f = ds.get(&t.face_sample_id).unwrap();
        let v = ds.get(&t.voice_sample_id).unwrap();
        assert!(data.test_identities.contains(&f.identity));
        assert_eq!(f.identity == v.identity, t.label == TrialLabel::Same);
        assert_eq!(f.language, v.language);
    }
}

#[test]
fn trials_and_attributes_roundtrip() {
    let data = gen_synthetic(&small_spec(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = data.write(dir.path()).unwrap();
    assert_eq!(load_trials(&paths["trials"]).unwrap(), data.trials);
    assert_eq!(load_attributes(&paths["attributes"]).unwrap(), data.attributes);
    assert_eq!(load_truth(&paths["truth"]).unwrap(), data.truth);
}

#[test]
fn attributes_stay_in_range() {
    let data = gen_synthetic(&small_spec(10)).unwrap();
    for a in &data.attributes {
        assert!((1.0..=100.0).contains(&a.age));
        assert!((0.01..=0.99).contains(&a.gender_prob));
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn same_identity_latent_projections_are_more_similar() {
    // Two half-means per identity; halves of one identity should agree.
    let spec = SyntheticSpec {
        sample_noise: 0.5,
        ..small_spec(11)
    };
    let data = gen_synthetic(&spec).unwrap();
    let ds = &data.dataset;
    let mut means: Vec<Vec<f64>> = Vec::new();
    for id in ds.identities() {
        let faces: Vec<&FeatureRecord> = ds
            .records()
            .iter()
            .filter(|r| r.identity == id && r.modality == Modality::Face)
            .collect();
        let half = faces.len() / 2;
        for part in [&faces[..half], &faces[half..]] {
            let mut m = vec![0.0; spec.face_dim];
            for r in part {
                m.iter_mut().zip(&r.vector).for_each(|(a, b)| *a += b / part.len() as f64);
            }
            means.push(m);
        }
    }
    let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
    for i in 0..means.len() {
        for j in 0..i {
            let c = cosine(&means[i], &means[j]);
            if i / 2 == j / 2 {
                same += c;
                ns += 1;
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    assert!(same / ns as f64 > diff / nd as f64 + 0.2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmentation_size_law(multiplier in 1usize..8, seed in 0u64..1000, samples in 1usize..4) {
        let spec = SyntheticSpec { samples_per_scene: samples, ..small_spec(seed) };
        let data = gen_synthetic(&spec).unwrap();
        let (orig, _) = index_pairs(data.dataset.records());
        let per_identity = spec.scenes_per_identity * samples;
        let candidates = (spec.n_train_identities + spec.n_test_identities) * per_identity * (per_identity - 1);
        let out = augment_pairs(data.dataset.records(), multiplier, seed).unwrap();
        prop_assert_eq!(out.len(), (multiplier * orig.len()).min(orig.len() + candidates));
    }

    #[test]
    fn batches_cover_each_pair_once(n in 2usize..300, size in 2usize..80, seed in 0u64..50, epoch in 0u64..5) {
        let batches = make_batches(n, size, seed, epoch).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() >= 2 || n < 2));
    }
}
