mod common;

use common::rng;
use opfreq::corpus::LabelTag::{self, Benign as B, Malware as M};
use opfreq::learners::{
    self, train_c45, train_forest, train_random_tree, train_reptree, train_stump, tree_seed, C45Config, Classifier,
    ClassDistribution, Dataset, ForestConfig, LearnError, LearnerSpec, Model, Node, RandomTreeConfig, RepTreeConfig,
    TreeModel,
};
use proptest::prelude::*;
use rand::Rng;

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("f{j}")).collect()
}

fn accuracy(predict: impl Fn(&[f64]) -> LabelTag, data: &Dataset) -> f64 {
    let hits = (0..data.len()).filter(|&i| predict(&data.row(i)) == data.labels()[i]).count();
    hits as f64 / data.len() as f64
}

/// Marker fixture: f0 is positive exactly for malware, the rest is noise.
fn marker_data(seed: u64, n: usize, p: usize) -> Dataset {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let tag = if i % 2 == 0 { M } else { B };
        let mut row: Vec<f64> = (0..p).map(|_| f64::from(r.gen_range(0u8..8))).collect();
        row[0] = if tag == M { f64::from(r.gen_range(1u8..5)) } else { 0.0 };
        rows.push(row);
        labels.push(tag);
    }
    Dataset::from_rows(names(p), &rows, labels)
}

fn depth_two_data() -> Dataset {
    let points = [(1., 1.), (1., 9.), (9., 1.), (9., 9.), (2., 2.), (2., 8.), (8., 2.), (8., 8.)];
    let rows: Vec<Vec<f64>> = points.iter().map(|&(x, y)| vec![x, y]).collect();
    let labels = points.iter().map(|&(x, y)| if x > 5.0 && y > 5.0 { M } else { B }).collect();
    Dataset::from_rows(vec!["x".into(), "y".into()], &rows, labels)
}

#[test]
fn stump_on_marker_has_no_training_error() {
    let data = marker_data(1, 40, 4);
    let stump = train_stump(&data).unwrap();
    assert_eq!(stump.split_rule(0).unwrap().feature, "f0");
    assert_eq!(accuracy(|r| stump.predict_row(r).label, &data), 1.0);
}

#[test]
fn single_class_corpus_yields_one_leaf() {
    let data = Dataset::from_rows(names(2), &[vec![1., 2.], vec![3., 4.], vec![5., 6.]], vec![B, B, B]);
    for t in [train_stump(&data).unwrap(), train_c45(&data, &C45Config::default()).unwrap()] {
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.predict_row(&[0., 0.]).label, B);
    }
}

#[test]
fn no_stump_solves_xor() {
    let rows = vec![vec![0., 0.], vec![0., 1.], vec![1., 0.], vec![1., 1.]];
    let data = Dataset::from_rows(names(2), &rows, vec![B, M, M, B]);
    // every axis-aligned stump with any leaf labelling
    for f in 0..2 {
        for t in [-0.5, 0.5, 1.5] {
            for (l, r) in [(M, B), (B, M), (M, M), (B, B)] {
                let acc = accuracy(|row| if row[f] <= t { l } else { r }, &data);
                assert!(acc <= 0.5 + 1e-12);
            }
        }
    }
    let stump = train_stump(&data).unwrap();
    assert_eq!(accuracy(|r| stump.predict_row(r).label, &data), 0.5);
}

#[test]
fn c45_separates_marker_data() {
    let data = marker_data(3, 60, 5);
    let tree = train_c45(&data, &C45Config::default()).unwrap();
    assert_eq!(accuracy(|r| tree.predict_row(r).label, &data), 1.0);
}

#[test]
fn c45_identical_rows_give_majority_leaf() {
    let data = Dataset::from_rows(names(2), &vec![vec![4., 4.]; 5], vec![M, B, M, M, B]);
    let tree = train_c45(&data, &C45Config::default()).unwrap();
    assert_eq!(tree.nodes().len(), 1);
    assert_eq!(tree.predict_row(&[4., 4.]).label, M);
}

#[test]
fn c45_needs_depth_two_for_conjunction() {
    let data = depth_two_data();
    // no single threshold solves it
    for f in 0..2 {
        for t in [1.5, 5.0, 8.5] {
            for (l, r) in [(M, B), (B, M)] {
                assert!(accuracy(|row| if row[f] <= t { l } else { r }, &data) < 1.0);
            }
        }
    }
    let tree = train_c45(&data, &C45Config::default()).unwrap();
    assert_eq!(tree.depth(), 2);
    assert_eq!(accuracy(|r| tree.predict_row(r).label, &data), 1.0);
    // (8, 8) routes right at the root, then right again
    let p = tree.predict_row(&[8., 8.]);
    assert_eq!((p.label, p.score), (M, 1.0));
    assert_eq!(tree.predict_row(&[8., 2.]).label, B);
}

#[test]
fn random_tree_with_all_features_ignores_seed() {
    let data = marker_data(5, 50, 4);
    let cfg = RandomTreeConfig { subset: Some(4), min_leaf: 1 };
    let a = train_random_tree(&data, &cfg, 1).unwrap();
    let b = train_random_tree(&data, &cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.split_rule(0), train_stump(&data).unwrap().split_rule(0));
}

#[test]
fn random_tree_fits_marker_data_for_twenty_seeds() {
    let data = marker_data(7, 80, 9);
    for seed in 0..20 {
        let cfg = RandomTreeConfig::default();
        let t = train_random_tree(&data, &cfg, seed).unwrap();
        assert_eq!(t, train_random_tree(&data, &cfg, seed).unwrap());
        assert_eq!(accuracy(|r| t.predict_row(r).label, &data), 1.0, "seed {seed}");
    }
}

#[test]
fn reptree_keeps_separable_data_perfect() {
    let data = marker_data(9, 90, 4);
    let t = train_reptree(&data, &RepTreeConfig::default(), 4).unwrap();
    assert!(!t.pruning_skipped);
    assert_eq!(accuracy(|r| t.predict_row(r).label, &data), 1.0);
}

#[test]
fn reptree_on_two_samples_skips_pruning() {
    let data = Dataset::from_rows(names(1), &[vec![0.], vec![1.]], vec![B, M]);
    let t = train_reptree(&data, &RepTreeConfig::default(), 0).unwrap();
    assert!(t.pruning_skipped);
}

#[test]
fn forest_reduces_to_one_random_tree() {
    let data = marker_data(11, 40, 4);
    let cfg = ForestConfig { trees: 1, subset: Some(4), bootstrap: false };
    let forest = train_forest(&data, &cfg, 21).unwrap();
    let tree = train_random_tree(&data, &RandomTreeConfig { subset: Some(4), min_leaf: 1 }, tree_seed(21, 0)).unwrap();
    assert_eq!(forest.trees(), std::slice::from_ref(&tree));
}

#[test]
fn forest_is_deterministic() {
    let data = marker_data(13, 60, 6);
    let cfg = ForestConfig { trees: 15, ..ForestConfig::default() };
    let a = train_forest(&data, &cfg, 5).unwrap();
    let b = train_forest(&data, &cfg, 5).unwrap();
    assert_eq!(a, b);
    let c = train_forest(&data, &cfg, 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn empty_training_set_is_an_error() {
    let data = Dataset::from_rows(names(1), &[], vec![]);
    for spec in ["stump", "c45", "rtree", "reptree", "forest"] {
        let spec = LearnerSpec::from_name(spec).unwrap();
        assert!(matches!(learners::train(&spec, &data, 0), Err(LearnError::EmptyTrainingSet)));
    }
}

#[test]
fn leaf_only_model_predicts_its_distribution() {
    let t = TreeModel::from_nodes(vec![Node::leaf(ClassDistribution { malware: 10, benign: 0 })], names(1)).unwrap();
    let p = t.predict_row(&[123.0]);
    assert_eq!((p.label, p.score), (M, 1.0));
}

fn classifier(spec: &str, seed: u64) -> (Classifier, Dataset) {
    let data = marker_data(17, 60, 5);
    let spec = LearnerSpec::from_name(spec).unwrap();
    let spec = match spec {
        LearnerSpec::Forest(c) => LearnerSpec::Forest(ForestConfig { trees: 12, ..c }),
        other => other,
    };
    (learners::train(&spec, &data, seed).unwrap(), data)
}

#[test]
fn model_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(0);
    for spec in ["stump", "c45", "rtree", "reptree", "forest"] {
        let (c, _) = classifier(spec, 3);
        let path = dir.path().join(format!("{spec}.model"));
        c.save(&path).unwrap();
        let loaded = Classifier::load(&path).unwrap();
        assert_eq!(loaded, c);
        for _ in 0..100 {
            let row: Vec<f64> = (0..5).map(|_| f64::from(r.gen_range(0u8..10))).collect();
            assert_eq!(loaded.predict_row(&row), c.predict_row(&row));
        }
    }
}

#[test]
fn truncated_and_future_models_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = classifier("forest", 1);
    let text = c.to_text();
    let lines: Vec<&str> = text.lines().collect();

    let truncated = dir.path().join("t.model");
    std::fs::write(&truncated, lines[..lines.len() - 1].join("\n")).unwrap();
    assert!(matches!(Classifier::load(&truncated), Err(LearnError::MalformedModelFile { .. })));

    let future = dir.path().join("f.model");
    std::fs::write(&future, text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    match Classifier::load(&future) {
        Err(LearnError::MalformedModelFile { detail, .. }) => assert!(detail.contains("99"), "{detail}"),
        other => panic!("expected MalformedModelFile, got {other:?}"),
    }
}

#[test]
fn strict_vocabulary_check() {
    let (mut c, _) = classifier("stump", 0);
    c.vocab_digest = Some("abc".into());
    assert!(c.check_vocabulary(Some("abc"), true).is_ok());
    assert!(matches!(c.check_vocabulary(Some("def"), true), Err(LearnError::ModelSchemaMismatch { .. })));
    assert!(c.check_vocabulary(Some("def"), false).is_ok());
}

fn conflict_free_data() -> impl Strategy<Value = Dataset> {
    (2usize..40, 1usize..5, any::<u64>()).prop_map(|(n, p, seed)| {
        let mut r = rng(seed);
        let mut seen = std::collections::BTreeMap::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let row: Vec<u8> = (0..p).map(|_| r.gen_range(0..6)).collect();
            let tag = *seen.entry(row.clone()).or_insert(if r.gen_bool(0.5) { M } else { B });
            rows.push(row.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
            labels.push(tag);
        }
        Dataset::from_rows(names(p), &rows, labels)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn unpruned_random_trees_fit_training_data(data in conflict_free_data(), seed in any::<u64>()) {
        let t = train_random_tree(&data, &RandomTreeConfig::default(), seed).unwrap();
        prop_assert_eq!(accuracy(|r| t.predict_row(r).label, &data), 1.0);
        prop_assert_eq!(&t, &train_random_tree(&data, &RandomTreeConfig::default(), seed).unwrap());
    }

    #[test]
    fn forest_votes_are_consistent(data in conflict_free_data(), seed in any::<u64>(), trees in 1usize..8) {
        let cfg = ForestConfig { trees, ..ForestConfig::default() };
        let f = train_forest(&data, &cfg, seed).unwrap();
        prop_assert_eq!(f.trees_count(), trees);
        for i in 0..data.len() {
            let row = data.row(i);
            let p = f.predict_row(&row);
            let votes = f.trees().iter().filter(|t| t.predict_row(&row).label == M).count();
            prop_assert_eq!(p.score, votes as f64 / trees as f64);
            prop_assert_eq!(p.label == M, p.score >= 0.5);
        }
    }

    #[test]
    fn training_is_a_function_of_its_inputs(data in conflict_free_data(), seed in any::<u64>()) {
        for spec in ["stump", "c45", "rtree", "reptree"] {
            let spec = LearnerSpec::from_name(spec).unwrap();
            let a = learners::train(&spec, &data, seed).unwrap();
            let b = learners::train(&spec, &data, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn model_kinds_match_learners() {
    let (c, _) = classifier("forest", 0);
    assert!(matches!(c.model, Model::Forest(_)));
    let (c, _) = classifier("reptree", 0);
    assert!(matches!(c.model, Model::Tree(_)));
}
