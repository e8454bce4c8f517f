//! Tree-based classifiers: decision stump, C4.5-style tree, random tree,
//! REPTree and random forest.
//!
//! Training is a pure function of `(data, spec, seed)`.

mod dataset;
mod forest;
mod persist;
mod tree;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureMatrix, LabelTag, Sample};

pub use dataset::Dataset;
pub use forest::{train_forest, tree_seed, ForestConfig, ForestModel};
pub use persist::{MODEL_FORMAT, MODEL_VERSION};
pub use tree::{ClassDistribution, Node, NodeKind, SplitRule, TreeModel};

use tree::{grow, Criterion, GrowParams};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid learner configuration: {0}")]
    InvalidConfig(String),
    #[error("model vocabulary {expected} does not match sample vocabulary {found}")]
    ModelSchemaMismatch { expected: String, found: String },
    #[error("malformed model file {path}, line {line}: {detail}")]
    MalformedModelFile {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: LabelTag,
    /// Malware fraction of the leaf (tree) or of the votes (forest).
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C45Config {
    pub min_leaf: usize,
    /// Confidence factor of the pessimistic error estimate.
    pub cf: f64,
}

impl Default for C45Config {
    fn default() -> Self {
        C45Config { min_leaf: 2, cf: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomTreeConfig {
    /// Features examined per node; `None` means `floor(sqrt(p))`.
    pub subset: Option<usize>,
    pub min_leaf: usize,
}

impl Default for RandomTreeConfig {
    fn default() -> Self {
        RandomTreeConfig {
            subset: None,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepTreeConfig {
    pub prune_fraction: f64,
    pub min_leaf: usize,
}

impl Default for RepTreeConfig {
    fn default() -> Self {
        RepTreeConfig {
            prune_fraction: 1.0 / 3.0,
            min_leaf: 2,
        }
    }
}

/// Which learner to train, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case")]
pub enum LearnerSpec {
    Stump,
    C45(C45Config),
    #[serde(rename = "rtree")]
    RandomTree(RandomTreeConfig),
    #[serde(rename = "reptree")]
    RepTree(RepTreeConfig),
    Forest(ForestConfig),
}

impl LearnerSpec {
    pub fn short_name(&self) -> &'static str {
        match self {
            LearnerSpec::Stump => "stump",
            LearnerSpec::C45(_) => "c45",
            LearnerSpec::RandomTree(_) => "rtree",
            LearnerSpec::RepTree(_) => "reptree",
            LearnerSpec::Forest(_) => "forest",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            LearnerSpec::Stump => "Decision Stump",
            LearnerSpec::C45(_) => "C4.5 (J48)",
            LearnerSpec::RandomTree(_) => "Random Tree",
            LearnerSpec::RepTree(_) => "REPTree",
            LearnerSpec::Forest(_) => "Random Forest",
        }
    }

    /// Default hyperparameters for a learner name accepted by the CLI.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "stump" => LearnerSpec::Stump,
            "c45" => LearnerSpec::C45(C45Config::default()),
            "rtree" => LearnerSpec::RandomTree(RandomTreeConfig::default()),
            "reptree" => LearnerSpec::RepTree(RepTreeConfig::default()),
            "forest" => LearnerSpec::Forest(ForestConfig::default()),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.to_string()));
        match *self {
            LearnerSpec::Stump => Ok(()),
            LearnerSpec::C45(c) => {
                if c.min_leaf == 0 {
                    return bad("min_leaf must be at least 1");
                }
                if !(c.cf > 0.0 && c.cf <= 0.5) {
                    return bad("cf must lie in (0, 0.5]");
                }
                Ok(())
            }
            LearnerSpec::RandomTree(c) => {
                if c.min_leaf == 0 || c.subset == Some(0) {
                    return bad("min_leaf and subset must be at least 1");
                }
                Ok(())
            }
            LearnerSpec::RepTree(c) => {
                if c.min_leaf == 0 {
                    return bad("min_leaf must be at least 1");
                }
                if !(c.prune_fraction > 0.0 && c.prune_fraction < 1.0) {
                    return bad("prune_fraction must lie in (0, 1)");
                }
                Ok(())
            }
            LearnerSpec::Forest(c) => {
                if c.trees == 0 || c.subset == Some(0) {
                    return bad("trees and subset must be at least 1");
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// `floor(sqrt(p))`, at least 1.
pub fn default_subset_size(n_features: usize) -> usize {
    ((n_features as f64).sqrt().floor() as usize).max(1)
}

pub fn train_stump(data: &Dataset) -> Result<TreeModel, LearnError> {
    if data.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    let params = GrowParams {
        criterion: Criterion::InfoGain,
        min_leaf: 1,
        max_depth: Some(1),
        allow_zero_gain: false,
        subset: None,
    };
    Ok(grow(data, (0..data.len()).collect(), params))
}

pub fn train_c45(data: &Dataset, cfg: &C45Config) -> Result<TreeModel, LearnError> {
    LearnerSpec::C45(*cfg).validate()?;
    if data.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    let params = GrowParams {
        criterion: Criterion::GainRatio,
        min_leaf: cfg.min_leaf,
        max_depth: None,
        allow_zero_gain: false,
        subset: None,
    };
    let mut tree = grow(data, (0..data.len()).collect(), params);
    tree.pessimistic_prune(cfg.cf);
    Ok(tree)
}

pub fn train_random_tree(data: &Dataset, cfg: &RandomTreeConfig, seed: u64) -> Result<TreeModel, LearnError> {
    LearnerSpec::RandomTree(*cfg).validate()?;
    if data.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    let k = cfg.subset.unwrap_or_else(|| default_subset_size(data.n_features()));
    let params = GrowParams {
        criterion: Criterion::InfoGain,
        min_leaf: cfg.min_leaf,
        max_depth: None,
        allow_zero_gain: true,
        subset: Some((k, seed)),
    };
    Ok(grow(data, (0..data.len()).collect(), params))
}

/// Information-gain tree grown on a stratified part of the data and pruned
/// against the held-out rest. With too few samples for a holdout the tree is
/// grown on everything and `pruning_skipped` is set.
pub fn train_reptree(data: &Dataset, cfg: &RepTreeConfig, seed: u64) -> Result<TreeModel, LearnError> {
    LearnerSpec::RepTree(*cfg).validate()?;
    if data.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    let params = GrowParams {
        criterion: Criterion::InfoGain,
        min_leaf: cfg.min_leaf,
        max_depth: None,
        allow_zero_gain: false,
        subset: None,
    };
    match tree::stratified_holdout(data.labels(), cfg.prune_fraction, seed) {
        Some((grow_rows, holdout)) => {
            let mut tree = grow(data, grow_rows, params);
            tree.reduced_error_prune(data, &holdout);
            Ok(tree)
        }
        None => {
            log::warn!("too few samples for a pruning holdout ({}); REPTree left unpruned", data.len());
            let mut tree = grow(data, (0..data.len()).collect(), params);
            tree.pruning_skipped = true;
            Ok(tree)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Tree(TreeModel),
    Forest(ForestModel),
}

/// A trained model plus the provenance needed to apply and persist it.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub learner: LearnerSpec,
    pub seed: u64,
    /// Digest of the vocabulary the training matrix was built with.
    pub vocab_digest: Option<String>,
    pub model: Model,
}

impl Classifier {
    pub fn features(&self) -> &[String] {
        match &self.model {
            Model::Tree(t) => t.features(),
            Model::Forest(f) => f.features(),
        }
    }

    pub fn predict(&self, sample: &Sample) -> Prediction {
        match &self.model {
            Model::Tree(t) => t.predict_sample(sample),
            Model::Forest(f) => f.predict_sample(sample),
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Prediction {
        match &self.model {
            Model::Tree(t) => t.predict_row(row),
            Model::Forest(f) => f.predict_row(row),
        }
    }

    /// Compares the training vocabulary with the one `sample`s were built
    /// against. A mismatch is an error in strict mode and a warning otherwise.
    pub fn check_vocabulary(&self, digest: Option<&str>, strict: bool) -> Result<(), LearnError> {
        let expected = self.vocab_digest.as_deref().unwrap_or("<none>");
        let found = digest.unwrap_or("<none>");
        if self.vocab_digest.is_some() && digest.is_some() && expected == found {
            return Ok(());
        }
        if strict {
            return Err(LearnError::ModelSchemaMismatch {
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        log::warn!("vocabulary digest mismatch: model {expected}, samples {found}");
        Ok(())
    }
}

/// Trains `spec` on `data`.
pub fn train(spec: &LearnerSpec, data: &Dataset, seed: u64) -> Result<Classifier, LearnError> {
    spec.validate()?;
    let model = match spec {
        LearnerSpec::Stump => Model::Tree(train_stump(data)?),
        LearnerSpec::C45(c) => Model::Tree(train_c45(data, c)?),
        LearnerSpec::RandomTree(c) => Model::Tree(train_random_tree(data, c, seed)?),
        LearnerSpec::RepTree(c) => Model::Tree(train_reptree(data, c, seed)?),
        LearnerSpec::Forest(c) => Model::Forest(train_forest(data, c, seed)?),
    };
    Ok(Classifier {
        learner: *spec,
        seed,
        vocab_digest: None,
        model,
    })
}

/// Trains on a matrix restricted to `features`, recording its vocabulary digest.
pub fn train_on_matrix(
    spec: &LearnerSpec,
    matrix: &FeatureMatrix,
    features: &[String],
    seed: u64,
) -> Result<Classifier, LearnError> {
    let data = Dataset::from_matrix(matrix, features);
    let mut c = train(spec, &data, seed)?;
    c.vocab_digest = Some(matrix.vocabulary.digest());
    Ok(c)
}
