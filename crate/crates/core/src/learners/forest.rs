use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::tree::TreeModel;
use super::{default_subset_size, train_random_tree, LearnError, Prediction, RandomTreeConfig};
use crate::corpus::{LabelTag, Sample};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    /// Features examined per node; `None` means `floor(sqrt(p))`.
    pub subset: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            subset: None,
            bootstrap: true,
        }
    }
}

/// Bagged random trees with majority voting.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub(crate) trees: Vec<TreeModel>,
    pub seed: u64,
    pub feature_subset_size: usize,
    pub bootstrap: bool,
    pub(crate) features: Vec<String>,
}

impl ForestModel {
    pub fn trees(&self) -> &[TreeModel] {
        &self.trees
    }

    pub fn trees_count(&self) -> usize {
        self.trees.len()
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    fn vote<F: Fn(&TreeModel) -> Prediction>(&self, predict: F) -> Prediction {
        let malware = self
            .trees
            .iter()
            .filter(|t| predict(t).label == LabelTag::Malware)
            .count();
        // a split vote goes to malware
        let label = if 2 * malware >= self.trees.len() {
            LabelTag::Malware
        } else {
            LabelTag::Benign
        };
        Prediction {
            label,
            score: malware as f64 / self.trees.len() as f64,
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Prediction {
        self.vote(|t| t.predict_row(row))
    }

    pub fn predict_sample(&self, sample: &Sample) -> Prediction {
        self.vote(|t| t.predict_sample(sample))
    }
}

/// Seed of the `index`-th tree.
pub fn tree_seed(seed: u64, index: usize) -> u64 {
    seed::derive_indexed(seed, "forest-tree", index as u64)
}

/// `n` draws with replacement from `0..n`.
pub(crate) fn bootstrap_rows(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Trains `cfg.trees` random trees, each on its own bootstrap sample. Trees
/// are trained in parallel on the current rayon pool and kept in index order.
pub fn train_forest(data: &Dataset, cfg: &ForestConfig, seed: u64) -> Result<ForestModel, LearnError> {
    super::LearnerSpec::Forest(*cfg).validate()?;
    if data.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    let k = cfg.subset.unwrap_or_else(|| default_subset_size(data.n_features()));
    let tree_cfg = RandomTreeConfig {
        subset: Some(k),
        min_leaf: 1,
    };
    let trees = (0..cfg.trees)
        .into_par_iter()
        .map(|i| {
            let s = tree_seed(seed, i);
            if cfg.bootstrap {
                let rows = bootstrap_rows(data.len(), seed::derive_indexed(seed, "forest-bootstrap", i as u64));
                train_random_tree(&data.subset(&rows), &tree_cfg, s)
            } else {
                train_random_tree(data, &tree_cfg, s)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForestModel {
        trees,
        seed,
        feature_subset_size: k,
        bootstrap: cfg.bootstrap,
        features: data.features().to_vec(),
    })
}
