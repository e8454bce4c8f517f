//! Stratified k-fold cross-validation and confusion metrics, with malware as
//! the positive class.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureMatrix, LabelTag};
use crate::learners::{self, Dataset, LearnError, LearnerSpec};
use crate::rank::{self, FeatureRanking, RankError, RankMethod};
use crate::seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must satisfy 2 <= k <= n (k = {k}, n = {n})")]
    BadK { k: usize, n: usize },
    #[error("length mismatch: {0} predictions, {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Fold index of every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.folds.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Shuffles each class with a seeded generator and deals it round-robin
/// over the folds. The dealing position carries over from one class to the
/// next, so total fold sizes also differ by at most one.
pub fn stratified_folds(labels: &[LabelTag], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(EvalError::BadK { k, n });
    }
    let mut rng = seed::rng(seed::derive(seed, "folds"));
    let mut folds = vec![0; n];
    let mut next = 0;
    for class in [LabelTag::Malware, LabelTag::Benign] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if !members.is_empty() && members.len() < k {
            log::warn!("{} {class} samples for {k} folds; some folds lack the class", members.len());
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total_malware(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn total_benign(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn total(&self) -> u64 {
        self.total_malware() + self.total_benign()
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(predictions: &[LabelTag], truth: &[LabelTag]) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truth.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        match (t, p) {
            (LabelTag::Malware, LabelTag::Malware) => c.tp += 1,
            (LabelTag::Malware, LabelTag::Benign) => c.fn_ += 1,
            (LabelTag::Benign, LabelTag::Malware) => c.fp += 1,
            (LabelTag::Benign, LabelTag::Benign) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Rates in `[0, 1]`; `None` where the denominator class is empty.
/// Serialized as a number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(with = "undefined_marker")]
    pub tpr: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub tnr: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub fpr: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub fnr: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub accuracy: Option<f64>,
}

mod undefined_marker {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Marker(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Marker("undefined".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Marker(m) if m == "undefined" => Ok(None),
            Repr::Marker(m) => Err(serde::de::Error::custom(format!("unexpected marker {m:?}"))),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// TPR = TP/TM, TNR = TN/TB, FPR = FP/TB, FNR = FN/TM, accuracy = (TP+TN)/(TM+TB).
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let tm = c.total_malware();
    let tb = c.total_benign();
    Metrics {
        tpr: ratio(c.tp, tm),
        tnr: ratio(c.tn, tb),
        fpr: ratio(c.fp, tb),
        fnr: ratio(c.fn_, tm),
        accuracy: ratio(c.tp + c.tn, tm + tb),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Rank once on the full matrix before folding.
    Global,
    /// Rank again on each training fold.
    PerFold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub learner: LearnerSpec,
    pub k: usize,
    pub seed: u64,
    pub selection: SelectionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub classifier: String,
    pub method: RankMethod,
    pub top_k: usize,
    pub config: CvConfig,
    pub samples: usize,
    /// Features used in every fold (global selection only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

/// Runs k-fold cross-validation. Confusion counts are pooled over the folds
/// and the metrics computed once from the pooled counts. Folds run in
/// parallel on the current rayon pool.
pub fn cross_validate(matrix: &FeatureMatrix, ranking: &FeatureRanking, cfg: &CvConfig) -> Result<CvReport, EvalError> {
    cfg.learner.validate()?;
    let labels = matrix.labels();
    let folds = stratified_folds(&labels, cfg.k, cfg.seed)?;
    let global = Dataset::from_matrix(matrix, &ranking.opcodes());

    let per_fold: Vec<ConfusionCounts> = (0..cfg.k)
        .into_par_iter()
        .map(|f| -> Result<ConfusionCounts, EvalError> {
            let train_idx = folds.train_indices(f);
            let test_idx = folds.test_indices(f);
            let fold_seed = seed::derive_indexed(cfg.seed, "cv-train", f as u64);
            let (train_data, test_data) = match cfg.selection {
                SelectionMode::Global => (global.subset(&train_idx), global.subset(&test_idx)),
                SelectionMode::PerFold => {
                    let train_matrix = matrix.subset(&train_idx);
                    let fold_ranking = rank::rank_top_k(&train_matrix, ranking.method, ranking.k)?;
                    let features = fold_ranking.opcodes();
                    (
                        Dataset::from_matrix(&train_matrix, &features),
                        Dataset::from_samples(&matrix.subset(&test_idx).samples, &features),
                    )
                }
            };
            let model = learners::train(&cfg.learner, &train_data, fold_seed)?;
            let predicted: Vec<LabelTag> = (0..test_data.len())
                .map(|i| model.predict_row(&test_data.row(i)).label)
                .collect();
            confusion(&predicted, test_data.labels())
        })
        .collect::<Result<_, _>>()?;

    let counts = per_fold.into_iter().fold(ConfusionCounts::default(), |a, b| a + b);
    Ok(CvReport {
        classifier: cfg.learner.display_name().to_string(),
        method: ranking.method,
        top_k: ranking.k,
        config: *cfg,
        samples: matrix.samples.len(),
        features: (cfg.selection == SelectionMode::Global).then(|| ranking.opcodes()),
        counts,
        metrics: metrics(&counts),
    })
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

/// Classifier comparison in the column order TP rate, FN rate, FP rate, TN
/// rate, accuracy.
pub fn performance_table(reports: &[CvReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16}{:>15}{:>16}{:>16}{:>15}{:>11}",
        "Classifiers", "True Positive", "False Negative", "False Positive", "True Negative", "Accuracy"
    );
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<16}{:>15}{:>16}{:>16}{:>15}{:>11}",
            r.classifier,
            percent(m.tpr),
            percent(m.fnr),
            percent(m.fpr),
            percent(m.tnr),
            percent(m.accuracy)
        );
    }
    s
}
