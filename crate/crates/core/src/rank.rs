//! Filter feature selection.
//!
//! Each opcode is scored against the class label independently of any
//! classifier. Fisher score works on raw counts; information gain, gain
//! ratio, symmetric uncertainty and chi-square work on a contingency table
//! obtained by supervised MDL entropy discretization of the counts.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureMatrix, LabelTag};

/// Floor applied to every score denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;
pub const DEFAULT_TOP_K: usize = 20;

/// Two scores closer than this are treated as equal when choosing a cut point.
const CUT_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RankError {
    #[error("entropy of an all-zero count vector is undefined")]
    AllZero,
    #[error("both classes must be present")]
    SingleClass,
    #[error("length mismatch: {0} values, {1} labels")]
    LengthMismatch(usize, usize),
    #[error("unknown ranking method {0:?} (expected fisher, ig, gr, su or chi)")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    Fisher,
    InfoGain,
    GainRatio,
    SymUncertainty,
    ChiSquare,
}

impl RankMethod {
    /// Column order of the side-by-side comparison table.
    pub const ALL: [RankMethod; 5] = [
        RankMethod::InfoGain,
        RankMethod::GainRatio,
        RankMethod::SymUncertainty,
        RankMethod::Fisher,
        RankMethod::ChiSquare,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            RankMethod::Fisher => "fisher",
            RankMethod::InfoGain => "ig",
            RankMethod::GainRatio => "gr",
            RankMethod::SymUncertainty => "su",
            RankMethod::ChiSquare => "chi",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            RankMethod::Fisher => "Fisher Score",
            RankMethod::InfoGain => "Information Gain",
            RankMethod::GainRatio => "Gain Ratio",
            RankMethod::SymUncertainty => "Symmetrical uncertainty",
            RankMethod::ChiSquare => "Chi Square",
        }
    }

    pub fn is_discrete(self) -> bool {
        self != RankMethod::Fisher
    }
}

impl fmt::Display for RankMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for RankMethod {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fisher" => Ok(RankMethod::Fisher),
            "ig" => Ok(RankMethod::InfoGain),
            "gr" => Ok(RankMethod::GainRatio),
            "su" => Ok(RankMethod::SymUncertainty),
            "chi" => Ok(RankMethod::ChiSquare),
            other => Err(RankError::UnknownMethod(other.to_string())),
        }
    }
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(class_counts: &[u64]) -> Result<f64, RankError> {
    let n: u64 = class_counts.iter().sum();
    if n == 0 {
        return Err(RankError::AllZero);
    }
    Ok(entropy_of(class_counts, n))
}

pub(crate) fn entropy_of(counts: &[u64], n: u64) -> f64 {
    let n = n as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

fn class_index(tag: LabelTag) -> usize {
    match tag {
        LabelTag::Malware => 0,
        LabelTag::Benign => 1,
    }
}

fn check_lengths(n_values: usize, labels: &[LabelTag]) -> Result<(), RankError> {
    if n_values != labels.len() {
        return Err(RankError::LengthMismatch(n_values, labels.len()));
    }
    Ok(())
}

/// Cut points of a supervised entropy discretization with the MDL stopping
/// criterion. Cuts are midpoints between adjacent distinct values at class
/// boundaries, returned in increasing order.
pub fn discretize_mdl(values: &[f64], labels: &[LabelTag]) -> Vec<f64> {
    assert_eq!(values.len(), labels.len(), "values and labels must align");
    let mut pairs: Vec<(f64, usize)> = values
        .iter()
        .zip(labels)
        .map(|(&v, &l)| (v, class_index(l)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    // collapse equal values into groups of (value, per-class counts)
    let mut groups: Vec<(f64, [u64; 2])> = Vec::new();
    for (v, c) in pairs {
        match groups.last_mut() {
            Some((gv, counts)) if *gv == v => counts[c] += 1,
            _ => {
                let mut counts = [0; 2];
                counts[c] = 1;
                groups.push((v, counts));
            }
        }
    }
    let mut cuts = Vec::new();
    split_groups(&groups, &mut cuts);
    cuts
}

fn classes_present(counts: &[u64; 2]) -> u32 {
    counts.iter().filter(|&&c| c > 0).count() as u32
}

fn split_groups(groups: &[(f64, [u64; 2])], cuts: &mut Vec<f64>) {
    if groups.len() < 2 {
        return;
    }
    let mut total = [0u64; 2];
    for (_, c) in groups {
        total[0] += c[0];
        total[1] += c[1];
    }
    let n = total[0] + total[1];
    let nf = n as f64;

    let mut best: Option<(usize, f64, [u64; 2])> = None;
    let mut left = [0u64; 2];
    for i in 0..groups.len() - 1 {
        left[0] += groups[i].1[0];
        left[1] += groups[i].1[1];
        let (a, b) = (&groups[i].1, &groups[i + 1].1);
        let same_pure = classes_present(a) == 1 && classes_present(b) == 1 && (a[0] > 0) == (b[0] > 0);
        if same_pure {
            continue;
        }
        let right = [total[0] - left[0], total[1] - left[1]];
        let nl = left[0] + left[1];
        let nr = right[0] + right[1];
        let e = (nl as f64 / nf) * entropy_of(&left, nl) + (nr as f64 / nf) * entropy_of(&right, nr);
        if best.map_or(true, |(_, be, _)| e < be - CUT_TIE_EPS) {
            best = Some((i, e, left));
        }
    }
    let Some((i, e, left)) = best else { return };
    let right = [total[0] - left[0], total[1] - left[1]];
    let h = entropy_of(&total, n);
    let gain = h - e;
    let (k, k1, k2) = (
        classes_present(&total) as f64,
        classes_present(&left) as f64,
        classes_present(&right) as f64,
    );
    let h1 = entropy_of(&left, left[0] + left[1]);
    let h2 = entropy_of(&right, right[0] + right[1]);
    let delta = (3f64.powf(k) - 2.0).log2() - (k * h - k1 * h1 - k2 * h2);
    let threshold = ((nf - 1.0).log2() + delta) / nf;
    if gain <= threshold {
        return;
    }
    split_groups(&groups[..=i], cuts);
    cuts.push((groups[i].0 + groups[i + 1].0) / 2.0);
    split_groups(&groups[i + 1..], cuts);
}

/// Bin id of each value: the number of cut points strictly below it.
pub fn apply_cuts(values: &[f64], cuts: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| cuts.partition_point(|c| c < v))
        .collect()
}

/// Joint counts of feature bins (rows) against classes (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    rows: Vec<Vec<u64>>,
}

impl ContingencyTable {
    /// Builds a table from explicit rows; all rows must have the same width.
    pub fn from_rows(rows: Vec<Vec<u64>>) -> Self {
        let width = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == width), "ragged contingency table");
        ContingencyTable { rows }
    }

    /// Table of bin ids against the two class labels.
    pub fn from_binned(bins: &[usize], labels: &[LabelTag]) -> Result<Self, RankError> {
        check_lengths(bins.len(), labels)?;
        let n_bins = bins.iter().max().map_or(0, |&m| m + 1);
        let mut rows = vec![vec![0u64; 2]; n_bins];
        for (&b, &l) in bins.iter().zip(labels) {
            rows[b][class_index(l)] += 1;
        }
        Ok(ContingencyTable { rows })
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let width = self.rows.first().map_or(0, Vec::len);
        (0..width).map(|j| self.rows.iter().map(|r| r[j]).sum()).collect()
    }

    /// H(C): entropy of the class marginal.
    pub fn class_entropy(&self) -> Result<f64, RankError> {
        entropy(&self.col_sums())
    }

    /// H(X): entropy of the bin marginal.
    pub fn feature_entropy(&self) -> Result<f64, RankError> {
        entropy(&self.row_sums())
    }

    /// IG = H(C) - sum_v (n_v / n) H(C | X = v).
    pub fn info_gain(&self) -> Result<f64, RankError> {
        let n = self.total();
        let hc = self.class_entropy()?;
        let mut conditional = 0.0;
        for row in &self.rows {
            let nv: u64 = row.iter().sum();
            if nv > 0 {
                conditional += (nv as f64 / n as f64) * entropy_of(row, nv);
            }
        }
        Ok((hc - conditional).max(0.0))
    }

    /// IG / H(X); zero for a single-bin feature.
    pub fn gain_ratio(&self) -> Result<f64, RankError> {
        let ig = self.info_gain()?;
        let hx = self.feature_entropy()?;
        if hx == 0.0 {
            return Ok(0.0);
        }
        Ok((ig / hx.max(DENOMINATOR_FLOOR)).min(1.0))
    }

    /// 2 IG / (H(X) + H(C)); zero when both entropies vanish.
    pub fn sym_uncertainty(&self) -> Result<f64, RankError> {
        let ig = self.info_gain()?;
        let denom = self.feature_entropy()? + self.class_entropy()?;
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((2.0 * ig / denom.max(DENOMINATOR_FLOOR)).min(1.0))
    }

    /// Pearson chi-square without continuity correction. Cells with zero
    /// expectation contribute nothing.
    pub fn chi_square(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let rs = self.row_sums();
        let cs = self.col_sums();
        let mut chi = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            for (j, &o) in row.iter().enumerate() {
                let e = rs[i] as f64 * cs[j] as f64 / n;
                if e > 0.0 {
                    let d = o as f64 - e;
                    chi += d * d / e;
                }
            }
        }
        chi
    }
}

pub fn info_gain(binned: &[usize], labels: &[LabelTag]) -> Result<f64, RankError> {
    ContingencyTable::from_binned(binned, labels)?.info_gain()
}

pub fn gain_ratio(binned: &[usize], labels: &[LabelTag]) -> Result<f64, RankError> {
    ContingencyTable::from_binned(binned, labels)?.gain_ratio()
}

pub fn sym_uncertainty(binned: &[usize], labels: &[LabelTag]) -> Result<f64, RankError> {
    ContingencyTable::from_binned(binned, labels)?.sym_uncertainty()
}

pub fn chi_square(binned: &[usize], labels: &[LabelTag]) -> Result<f64, RankError> {
    Ok(ContingencyTable::from_binned(binned, labels)?.chi_square())
}

fn mean_and_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Signal-to-noise statistic `|mu_m - mu_b| / (sigma_m + sigma_b)` on raw
/// counts, with population standard deviations.
pub fn fisher_score(values: &[f64], labels: &[LabelTag]) -> Result<f64, RankError> {
    check_lengths(values.len(), labels)?;
    let of = |tag: LabelTag| {
        values
            .iter()
            .zip(labels)
            .filter(move |(_, &l)| l == tag)
            .map(|(&v, _)| v)
    };
    if of(LabelTag::Malware).next().is_none() || of(LabelTag::Benign).next().is_none() {
        return Err(RankError::SingleClass);
    }
    let (mu_m, sd_m) = mean_and_std(of(LabelTag::Malware));
    let (mu_b, sd_b) = mean_and_std(of(LabelTag::Benign));
    Ok((mu_m - mu_b).abs() / (sd_m + sd_b).max(DENOMINATOR_FLOOR))
}

/// Scores one feature column with `method`.
pub fn score_feature(values: &[f64], labels: &[LabelTag], method: RankMethod) -> Result<f64, RankError> {
    check_lengths(values.len(), labels)?;
    if method == RankMethod::Fisher {
        return fisher_score(values, labels);
    }
    let cuts = discretize_mdl(values, labels);
    let table = ContingencyTable::from_binned(&apply_cuts(values, &cuts), labels)?;
    match method {
        RankMethod::InfoGain => table.info_gain(),
        RankMethod::GainRatio => table.gain_ratio(),
        RankMethod::SymUncertainty => table.sym_uncertainty(),
        RankMethod::ChiSquare => Ok(table.chi_square()),
        RankMethod::Fisher => unreachable!(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub rank: usize,
    pub opcode: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub method: RankMethod,
    pub k: usize,
    pub features: Vec<RankedFeature>,
}

impl FeatureRanking {
    pub fn opcodes(&self) -> Vec<String> {
        self.features.iter().map(|f| f.opcode.clone()).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6}{:<20}{:>16}", "Rank", self.method.display_name(), "Score");
        for f in &self.features {
            let _ = writeln!(s, "{:<6}{:<20}{:>16.6}", f.rank, f.opcode, f.score);
        }
        s
    }
}

/// Scores of every vocabulary opcode, in vocabulary order.
pub fn score_all(matrix: &FeatureMatrix, method: RankMethod) -> Result<Vec<(String, f64)>, RankError> {
    let (m, b) = matrix.class_counts();
    if m == 0 || b == 0 {
        return Err(RankError::SingleClass);
    }
    let labels = matrix.labels();
    matrix
        .vocabulary
        .opcodes()
        .par_iter()
        .map(|op| {
            let column = matrix.column(op);
            score_feature(&column, &labels, method).map(|s| (op.clone(), s))
        })
        .collect()
}

/// Sorts by descending score, ties broken by opcode, and keeps the first `k`.
pub fn top_k(mut scored: Vec<(String, f64)>, method: RankMethod, k: usize) -> FeatureRanking {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let features = scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (opcode, score))| RankedFeature {
            rank: i + 1,
            opcode,
            score,
        })
        .collect();
    FeatureRanking { method, k, features }
}

pub fn rank_top_k(matrix: &FeatureMatrix, method: RankMethod, k: usize) -> Result<FeatureRanking, RankError> {
    Ok(top_k(score_all(matrix, method)?, method, k))
}

/// Side-by-side top-k opcodes of several rankings, one column per method.
pub fn comparison_table(rankings: &[FeatureRanking]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<6}", "Rank");
    for r in rankings {
        let _ = write!(s, "{:<26}", r.method.display_name());
    }
    s.push('\n');
    let depth = rankings.iter().map(|r| r.features.len()).max().unwrap_or(0);
    for i in 0..depth {
        let _ = write!(s, "{:<6}", i + 1);
        for r in rankings {
            let op = r.features.get(i).map_or("", |f| f.opcode.as_str());
            let _ = write!(s, "{op:<26}");
        }
        s.push('\n');
    }
    s
}
