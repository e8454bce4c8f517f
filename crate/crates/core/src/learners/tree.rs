//! Binary decision trees over numeric features.
//!
//! All tree learners share one growth routine and differ in how a split is
//! chosen and how the grown tree is pruned:
//!
//! | learner     | split choice                                  | pruning              |
//! |-------------|-----------------------------------------------|----------------------|
//! | stump       | max information gain, depth 1                 | none                 |
//! | c45         | max gain ratio among above-average-gain splits | pessimistic error    |
//! | random tree | max information gain over a random subset     | none                 |
//! | reptree     | max information gain                          | reduced error (holdout) |
//!
//! Nodes are stored in preorder, so every child id is larger than its parent id.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dataset::Dataset;
use super::Prediction;
use crate::corpus::{LabelTag, Sample};
use crate::rank::entropy_of;
use crate::seed;

/// Gains at or below this are treated as zero.
const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub malware: u64,
    pub benign: u64,
}

impl ClassDistribution {
    pub fn of(labels: impl IntoIterator<Item = LabelTag>) -> Self {
        let mut d = ClassDistribution::default();
        for l in labels {
            d.add(l);
        }
        d
    }

    fn add(&mut self, tag: LabelTag) {
        match tag {
            LabelTag::Malware => self.malware += 1,
            LabelTag::Benign => self.benign += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.malware + self.benign
    }

    /// Majority class; a tie goes to malware.
    pub fn majority(&self) -> LabelTag {
        if self.malware >= self.benign {
            LabelTag::Malware
        } else {
            LabelTag::Benign
        }
    }

    pub fn is_pure(&self) -> bool {
        self.malware == 0 || self.benign == 0
    }

    /// Training samples this node misclassifies as a leaf.
    pub fn errors(&self) -> u64 {
        self.malware.min(self.benign)
    }

    pub fn malware_fraction(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.malware as f64 / self.total() as f64
    }

    fn as_counts(&self) -> [u64; 2] {
        [self.malware, self.benign]
    }

    fn entropy(&self) -> f64 {
        entropy_of(&self.as_counts(), self.total())
    }
}

impl std::ops::Add for ClassDistribution {
    type Output = ClassDistribution;

    fn add(self, rhs: Self) -> Self {
        ClassDistribution {
            malware: self.malware + rhs.malware,
            benign: self.benign + rhs.benign,
        }
    }
}

/// Numeric split: samples with `value <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf,
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Training samples that reached this node.
    pub distribution: ClassDistribution,
    pub kind: NodeKind,
}

impl Node {
    pub fn leaf(distribution: ClassDistribution) -> Self {
        Node {
            distribution,
            kind: NodeKind::Leaf,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    nodes: Vec<Node>,
    features: Vec<String>,
    /// Set when reduced-error pruning was requested but the holdout would be empty.
    pub pruning_skipped: bool,
}

impl TreeModel {
    /// Validates and assembles a tree from a preorder node table.
    pub fn from_nodes(nodes: Vec<Node>, features: Vec<String>) -> Result<Self, String> {
        if nodes.is_empty() {
            return Err("a tree needs at least one node".into());
        }
        let mut referenced = vec![false; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            if let NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } = node.kind
            {
                if feature >= features.len() {
                    return Err(format!("node {id}: feature index {feature} out of range"));
                }
                if !threshold.is_finite() {
                    return Err(format!("node {id}: non-finite threshold"));
                }
                for child in [left, right] {
                    if child <= id || child >= nodes.len() {
                        return Err(format!("node {id}: child {child} out of order"));
                    }
                    if std::mem::replace(&mut referenced[child], true) {
                        return Err(format!("node {child} has two parents"));
                    }
                }
                if nodes[left].distribution + nodes[right].distribution != node.distribution {
                    return Err(format!("node {id}: distribution differs from its children's sum"));
                }
            }
        }
        if let Some(orphan) = referenced.iter().skip(1).position(|r| !r) {
            return Err(format!("node {} is unreachable", orphan + 1));
        }
        Ok(TreeModel {
            nodes,
            features,
            pruning_skipped: false,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn split_rule(&self, id: usize) -> Option<SplitRule> {
        match self.nodes.get(id)?.kind {
            NodeKind::Split { feature, threshold, .. } => Some(SplitRule {
                feature: self.features[feature].clone(),
                threshold,
            }),
            NodeKind::Leaf => None,
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match nodes[id].kind {
                NodeKind::Leaf => 0,
                NodeKind::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    fn leaf_by<F: Fn(usize) -> f64>(&self, value: F) -> &Node {
        let mut id = 0;
        loop {
            match self.nodes[id].kind {
                NodeKind::Leaf => return &self.nodes[id],
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if value(feature) <= threshold { left } else { right },
            }
        }
    }

    fn predict_by<F: Fn(usize) -> f64>(&self, value: F) -> Prediction {
        let d = self.leaf_by(value).distribution;
        Prediction {
            label: d.majority(),
            score: d.malware_fraction(),
        }
    }

    /// Prediction for a dense row ordered like [`TreeModel::features`].
    pub fn predict_row(&self, row: &[f64]) -> Prediction {
        self.predict_by(|f| row[f])
    }

    /// Prediction for a sparse sample; absent opcodes read as zero.
    pub fn predict_sample(&self, sample: &Sample) -> Prediction {
        self.predict_by(|f| sample.count(&self.features[f]) as f64)
    }

    #[cfg(test)]
    pub(crate) fn predict_in(&self, data: &Dataset, i: usize) -> Prediction {
        self.predict_by(|f| data.value(f, i))
    }

    /// Subtree replacement driven by C4.5's pessimistic error estimate.
    pub(crate) fn pessimistic_prune(&mut self, cf: f64) {
        let z = Normal::standard().inverse_cdf(1.0 - cf);
        self.prune_node_pessimistic(0, cf, z);
        self.compact();
    }

    fn prune_node_pessimistic(&mut self, id: usize, cf: f64, z: f64) -> f64 {
        let d = self.nodes[id].distribution;
        let as_leaf = d.errors() as f64 + add_errs(d.total() as f64, d.errors() as f64, cf, z);
        match self.nodes[id].kind {
            NodeKind::Leaf => as_leaf,
            NodeKind::Split { left, right, .. } => {
                let subtree = self.prune_node_pessimistic(left, cf, z) + self.prune_node_pessimistic(right, cf, z);
                if as_leaf <= subtree + 0.1 {
                    self.nodes[id].kind = NodeKind::Leaf;
                    as_leaf
                } else {
                    subtree
                }
            }
        }
    }

    /// Bottom-up reduced-error pruning: a subtree becomes a leaf whenever that
    /// does not increase the error on the holdout rows.
    pub(crate) fn reduced_error_prune(&mut self, data: &Dataset, holdout: &[usize]) {
        self.prune_node_rep(0, data, holdout);
        self.compact();
    }

    fn prune_node_rep(&mut self, id: usize, data: &Dataset, rows: &[usize]) -> usize {
        let majority = self.nodes[id].distribution.majority();
        let as_leaf = rows.iter().filter(|&&i| data.labels()[i] != majority).count();
        match self.nodes[id].kind {
            NodeKind::Leaf => as_leaf,
            NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| data.value(feature, i) <= threshold);
                let subtree = self.prune_node_rep(left, data, &l) + self.prune_node_rep(right, data, &r);
                if as_leaf <= subtree {
                    self.nodes[id].kind = NodeKind::Leaf;
                    as_leaf
                } else {
                    subtree
                }
            }
        }
    }

    /// Drops nodes no longer reachable from the root, renumbering in preorder.
    fn compact(&mut self) {
        fn copy(old: &[Node], id: usize, out: &mut Vec<Node>) -> usize {
            let new_id = out.len();
            out.push(Node::leaf(old[id].distribution));
            if let NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } = old[id].kind
            {
                let l = copy(old, left, out);
                let r = copy(old, right, out);
                out[new_id].kind = NodeKind::Split {
                    feature,
                    threshold,
                    left: l,
                    right: r,
                };
            }
            new_id
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        copy(&self.nodes, 0, &mut out);
        self.nodes = out;
    }
}

/// Extra errors C4.5 adds to `e` observed errors out of `n` at confidence `cf`
/// (upper binomial confidence limit, normal approximation for `e >= 1`).
pub(crate) fn add_errs(n: f64, e: f64, cf: f64, z: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    if e < 1.0 {
        let base = n * (1.0 - cf.powf(1.0 / n));
        if e == 0.0 {
            return base;
        }
        return base + e * (add_errs(n, 1.0, cf, z) - base);
    }
    if e + 0.5 >= n {
        return (n - e).max(0.0);
    }
    let f = (e + 0.5) / n;
    let r = (f + z * z / (2.0 * n) + z * (f / n - f * f / n + z * z / (4.0 * n * n)).sqrt()) / (1.0 + z * z / n);
    r * n - e
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Criterion {
    InfoGain,
    /// Max gain ratio among splits whose gain is at least the average.
    GainRatio,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GrowParams {
    pub criterion: Criterion,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Split impure nodes even when the best available gain is zero.
    pub allow_zero_gain: bool,
    /// `(features per node, seed)` for random feature subsets.
    pub subset: Option<(usize, u64)>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    split_info: f64,
}

struct Builder<'a> {
    data: &'a Dataset,
    params: GrowParams,
    nodes: Vec<Node>,
}

pub(crate) fn grow(data: &Dataset, rows: Vec<usize>, params: GrowParams) -> TreeModel {
    let mut b = Builder {
        data,
        params,
        nodes: Vec::new(),
    };
    b.build(rows, 0);
    TreeModel {
        nodes: b.nodes,
        features: data.features().to_vec(),
        pruning_skipped: false,
    }
}

impl Builder<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let dist = ClassDistribution::of(rows.iter().map(|&i| self.data.labels()[i]));
        let id = self.nodes.len();
        self.nodes.push(Node::leaf(dist));
        if dist.is_pure()
            || rows.len() < 2 * self.params.min_leaf.max(1)
            || self.params.max_depth.is_some_and(|d| depth >= d)
        {
            return id;
        }
        let Some(c) = self.choose_split(&rows, id, dist) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&i| self.data.value(c.feature, i) <= c.threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id].kind = NodeKind::Split {
            feature: c.feature,
            threshold: c.threshold,
            left,
            right,
        };
        id
    }

    /// Best threshold on one feature by information gain; ties keep the
    /// smaller threshold.
    fn best_for_feature(&self, feature: usize, rows: &[usize], parent: ClassDistribution) -> Option<Candidate> {
        let data = self.data;
        let mut pairs: Vec<(f64, LabelTag)> = rows
            .iter()
            .map(|&i| (data.value(feature, i), data.labels()[i]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let nf = n as f64;
        let h_parent = parent.entropy();
        let min_leaf = self.params.min_leaf.max(1);
        let mut left = ClassDistribution::default();
        let mut best: Option<Candidate> = None;
        for j in 0..n - 1 {
            left.add(pairs[j].1);
            if pairs[j].0 == pairs[j + 1].0 {
                continue;
            }
            let nl = j + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right = ClassDistribution {
                malware: parent.malware - left.malware,
                benign: parent.benign - left.benign,
            };
            let gain = h_parent - (nl as f64 / nf) * left.entropy() - (nr as f64 / nf) * right.entropy();
            if best.map_or(true, |b| gain > b.gain) {
                best = Some(Candidate {
                    feature,
                    threshold: (pairs[j].0 + pairs[j + 1].0) / 2.0,
                    gain,
                    split_info: entropy_of(&[nl as u64, nr as u64], n as u64),
                });
            }
        }
        best
    }

    fn better_by_gain(&self, a: &Candidate, b: &Candidate) -> bool {
        a.gain > b.gain || (a.gain == b.gain && self.data.features()[a.feature] < self.data.features()[b.feature])
    }

    fn accept(&self, c: Option<Candidate>) -> Option<Candidate> {
        c.filter(|c| c.gain > GAIN_EPS || self.params.allow_zero_gain)
    }

    fn choose_split(&self, rows: &[usize], node_id: usize, parent: ClassDistribution) -> Option<Candidate> {
        let p = self.data.n_features();
        match (self.params.criterion, self.params.subset) {
            (Criterion::GainRatio, _) => {
                let candidates: Vec<Candidate> = (0..p)
                    .filter_map(|f| self.best_for_feature(f, rows, parent))
                    .filter(|c| c.gain > GAIN_EPS)
                    .collect();
                if candidates.is_empty() {
                    return None;
                }
                let average = candidates.iter().map(|c| c.gain).sum::<f64>() / candidates.len() as f64;
                let names = self.data.features();
                candidates
                    .into_iter()
                    .filter(|c| c.gain >= average - GAIN_EPS)
                    .max_by(|a, b| {
                        (a.gain / a.split_info)
                            .total_cmp(&(b.gain / b.split_info))
                            .then_with(|| names[b.feature].cmp(&names[a.feature]))
                    })
            }
            (Criterion::InfoGain, None) => {
                let mut best: Option<Candidate> = None;
                for f in 0..p {
                    if let Some(c) = self.best_for_feature(f, rows, parent) {
                        if best.as_ref().map_or(true, |b| self.better_by_gain(&c, b)) {
                            best = Some(c);
                        }
                    }
                }
                self.accept(best)
            }
            (Criterion::InfoGain, Some((k, seed))) => {
                let mut order: Vec<usize> = (0..p).collect();
                let mut rng = seed::rng(seed::derive_indexed(seed, "node", node_id as u64));
                order.shuffle(&mut rng);
                // examine k features, then keep drawing until some split has positive gain
                let mut best: Option<Candidate> = None;
                for (drawn, &f) in order.iter().enumerate() {
                    if drawn >= k && best.is_some_and(|b| b.gain > GAIN_EPS) {
                        break;
                    }
                    if let Some(c) = self.best_for_feature(f, rows, parent) {
                        if best.as_ref().map_or(true, |b| self.better_by_gain(&c, b)) {
                            best = Some(c);
                        }
                    }
                }
                self.accept(best)
            }
        }
    }
}

/// Stratified, seeded holdout split for reduced-error pruning. `None` when
/// the holdout or the growing set would be empty.
pub(crate) fn stratified_holdout(labels: &[LabelTag], fraction: f64, seed: u64) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    let mut h = (n as f64 * fraction).floor() as usize;
    if n >= 3 {
        h = h.max(1);
    }
    if h == 0 || h >= n {
        return None;
    }
    let classes = [LabelTag::Malware, LabelTag::Benign];
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect();
    // largest-remainder allocation of the holdout across classes
    let mut quota: Vec<usize> = members.iter().map(|m| h * m.len() / n).collect();
    let mut by_remainder: Vec<usize> = (0..classes.len()).collect();
    by_remainder.sort_by_key(|&c| std::cmp::Reverse((h * members[c].len()) % n));
    let mut missing = h - quota.iter().sum::<usize>();
    for c in by_remainder {
        if missing == 0 {
            break;
        }
        if quota[c] < members[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = seed::rng(seed::derive(seed, "reptree-holdout"));
    let mut grow_rows = Vec::with_capacity(n - h);
    let mut holdout = Vec::with_capacity(h);
    for (c, mut m) in members.into_iter().enumerate() {
        m.shuffle(&mut rng);
        holdout.extend_from_slice(&m[..quota[c]]);
        grow_rows.extend_from_slice(&m[quota[c]..]);
    }
    grow_rows.sort_unstable();
    holdout.sort_unstable();
    Some((grow_rows, holdout))
}
