//! Model files: JSON lines with a header object followed by a node table.
//!
//! ```text
//! {"format":"opfreq-model","version":1,"kind":"forest","learner":{...},"seed":7,...}
//! {"tree":0,"id":0,"kind":"split","feature":"jne","threshold":2.5,"left":1,"right":2,"malware":9,"benign":4}
//! {"tree":0,"id":1,"kind":"leaf","malware":0,"benign":4}
//! ```

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::ForestModel;
use super::tree::{ClassDistribution, Node, NodeKind, TreeModel};
use super::{Classifier, LearnError, LearnerSpec, Model};
use crate::write::atomic_write;

pub const MODEL_FORMAT: &str = "opfreq-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TreeHeader {
    nodes: usize,
    pruning_skipped: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    kind: String,
    learner: LearnerSpec,
    seed: u64,
    vocab_digest: Option<String>,
    features: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_subset_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bootstrap: Option<bool>,
    trees: Vec<TreeHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    tree: usize,
    id: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    left: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    right: Option<usize>,
    malware: u64,
    benign: u64,
}

impl Classifier {
    fn trees(&self) -> Vec<&TreeModel> {
        match &self.model {
            Model::Tree(t) => vec![t],
            Model::Forest(f) => f.trees().iter().collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let trees = self.trees();
        let (kind, subset, bootstrap) = match &self.model {
            Model::Tree(_) => ("tree", None, None),
            Model::Forest(f) => ("forest", Some(f.feature_subset_size), Some(f.bootstrap)),
        };
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: kind.into(),
            learner: self.learner,
            seed: self.seed,
            vocab_digest: self.vocab_digest.clone(),
            features: self.features().to_vec(),
            feature_subset_size: subset,
            bootstrap,
            trees: trees
                .iter()
                .map(|t| TreeHeader {
                    nodes: t.nodes().len(),
                    pruning_skipped: t.pruning_skipped,
                })
                .collect(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (ti, t) in trees.iter().enumerate() {
            for (id, node) in t.nodes().iter().enumerate() {
                let mut rec = NodeRecord {
                    tree: ti,
                    id,
                    kind: "leaf".into(),
                    feature: None,
                    threshold: None,
                    left: None,
                    right: None,
                    malware: node.distribution.malware,
                    benign: node.distribution.benign,
                };
                if let NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } = node.kind
                {
                    rec.kind = "split".into();
                    rec.feature = Some(t.features()[feature].clone());
                    rec.threshold = Some(threshold);
                    rec.left = Some(left);
                    rec.right = Some(right);
                }
                out.push_str(&serde_json::to_string(&rec).expect("node serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        atomic_write(path, self.to_text().as_bytes()).map_err(|source| LearnError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let file = std::fs::File::open(path).map_err(|source| LearnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(BufReader::new(file), path)
    }

    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self, LearnError> {
        let bad = |line: usize, detail: String| LearnError::MalformedModelFile {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let lines: Vec<String> = reader
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| LearnError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let first = lines.first().ok_or_else(|| bad(1, "missing header".into()))?;

        // check format and version before the full schema, so a newer file
        // reports its version rather than a field error
        let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| bad(1, format!("bad header: {e}")))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
            return Err(bad(1, format!("not an {MODEL_FORMAT} file")));
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            Some(v) => {
                return Err(bad(1, format!("unsupported model version {v} (expected {MODEL_VERSION})")));
            }
            None => return Err(bad(1, "missing model version".into())),
        }
        let header: ModelHeader = serde_json::from_value(raw).map_err(|e| bad(1, format!("bad header: {e}")))?;
        let feature_index = |name: &str| header.features.iter().position(|f| f == name);

        let expected: usize = header.trees.iter().map(|t| t.nodes).sum();
        if lines.len() - 1 != expected {
            return Err(bad(
                lines.len() + 1,
                format!("expected {expected} node records, found {} (truncated?)", lines.len() - 1),
            ));
        }
        let mut trees = Vec::with_capacity(header.trees.len());
        let mut lineno = 2;
        for (ti, th) in header.trees.iter().enumerate() {
            let mut nodes = Vec::with_capacity(th.nodes);
            for id in 0..th.nodes {
                let rec: NodeRecord =
                    serde_json::from_str(&lines[lineno - 1]).map_err(|e| bad(lineno, e.to_string()))?;
                if rec.tree != ti || rec.id != id {
                    return Err(bad(lineno, format!("expected node {id} of tree {ti}")));
                }
                let distribution = ClassDistribution {
                    malware: rec.malware,
                    benign: rec.benign,
                };
                let kind = match rec.kind.as_str() {
                    "leaf" => NodeKind::Leaf,
                    "split" => {
                        let (Some(f), Some(threshold), Some(left), Some(right)) =
                            (rec.feature.as_deref(), rec.threshold, rec.left, rec.right)
                        else {
                            return Err(bad(lineno, "split node lacks feature, threshold or children".into()));
                        };
                        let feature = feature_index(f).ok_or_else(|| bad(lineno, format!("unknown feature {f:?}")))?;
                        NodeKind::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        }
                    }
                    other => return Err(bad(lineno, format!("unknown node kind {other:?}"))),
                };
                nodes.push(Node { distribution, kind });
                lineno += 1;
            }
            let mut tree = TreeModel::from_nodes(nodes, header.features.clone())
                .map_err(|e| bad(lineno - 1, format!("tree {ti}: {e}")))?;
            tree.pruning_skipped = th.pruning_skipped;
            trees.push(tree);
        }

        let model = match header.kind.as_str() {
            "tree" => {
                if trees.len() != 1 {
                    return Err(bad(1, "a tree model holds exactly one tree".into()));
                }
                Model::Tree(trees.pop().expect("one tree"))
            }
            "forest" => {
                if trees.is_empty() {
                    return Err(bad(1, "a forest needs at least one tree".into()));
                }
                Model::Forest(ForestModel {
                    trees,
                    seed: header.seed,
                    feature_subset_size: header.feature_subset_size.ok_or_else(|| bad(1, "missing feature_subset_size".into()))?,
                    bootstrap: header.bootstrap.ok_or_else(|| bad(1, "missing bootstrap".into()))?,
                    features: header.features.clone(),
                })
            }
            other => return Err(bad(1, format!("unknown model kind {other:?}"))),
        };
        Ok(Classifier {
            learner: header.learner,
            seed: header.seed,
            vocab_digest: header.vocab_digest,
            model,
        })
    }
}
