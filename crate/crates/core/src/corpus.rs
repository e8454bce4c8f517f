//! Vocabulary, labeled sparse samples and the on-disk feature matrix.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::OpcodeSequence;
use crate::write::atomic_write;

pub const MATRIX_FORMAT: &str = "opfreq-matrix";
pub const MATRIX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed matrix file {path}, line {line}: {detail}")]
    MalformedMatrixFile {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("malformed manifest {path}: {detail}")]
    MalformedManifest { path: PathBuf, detail: String },
    #[error("malformed vocabulary file {path}, line {line}: {detail}")]
    MalformedVocabulary {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTag {
    Malware,
    Benign,
}

impl LabelTag {
    pub fn is_malware(self) -> bool {
        self == LabelTag::Malware
    }

    pub fn other(self) -> LabelTag {
        match self {
            LabelTag::Malware => LabelTag::Benign,
            LabelTag::Benign => LabelTag::Malware,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelTag::Malware => "malware",
            LabelTag::Benign => "benign",
        }
    }
}

impl fmt::Display for LabelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "malware" => Ok(LabelTag::Malware),
            "benign" => Ok(LabelTag::Benign),
            other => Err(CorpusError::InvalidLabel(format!("unknown label {other:?}"))),
        }
    }
}

/// Class label with the optional malware family.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Label {
    tag: LabelTag,
    family: Option<String>,
}

impl Label {
    pub fn new(tag: LabelTag, family: Option<String>) -> Result<Self, CorpusError> {
        let family = family.filter(|f| !f.is_empty());
        if family.is_some() && tag == LabelTag::Benign {
            return Err(CorpusError::InvalidLabel(
                "a benign sample cannot carry a malware family".into(),
            ));
        }
        Ok(Label { tag, family })
    }

    pub fn malware() -> Self {
        Label {
            tag: LabelTag::Malware,
            family: None,
        }
    }

    pub fn benign() -> Self {
        Label {
            tag: LabelTag::Benign,
            family: None,
        }
    }

    pub fn tag(&self) -> LabelTag {
        self.tag
    }

    pub fn family(&self) -> Option<&str> {
        self.family.as_deref()
    }
}

impl From<LabelTag> for Label {
    fn from(tag: LabelTag) -> Self {
        Label { tag, family: None }
    }
}

/// Sorted, duplicate-free opcode list with its inverse index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    opcodes: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_opcodes<I, S>(opcodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut opcodes: Vec<String> = opcodes.into_iter().map(Into::into).collect();
        opcodes.sort_unstable();
        opcodes.dedup();
        let index = opcodes
            .iter()
            .enumerate()
            .map(|(i, o)| (o.clone(), i))
            .collect();
        Vocabulary { opcodes, index }
    }

    pub fn opcodes(&self) -> &[String] {
        &self.opcodes
    }

    pub fn len(&self) -> usize {
        self.opcodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opcodes.is_empty()
    }

    pub fn position(&self, opcode: &str) -> Option<usize> {
        self.index.get(opcode).copied()
    }

    pub fn contains(&self, opcode: &str) -> bool {
        self.index.contains_key(opcode)
    }

    /// The vocabulary file body: one mnemonic per line, newline-terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = String::with_capacity(self.opcodes.len() * 6);
        for o in &self.opcodes {
            s.push_str(o);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the vocabulary file body, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        atomic_write(path, self.to_file_string().as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut opcodes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |detail: String| CorpusError::MalformedVocabulary {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            if !crate::ingest::is_mnemonic(line) {
                return Err(bad(format!("{line:?} is not a mnemonic")));
            }
            if let Some(prev) = opcodes.last() {
                if prev >= &line.to_string() {
                    return Err(bad("entries must be strictly sorted".into()));
                }
            }
            opcodes.push(line.to_string());
        }
        Ok(Vocabulary::from_opcodes(opcodes))
    }
}

/// Sorted, deduplicated union of every token across `sequences`.
pub fn build_vocabulary(sequences: &[OpcodeSequence]) -> Vocabulary {
    Vocabulary::from_opcodes(
        sequences
            .iter()
            .flat_map(|s| s.opcodes.iter().map(String::as_str))
            .collect::<std::collections::BTreeSet<_>>(),
    )
}

/// A labeled sparse opcode-count vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub file_id: String,
    pub label: Label,
    counts: BTreeMap<String, u64>,
    weight: u64,
}

impl Sample {
    /// Builds a sample, dropping zero entries and computing the weight.
    pub fn new(file_id: impl Into<String>, label: Label, counts: BTreeMap<String, u64>) -> Self {
        let counts: BTreeMap<String, u64> = counts.into_iter().filter(|(_, c)| *c > 0).collect();
        let weight = counts.values().sum();
        Sample {
            file_id: file_id.into(),
            label,
            counts,
            weight,
        }
    }

    pub fn tag(&self) -> LabelTag {
        self.label.tag()
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    /// Count for `opcode`, zero when absent.
    pub fn count(&self, opcode: &str) -> u64 {
        self.counts.get(opcode).copied().unwrap_or(0)
    }

    /// Total opcode weight: the sum of all counts.
    pub fn weight(&self) -> u64 {
        self.weight
    }
}

/// Result of [`vectorize`]: the sample plus the number of dropped
/// out-of-vocabulary tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vectorized {
    pub sample: Sample,
    pub dropped: usize,
}

pub fn vectorize(seq: &OpcodeSequence, vocab: &Vocabulary, label: Label) -> Vectorized {
    let mut tally: HashMap<&str, u64> = HashMap::new();
    let mut dropped = 0;
    for op in &seq.opcodes {
        if vocab.contains(op) {
            *tally.entry(op.as_str()).or_insert(0) += 1;
        } else {
            dropped += 1;
        }
    }
    let counts = tally.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Vectorized {
        sample: Sample::new(seq.file_id.clone(), label, counts),
        dropped,
    }
}

/// [`vectorize`] for a listing that was already tallied per opcode.
pub fn vectorize_counts(file_id: &str, counts: &BTreeMap<String, u64>, vocab: &Vocabulary, label: Label) -> Vectorized {
    let mut kept = BTreeMap::new();
    let mut dropped = 0;
    for (op, &c) in counts {
        if vocab.contains(op) {
            kept.insert(op.clone(), c);
        } else {
            dropped += c as usize;
        }
    }
    Vectorized {
        sample: Sample::new(file_id, label, kept),
        dropped,
    }
}

/// Vocabulary-ordered corpus of samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    pub vocabulary: Vocabulary,
    pub samples: Vec<Sample>,
    /// Benign listings removed by the size cap before vectorization.
    pub removed_by_size: usize,
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    version: u32,
    vocab_digest: String,
    samples: usize,
    removed_by_size: usize,
    vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    id: String,
    label: LabelTag,
    family: Option<String>,
    weight: u64,
    counts: BTreeMap<String, u64>,
}

impl FeatureMatrix {
    pub fn new(vocabulary: Vocabulary, samples: Vec<Sample>) -> Self {
        FeatureMatrix {
            vocabulary,
            samples,
            removed_by_size: 0,
        }
    }

    pub fn labels(&self) -> Vec<LabelTag> {
        self.samples.iter().map(Sample::tag).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let m = self.samples.iter().filter(|s| s.tag().is_malware()).count();
        (m, self.samples.len() - m)
    }

    /// Dense column of counts for `opcode`, one entry per sample.
    pub fn column(&self, opcode: &str) -> Vec<f64> {
        self.samples.iter().map(|s| s.count(opcode) as f64).collect()
    }

    /// Matrix restricted to the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            vocabulary: self.vocabulary.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            removed_by_size: self.removed_by_size,
        }
    }

    /// Serializes the matrix as JSON lines: a header object followed by one
    /// record per sample.
    pub fn to_jsonl(&self) -> String {
        let header = MatrixHeader {
            format: MATRIX_FORMAT.into(),
            version: MATRIX_VERSION,
            vocab_digest: self.vocabulary.digest(),
            samples: self.samples.len(),
            removed_by_size: self.removed_by_size,
            vocabulary: self.vocabulary.opcodes().to_vec(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let rec = MatrixRecord {
                id: s.file_id.clone(),
                label: s.tag(),
                family: s.label.family().map(str::to_string),
                weight: s.weight,
                counts: s.counts.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        atomic_write(path, self.to_jsonl().as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read(BufReader::new(file), path)
    }

    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self, CorpusError> {
        let bad = |line: usize, detail: String| CorpusError::MalformedMatrixFile {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = reader.lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(io_err(path))?,
            None => return Err(bad(1, "missing header".into())),
        };
        let header: MatrixHeader =
            serde_json::from_str(&header_line).map_err(|e| bad(1, format!("bad header: {e}")))?;
        if header.format != MATRIX_FORMAT {
            return Err(bad(1, format!("unexpected format {:?}", header.format)));
        }
        if header.version != MATRIX_VERSION {
            return Err(bad(
                1,
                format!("unsupported version {} (expected {MATRIX_VERSION})", header.version),
            ));
        }
        let vocabulary = Vocabulary::from_opcodes(header.vocabulary.iter().cloned());
        if vocabulary.opcodes() != header.vocabulary.as_slice() {
            return Err(bad(1, "vocabulary is not strictly sorted".into()));
        }
        if vocabulary.digest() != header.vocab_digest {
            return Err(bad(1, "vocabulary digest mismatch".into()));
        }
        let mut samples = Vec::with_capacity(header.samples);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(io_err(path))?;
            if line.is_empty() {
                return Err(bad(lineno, "empty record".into()));
            }
            let rec: MatrixRecord =
                serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
            if let Some((k, _)) = rec.counts.iter().find(|(_, &c)| c == 0) {
                return Err(bad(lineno, format!("zero count stored for {k:?}")));
            }
            if let Some(k) = rec.counts.keys().find(|k| !vocabulary.contains(k)) {
                return Err(bad(lineno, format!("{k:?} is not in the vocabulary")));
            }
            let sum: u64 = rec.counts.values().sum();
            if sum != rec.weight {
                return Err(bad(
                    lineno,
                    format!("weight {} differs from count total {sum}", rec.weight),
                ));
            }
            let label = Label::new(rec.label, rec.family).map_err(|e| bad(lineno, e.to_string()))?;
            samples.push(Sample {
                file_id: rec.id,
                label,
                counts: rec.counts,
                weight: rec.weight,
            });
        }
        if samples.len() != header.samples {
            return Err(bad(
                samples.len() + 2,
                format!("expected {} records, found {} (truncated?)", header.samples, samples.len()),
            ));
        }
        Ok(FeatureMatrix {
            vocabulary,
            samples,
            removed_by_size: header.removed_by_size,
        })
    }
}

/// One row of the corpus manifest (`path,label,family`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// `None` only when the manifest is read for prediction and the label column is empty.
    pub label: Option<Label>,
}

#[derive(Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    #[serde(default)]
    family: Option<String>,
}

/// Reads a manifest CSV. Relative paths resolve against the manifest's directory.
/// With `require_labels` unset, an empty label column is accepted.
pub fn read_manifest(path: &Path, require_labels: bool) -> Result<Vec<ManifestEntry>, CorpusError> {
    let bad = |detail: String| CorpusError::MalformedManifest {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().take(2).collect::<Vec<_>>() != ["path", "label"] {
        return Err(bad("header must be `path,label,family`".into()));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
        let label = if row.label.is_empty() && !require_labels {
            None
        } else {
            let tag: LabelTag = row.label.parse().map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
            Some(Label::new(tag, row.family).map_err(|e| bad(format!("row {}: {e}", i + 2)))?)
        };
        let p = PathBuf::from(&row.path);
        let p = if p.is_absolute() { p } else { base.join(p) };
        entries.push(ManifestEntry { path: p, label });
    }
    Ok(entries)
}
