//! Instance selection on opcode weight.
//!
//! Three filters run in sequence:
//!
//! 1. a size cap on benign listings (applied at extraction time, where file
//!    sizes are known),
//! 2. a strict upper bound on total opcode weight,
//! 3. interval pruning: the surviving samples are binned by weight, and every
//!    malware sample whose bin holds no benign sample is deleted. The pass is
//!    repeated for each width of a decreasing schedule, each pass re-binning
//!    the survivors of the previous one.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelTag, Sample};

/// 147.0 MiB, the largest malware listing in the reference corpus.
pub const DEFAULT_SIZE_CAP_BYTES: u64 = 147 * 1024 * 1024;
pub const DEFAULT_WEIGHT_THRESHOLD: u64 = 40_000;
pub const DEFAULT_INTERVAL_WIDTHS: [u64; 6] = [500, 100, 50, 10, 5, 2];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CurationError {
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
    #[error("no samples survive curation")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub size_cap_bytes: u64,
    pub weight_threshold: u64,
    pub interval_widths: Vec<u64>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            size_cap_bytes: DEFAULT_SIZE_CAP_BYTES,
            weight_threshold: DEFAULT_WEIGHT_THRESHOLD,
            interval_widths: DEFAULT_INTERVAL_WIDTHS.to_vec(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.size_cap_bytes == 0 || self.weight_threshold == 0 {
            return Err(CurationError::InvalidConfig(
                "size cap and weight threshold must be positive".into(),
            ));
        }
        if self.interval_widths.iter().any(|&w| w == 0) {
            return Err(CurationError::InvalidConfig("interval widths must be positive".into()));
        }
        if self.interval_widths.windows(2).any(|w| w[0] <= w[1]) {
            return Err(CurationError::InvalidConfig(
                "interval widths must be strictly decreasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub malware: usize,
    pub benign: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.malware + self.benign
    }

    fn add(&mut self, tag: LabelTag) {
        match tag {
            LabelTag::Malware => self.malware += 1,
            LabelTag::Benign => self.benign += 1,
        }
    }
}

/// A listing considered by the size cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizedFile<T> {
    pub item: T,
    pub byte_size: u64,
    pub label: LabelTag,
}

/// Drops benign listings strictly larger than the cap. Malware is never
/// touched.
pub fn filter_size_cap<T>(files: Vec<SizedFile<T>>, cfg: &CurationConfig) -> (Vec<SizedFile<T>>, usize) {
    let before = files.len();
    let retained: Vec<_> = files
        .into_iter()
        .filter(|f| f.label.is_malware() || f.byte_size <= cfg.size_cap_bytes)
        .collect();
    let removed = before - retained.len();
    (retained, removed)
}

/// Keeps samples with weight strictly below the threshold.
pub fn filter_weight_threshold(samples: Vec<Sample>, cfg: &CurationConfig) -> (Vec<Sample>, ClassCounts) {
    let mut removed = ClassCounts::default();
    let retained = samples
        .into_iter()
        .filter(|s| {
            let keep = s.weight() < cfg.weight_threshold;
            if !keep {
                removed.add(s.tag());
            }
            keep
        })
        .collect();
    (retained, removed)
}

/// A closed, 1-based weight interval `[lo, hi]` with its class tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalBin {
    pub lo: u64,
    pub hi: u64,
    pub malware_count: usize,
    pub benign_count: usize,
}

/// Zero-based bin index; weight 0 shares the first bin.
pub fn bin_index(weight: u64, width: u64) -> u64 {
    weight.saturating_sub(1) / width
}

/// Populated bins of `width` over the sample weights, ordered by `lo`. The
/// last bin is truncated at `max_weight - 1`. Empty bins are not listed.
pub fn interval_histogram(samples: &[Sample], width: u64, max_weight: u64) -> Vec<IntervalBin> {
    assert!(width > 0, "interval width must be positive");
    let mut bins: std::collections::BTreeMap<u64, ClassCounts> = Default::default();
    for s in samples {
        bins.entry(bin_index(s.weight(), width)).or_default().add(s.tag());
    }
    bins.into_iter()
        .map(|(b, c)| {
            let lo = b * width + 1;
            let hi = ((b + 1) * width).min(max_weight.saturating_sub(1)).max(lo);
            IntervalBin {
                lo,
                hi,
                malware_count: c.malware,
                benign_count: c.benign,
            }
        })
        .collect()
}

/// Removes every malware sample whose bin at `width` holds no benign sample.
/// Returns the survivors in input order and the number of malware removed.
pub fn prune_pass(samples: Vec<Sample>, width: u64) -> (Vec<Sample>, usize) {
    assert!(width > 0, "interval width must be positive");
    let benign_bins: std::collections::HashSet<u64> = samples
        .iter()
        .filter(|s| !s.tag().is_malware())
        .map(|s| bin_index(s.weight(), width))
        .collect();
    let before = samples.len();
    let retained: Vec<Sample> = samples
        .into_iter()
        .filter(|s| !s.tag().is_malware() || benign_bins.contains(&bin_index(s.weight(), width)))
        .collect();
    let removed = before - retained.len();
    (retained, removed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalPass {
    pub width: u64,
    pub removed_malware: usize,
    /// Histogram of the pass input.
    pub bins: Vec<IntervalBin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub config: CurationConfig,
    pub input_total: usize,
    pub retained_malware: usize,
    pub retained_benign: usize,
    pub removed_by_size: usize,
    pub removed_by_threshold: ClassCounts,
    pub passes: Vec<IntervalPass>,
}

impl CurationReport {
    pub fn removed_by_interval(&self) -> Vec<usize> {
        self.passes.iter().map(|p| p.removed_malware).collect()
    }

    /// `input_total = retained + every removal`.
    pub fn is_conserved(&self) -> bool {
        let removed: usize = self.removed_by_size
            + self.removed_by_threshold.total()
            + self.removed_by_interval().iter().sum::<usize>();
        self.input_total == self.retained_malware + self.retained_benign + removed
    }

    /// Accounts for benign listings dropped by the size cap before vectorization.
    pub fn with_size_removals(mut self, removed: usize) -> Self {
        self.removed_by_size += removed;
        self.input_total += removed;
        self
    }

    /// Plain-text summary followed by one interval table per pass.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input samples          {}", self.input_total);
        let _ = writeln!(s, "removed by size cap    {}", self.removed_by_size);
        let _ = writeln!(
            s,
            "removed by threshold   {} malware, {} benign (weight >= {})",
            self.removed_by_threshold.malware, self.removed_by_threshold.benign, self.config.weight_threshold
        );
        for p in &self.passes {
            let _ = writeln!(s, "removed at width {:<6} {} malware", p.width, p.removed_malware);
        }
        let _ = writeln!(
            s,
            "retained               {} malware, {} benign",
            self.retained_malware, self.retained_benign
        );
        for p in &self.passes {
            let _ = writeln!(s);
            let _ = writeln!(s, "Opcode weight interval over period of {}", p.width);
            let _ = writeln!(s, "{:<24}{:>16}{:>16}", "Opcode weight interval", "no. of malwares", "no. of benigns");
            for b in &p.bins {
                let _ = writeln!(
                    s,
                    "{:<24}{:>16}{:>16}",
                    format!("{}-{}", b.lo, b.hi),
                    b.malware_count,
                    b.benign_count
                );
            }
        }
        s
    }
}

/// Weight threshold followed by one prune pass per configured width.
pub fn curate(samples: Vec<Sample>, cfg: &CurationConfig) -> Result<(Vec<Sample>, CurationReport), CurationError> {
    cfg.validate()?;
    let input_total = samples.len();
    let (mut current, removed_by_threshold) = filter_weight_threshold(samples, cfg);
    let mut passes = Vec::with_capacity(cfg.interval_widths.len());
    for &width in &cfg.interval_widths {
        let bins = interval_histogram(&current, width, cfg.weight_threshold);
        let (retained, removed_malware) = prune_pass(current, width);
        log::debug!("width {width}: removed {removed_malware} malware");
        current = retained;
        passes.push(IntervalPass {
            width,
            removed_malware,
            bins,
        });
    }
    if current.is_empty() {
        return Err(CurationError::EmptyCorpus);
    }
    let retained_malware = current.iter().filter(|s| s.tag().is_malware()).count();
    let report = CurationReport {
        config: cfg.clone(),
        input_total,
        retained_malware,
        retained_benign: current.len() - retained_malware,
        removed_by_size: 0,
        removed_by_threshold,
        passes,
    };
    debug_assert!(report.is_conserved());
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample(weight: u64, tag: LabelTag) -> Sample {
        let mut counts = BTreeMap::new();
        counts.insert("mov".to_string(), weight);
        Sample::new(format!("{tag}-{weight}"), tag.into(), counts)
    }

    fn m(w: u64) -> Sample {
        sample(w, LabelTag::Malware)
    }

    fn b(w: u64) -> Sample {
        sample(w, LabelTag::Benign)
    }

    #[test]
    fn size_cap_is_inclusive_and_benign_only() {
        let mb = 1024 * 1024;
        let cfg = CurationConfig::default();
        let files = vec![
            SizedFile { item: "big", byte_size: 148 * mb, label: LabelTag::Benign },
            SizedFile { item: "edge", byte_size: 147 * mb, label: LabelTag::Benign },
            SizedFile { item: "mal", byte_size: 500 * mb, label: LabelTag::Malware },
        ];
        let (kept, removed) = filter_size_cap(files, &cfg);
        assert_eq!(removed, 1);
        assert_eq!(kept.iter().map(|f| f.item).collect::<Vec<_>>(), ["edge", "mal"]);
    }

    #[test]
    fn threshold_is_strict() {
        let cfg = CurationConfig::default();
        let (kept, removed) = filter_weight_threshold(vec![m(39_999), b(40_000), m(0)], &cfg);
        assert_eq!(kept.iter().map(Sample::weight).collect::<Vec<_>>(), [39_999, 0]);
        assert_eq!(removed, ClassCounts { malware: 0, benign: 1 });

        let (kept, removed) = filter_weight_threshold(vec![m(100), m(40_000), b(50_000)], &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(removed.total(), 2);
    }

    #[test]
    fn histogram_bins() {
        let bins = interval_histogram(&[m(120), m(480), b(510)], 500, 40_000);
        assert_eq!(
            bins,
            vec![
                IntervalBin { lo: 1, hi: 500, malware_count: 2, benign_count: 0 },
                IntervalBin { lo: 501, hi: 1000, malware_count: 0, benign_count: 1 },
            ]
        );
        assert!(interval_histogram(&[], 50, 40_000).is_empty());
        let bins = interval_histogram(&[m(0), m(1), b(50), b(51)], 50, 40_000);
        assert_eq!(bins[0].malware_count + bins[0].benign_count, 3);
        let last = interval_histogram(&[b(39_999)], 500, 40_000);
        assert_eq!((last[0].lo, last[0].hi), (39_501, 39_999));
    }

    #[test]
    fn prune_removes_unaccompanied_malware() {
        let mut samples: Vec<Sample> = (0..5).map(|i| m(301 + i)).collect();
        samples.push(b(201));
        samples.extend((0..43).map(|i| m(201 + i)));
        let (kept, removed) = prune_pass(samples, 50);
        assert_eq!(removed, 5);
        assert_eq!(kept.len(), 44);

        let benign: Vec<Sample> = (1..10).map(b).collect();
        let (kept, removed) = prune_pass(benign.clone(), 2);
        assert_eq!((kept, removed), (benign, 0));
    }

    #[test]
    fn curate_threshold_only_and_empty() {
        let cfg = CurationConfig::default();
        let (kept, report) = curate(vec![m(10), b(10), m(50_000)], &cfg).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(report.removed_by_interval(), vec![0; 6]);
        assert!(report.is_conserved());
        assert_eq!(curate(vec![m(40_000), b(41_000)], &cfg), Err(CurationError::EmptyCorpus));
    }

    #[test]
    fn config_validation() {
        let mut cfg = CurationConfig::default();
        cfg.interval_widths = vec![100, 100];
        assert!(cfg.validate().is_err());
        cfg.interval_widths = vec![10, 0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn size_removals_keep_conservation() {
        let (_, report) = curate(vec![m(10), b(10)], &CurationConfig::default()).unwrap();
        let report = report.with_size_removals(3);
        assert_eq!(report.input_total, 5);
        assert!(report.is_conserved());
    }
}
