//! Shared fixtures for the integration tests: a brute-force reference for
//! the feature scores and generators for synthetic listings and corpora.
#![allow(dead_code)]

use std::collections::BTreeMap;

use opfreq::corpus::{FeatureMatrix, Label, LabelTag, Sample, Vocabulary};
use opfreq::rank::RankMethod;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracle {
    //! Straight-line reimplementation of the scores: every count is
    //! recomputed by scanning the raw samples, nothing is shared with the
    //! library.

    use super::*;

    const TIE: f64 = 1e-12;

    fn h(counts: &[f64]) -> f64 {
        let n: f64 = counts.iter().sum();
        counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).log2())
            .sum()
    }

    fn class_counts(points: &[(f64, LabelTag)]) -> [f64; 2] {
        let m = points.iter().filter(|p| p.1 == LabelTag::Malware).count() as f64;
        [m, points.len() as f64 - m]
    }

    fn k_of(c: &[f64; 2]) -> f64 {
        c.iter().filter(|&&x| x > 0.0).count() as f64
    }

    /// Entropy-minimizing recursive cuts with the MDL acceptance test.
    pub fn mdl_cuts(values: &[f64], labels: &[LabelTag]) -> Vec<f64> {
        let points: Vec<(f64, LabelTag)> = values.iter().copied().zip(labels.iter().copied()).collect();
        let mut cuts = Vec::new();
        recurse(&points, &mut cuts);
        cuts.sort_by(f64::total_cmp);
        cuts
    }

    fn recurse(points: &[(f64, LabelTag)], cuts: &mut Vec<f64>) {
        let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 2 {
            return;
        }
        let classes_at = |v: f64| {
            let mut seen = [false; 2];
            for p in points.iter().filter(|p| p.0 == v) {
                seen[(p.1 == LabelTag::Benign) as usize] = true;
            }
            seen
        };
        let n = points.len() as f64;
        let mut best: Option<(f64, f64)> = None;
        for w in distinct.windows(2) {
            let (a, b) = (classes_at(w[0]), classes_at(w[1]));
            let single = |s: [bool; 2]| s[0] != s[1];
            if single(a) && single(b) && a == b {
                continue;
            }
            let cut = (w[0] + w[1]) / 2.0;
            let left: Vec<_> = points.iter().copied().filter(|p| p.0 <= cut).collect();
            let right: Vec<_> = points.iter().copied().filter(|p| p.0 > cut).collect();
            let e = left.len() as f64 / n * h(&class_counts(&left)) + right.len() as f64 / n * h(&class_counts(&right));
            if best.map_or(true, |(_, be)| e < be - TIE) {
                best = Some((cut, e));
            }
        }
        let Some((cut, e)) = best else { return };
        let left: Vec<_> = points.iter().copied().filter(|p| p.0 <= cut).collect();
        let right: Vec<_> = points.iter().copied().filter(|p| p.0 > cut).collect();
        let (c, c1, c2) = (class_counts(points), class_counts(&left), class_counts(&right));
        let ent = h(&c);
        let delta = (3f64.powf(k_of(&c)) - 2.0).log2() - (k_of(&c) * ent - k_of(&c1) * h(&c1) - k_of(&c2) * h(&c2));
        if ent - e <= ((n - 1.0).log2() + delta) / n {
            return;
        }
        cuts.push(cut);
        recurse(&left, cuts);
        recurse(&right, cuts);
    }

    /// Joint probability table of bin id against class.
    fn joint(values: &[f64], labels: &[LabelTag], cuts: &[f64]) -> BTreeMap<(usize, usize), f64> {
        let mut t = BTreeMap::new();
        for (&v, &l) in values.iter().zip(labels) {
            let bin = cuts.iter().filter(|&&c| c < v).count();
            *t.entry((bin, (l == LabelTag::Benign) as usize)).or_insert(0.0) += 1.0;
        }
        t
    }

    fn marginals(t: &BTreeMap<(usize, usize), f64>) -> (BTreeMap<usize, f64>, [f64; 2], f64) {
        let mut rows = BTreeMap::new();
        let mut cols = [0.0; 2];
        let mut n = 0.0;
        for (&(r, c), &v) in t {
            *rows.entry(r).or_insert(0.0) += v;
            cols[c] += v;
            n += v;
        }
        (rows, cols, n)
    }

    /// Mutual information between bin and class, as `sum p(x,c) log p(x,c)/(p(x)p(c))`.
    pub fn mutual_information(values: &[f64], labels: &[LabelTag], cuts: &[f64]) -> f64 {
        let t = joint(values, labels, cuts);
        let (rows, cols, n) = marginals(&t);
        t.iter()
            .map(|(&(r, c), &v)| (v / n) * ((v / n) / ((rows[&r] / n) * (cols[c] / n))).log2())
            .sum()
    }

    fn entropies(values: &[f64], labels: &[LabelTag], cuts: &[f64]) -> (f64, f64) {
        let (rows, cols, _) = marginals(&joint(values, labels, cuts));
        (h(&rows.values().copied().collect::<Vec<_>>()), h(&cols))
    }

    pub fn chi_square(values: &[f64], labels: &[LabelTag], cuts: &[f64]) -> f64 {
        let t = joint(values, labels, cuts);
        let (rows, cols, n) = marginals(&t);
        let mut chi = 0.0;
        for (&r, &rs) in &rows {
            for c in 0..2 {
                let e = rs * cols[c] / n;
                if e > 0.0 {
                    let o = t.get(&(r, c)).copied().unwrap_or(0.0);
                    chi += (o - e).powi(2) / e;
                }
            }
        }
        chi
    }

    pub fn fisher(values: &[f64], labels: &[LabelTag]) -> f64 {
        let stats = |tag| {
            let xs: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l == tag).map(|(&v, _)| v).collect();
            let n = xs.len() as f64;
            let mu = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            (mu, var.sqrt())
        };
        let (mm, sm) = stats(LabelTag::Malware);
        let (mb, sb) = stats(LabelTag::Benign);
        (mm - mb).abs() / (sm + sb).max(1e-12)
    }

    pub fn score(method: RankMethod, values: &[f64], labels: &[LabelTag]) -> f64 {
        if method == RankMethod::Fisher {
            return fisher(values, labels);
        }
        let cuts = mdl_cuts(values, labels);
        let mi = mutual_information(values, labels, &cuts);
        let (hx, hc) = entropies(values, labels, &cuts);
        match method {
            RankMethod::InfoGain => mi,
            RankMethod::GainRatio => {
                if hx > 0.0 {
                    mi / hx
                } else {
                    0.0
                }
            }
            RankMethod::SymUncertainty => {
                if hx + hc > 0.0 {
                    2.0 * mi / (hx + hc)
                } else {
                    0.0
                }
            }
            RankMethod::ChiSquare => chi_square(values, labels, &cuts),
            RankMethod::Fisher => unreachable!(),
        }
    }

    /// Every opcode scored and sorted by descending score, ties by name.
    pub fn ranking(matrix: &FeatureMatrix, method: RankMethod) -> Vec<(String, f64)> {
        let labels: Vec<LabelTag> = matrix.samples.iter().map(|s| s.label.tag()).collect();
        let mut scored: Vec<(String, f64)> = matrix
            .vocabulary
            .opcodes()
            .iter()
            .map(|op| {
                let col: Vec<f64> = matrix.samples.iter().map(|s| s.count(op) as f64).collect();
                (op.clone(), score(method, &col, &labels))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored
    }
}

pub fn sample(id: &str, tag: LabelTag, counts: &[(&str, u64)]) -> Sample {
    let map: BTreeMap<String, u64> = counts.iter().map(|&(k, v)| (k.to_string(), v)).collect();
    Sample::new(id, tag.into(), map)
}

/// Matrix whose vocabulary is every opcode used by `samples`.
pub fn matrix_of(samples: Vec<Sample>) -> FeatureMatrix {
    let vocab = Vocabulary::from_opcodes(
        samples
            .iter()
            .flat_map(|s| s.counts().keys().cloned())
            .collect::<std::collections::BTreeSet<_>>(),
    );
    FeatureMatrix::new(vocab, samples)
}

/// Random matrix with `n` samples over `p` features `f0..`, counts in
/// `0..=max`, both classes present.
pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize, max: u64) -> FeatureMatrix {
    let names: Vec<String> = (0..p).map(|j| format!("f{j}")).collect();
    let samples = (0..n)
        .map(|i| {
            let tag = if i == 0 {
                LabelTag::Malware
            } else if i == 1 {
                LabelTag::Benign
            } else if rng.gen_bool(0.5) {
                LabelTag::Malware
            } else {
                LabelTag::Benign
            };
            let counts = names.iter().map(|f| (f.clone(), rng.gen_range(0..=max))).collect();
            Sample::new(format!("s{i}"), tag.into(), counts)
        })
        .collect();
    FeatureMatrix::new(Vocabulary::from_opcodes(names), samples)
}

pub const COMMON_OPS: &[&str] = &[
    "mov", "push", "pop", "call", "ret", "add", "sub", "cmp", "jmp", "lea", "xor", "test", "and", "or",
];
pub const MALWARE_MARKERS: &[&str] = &["rdtsc", "cpuid", "int3", "sidt", "sgdt", "str", "sldt", "smsw"];
pub const BENIGN_MARKERS: &[&str] = &["fld", "fstp", "fmul", "fadd", "fdiv", "fsub", "fxch", "fcomp"];

/// Opcode counts of one synthetic program: common opcodes for everyone,
/// plus every marker of the sample's own class.
pub fn marker_counts(rng: &mut ChaCha8Rng, tag: LabelTag) -> Vec<(String, u64)> {
    let mut counts: Vec<(String, u64)> = COMMON_OPS.iter().map(|op| (op.to_string(), rng.gen_range(0..=12))).collect();
    let markers = if tag.is_malware() { MALWARE_MARKERS } else { BENIGN_MARKERS };
    counts.extend(markers.iter().map(|op| (op.to_string(), rng.gen_range(1..=5))));
    counts
}

/// Renders counts as an IDA-style listing with the instructions shuffled
/// and a few directive and comment lines mixed in.
pub fn kaggle_listing(rng: &mut ChaCha8Rng, counts: &[(String, u64)]) -> String {
    let mut ops: Vec<&str> = counts
        .iter()
        .flat_map(|(op, c)| std::iter::repeat(op.as_str()).take(*c as usize))
        .collect();
    shuffle(rng, &mut ops);
    let mut s = String::from(".text:00401000 ; Segment type: Pure code\n.text:00401000 _text segment para public 'CODE' use32\n");
    let mut addr = 0x401000u32;
    for op in ops {
        let _ = std::fmt::Write::write_fmt(&mut s, format_args!(".text:{addr:08X} 8B 45 F8{:>24}{op}     eax, [ebp+var_8]\n", ""));
        addr += 3;
        if rng.gen_ratio(1, 20) {
            let _ = std::fmt::Write::write_fmt(&mut s, format_args!(".text:{addr:08X}                 align 10h\n"));
        }
    }
    s.push_str(".data:00402000 dword_402000    dd 0\n");
    s
}

/// Renders counts as an `objdump -d` listing.
pub fn objdump_listing(rng: &mut ChaCha8Rng, counts: &[(String, u64)]) -> String {
    let mut ops: Vec<&str> = counts
        .iter()
        .flat_map(|(op, c)| std::iter::repeat(op.as_str()).take(*c as usize))
        .collect();
    shuffle(rng, &mut ops);
    let mut s = String::from("\nprog:     file format elf32-i386\n\n\nDisassembly of section .text:\n\n08048000 <main>:\n");
    let mut addr = 0x8048000u32;
    for op in ops {
        let _ = std::fmt::Write::write_fmt(&mut s, format_args!(" {addr:x}:\t8b 45 f8    \t{op}    -0x8(%ebp),%eax\n"));
        addr += 3;
    }
    s
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

/// Labeled listings: `malware` programs then `benign` programs, alternating dialects.
pub fn marker_listings(malware: usize, benign: usize, seed: u64) -> Vec<(String, Label, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tags = std::iter::repeat(LabelTag::Malware)
        .take(malware)
        .chain(std::iter::repeat(LabelTag::Benign).take(benign));
    tags.enumerate()
        .map(|(i, tag)| {
            let counts = marker_counts(&mut rng, tag);
            let text = if i % 2 == 0 {
                kaggle_listing(&mut rng, &counts)
            } else {
                objdump_listing(&mut rng, &counts)
            };
            (format!("{tag}{i:04}"), tag.into(), text)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
