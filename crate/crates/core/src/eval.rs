//! Scoring decoded output against ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{internal_boundaries, Corpus};
use crate::error::{Error, Result};
use crate::segmenter::Segmentation;

/// Boundary tolerance used when none is given.
pub const DEFAULT_TOLERANCE_MS: f64 = 40.0;

/// Frame-overlap counts between ground-truth types (rows, sorted by token)
/// and discovered clusters (columns, sorted by id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingMatrix {
    pub types: Vec<String>,
    pub clusters: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl MappingMatrix {
    pub fn from_counts(types: Vec<String>, clusters: Vec<usize>, counts: Vec<Vec<u64>>) -> Self {
        Self {
            types,
            clusters,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Plot-ready CSV: a header of cluster ids, then one row per type.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("type");
        for c in &self.clusters {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (t, row) in self.types.iter().zip(&self.counts) {
            out.push_str(t);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Pairs each decode with its utterance index, requiring both sides to cover
/// the same utterances.
fn align_decodes<'a>(decoded: &'a [Segmentation], corpus: &Corpus) -> Result<Vec<(usize, &'a Segmentation)>> {
    if decoded.len() != corpus.len() {
        return Err(Error::Format(format!(
            "decode has {} utterances, corpus has {}",
            decoded.len(),
            corpus.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(decoded.len());
    for seg in decoded {
        let i = corpus.index_of(&seg.utterance_id).ok_or_else(|| {
            Error::data(&seg.utterance_id, "decoded utterance is not in the corpus")
        })?;
        if !seen.insert(i) {
            return Err(Error::data(&seg.utterance_id, "utterance decoded twice"));
        }
        seg.check_tiling(corpus.utterances[i].n_frames())?;
        out.push((i, seg));
    }
    Ok(out)
}

fn alignment_of(corpus: &Corpus, i: usize) -> Result<&[crate::corpus::AlignedWord]> {
    corpus.alignments[i].as_deref().ok_or_else(|| {
        Error::MissingGroundTruth(format!(
            "utterance {} has no alignment",
            corpus.utterances[i].utterance_id
        ))
    })
}

/// Frame-level cross-tabulation of ground-truth words against decoded spans.
pub fn mapping_matrix(decoded: &[Segmentation], corpus: &Corpus) -> Result<MappingMatrix> {
    let mut cells: BTreeMap<(String, usize), u64> = BTreeMap::new();
    let mut types = BTreeSet::new();
    let mut clusters = BTreeSet::new();
    for (i, seg) in align_decodes(decoded, corpus)? {
        let words = alignment_of(corpus, i)?;
        for w in words {
            types.insert(w.token.clone());
        }
        for s in &seg.spans {
            clusters.insert(s.cluster);
        }
        let mut k = 0;
        for w in words {
            while k < seg.spans.len() && seg.spans[k].end <= w.start_frame {
                k += 1;
            }
            let mut m = k;
            while m < seg.spans.len() && seg.spans[m].start < w.end_frame {
                let s = seg.spans[m];
                let overlap = s.end.min(w.end_frame) - s.start.max(w.start_frame);
                *cells.entry((w.token.clone(), s.cluster)).or_default() += overlap as u64;
                m += 1;
            }
        }
    }
    let types: Vec<String> = types.into_iter().collect();
    let clusters: Vec<usize> = clusters.into_iter().collect();
    let row: HashMap<&str, usize> = types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let col: HashMap<usize, usize> = clusters.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut counts = vec![vec![0u64; clusters.len()]; types.len()];
    for ((t, c), v) in cells {
        counts[row[t.as_str()]][col[&c]] = v;
    }
    Ok(MappingMatrix {
        types,
        clusters,
        counts,
    })
}

/// Share of frames that fall in their cluster's majority type.
pub fn cluster_purity(g: &MappingMatrix) -> Result<f64> {
    let total = g.total();
    if total == 0 {
        return Err(Error::Format("mapping matrix is empty".into()));
    }
    let majority: u64 = (0..g.clusters.len())
        .map(|j| g.counts.iter().map(|row| row[j]).max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / total as f64)
}

/// Greedy one-to-one mapping, column index to row index: cells by count
/// descending, ties by smaller column then smaller row. Zero cells never map.
pub fn greedy_mapping(g: &MappingMatrix) -> Vec<Option<usize>> {
    let mut cells: Vec<(u64, usize, usize)> = Vec::new();
    for (i, row) in g.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0 {
                cells.push((v, j, i));
            }
        }
    }
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut by_col = vec![None; g.clusters.len()];
    let mut row_used = vec![false; g.types.len()];
    for (_, j, i) in cells {
        if by_col[j].is_none() && !row_used[i] {
            by_col[j] = Some(i);
            row_used[i] = true;
        }
    }
    by_col
}

/// Edit counts of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Unit-cost Levenshtein alignment; the backtrace prefers match or
/// substitution, then deletion, then insertion.
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(differs) == here {
                counts.substitutions += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// WER after greedy cluster-to-type mapping. Tokens of unmapped clusters
/// never match any reference word.
pub fn unsupervised_wer(decoded: &[Segmentation], corpus: &Corpus, g: &MappingMatrix) -> Result<EditCounts> {
    let mapping = greedy_mapping(g);
    let col: HashMap<usize, usize> = g.clusters.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut total = EditCounts::default();
    for (i, seg) in align_decodes(decoded, corpus)? {
        let reference = corpus.transcript(i).ok_or_else(|| {
            Error::MissingGroundTruth(format!(
                "utterance {} has no transcript",
                corpus.utterances[i].utterance_id
            ))
        })?;
        let reference: Vec<Option<&str>> = reference.iter().map(|t| Some(t.as_str())).collect();
        let hypothesis: Vec<Option<&str>> = seg
            .spans
            .iter()
            .map(|s| {
                col.get(&s.cluster)
                    .and_then(|&j| mapping[j])
                    .map(|row| g.types[row].as_str())
            })
            .collect();
        // None stands for the reserved token: make it unequal to everything.
        let reference: Vec<Token<'_>> = reference.into_iter().map(Token).collect();
        let hypothesis: Vec<Token<'_>> = hypothesis.into_iter().map(Token).collect();
        total.add(levenshtein(&reference, &hypothesis));
    }
    Ok(total)
}

/// A word, or the reserved token that matches nothing, itself included.
#[derive(Debug, Clone, Copy)]
struct Token<'a>(Option<&'a str>);

impl PartialEq for Token<'_> {
    fn eq(&self, other: &Self) -> bool {
        matches!((self.0, other.0), (Some(a), Some(b)) if a == b)
    }
}

/// Number of one-to-one matches between sorted boundary lists, each proposed
/// boundary taking the leftmost free reference boundary within `tol`.
pub fn match_boundaries(proposed: &[usize], reference: &[usize], tol: usize) -> usize {
    let mut used = vec![false; reference.len()];
    let mut lo = 0;
    let mut matches = 0;
    for &p in proposed {
        while lo < reference.len() && reference[lo] + tol < p {
            lo += 1;
        }
        let hit = (lo..reference.len())
            .take_while(|&r| reference[r] <= p + tol)
            .find(|&r| !used[r]);
        if let Some(r) = hit {
            used[r] = true;
            matches += 1;
        }
    }
    matches
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub matches: usize,
    pub proposed: usize,
    pub reference: usize,
}

impl BoundaryScore {
    pub fn from_counts(matches: usize, proposed: usize, reference: usize) -> Self {
        let (precision, recall) = if proposed == 0 && reference == 0 {
            (1.0, 1.0)
        } else {
            (ratio(matches, proposed), ratio(matches, reference))
        };
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f,
            matches,
            proposed,
            reference,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Tolerance in whole frames.
pub fn tolerance_frames(tol_ms: f64, frame_shift_ms: f64) -> usize {
    (tol_ms / frame_shift_ms + 1e-9).floor() as usize
}

/// Precision, recall and F of word-internal boundaries pooled over the corpus.
pub fn boundary_fscore(decoded: &[Segmentation], corpus: &Corpus, tol_ms: f64) -> Result<BoundaryScore> {
    let (mut matches, mut proposed, mut reference) = (0, 0, 0);
    for (i, seg) in align_decodes(decoded, corpus)? {
        let truth = internal_boundaries(alignment_of(corpus, i)?);
        let hyp = seg.internal_boundaries();
        let tol = tolerance_frames(tol_ms, corpus.utterances[i].frame_shift_ms);
        matches += match_boundaries(&hyp, &truth, tol);
        proposed += hyp.len();
        reference += truth.len();
    }
    Ok(BoundaryScore::from_counts(matches, proposed, reference))
}

/// Fewest largest clusters whose combined share reaches `threshold`.
pub fn clusters_covering(sizes: &[usize], threshold: f64) -> usize {
    let mut sorted: Vec<usize> = sizes.iter().copied().filter(|&s| s > 0).collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = sorted.iter().sum();
    let target = threshold * total as f64 - 1e-9;
    let mut acc = 0;
    for (n, s) in sorted.iter().enumerate() {
        acc += s;
        if acc as f64 >= target {
            return n + 1;
        }
    }
    sorted.len()
}

/// Token count per cluster id.
pub fn cluster_sizes(decoded: &[Segmentation]) -> BTreeMap<usize, usize> {
    let mut sizes = BTreeMap::new();
    for s in decoded.iter().flat_map(|d| &d.spans) {
        *sizes.entry(s.cluster).or_default() += 1;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub purity: f64,
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_tokens: usize,
    pub boundary_precision: f64,
    pub boundary_recall: f64,
    pub boundary_f: f64,
    pub clusters_covering_90pct: usize,
}

/// Full metric set plus the mapping matrix it was derived from.
pub fn evaluate(decoded: &[Segmentation], corpus: &Corpus, tol_ms: f64) -> Result<(MetricsReport, MappingMatrix)> {
    let g = mapping_matrix(decoded, corpus)?;
    let purity = cluster_purity(&g)?;
    let edits = unsupervised_wer(decoded, corpus, &g)?;
    if edits.reference_len == 0 {
        return Err(Error::MissingGroundTruth("reference transcripts are empty".into()));
    }
    let boundaries = boundary_fscore(decoded, corpus, tol_ms)?;
    let sizes: Vec<usize> = cluster_sizes(decoded).into_values().collect();
    let report = MetricsReport {
        purity,
        wer: edits.errors() as f64 / edits.reference_len as f64,
        substitutions: edits.substitutions,
        deletions: edits.deletions,
        insertions: edits.insertions,
        n_tokens: edits.reference_len,
        boundary_precision: boundaries.precision,
        boundary_recall: boundaries.recall,
        boundary_f: boundaries.f,
        clusters_covering_90pct: clusters_covering(&sizes, 0.9),
    };
    Ok((report, g))
}
