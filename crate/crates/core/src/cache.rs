//! Pre-computed embeddings for every candidate segment of a corpus.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;

use crate::corpus::{Corpus, FrameSequence, SegmentConstraints, SegmentSpan, Span};
use crate::dtw::{self, DtwCost};
use crate::embed::{finalize_embedding, rbf_kernel, sample_std, EmbeddingModel};
use crate::error::{Error, Result};
use crate::format;
use crate::rng::{rng_from, segment_seed, stream_seed};

/// Candidate spans of one utterance with one embedding row per span.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbeddings {
    pub utterance_id: String,
    pub n_frames: usize,
    /// Sorted by `(start, end)`.
    pub spans: Vec<Span>,
    /// Row-major `spans.len() x dim`.
    pub vectors: Vec<f64>,
    dim: usize,
    index: HashMap<Span, usize>,
    by_end: Vec<Vec<usize>>,
}

impl UtteranceEmbeddings {
    pub fn new(
        utterance_id: String,
        n_frames: usize,
        spans: Vec<Span>,
        vectors: Vec<f64>,
        dim: usize,
    ) -> Result<Self> {
        if vectors.len() != spans.len() * dim {
            return Err(Error::data(utterance_id, "embedding rows do not match spans"));
        }
        let mut index = HashMap::with_capacity(spans.len());
        let mut by_end = vec![Vec::new(); n_frames + 1];
        for (i, s) in spans.iter().enumerate() {
            if s.start >= s.end || s.end > n_frames {
                return Err(Error::data(
                    utterance_id,
                    format!("span {}..{} outside {n_frames} frames", s.start, s.end),
                ));
            }
            if index.insert(*s, i).is_some() {
                return Err(Error::data(
                    utterance_id,
                    format!("span {}..{} cached twice", s.start, s.end),
                ));
            }
            by_end[s.end].push(i);
        }
        for ends in &mut by_end {
            ends.sort_by_key(|&i| spans[i].start);
        }
        Ok(Self {
            utterance_id,
            n_frames,
            spans,
            vectors,
            dim,
            index,
            by_end,
        })
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn lookup(&self, span: Span) -> Option<usize> {
        self.index.get(&span).copied()
    }

    /// Indices of the spans ending at frame `t`, by ascending start.
    pub fn ending_at(&self, t: usize) -> &[usize] {
        &self.by_end[t]
    }
}

/// Embeddings for every candidate span, grouped per utterance in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub utterances: Vec<UtteranceEmbeddings>,
}

impl EmbeddingCache {
    pub fn total_entries(&self) -> usize {
        self.utterances.iter().map(UtteranceEmbeddings::len).sum()
    }

    pub fn get(&self, span: &SegmentSpan) -> Option<&[f64]> {
        let u = self.utterances.iter().find(|u| u.utterance_id == span.utterance_id)?;
        u.lookup(span.span()).map(|i| u.vector(i))
    }

    /// Checks that the cache lines up with `corpus` utterance by utterance.
    pub fn check_covers(&self, corpus: &Corpus) -> Result<()> {
        if self.utterances.len() != corpus.len() {
            return Err(Error::Format(format!(
                "cache holds {} utterances, corpus {}",
                self.utterances.len(),
                corpus.len()
            )));
        }
        for (c, u) in self.utterances.iter().zip(&corpus.utterances) {
            if c.utterance_id != u.utterance_id || c.n_frames != u.n_frames() {
                return Err(Error::data(
                    &u.utterance_id,
                    "cache entry does not match the corpus utterance",
                ));
            }
            if c.is_empty() {
                return Err(Error::data(&u.utterance_id, "no cached candidate segments"));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.utterances.iter().flat_map(|u| {
            u.spans.iter().enumerate().map(move |(i, s)| {
                (u.utterance_id.as_str(), s.start as u32, s.end as u32, u.vector(i))
            })
        });
        format::encode_cache(self.dim, self.total_entries(), records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache file, ordering utterances as in `corpus`.
    pub fn read(path: &Path, corpus: &Corpus) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (dim, records) = format::decode_cache(&bytes)?;
        let mut grouped: HashMap<String, (Vec<Span>, Vec<f64>)> = HashMap::new();
        for r in records {
            if r.start >= r.end {
                return Err(Error::data(&r.utterance_id, "empty span in cache"));
            }
            let entry = grouped.entry(r.utterance_id).or_default();
            entry.0.push(Span::new(r.start as usize, r.end as usize));
            entry.1.extend(r.values.iter().map(|&v| f64::from(v)));
        }
        let mut utterances = Vec::with_capacity(corpus.len());
        for utt in &corpus.utterances {
            let (spans, vectors) = grouped.remove(&utt.utterance_id).ok_or_else(|| {
                Error::data(&utt.utterance_id, "utterance missing from cache")
            })?;
            let mut order: Vec<usize> = (0..spans.len()).collect();
            order.sort_by_key(|&i| spans[i]);
            let sorted_spans = order.iter().map(|&i| spans[i]).collect();
            let sorted_vectors = order
                .iter()
                .flat_map(|&i| vectors[i * dim..(i + 1) * dim].iter().copied())
                .collect();
            utterances.push(UtteranceEmbeddings::new(
                utt.utterance_id.clone(),
                utt.n_frames(),
                sorted_spans,
                sorted_vectors,
                dim,
            )?);
        }
        if let Some(extra) = grouped.keys().next() {
            return Err(Error::data(extra, "cached utterance is not in the corpus"));
        }
        Ok(Self { dim, utterances })
    }
}

/// Raw (pre-normalization) embeddings of all candidates of one utterance.
#[derive(Debug, Clone)]
pub struct RawUtterance {
    pub spans: Vec<Span>,
    pub vectors: Vec<f64>,
}

/// Raw embeddings of every candidate of `utt`.
///
/// One DTW pass per (start frame, exemplar) yields the costs for all ends
/// sharing that start; the values are identical to calling
/// [`crate::embed::embed_raw`] on each span.
pub fn raw_utterance(
    model: &EmbeddingModel,
    utt: &FrameSequence,
    constraints: &SegmentConstraints,
) -> Result<RawUtterance> {
    if utt.dim() != model.feat_dim {
        return Err(Error::data(
            &utt.utterance_id,
            format!("feature dim {} but the model expects {}", utt.dim(), model.feat_dim),
        ));
    }
    let fc = constraints.in_frames(utt.frame_shift_ms)?;
    let spans = fc.spans(utt.n_frames());
    let dim = model.dim;
    let mut vectors = vec![0.0; spans.len() * dim];

    // spans are sorted by start; group them
    let mut groups: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    for (i, s) in spans.iter().enumerate() {
        match groups.last_mut() {
            Some((start, range)) if *start == s.start => range.end = i + 1,
            _ => groups.push((s.start, i..i + 1)),
        }
    }

    let utt_norms: Vec<f64> = utt.full().rows().map(dtw::norm).collect();
    let n_frames = utt.n_frames();
    let mut dist = Vec::new();
    let mut costs = vec![0.0; n_frames];
    for i in 0..model.n_ref() {
        let ex = model.exemplar(i);
        let cols = ex.len();
        let ex_norms: Vec<f64> = ex.rows().map(dtw::norm).collect();
        dist.clear();
        dist.reserve(n_frames * cols);
        for t in 0..n_frames {
            let row = utt.frame(t);
            for (c, rb) in ex.rows().enumerate() {
                dist.push(dtw::cosine_from_parts(dtw::dot(row, rb), utt_norms[t], ex_norms[c]));
            }
        }
        for (start, range) in &groups {
            let max_end = spans[range.end - 1].end;
            let rows = max_end - start;
            dtw::prefix_costs(&dist[start * cols..], rows, cols, &mut costs);
            for si in range.clone() {
                let k = rbf_kernel(DtwCost(costs[spans[si].len() - 1]), model.sigma_k);
                let out = &mut vectors[si * dim..(si + 1) * dim];
                for (j, o) in out.iter_mut().enumerate() {
                    *o += model.coefficients[(i, j)] * k;
                }
            }
        }
    }
    Ok(RawUtterance { spans, vectors })
}

/// Raw embeddings for every utterance, in corpus order.
pub fn raw_corpus(
    model: &EmbeddingModel,
    corpus: &Corpus,
    constraints: &SegmentConstraints,
) -> Result<Vec<RawUtterance>> {
    corpus
        .utterances
        .par_iter()
        .map(|u| raw_utterance(model, u, constraints))
        .collect()
}

/// Sample standard deviation of all coordinates over `sample` uniformly drawn
/// candidates (all of them when `None` or when fewer exist).
pub fn calibrate_sigma_e(raw: &[RawUtterance], dim: usize, sample: Option<usize>, seed: u64) -> f64 {
    let total: usize = raw.iter().map(|r| r.spans.len()).sum();
    let picks: Vec<usize> = match sample {
        Some(n) if n < total => {
            let mut rng = rng_from(stream_seed(seed, "sigma_e", 0));
            let mut v = index::sample(&mut rng, total, n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    let mut values = Vec::with_capacity(picks.len() * dim);
    let mut offsets = Vec::with_capacity(raw.len());
    let mut acc = 0;
    for r in raw {
        offsets.push(acc);
        acc += r.spans.len();
    }
    for g in picks {
        let u = offsets.partition_point(|&o| o <= g) - 1;
        let local = g - offsets[u];
        values.extend_from_slice(&raw[u].vectors[local * dim..(local + 1) * dim]);
    }
    sample_std(&values)
}

/// Jitters and normalizes precomputed raw embeddings. Each segment draws its
/// noise from its own stream keyed by (seed, utterance id, start, end).
pub fn finalize_cache(
    model: &EmbeddingModel,
    corpus: &Corpus,
    raw: Vec<RawUtterance>,
    seed: u64,
) -> Result<EmbeddingCache> {
    let sigma_e = model
        .sigma_e
        .ok_or_else(|| Error::Config("sigma_e has not been calibrated".into()))?;
    let dim = model.dim;
    let utterances = corpus
        .utterances
        .par_iter()
        .zip(raw)
        .map(|(utt, r)| {
            let mut vectors = Vec::with_capacity(r.vectors.len());
            for (i, s) in r.spans.iter().enumerate() {
                let mut rng = rng_from(segment_seed(seed, &utt.utterance_id, s.start, s.end));
                let e = finalize_embedding(
                    &r.vectors[i * dim..(i + 1) * dim],
                    sigma_e,
                    model.jitter_scale,
                    &mut rng,
                )
                .map_err(|e| Error::data(&utt.utterance_id, format!("span {}..{}: {e}", s.start, s.end)))?;
                vectors.extend_from_slice(e.as_slice());
            }
            UtteranceEmbeddings::new(utt.utterance_id.clone(), utt.n_frames(), r.spans, vectors, dim)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingCache { dim, utterances })
}

/// Embeds every candidate segment with an already calibrated model.
pub fn precompute_cache(
    model: &EmbeddingModel,
    corpus: &Corpus,
    constraints: &SegmentConstraints,
    seed: u64,
) -> Result<EmbeddingCache> {
    let raw = raw_corpus(model, corpus, constraints)?;
    finalize_cache(model, corpus, raw, seed)
}

/// Computes raw embeddings once, calibrates `sigma_e` on them, then finalizes.
pub fn build_cache(
    model: &mut EmbeddingModel,
    corpus: &Corpus,
    constraints: &SegmentConstraints,
    sigma_e_sample: Option<usize>,
    seed: u64,
) -> Result<EmbeddingCache> {
    let raw = raw_corpus(model, corpus, constraints)?;
    let sigma_e = calibrate_sigma_e(&raw, model.dim, sigma_e_sample, seed);
    log::info!("calibrated sigma_e = {sigma_e:.6}");
    model.sigma_e = Some(sigma_e);
    finalize_cache(model, corpus, raw, seed)
}
