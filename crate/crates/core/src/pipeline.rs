//! Outer loop: train the embedding on a reference set, sample, then rebuild
//! the reference set from the discovered clusters and repeat.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{build_cache, EmbeddingCache};
use crate::corpus::{Corpus, FrameSlice, SegmentConstraints, SegmentSpan, Span};
use crate::embed::{train_eigenmaps, EmbedParams, EmbeddingModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MappingMatrix, MetricsReport, DEFAULT_TOLERANCE_MS};
use crate::gmm::{GmmParams, GmmState};
use crate::rng::{rng_from, stream_seed};
use crate::segmenter::{run_sampler, ChainResult, SamplerConfig, SamplerResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub iterations: usize,
    /// Exemplars taken from discovered clusters; `None` means half of `n_ref`.
    pub discovered_quota: Option<usize>,
    pub coverage_threshold: f64,
    pub boundary_tolerance_ms: f64,
    pub constraints: SegmentConstraints,
    pub embed: EmbedParams,
    pub gmm: GmmParams,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            discovered_quota: None,
            coverage_threshold: 0.9,
            boundary_tolerance_ms: DEFAULT_TOLERANCE_MS,
            constraints: SegmentConstraints::default(),
            embed: EmbedParams::default(),
            gmm: GmmParams::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn discovered_quota(&self) -> usize {
        self.discovered_quota.unwrap_or(self.embed.n_ref / 2)
    }

    pub fn random_quota(&self) -> usize {
        self.embed.n_ref - self.discovered_quota()
    }

    /// Checks every component setting; runs before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("at least one pipeline iteration is required".into()));
        }
        if self.discovered_quota() > self.embed.n_ref {
            return Err(Error::Config(format!(
                "discovered quota {} exceeds n_ref {}",
                self.discovered_quota(),
                self.embed.n_ref
            )));
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(Error::Config("coverage_threshold must be in (0, 1]".into()));
        }
        if !(self.boundary_tolerance_ms.is_finite() && self.boundary_tolerance_ms >= 0.0) {
            return Err(Error::Config("boundary_tolerance_ms must be non-negative".into()));
        }
        self.constraints.validate()?;
        self.embed.validate()?;
        self.gmm.hyper(self.embed.dim)?;
        self.sampler.validate()
    }
}

/// Candidate spans of every utterance, in corpus order.
fn all_candidates(corpus: &Corpus, constraints: &SegmentConstraints) -> Result<Vec<(usize, Vec<Span>)>> {
    corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(u, utt)| Ok((u, constraints.in_frames(utt.frame_shift_ms)?.spans(utt.n_frames()))))
        .collect()
}

/// Uniform draw of `n` candidates, excluding `taken`; without replacement
/// while enough remain, otherwise with replacement. Sorted by corpus position.
fn draw_candidates<R: Rng + ?Sized>(
    corpus: &Corpus,
    candidates: &[(usize, Vec<Span>)],
    n: usize,
    taken: &HashSet<(usize, Span)>,
    rng: &mut R,
) -> Result<Vec<SegmentSpan>> {
    let pool: Vec<(usize, Span)> = candidates
        .iter()
        .flat_map(|(u, spans)| spans.iter().map(move |&s| (*u, s)))
        .filter(|c| !taken.contains(c))
        .collect();
    if n > 0 && pool.is_empty() {
        return Err(Error::Config("corpus has no candidate segments to draw from".into()));
    }
    let mut picks: Vec<usize> = if n <= pool.len() {
        index::sample(rng, pool.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pool.len())).collect()
    };
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|i| {
            let (u, s) = pool[i];
            SegmentSpan {
                utterance_id: corpus.utterances[u].utterance_id.clone(),
                start: s.start,
                end: s.end,
            }
        })
        .collect())
}

/// `n_ref` candidates drawn uniformly.
pub fn initial_reference_set<R: Rng + ?Sized>(
    corpus: &Corpus,
    n_ref: usize,
    constraints: &SegmentConstraints,
    rng: &mut R,
) -> Result<Vec<SegmentSpan>> {
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let candidates = all_candidates(corpus, constraints)?;
    draw_candidates(corpus, &candidates, n_ref, &HashSet::new(), rng)
}

/// Smallest set of largest clusters holding at least `threshold` of the
/// tokens; clusters ordered by size descending, then id.
pub fn covering_clusters(sizes: &BTreeMap<usize, usize>, threshold: f64) -> Vec<usize> {
    let mut order: Vec<(usize, usize)> = sizes.iter().map(|(&c, &n)| (c, n)).filter(|&(_, n)| n > 0).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: usize = order.iter().map(|p| p.1).sum();
    let target = threshold * total as f64 - 1e-9;
    let mut acc = 0;
    let mut out = Vec::new();
    for (c, n) in order {
        out.push(c);
        acc += n;
        if acc as f64 >= target {
            break;
        }
    }
    out
}

/// Splits `quota` over clusters proportionally to size by largest
/// remainder; ties go to the earlier cluster. Never exceeds a cluster's size.
pub fn apportion(sizes: &[usize], quota: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total <= quota {
        return sizes.to_vec();
    }
    let mut shares: Vec<usize> = sizes.iter().map(|&s| quota * s / total).collect();
    let mut rest: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| ((quota * s) % total, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = quota - shares.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        shares[i] += 1;
    }
    shares
}

/// Reference set for the next iteration: the most typical tokens of the
/// covering clusters of `chain`, topped up with random candidates.
pub fn refine_reference_set<R: Rng + ?Sized>(
    chain: &ChainResult,
    model: &GmmState,
    cache: &EmbeddingCache,
    corpus: &Corpus,
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<Vec<SegmentSpan>> {
    // (cluster, log marginal, utterance, span)
    let mut tokens: Vec<(usize, f64, usize, Span)> = Vec::new();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for (u, seg) in chain.segmentations.iter().enumerate() {
        let utt = &cache.utterances[u];
        for d in &seg.spans {
            let span = Span::new(d.start, d.end);
            let i = utt.lookup(span).ok_or_else(|| {
                Error::data(&seg.utterance_id, format!("decoded span {}..{} is not cached", d.start, d.end))
            })?;
            tokens.push((d.cluster, model.log_marginal(utt.vector(i)), u, span));
            *sizes.entry(d.cluster).or_default() += 1;
        }
    }
    let covering = covering_clusters(&sizes, config.coverage_threshold);
    let covering_sizes: Vec<usize> = covering.iter().map(|c| sizes[c]).collect();
    let shares = apportion(&covering_sizes, config.discovered_quota());

    let mut chosen: Vec<(usize, Span)> = Vec::new();
    for (&c, &share) in covering.iter().zip(&shares) {
        let mut members: Vec<&(usize, f64, usize, Span)> = tokens.iter().filter(|t| t.0 == c).collect();
        members.sort_by(|a, b| b.1.total_cmp(&a.1).then((a.2, a.3).cmp(&(b.2, b.3))));
        chosen.extend(members.iter().take(share).map(|t| (t.2, t.3)));
    }
    let taken: HashSet<(usize, Span)> = chosen.iter().copied().collect();
    let fill = config.embed.n_ref - chosen.len();
    let candidates = all_candidates(corpus, &config.constraints)?;
    let mut out: Vec<SegmentSpan> = chosen
        .into_iter()
        .map(|(u, s)| SegmentSpan {
            utterance_id: corpus.utterances[u].utterance_id.clone(),
            start: s.start,
            end: s.end,
        })
        .collect();
    out.extend(draw_candidates(corpus, &candidates, fill, &taken, rng)?);
    Ok(out)
}

/// Frames of every reference span.
pub fn reference_slices<'a>(corpus: &'a Corpus, reference: &[SegmentSpan]) -> Result<Vec<FrameSlice<'a>>> {
    reference
        .iter()
        .map(|s| {
            let u = corpus
                .index_of(&s.utterance_id)
                .ok_or_else(|| Error::data(&s.utterance_id, "reference utterance is not in the corpus"))?;
            let utt = &corpus.utterances[u];
            if s.start >= s.end || s.end > utt.n_frames() {
                return Err(Error::data(&s.utterance_id, format!("bad reference span {}..{}", s.start, s.end)));
            }
            Ok(utt.slice(s.start, s.end))
        })
        .collect()
}

/// Trains the embedding on `reference` and embeds every candidate.
pub fn embed_corpus(
    corpus: &Corpus,
    reference: &[SegmentSpan],
    config: &PipelineConfig,
    seed: u64,
) -> Result<(EmbeddingModel, EmbeddingCache)> {
    let e = &config.embed;
    let slices = reference_slices(corpus, reference)?;
    let mut model = train_eigenmaps(&slices, e.knn, e.sigma_k, e.xi, e.dim)?;
    model.jitter_scale = e.jitter_scale;
    let cache = build_cache(&mut model, corpus, &config.constraints, e.sigma_e_sample, seed)?;
    Ok((model, cache))
}

/// Metrics of every chain plus the mapping matrix of each.
#[derive(Debug, Clone)]
pub struct ChainMetrics {
    pub report: MetricsReport,
    pub mapping: MappingMatrix,
}

pub struct IterationResult {
    /// 1-based.
    pub iteration: usize,
    pub reference: Vec<SegmentSpan>,
    pub model: EmbeddingModel,
    pub cache: EmbeddingCache,
    pub sampler: SamplerResult,
    /// Present when the corpus has ground truth.
    pub metrics: Option<Vec<ChainMetrics>>,
}

impl IterationResult {
    /// Mean of each metric over chains.
    pub fn mean_metrics(&self) -> Option<MetricsReport> {
        self.metrics.as_deref().map(mean_metrics)
    }

    /// Report of the chain whose purity is the (lower) median.
    pub fn median_chain(&self) -> Option<&ChainMetrics> {
        let m = self.metrics.as_ref()?;
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.sort_by(|&a, &b| m[a].report.purity.total_cmp(&m[b].report.purity).then(a.cmp(&b)));
        order.get((m.len() - 1) / 2).map(|&i| &m[i])
    }
}

fn mean_report<'a>(reports: impl Iterator<Item = &'a MetricsReport>) -> MetricsReport {
    let reports: Vec<&MetricsReport> = reports.collect();
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let mean_count = |f: &dyn Fn(&MetricsReport) -> usize| (reports.iter().map(|r| f(r)).sum::<usize>() as f64 / n).round() as usize;
    MetricsReport {
        purity: mean(&|r| r.purity),
        wer: mean(&|r| r.wer),
        substitutions: mean_count(&|r| r.substitutions),
        deletions: mean_count(&|r| r.deletions),
        insertions: mean_count(&|r| r.insertions),
        n_tokens: reports.first().map_or(0, |r| r.n_tokens),
        boundary_precision: mean(&|r| r.boundary_precision),
        boundary_recall: mean(&|r| r.boundary_recall),
        boundary_f: mean(&|r| r.boundary_f),
        clusters_covering_90pct: mean_count(&|r| r.clusters_covering_90pct),
    }
}

/// Scores every chain when the corpus has alignments.
pub fn chain_metrics(sampler: &SamplerResult, corpus: &Corpus, tol_ms: f64) -> Result<Option<Vec<ChainMetrics>>> {
    if !corpus.has_alignments() {
        return Ok(None);
    }
    sampler
        .chains
        .iter()
        .map(|c| evaluate(&c.segmentations, corpus, tol_ms).map(|(report, mapping)| ChainMetrics { report, mapping }))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Mean of each metric over chains.
pub fn mean_metrics(metrics: &[ChainMetrics]) -> MetricsReport {
    mean_report(metrics.iter().map(|c| &c.report))
}

/// Runs all iterations; `on_iteration` sees each result as soon as it exists.
pub fn run_pipeline(
    corpus: &Corpus,
    config: &PipelineConfig,
    mut on_iteration: impl FnMut(&IterationResult) -> Result<()>,
) -> Result<Vec<IterationResult>> {
    config.validate()?;
    let hyper = config.gmm.hyper(config.embed.dim)?;
    let mut results: Vec<IterationResult> = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let mut rng = rng_from(stream_seed(config.seed, "reference", it as u64));
        let reference = match results.last() {
            None => initial_reference_set(corpus, config.embed.n_ref, &config.constraints, &mut rng)?,
            Some(prev) => {
                let best = &prev.sampler.chains[prev.sampler.best_chain()];
                refine_reference_set(best, &best.model, &prev.cache, corpus, config, &mut rng)?
            }
        };
        log::info!("iteration {it}: training embedding on {} exemplars", reference.len());
        let (model, cache) = embed_corpus(corpus, &reference, config, stream_seed(config.seed, "cache", it as u64))?;
        log::info!("iteration {it}: {} candidate embeddings", cache.total_entries());
        let sampler_config = SamplerConfig {
            master_seed: stream_seed(config.seed, "sampler", it as u64),
            ..config.sampler.clone()
        };
        let sampler = run_sampler(&cache, &hyper, &sampler_config)?;
        let metrics = chain_metrics(&sampler, corpus, config.boundary_tolerance_ms)?;
        let result = IterationResult {
            iteration: it,
            reference,
            model,
            cache,
            sampler,
            metrics,
        };
        on_iteration(&result)?;
        results.push(result);
    }
    Ok(results)
}
