//! Blocked Gibbs sampler over segmentations.
//!
//! Each step takes one utterance out of the acoustic model, computes forward
//! variables over its candidate boundaries, samples a new segmentation
//! backwards, and then samples a component for every new segment.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{EmbeddingCache, UtteranceEmbeddings};
use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, sample_log_weights, GmmHyper, GmmSnapshot, GmmState, ItemId, PredictiveTable};
use crate::rng::{rng_from, stream_seed, SeededRng};

/// Success probability of the geometric draw used for the initial segmentation.
const INIT_GEOMETRIC_P: f64 = 0.2;

/// A run of Gibbs iterations at one inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealStage {
    pub iterations: usize,
    pub inv_temp: f64,
}

/// `stages` stages of `per_stage` iterations with the inverse temperature
/// rising linearly from `from` to `to`.
pub fn linear_schedule(stages: usize, per_stage: usize, from: f64, to: f64) -> Vec<AnnealStage> {
    (0..stages)
        .map(|i| AnnealStage {
            iterations: per_stage,
            inv_temp: if stages == 1 {
                to
            } else {
                from + (to - from) * i as f64 / (stages - 1) as f64
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Iterations that resample components only, before any boundary moves.
    pub burn_in: usize,
    pub anneal: Vec<AnnealStage>,
    pub chains: usize,
    pub master_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            burn_in: 25,
            anneal: linear_schedule(5, 5, 0.01, 1.0),
            chains: 5,
            master_seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Number of boundary-sampling iterations.
    pub fn gibbs_iterations(&self) -> usize {
        self.anneal.iter().map(|s| s.iterations).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        if let Some(s) = self.anneal.iter().find(|s| !(s.inv_temp > 0.0 && s.inv_temp <= 1.0)) {
            return Err(Error::Config(format!(
                "inverse temperature {} outside (0, 1]",
                s.inv_temp
            )));
        }
        Ok(())
    }
}

/// One segment of a decoded utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedSpan {
    pub start: usize,
    pub end: usize,
    pub cluster: usize,
}

/// A full segmentation of one utterance with a component per segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub utterance_id: String,
    pub spans: Vec<DecodedSpan>,
}

impl Segmentation {
    /// Checks that the spans tile `[0, n_frames)` without gaps or overlaps.
    pub fn check_tiling(&self, n_frames: usize) -> Result<()> {
        let mut cursor = 0;
        for s in &self.spans {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::data(
                    &self.utterance_id,
                    format!("span {}..{} breaks the tiling at frame {cursor}", s.start, s.end),
                ));
            }
            cursor = s.end;
        }
        if cursor != n_frames {
            return Err(Error::data(
                &self.utterance_id,
                format!("segmentation ends at {cursor} of {n_frames} frames"),
            ));
        }
        Ok(())
    }

    /// Boundaries between consecutive segments.
    pub fn internal_boundaries(&self) -> Vec<usize> {
        self.spans.iter().skip(1).map(|s| s.start).collect()
    }
}

/// Per-iteration chain summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub iteration: usize,
    pub chain: usize,
    pub inv_temp: f64,
    pub occupied_components: usize,
    pub total_log_score: f64,
}

#[derive(Debug, Clone)]
pub struct ChainResult {
    pub chain: usize,
    pub seed: u64,
    pub segmentations: Vec<Segmentation>,
    pub diagnostics: Vec<Diagnostic>,
    pub model: GmmState,
}

impl ChainResult {
    pub fn final_log_score(&self) -> f64 {
        self.diagnostics
            .last()
            .map_or(f64::NEG_INFINITY, |d| d.total_log_score)
    }

    pub fn snapshot(&self) -> GmmSnapshot {
        self.model.snapshot(
            self.segmentations
                .iter()
                .map(|s| s.spans.iter().map(|d| d.cluster).collect())
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SamplerResult {
    pub chains: Vec<ChainResult>,
}

impl SamplerResult {
    /// Index of the chain with the highest final log score (first on ties).
    pub fn best_chain(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.chains.iter().enumerate() {
            if c.final_log_score() > self.chains[best].final_log_score() {
                best = i;
            }
        }
        best
    }
}

/// `j * log p(x | rest)` for every candidate of `utt`, `j` the frame count.
pub fn segment_scores(utt: &UtteranceEmbeddings, table: &PredictiveTable) -> Vec<f64> {
    (0..utt.len())
        .map(|i| utt.spans[i].len() as f64 * table.log_marginal(utt.vector(i)))
        .collect()
}

/// Score of one cached span.
pub fn segment_log_score(
    utt: &UtteranceEmbeddings,
    model: &GmmState,
    span: crate::corpus::Span,
) -> Result<f64> {
    let i = utt.lookup(span).ok_or_else(|| {
        Error::data(
            &utt.utterance_id,
            format!("span {}..{} is not cached", span.start, span.end),
        )
    })?;
    Ok(span.len() as f64 * model.log_marginal(utt.vector(i)))
}

/// Log forward variables `alpha[0..=T]`; `alpha[0] = 0` and frames that are
/// not a legal boundary hold `-inf`.
pub fn forward_pass(utt: &UtteranceEmbeddings, scores: &[f64]) -> Result<Vec<f64>> {
    let t_end = utt.n_frames;
    let mut alpha = vec![f64::NEG_INFINITY; t_end + 1];
    alpha[0] = 0.0;
    let mut terms = Vec::new();
    for t in 1..=t_end {
        terms.clear();
        for &i in utt.ending_at(t) {
            let prev = alpha[utt.spans[i].start];
            if prev > f64::NEG_INFINITY {
                terms.push(scores[i] + prev);
            }
        }
        if !terms.is_empty() {
            alpha[t] = log_sum_exp(&terms);
        }
    }
    if !(alpha[t_end] > f64::NEG_INFINITY) {
        return Err(Error::Numerical(format!(
            "utterance {} has no legal segmentation",
            utt.utterance_id
        )));
    }
    Ok(alpha)
}

/// Samples a segmentation right to left; weights are
/// `exp(inv_temp * (score + alpha[start]))`. Returns candidate indices in
/// left-to-right order.
pub fn backward_sample<R: Rng + ?Sized>(
    alpha: &[f64],
    utt: &UtteranceEmbeddings,
    scores: &[f64],
    inv_temp: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if alpha.len() != utt.n_frames + 1 {
        return Err(Error::Numerical("forward variables do not match the utterance".into()));
    }
    let mut t = utt.n_frames;
    let mut out = Vec::new();
    let mut cands = Vec::new();
    let mut weights = Vec::new();
    while t > 0 {
        cands.clear();
        weights.clear();
        for &i in utt.ending_at(t) {
            let prev = alpha[utt.spans[i].start];
            if prev > f64::NEG_INFINITY {
                cands.push(i);
                weights.push(scores[i] + prev);
            }
        }
        if cands.is_empty() {
            return Err(Error::Numerical(format!(
                "inconsistent forward variables at frame {t} of {}",
                utt.utterance_id
            )));
        }
        let pick = cands[sample_log_weights(&weights, inv_temp, rng)];
        out.push(pick);
        t = utt.spans[pick].start;
    }
    out.reverse();
    Ok(out)
}

/// Random initial segmentation: left to right, each segment ends at the
/// `G`-th legal end (clamped), `G` geometric, considering only ends from which
/// the rest of the utterance can still be tiled.
pub fn random_segmentation<R: Rng + ?Sized>(utt: &UtteranceEmbeddings, rng: &mut R) -> Result<Vec<usize>> {
    let t_end = utt.n_frames;
    let mut reachable = vec![false; t_end + 1];
    reachable[t_end] = true;
    for i in (0..utt.len()).rev() {
        let s = utt.spans[i];
        if reachable[s.end] {
            reachable[s.start] = true;
        }
    }
    if !reachable[0] {
        return Err(Error::Numerical(format!(
            "utterance {} has no legal segmentation",
            utt.utterance_id
        )));
    }
    let mut out = Vec::new();
    let mut t = 0;
    let mut next = 0; // spans are sorted by (start, end)
    while t < t_end {
        while utt.spans[next].start < t {
            next += 1;
        }
        let options: Vec<usize> = (next..utt.len())
            .take_while(|&i| utt.spans[i].start == t)
            .filter(|&i| reachable[utt.spans[i].end])
            .collect();
        let mut g = 0;
        while g + 1 < options.len() && rng.random::<f64>() >= INIT_GEOMETRIC_P {
            g += 1;
        }
        let pick = options[g];
        out.push(pick);
        t = utt.spans[pick].end;
    }
    Ok(out)
}

/// Mutable state of one chain.
pub struct ChainState<'a> {
    cache: &'a EmbeddingCache,
    pub model: GmmState,
    /// Chosen candidate indices per utterance.
    pub segments: Vec<Vec<usize>>,
    items: Vec<Vec<ItemId>>,
    pub clusters: Vec<Vec<usize>>,
}

impl<'a> ChainState<'a> {
    /// Random segmentation with uniformly random components.
    pub fn initialize<R: Rng + ?Sized>(cache: &'a EmbeddingCache, hyper: &GmmHyper, rng: &mut R) -> Result<Self> {
        if cache.dim != hyper.dim() {
            return Err(Error::Config(format!(
                "cache embeddings have dim {} but the model expects {}",
                cache.dim,
                hyper.dim()
            )));
        }
        let mut model = GmmState::new(hyper.clone())?;
        let mut segments = Vec::with_capacity(cache.utterances.len());
        let mut items = Vec::with_capacity(cache.utterances.len());
        let mut clusters = Vec::with_capacity(cache.utterances.len());
        for utt in &cache.utterances {
            let seg = random_segmentation(utt, rng)?;
            let mut ids = Vec::with_capacity(seg.len());
            let mut ks = Vec::with_capacity(seg.len());
            for &i in &seg {
                let k = rng.random_range(0..hyper.k);
                ids.push(model.add(k, utt.vector(i))?);
                ks.push(k);
            }
            segments.push(seg);
            items.push(ids);
            clusters.push(ks);
        }
        Ok(Self {
            cache,
            model,
            segments,
            items,
            clusters,
        })
    }

    /// Resamples utterance `u`: out of the model, optionally new boundaries,
    /// then a component for every segment.
    pub fn resegment_utterance<R: Rng + ?Sized>(
        &mut self,
        u: usize,
        inv_temp: f64,
        sample_boundaries: bool,
        rng: &mut R,
    ) -> Result<()> {
        let utt = &self.cache.utterances[u];
        for id in self.items[u].drain(..) {
            self.model.remove(id)?;
        }
        if sample_boundaries {
            let table = self.model.predictive_table();
            let scores = segment_scores(utt, &table);
            let alpha = forward_pass(utt, &scores)?;
            self.segments[u] = backward_sample(&alpha, utt, &scores, inv_temp, rng)?;
        }
        self.clusters[u].clear();
        for &i in &self.segments[u] {
            let (k, id) = self.model.sample_assignment(utt.vector(i), rng)?;
            self.items[u].push(id);
            self.clusters[u].push(k);
        }
        Ok(())
    }

    /// One sweep over all utterances in a fresh random order.
    pub fn sweep<R: Rng + ?Sized>(&mut self, inv_temp: f64, sample_boundaries: bool, rng: &mut R) -> Result<()> {
        let mut order: Vec<usize> = (0..self.cache.utterances.len()).collect();
        order.shuffle(rng);
        for u in order {
            self.resegment_utterance(u, inv_temp, sample_boundaries, rng)?;
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    /// Duration-weighted collapsed joint: tokens are added to an empty model
    /// in corpus order and each contributes `j * log p(x, z | earlier tokens)`.
    pub fn total_log_score(&self) -> Result<f64> {
        let mut fresh = GmmState::new(self.model.hyper().clone())?;
        let mut total = 0.0;
        for (u, utt) in self.cache.utterances.iter().enumerate() {
            for (&i, &k) in self.segments[u].iter().zip(&self.clusters[u]) {
                let x = utt.vector(i);
                let lp = fresh.log_prior_z(k, None) + fresh.log_post_predictive(k, x, None);
                total += utt.spans[i].len() as f64 * lp;
                fresh.add(k, x)?;
            }
        }
        Ok(total)
    }

    pub fn segmentations(&self) -> Vec<Segmentation> {
        self.cache
            .utterances
            .iter()
            .enumerate()
            .map(|(u, utt)| Segmentation {
                utterance_id: utt.utterance_id.clone(),
                spans: self.segments[u]
                    .iter()
                    .zip(&self.clusters[u])
                    .map(|(&i, &cluster)| DecodedSpan {
                        start: utt.spans[i].start,
                        end: utt.spans[i].end,
                        cluster,
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Runs one chain to completion.
pub fn run_chain(cache: &EmbeddingCache, hyper: &GmmHyper, config: &SamplerConfig, chain: usize) -> Result<ChainResult> {
    let seed = stream_seed(config.master_seed, "chain", chain as u64);
    let mut rng: SeededRng = rng_from(seed);
    let mut state = ChainState::initialize(cache, hyper, &mut rng)?;
    let mut diagnostics = Vec::with_capacity(config.burn_in + config.gibbs_iterations());
    let record = |state: &ChainState<'_>, inv_temp: f64, diagnostics: &mut Vec<Diagnostic>| -> Result<()> {
        diagnostics.push(Diagnostic {
            iteration: diagnostics.len(),
            chain,
            inv_temp,
            occupied_components: state.model.occupied(),
            total_log_score: state.total_log_score()?,
        });
        Ok(())
    };
    for _ in 0..config.burn_in {
        state.sweep(1.0, false, &mut rng)?;
        record(&state, 1.0, &mut diagnostics)?;
    }
    for stage in &config.anneal {
        for _ in 0..stage.iterations {
            state.sweep(stage.inv_temp, true, &mut rng)?;
            record(&state, stage.inv_temp, &mut diagnostics)?;
        }
        log::debug!(
            "chain {chain}: stage 1/gamma={} done, {} components occupied",
            stage.inv_temp,
            state.model.occupied()
        );
    }
    Ok(ChainResult {
        chain,
        seed,
        segmentations: state.segmentations(),
        diagnostics,
        model: state.model,
    })
}

/// Runs every chain; chains are independent and may run concurrently.
pub fn run_sampler(cache: &EmbeddingCache, hyper: &GmmHyper, config: &SamplerConfig) -> Result<SamplerResult> {
    config.validate()?;
    hyper.validate()?;
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(cache, hyper, config, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplerResult { chains })
}
