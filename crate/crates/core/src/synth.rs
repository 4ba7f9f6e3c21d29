//! Synthetic corpora with exact ground truth.
//!
//! Every word type is a smooth random-walk trajectory with unit-norm frames.
//! A token is its type's trajectory linearly time-warped to a random duration,
//! plus white frame noise and an optional per-speaker offset.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignedWord, Corpus, FrameSequence};
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream_seed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_types: usize,
    pub feat_dim: usize,
    pub n_utts: usize,
    pub words_per_utt: (usize, usize),
    pub dur_frames: (usize, usize),
    /// Token durations are multiples of this many frames.
    pub dur_step_frames: usize,
    pub prototype_frames: usize,
    /// Standard deviation of each random-walk step.
    pub prototype_smoothness: f64,
    pub frame_noise_std: f64,
    pub speaker_count: usize,
    pub speaker_offset_std: f64,
    pub frame_shift_ms: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_types: 5,
            feat_dim: 15,
            n_utts: 50,
            words_per_utt: (3, 8),
            dur_frames: (25, 60),
            dur_step_frames: 2,
            prototype_frames: 40,
            prototype_smoothness: 0.3,
            frame_noise_std: 0.1,
            speaker_count: 1,
            speaker_offset_std: 0.0,
            frame_shift_ms: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.n_types == 0 || self.feat_dim == 0 || self.n_utts == 0 || self.speaker_count == 0 {
            return bad("counts and dimensions must be positive");
        }
        if self.words_per_utt.0 == 0 || self.words_per_utt.0 > self.words_per_utt.1 {
            return bad("words_per_utt must be a non-empty range of positive counts");
        }
        if self.dur_frames.0 == 0 || self.dur_frames.0 > self.dur_frames.1 {
            return bad("dur_frames must be a non-empty range of positive lengths");
        }
        if self.dur_step_frames == 0 || self.durations().is_empty() {
            return bad("no duration in dur_frames is a multiple of dur_step_frames");
        }
        if self.prototype_frames < 2 {
            return bad("prototype_frames must be at least 2");
        }
        let stds = [self.prototype_smoothness, self.frame_noise_std, self.speaker_offset_std];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("standard deviations must be finite and non-negative");
        }
        if !(self.frame_shift_ms.is_finite() && self.frame_shift_ms > 0.0) {
            return bad("frame_shift_ms must be positive");
        }
        Ok(())
    }

    fn durations(&self) -> Vec<usize> {
        let step = self.dur_step_frames.max(1);
        (self.dur_frames.0..=self.dur_frames.1).filter(|d| d % step == 0).collect()
    }

    pub fn token_name(k: usize) -> String {
        format!("w{k}")
    }
}

fn gaussian_vec(rng: &mut SeededRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Row-major `prototype_frames x feat_dim` trajectory with unit-norm frames.
pub fn prototype(spec: &SynthSpec, k: usize) -> Vec<f64> {
    let mut rng = rng_from(stream_seed(spec.seed, "prototype", k as u64));
    let d = spec.feat_dim;
    let mut pos = gaussian_vec(&mut rng, d, 1.0);
    let mut out = Vec::with_capacity(spec.prototype_frames * d);
    for t in 0..spec.prototype_frames {
        if t > 0 {
            for (p, s) in pos.iter_mut().zip(gaussian_vec(&mut rng, d, spec.prototype_smoothness)) {
                *p += s;
            }
        }
        let n = crate::dtw::norm(&pos);
        out.extend(pos.iter().map(|p| if n > 0.0 { p / n } else { 0.0 }));
    }
    out
}

/// Linear time warp of a trajectory to `len` frames.
pub fn warp(proto: &[f64], dim: usize, len: usize) -> Vec<f64> {
    let src = proto.len() / dim;
    let mut out = Vec::with_capacity(len * dim);
    for t in 0..len {
        let x = if len == 1 {
            0.0
        } else {
            t as f64 * (src - 1) as f64 / (len - 1) as f64
        };
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let w = x - lo as f64;
        for j in 0..dim {
            out.push((1.0 - w) * proto[lo * dim + j] + w * proto[hi * dim + j]);
        }
    }
    out
}

/// Generates the corpus described by `spec`, with transcripts and alignments.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.feat_dim;
    let prototypes: Vec<Vec<f64>> = (0..spec.n_types).map(|k| prototype(spec, k)).collect();
    let offsets: Vec<Vec<f64>> = (0..spec.speaker_count)
        .map(|s| {
            let mut rng = rng_from(stream_seed(spec.seed, "speaker", s as u64));
            gaussian_vec(&mut rng, d, spec.speaker_offset_std)
        })
        .collect();
    let durations = spec.durations();

    let utterances: Vec<(FrameSequence, Vec<AlignedWord>)> = (0..spec.n_utts)
        .into_par_iter()
        .map(|u| {
            let mut rng = rng_from(stream_seed(spec.seed, "utterance", u as u64));
            let offset = &offsets[u % spec.speaker_count];
            let n_words = rng.random_range(spec.words_per_utt.0..=spec.words_per_utt.1);
            let mut frames = Vec::new();
            let mut words = Vec::with_capacity(n_words);
            let mut cursor = 0;
            for _ in 0..n_words {
                let k = rng.random_range(0..spec.n_types);
                let len = durations[rng.random_range(0..durations.len())];
                let token = warp(&prototypes[k], d, len);
                for (i, v) in token.iter().enumerate() {
                    let noise = spec.frame_noise_std * rng.sample::<f64, _>(StandardNormal);
                    frames.push(v + noise + offset[i % d]);
                }
                words.push(AlignedWord {
                    token: SynthSpec::token_name(k),
                    start_frame: cursor,
                    end_frame: cursor + len,
                });
                cursor += len;
            }
            let seq = FrameSequence::new(format!("utt{u:04}"), frames, d, spec.frame_shift_ms)?;
            Ok((seq, words))
        })
        .collect::<Result<_>>()?;

    let (seqs, aligns): (Vec<_>, Vec<_>) = utterances.into_iter().unzip();
    let transcripts = aligns
        .iter()
        .map(|a: &Vec<AlignedWord>| Some(a.iter().map(|w| w.token.clone()).collect()))
        .collect();
    Corpus::new(seqs, transcripts, aligns.into_iter().map(Some).collect())
}
