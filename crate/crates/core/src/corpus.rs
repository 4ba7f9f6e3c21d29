//! Corpora of feature sequences, their ground truth, and the candidate word
//! segments the sampler is allowed to hypothesize.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;

pub const DEFAULT_FRAME_SHIFT_MS: f64 = 10.0;

/// One utterance worth of acoustic features, stored row-major as `n_frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub utterance_id: String,
    frames: Vec<f64>,
    n_frames: usize,
    dim: usize,
    pub frame_shift_ms: f64,
}

impl FrameSequence {
    pub fn new(
        utterance_id: impl Into<String>,
        frames: Vec<f64>,
        dim: usize,
        frame_shift_ms: f64,
    ) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if dim == 0 {
            return Err(Error::data(utterance_id, "feature dimension must be at least 1"));
        }
        if frames.is_empty() || frames.len() % dim != 0 {
            return Err(Error::data(
                utterance_id,
                format!("{} values do not form whole frames of dim {dim}", frames.len()),
            ));
        }
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(Error::data(utterance_id, "frame shift must be positive"));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(
                utterance_id,
                format!("non-finite feature value at frame {}", pos / dim),
            ));
        }
        let n_frames = frames.len() / dim;
        Ok(Self {
            utterance_id,
            frames,
            n_frames,
            dim,
            frame_shift_ms,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    /// Frames `start..end`. Panics when the range is out of bounds.
    pub fn slice(&self, start: usize, end: usize) -> FrameSlice<'_> {
        assert!(start <= end && end <= self.n_frames, "slice {start}..{end} out of range");
        FrameSlice {
            data: &self.frames[start * self.dim..end * self.dim],
            dim: self.dim,
        }
    }

    pub fn full(&self) -> FrameSlice<'_> {
        self.slice(0, self.n_frames)
    }
}

/// Borrowed run of consecutive frames.
#[derive(Debug, Clone, Copy)]
pub struct FrameSlice<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> FrameSlice<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Self { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.data.chunks_exact(self.dim)
    }

    pub fn sub(&self, start: usize, end: usize) -> FrameSlice<'a> {
        FrameSlice {
            data: &self.data[start * self.dim..end * self.dim],
            dim: self.dim,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }
}

/// A ground-truth word with its frame extent `[start_frame, end_frame)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub token: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Ordered utterances plus whatever ground truth is available for them.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub utterances: Vec<FrameSequence>,
    pub transcripts: Vec<Option<Vec<String>>>,
    pub alignments: Vec<Option<Vec<AlignedWord>>>,
}

impl Corpus {
    /// Builds and validates a corpus. `transcripts` and `alignments` must be
    /// empty or have one entry per utterance.
    pub fn new(
        utterances: Vec<FrameSequence>,
        transcripts: Vec<Option<Vec<String>>>,
        alignments: Vec<Option<Vec<AlignedWord>>>,
    ) -> Result<Self> {
        let n = utterances.len();
        let transcripts = if transcripts.is_empty() { vec![None; n] } else { transcripts };
        let alignments = if alignments.is_empty() { vec![None; n] } else { alignments };
        if transcripts.len() != n || alignments.len() != n {
            return Err(Error::Format(
                "ground truth lists must match the utterance count".into(),
            ));
        }
        let corpus = Self {
            utterances,
            transcripts,
            alignments,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, utt) in self.utterances.iter().enumerate() {
            if !seen.insert(utt.utterance_id.as_str()) {
                return Err(Error::data(&utt.utterance_id, "duplicate utterance id"));
            }
            if let Some(words) = &self.alignments[i] {
                validate_alignment(utt, words)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn index_of(&self, utterance_id: &str) -> Option<usize> {
        self.utterances
            .iter()
            .position(|u| u.utterance_id == utterance_id)
    }

    pub fn has_alignments(&self) -> bool {
        !self.is_empty() && self.alignments.iter().all(Option::is_some)
    }

    pub fn has_transcripts(&self) -> bool {
        !self.is_empty()
            && self
                .transcripts
                .iter()
                .zip(&self.alignments)
                .all(|(t, a)| t.is_some() || a.is_some())
    }

    /// Reference tokens of utterance `i`, falling back to the alignment tokens.
    pub fn transcript(&self, i: usize) -> Option<Vec<String>> {
        match (&self.transcripts[i], &self.alignments[i]) {
            (Some(t), _) => Some(t.clone()),
            (None, Some(a)) => Some(a.iter().map(|w| w.token.clone()).collect()),
            _ => None,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(FrameSequence::n_frames).sum()
    }
}

fn validate_alignment(utt: &FrameSequence, words: &[AlignedWord]) -> Result<()> {
    let mut cursor = 0;
    for w in words {
        if w.start_frame >= w.end_frame {
            return Err(Error::data(
                &utt.utterance_id,
                format!("empty alignment span for '{}'", w.token),
            ));
        }
        if w.start_frame < cursor {
            return Err(Error::data(
                &utt.utterance_id,
                format!("alignment span for '{}' overlaps or is out of order", w.token),
            ));
        }
        if w.end_frame > utt.n_frames() {
            return Err(Error::data(
                &utt.utterance_id,
                format!(
                    "alignment span for '{}' ends at {} past {} frames",
                    w.token,
                    w.end_frame,
                    utt.n_frames()
                ),
            ));
        }
        cursor = w.end_frame;
    }
    Ok(())
}

/// One row of the JSON manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub n_frames: usize,
    pub frame_shift_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<ManifestWord>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestWord {
    pub token: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Reads a manifest and every feature file it references (paths relative to
/// the manifest's directory).
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    let mut utterances = Vec::with_capacity(entries.len());
    let mut transcripts = Vec::with_capacity(entries.len());
    let mut alignments = Vec::with_capacity(entries.len());
    for entry in entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::data(&entry.id, "duplicate utterance id"));
        }
        let path = base.join(&entry.features);
        let bytes = fs::read(&path).map_err(|e| {
            Error::data(&entry.id, format!("cannot read {}: {e}", path.display()))
        })?;
        let (n_frames, dim, values) =
            format::decode_features(&bytes).map_err(|e| Error::data(&entry.id, e.to_string()))?;
        if n_frames != entry.n_frames {
            return Err(Error::data(
                &entry.id,
                format!(
                    "manifest says {} frames but {} holds {n_frames}",
                    entry.n_frames,
                    path.display()
                ),
            ));
        }
        let frames = values.into_iter().map(f64::from).collect();
        utterances.push(FrameSequence::new(
            entry.id.clone(),
            frames,
            dim,
            entry.frame_shift_ms,
        )?);
        transcripts.push(entry.transcript);
        alignments.push(entry.alignment.map(|ws| {
            ws.into_iter()
                .map(|w| AlignedWord {
                    token: w.token,
                    start_frame: w.start_frame,
                    end_frame: w.end_frame,
                })
                .collect()
        }));
    }
    Corpus::new(utterances, transcripts, alignments)
}

/// Writes `corpus` as a manifest plus one feature file per utterance under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let rel = PathBuf::from("features").join(format!("{}.feat", utt.utterance_id));
        let path = dir.join(&rel);
        let bytes = format::encode_features(utt);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: utt.utterance_id.clone(),
            features: rel,
            n_frames: utt.n_frames(),
            frame_shift_ms: utt.frame_shift_ms,
            transcript: corpus.transcripts[i].clone(),
            alignment: corpus.alignments[i].as_ref().map(|ws| {
                ws.iter()
                    .map(|w| ManifestWord {
                        token: w.token.clone(),
                        start_frame: w.start_frame,
                        end_frame: w.end_frame,
                    })
                    .collect()
            }),
        });
    }
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Frame span `[start, end)` inside one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// A span tagged with its utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub utterance_id: String,
    pub start: usize,
    pub end: usize,
}

impl SegmentSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Boundary grid and word duration limits, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConstraints {
    pub grid_ms: f64,
    pub min_dur_ms: f64,
    pub max_dur_ms: f64,
}

impl Default for SegmentConstraints {
    fn default() -> Self {
        Self {
            grid_ms: 20.0,
            min_dur_ms: 200.0,
            max_dur_ms: 1000.0,
        }
    }
}

/// Constraints converted to frame counts for one frame shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameConstraints {
    pub grid: usize,
    pub min_len: usize,
    pub max_len: usize,
}

const COMMENSURATE_TOL: f64 = 1e-9;

impl SegmentConstraints {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.grid_ms) || !ok(self.min_dur_ms) || !ok(self.max_dur_ms) {
            return Err(Error::Config("grid and durations must be positive".into()));
        }
        if self.min_dur_ms > self.max_dur_ms {
            return Err(Error::Config(format!(
                "min duration {} ms exceeds max duration {} ms",
                self.min_dur_ms, self.max_dur_ms
            )));
        }
        Ok(())
    }

    pub fn in_frames(&self, frame_shift_ms: f64) -> Result<FrameConstraints> {
        self.validate()?;
        let ratio = self.grid_ms / frame_shift_ms;
        let grid = ratio.round();
        if grid < 1.0 || (ratio - grid).abs() > COMMENSURATE_TOL * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "grid of {} ms is not a whole multiple of the {} ms frame shift",
                self.grid_ms, frame_shift_ms
            )));
        }
        let min_len = ((self.min_dur_ms / frame_shift_ms) - COMMENSURATE_TOL).ceil().max(1.0);
        let max_len = ((self.max_dur_ms / frame_shift_ms) + COMMENSURATE_TOL).floor();
        if max_len < min_len {
            return Err(Error::Config(
                "no whole frame count satisfies the duration limits".into(),
            ));
        }
        Ok(FrameConstraints {
            grid: grid as usize,
            min_len: min_len as usize,
            max_len: max_len as usize,
        })
    }
}

impl FrameConstraints {
    /// Whether frame `t` may be a word boundary in an utterance of `n_frames`.
    pub fn is_boundary(&self, t: usize, n_frames: usize) -> bool {
        t == n_frames || (t < n_frames && t % self.grid == 0)
    }

    /// All legal spans, ordered by `(start, end)`. An utterance shorter than the
    /// minimum word duration gets the single full span.
    pub fn spans(&self, n_frames: usize) -> Vec<Span> {
        if n_frames < self.min_len {
            return vec![Span::new(0, n_frames)];
        }
        let mut points: Vec<usize> = (0..n_frames).step_by(self.grid).collect();
        points.push(n_frames);
        let mut out = Vec::new();
        for (i, &a) in points.iter().enumerate() {
            for &b in &points[i + 1..] {
                let len = b - a;
                if len > self.max_len {
                    break;
                }
                if len >= self.min_len {
                    out.push(Span::new(a, b));
                }
            }
        }
        out
    }

    /// Whether `span` is admissible in an utterance of `n_frames`.
    pub fn allows(&self, span: Span, n_frames: usize) -> bool {
        if n_frames < self.min_len {
            return span.start == 0 && span.end == n_frames;
        }
        span.start < span.end
            && span.end <= n_frames
            && self.is_boundary(span.start, n_frames)
            && span.start < n_frames
            && self.is_boundary(span.end, n_frames)
            && (self.min_len..=self.max_len).contains(&span.len())
    }
}

/// Candidate word segments of `utt` under `constraints`.
pub fn candidate_segments(
    utt: &FrameSequence,
    constraints: &SegmentConstraints,
) -> Result<Vec<SegmentSpan>> {
    let fc = constraints.in_frames(utt.frame_shift_ms)?;
    Ok(fc
        .spans(utt.n_frames())
        .into_iter()
        .map(|s| SegmentSpan {
            utterance_id: utt.utterance_id.clone(),
            start: s.start,
            end: s.end,
        })
        .collect())
}

/// Sorted word-internal boundaries for one alignment: every word start except
/// the first and every word end except the last.
pub fn internal_boundaries(words: &[AlignedWord]) -> Vec<usize> {
    let n = words.len();
    let mut out: Vec<usize> = words
        .iter()
        .enumerate()
        .flat_map(|(i, w)| {
            let start = (i > 0).then_some(w.start_frame);
            let end = (i + 1 < n).then_some(w.end_frame);
            start.into_iter().chain(end)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Internal ground-truth boundaries for every utterance.
pub fn ground_truth_boundaries(corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    corpus
        .utterances
        .iter()
        .zip(&corpus.alignments)
        .map(|(utt, a)| {
            a.as_deref()
                .map(internal_boundaries)
                .ok_or_else(|| Error::MissingGroundTruth(format!("no alignment for {}", utt.utterance_id)))
        })
        .collect()
}
