//! Streams of segments, (L, O) context-window selection, synthetic corpus
//! generation with a controllable context dependence, and the on-disk
//! formats (`manifest.tsv` + CASG segment files).

use crate::losses::{CtcTarget, LossError};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid context window: L={length}, O={offset} does not satisfy O ≤ 0 ≤ O+L−1")]
    InvalidWindow { length: usize, offset: i64 },
    #[error("segment index {index} out of range for stream of length {stream_len}")]
    IndexOutOfRange { index: usize, stream_len: usize },
    #[error("invalid synth config: {detail}")]
    InvalidConfig { detail: String },
    #[error("{path}: bad magic (expected CASG)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated or oversized segment file")]
    Truncated { path: PathBuf },
    #[error("{path}:{line}: malformed manifest row: {detail}")]
    MalformedManifest { path: PathBuf, line: usize, detail: String },
    #[error("missing segment file {path}")]
    MissingSegmentFile { path: PathBuf },
    #[error("inconsistent corpus: {detail}")]
    Inconsistent { detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Target(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.to_path_buf(), source }
}

// ── Vocabulary layout ────────────────────────────────────────────────
// Fixed synthetic layout; blank is always 0, fillers fill the tail.
pub const TOK_AMBIG_A: usize = 1;
pub const TOK_AMBIG_B: usize = 2;
pub const TOK_CUE_TOPIC0: usize = 3;
pub const TOK_CUE_TOPIC1: usize = 4;
pub const TOK_PARITY_0: usize = 5;
pub const TOK_PARITY_1: usize = 6;
pub const FIRST_FILLER: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ctc,
    Classify,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Ctc => "ctc",
            TaskKind::Classify => "class",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ctc" => Ok(TaskKind::Ctc),
            "class" => Ok(TaskKind::Classify),
            other => Err(format!("unknown task {:?} (expected ctc|class)", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentTarget {
    Ctc(CtcTarget),
    Class(usize),
}

impl SegmentTarget {
    pub fn kind(&self) -> TaskKind {
        match self {
            SegmentTarget::Ctc(_) => TaskKind::Ctc,
            SegmentTarget::Class(_) => TaskKind::Classify,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub stream_id: usize,
    pub index: usize,
    /// T×F frame matrix. Values are exactly representable as f32 so disk
    /// round-trips are lossless.
    pub frames: Tensor,
    pub target: SegmentTarget,
}

impl Segment {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    fn content_eq(&self, other: &Segment) -> bool {
        self.stream_id == other.stream_id
            && self.index == other.index
            && self.frames == other.frames
            && self.target == other.target
    }
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub stream_id: usize,
    /// Generation-side metadata; never persisted, never visible to models.
    pub latent_topic: Option<usize>,
    pub segments: Vec<Segment>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub streams: Vec<Stream>,
}

impl Corpus {
    pub fn total_segments(&self) -> usize {
        self.streams.iter().map(|s| s.len()).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.streams.iter().flat_map(|s| s.segments.iter())
    }

    /// Uniform frame dimension, if the corpus is nonempty.
    pub fn frame_dim(&self) -> Option<usize> {
        self.segments().next().map(|s| s.frame_dim())
    }

    /// The single task kind, or None for an empty or mixed corpus.
    pub fn task_kind(&self) -> Option<TaskKind> {
        let mut kinds = self.segments().map(|s| s.target.kind());
        let first = kinds.next()?;
        kinds.all(|k| k == first).then_some(first)
    }

    /// Persisted-content equality: identical streams, segments, frames, and
    /// targets. Latent topics are generation metadata and excluded.
    pub fn content_eq(&self, other: &Corpus) -> bool {
        self.streams.len() == other.streams.len()
            && self.streams.iter().zip(&other.streams).all(|(a, b)| {
                a.stream_id == b.stream_id
                    && a.segments.len() == b.segments.len()
                    && a.segments.iter().zip(&b.segments).all(|(x, y)| x.content_eq(y))
            })
    }

    fn validate(&self) -> Result<()> {
        let frame_dim = self.frame_dim();
        for stream in &self.streams {
            for (pos, seg) in stream.segments.iter().enumerate() {
                if seg.index != pos || seg.stream_id != stream.stream_id {
                    return Err(CorpusError::Inconsistent {
                        detail: format!(
                            "stream {}: segment at position {} carries stream_id {} index {}",
                            stream.stream_id, pos, seg.stream_id, seg.index
                        ),
                    });
                }
                if seg.frame_dim() != frame_dim.expect("nonempty corpus has a frame dim") {
                    return Err(CorpusError::Inconsistent {
                        detail: format!(
                            "stream {} segment {}: frame dim {} differs from {}",
                            stream.stream_id,
                            seg.index,
                            seg.frame_dim(),
                            frame_dim.unwrap()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

// ── Context window ───────────────────────────────────────────────────

/// Window of L consecutive segments starting at offset O from the current
/// one. The current segment always lies inside its own window; the context
/// is the window minus the current segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextWindowSpec {
    length: usize,
    offset: i64,
}

impl ContextWindowSpec {
    pub fn new(length: usize, offset: i64) -> Result<Self> {
        if length < 1 || offset > 0 || offset + length as i64 - 1 < 0 {
            return Err(CorpusError::InvalidWindow { length, offset });
        }
        Ok(ContextWindowSpec { length, offset })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    /// Whether the window reaches past the current segment (L + O > 1).
    pub fn includes_future(&self) -> bool {
        self.length as i64 + self.offset > 1
    }
}

/// Context indices for segment `i`: the window [i+O, i+O+L−1] minus {i},
/// clipped to the stream, ascending.
pub fn select_context_indices(i: usize, spec: &ContextWindowSpec, stream_len: usize) -> Result<Vec<usize>> {
    if i >= stream_len {
        return Err(CorpusError::IndexOutOfRange { index: i, stream_len });
    }
    let start = i as i64 + spec.offset;
    let end = start + spec.length as i64 - 1;
    let mut out = Vec::with_capacity(spec.length.saturating_sub(1));
    for j in start.max(0)..=end.min(stream_len as i64 - 1) {
        let j = j as usize;
        if j != i {
            out.push(j);
        }
    }
    Ok(out)
}

// ── Synthetic generation ─────────────────────────────────────────────

/// Generator parameters for the synthetic two-topic corpus.
///
/// Every stream draws a latent topic. One frame prototype is shared by the
/// ambiguous token pair — its true label is `TOK_AMBIG_A` under topic 0 and
/// `TOK_AMBIG_B` under topic 1 — so the label is undecidable from the frames
/// of one segment unless a topic cue (`TOK_CUE_TOPIC0`/`TOK_CUE_TOPIC1`,
/// present with probability `p_cue` per segment) happens to co-occur.
/// Neighboring segments of the same stream carry independent cue draws,
/// which is what makes context informative.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_streams: usize,
    pub segments_per_stream: usize,
    pub tokens_per_segment_min: usize,
    pub tokens_per_segment_max: usize,
    /// Frames emitted per token; ≥ 2 so every target is CTC-feasible even
    /// with adjacent repeats.
    pub frames_per_token: usize,
    pub frame_dim: usize,
    pub num_filler_tokens: usize,
    /// Probability that a content position holds the ambiguous token.
    pub ambiguous_frac: f64,
    pub p_cue: f64,
    pub noise_stddev: f64,
    pub task: TaskKind,
    pub seed: u64,
}

impl SynthConfig {
    /// Blank + ambiguous pair + two cues + two parity markers + fillers.
    pub fn vocab_size(&self) -> usize {
        FIRST_FILLER + self.num_filler_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(CorpusError::InvalidConfig { detail });
        if self.num_streams == 0 || self.segments_per_stream == 0 {
            return fail("need at least one stream and one segment per stream".into());
        }
        if self.tokens_per_segment_min < 2 || self.tokens_per_segment_max < self.tokens_per_segment_min {
            return fail(format!(
                "tokens per segment range [{}, {}] must satisfy 2 ≤ min ≤ max",
                self.tokens_per_segment_min, self.tokens_per_segment_max
            ));
        }
        if self.frames_per_token < 2 {
            return fail(format!("frames_per_token {} < 2 cannot separate adjacent repeats", self.frames_per_token));
        }
        if self.frame_dim == 0 {
            return fail("frame_dim must be positive".into());
        }
        if self.num_filler_tokens == 0 {
            return fail(format!(
                "vocabulary too small: layout needs blank + 6 special tokens + at least one filler ({} fillers given)",
                self.num_filler_tokens
            ));
        }
        if !(0.0..=1.0).contains(&self.p_cue) {
            return fail(format!("p_cue {} outside [0, 1]", self.p_cue));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_frac) {
            return fail(format!("ambiguous_frac {} outside [0, 1]", self.ambiguous_frac));
        }
        if self.noise_stddev < 0.0 || !self.noise_stddev.is_finite() {
            return fail(format!("noise stddev {} must be finite and ≥ 0", self.noise_stddev));
        }
        Ok(())
    }
}

/// Frame prototypes per token, shared between the ambiguous pair, `None`
/// for blank. Drawn from a dedicated generator stream so they are
/// independent of every per-stream generator.
pub(crate) fn synth_prototypes(cfg: &SynthConfig) -> Result<Vec<Option<Vec<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let vocab = cfg.vocab_size();
    let mut protos: Vec<Option<Vec<f64>>> = vec![None; vocab];
    for (tok, slot) in protos.iter_mut().enumerate().skip(1) {
        if tok == TOK_AMBIG_B {
            continue;
        }
        let proto: Vec<f64> = (0..cfg.frame_dim).map(|_| quantize(rng.random_range(-1.0..1.0))).collect();
        *slot = Some(proto);
    }
    protos[TOK_AMBIG_B] = protos[TOK_AMBIG_A].clone();
    for i in 1..vocab {
        for j in (i + 1)..vocab {
            if (i, j) == (TOK_AMBIG_A, TOK_AMBIG_B) {
                continue;
            }
            if protos[i] == protos[j] {
                return Err(CorpusError::InvalidConfig {
                    detail: format!("prototype collision between tokens {} and {}", i, j),
                });
            }
        }
    }
    Ok(protos)
}

/// Round through f32 so in-memory frames round-trip the disk format exactly.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generate a corpus. Deterministic in `cfg.seed`: each stream runs its own
/// generator seeded `seed + stream_id`, so streams may be produced in any
/// order (or in parallel) with identical results.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let protos = synth_prototypes(cfg)?;
    let mut streams = Vec::with_capacity(cfg.num_streams);
    for stream_id in 0..cfg.num_streams {
        streams.push(synth_stream(cfg, &protos, stream_id)?);
    }
    let corpus = Corpus { streams };
    corpus.validate()?;
    Ok(corpus)
}

fn synth_stream(cfg: &SynthConfig, protos: &[Option<Vec<f64>>], stream_id: usize) -> Result<Stream> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stream_id as u64));
    let noise = Normal::new(0.0, cfg.noise_stddev).expect("validated stddev");
    let topic = rng.random_range(0..2usize);
    let cue_token = if topic == 0 { TOK_CUE_TOPIC0 } else { TOK_CUE_TOPIC1 };
    let ambig_label = if topic == 0 { TOK_AMBIG_A } else { TOK_AMBIG_B };
    let vocab = cfg.vocab_size();

    let mut segments = Vec::with_capacity(cfg.segments_per_stream);
    for index in 0..cfg.segments_per_stream {
        let n_tokens = rng.random_range(cfg.tokens_per_segment_min..=cfg.tokens_per_segment_max);
        // (emitted prototype token, target label) per position.
        let mut tokens: Vec<(usize, usize)> = Vec::with_capacity(n_tokens);
        let parity = rng.random_range(0..2usize);
        let content_start = match cfg.task {
            TaskKind::Classify => {
                tokens.push((TOK_PARITY_0 + parity, TOK_PARITY_0 + parity));
                1
            }
            TaskKind::Ctc => 0,
        };
        for _ in content_start..n_tokens {
            if rng.random_bool(cfg.ambiguous_frac) {
                tokens.push((TOK_AMBIG_A, ambig_label));
            } else {
                let filler = rng.random_range(FIRST_FILLER..vocab);
                tokens.push((filler, filler));
            }
        }
        if rng.random_bool(cfg.p_cue) {
            let pos = rng.random_range(content_start..tokens.len());
            tokens[pos] = (cue_token, cue_token);
        }

        let frames_total = tokens.len() * cfg.frames_per_token;
        let mut data = Vec::with_capacity(frames_total * cfg.frame_dim);
        for &(emit, _) in &tokens {
            let proto = protos[emit].as_ref().expect("non-blank tokens have prototypes");
            for _ in 0..cfg.frames_per_token {
                for &p in proto {
                    data.push(quantize(p + noise.sample(&mut rng)));
                }
            }
        }
        let frames = Tensor::new(vec![frames_total, cfg.frame_dim], data).expect("positive dims");

        let target = match cfg.task {
            TaskKind::Ctc => SegmentTarget::Ctc(CtcTarget::new(tokens.iter().map(|&(_, l)| l).collect())?),
            TaskKind::Classify => SegmentTarget::Class(topic ^ parity),
        };
        segments.push(Segment { stream_id, index, frames, target });
    }
    Ok(Stream { stream_id, latent_topic: Some(topic), segments })
}

/// Nearest-prototype decoding used to verify the designed Bayes gap:
/// average each token's frame block, pick the closest emitting prototype,
/// and resolve the shared ambiguous prototype by `topic` when known
/// (guessing `TOK_AMBIG_A` otherwise — an optimal strategy under a uniform
/// topic prior with no cue information).
#[cfg(test)]
pub(crate) fn bayes_decode_tokens(
    frames: &Tensor,
    protos: &[Option<Vec<f64>>],
    frames_per_token: usize,
    topic: Option<usize>,
) -> Vec<usize> {
    let (t, f) = frames.dims2().expect("frames are T×F");
    assert_eq!(t % frames_per_token, 0);
    let mut out = Vec::with_capacity(t / frames_per_token);
    for block in 0..t / frames_per_token {
        let mut mean = vec![0.0; f];
        for r in block * frames_per_token..(block + 1) * frames_per_token {
            for (m, v) in mean.iter_mut().zip(frames.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= frames_per_token as f64;
        }
        let mut best_tok = None;
        let mut best_d = f64::INFINITY;
        for (tok, proto) in protos.iter().enumerate() {
            if tok == TOK_AMBIG_B {
                continue;
            }
            if let Some(p) = proto {
                let d: f64 = p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best_tok = Some(tok);
                }
            }
        }
        let tok = match (best_tok.expect("at least one prototype"), topic) {
            (TOK_AMBIG_A, Some(1)) => TOK_AMBIG_B,
            (t, _) => t,
        };
        out.push(tok);
    }
    out
}

// ── On-disk formats ──────────────────────────────────────────────────

const SEGMENT_MAGIC: &[u8; 4] = b"CASG";
const SEGMENT_VERSION: u32 = 1;
const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "stream_id\tsegment_index\tframes_path\ttarget_kind\ttarget";

fn segment_file_name(stream_id: usize, index: usize) -> String {
    format!("seg_{:05}_{:05}.casg", stream_id, index)
}

fn write_segment_file(path: &Path, frames: &Tensor) -> Result<()> {
    let (t, f) = frames.dims2().map_err(LossError::from)?;
    let mut buf = Vec::with_capacity(16 + t * f * 4);
    buf.extend_from_slice(SEGMENT_MAGIC);
    buf.extend_from_slice(&SEGMENT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for &v in frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_segment_file(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CorpusError::MissingSegmentFile { path: path.to_path_buf() }
        } else {
            io_err(path, e)
        }
    })?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|_| CorpusError::Truncated { path: path.to_path_buf() })?;
    if &header[0..4] != SEGMENT_MAGIC {
        return Err(CorpusError::BadMagic { path: path.to_path_buf() });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != SEGMENT_VERSION {
        return Err(CorpusError::BadVersion { path: path.to_path_buf(), found: version });
    }
    let t = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if t == 0 || f == 0 {
        return Err(CorpusError::Inconsistent { detail: format!("{}: zero dimension {}×{}", path.display(), t, f) });
    }
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(|e| io_err(path, e))?;
    if body.len() != t * f * 4 {
        return Err(CorpusError::Truncated { path: path.to_path_buf() });
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, f], data)
        .map_err(|e| CorpusError::Inconsistent { detail: format!("{}: {}", path.display(), e) })
}

fn format_target(target: &SegmentTarget) -> (String, String) {
    match target {
        SegmentTarget::Ctc(t) => {
            let toks: Vec<String> = t.tokens().iter().map(|v| v.to_string()).collect();
            ("ctc".into(), toks.join(" "))
        }
        SegmentTarget::Class(c) => ("class".into(), c.to_string()),
    }
}

/// Write `manifest.tsv` plus one CASG file per segment into `dir`
/// (created if absent).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for stream in &corpus.streams {
        for seg in &stream.segments {
            let name = segment_file_name(seg.stream_id, seg.index);
            write_segment_file(&dir.join(&name), &seg.frames)?;
            let (kind, target) = format_target(&seg.target);
            manifest.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", seg.stream_id, seg.index, name, kind, target));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))
}

/// Load a corpus directory written by [`save_corpus`]. Latent topics are
/// not persisted and come back as `None`.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(CorpusError::MalformedManifest {
                path: manifest_path,
                line: 1,
                detail: format!("unexpected header {:?}", header),
            })
        }
        None => {
            return Err(CorpusError::MalformedManifest { path: manifest_path, line: 1, detail: "empty manifest".into() })
        }
    }

    let mut streams: Vec<Stream> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let bad = |detail: String| CorpusError::MalformedManifest {
            path: manifest_path.clone(),
            line: line_no,
            detail,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 columns, got {}", cols.len())));
        }
        let stream_id: usize = cols[0].parse().map_err(|_| bad(format!("bad stream_id {:?}", cols[0])))?;
        let index: usize = cols[1].parse().map_err(|_| bad(format!("bad segment_index {:?}", cols[1])))?;
        let frames = read_segment_file(&dir.join(cols[2]))?;
        let target = match cols[3] {
            "ctc" => {
                let tokens: Vec<usize> = cols[4]
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad(format!("bad token {:?}", v))))
                    .collect::<Result<_>>()?;
                SegmentTarget::Ctc(CtcTarget::new(tokens)?)
            }
            "class" => SegmentTarget::Class(cols[4].parse().map_err(|_| bad(format!("bad class {:?}", cols[4])))?),
            other => return Err(bad(format!("unknown target_kind {:?}", other))),
        };

        if streams.last().map(|s: &Stream| s.stream_id) != Some(stream_id) {
            if streams.iter().any(|s| s.stream_id == stream_id) {
                return Err(CorpusError::Inconsistent {
                    detail: format!("stream {} appears in non-contiguous manifest rows", stream_id),
                });
            }
            streams.push(Stream { stream_id, latent_topic: None, segments: Vec::new() });
        }
        streams.last_mut().expect("just pushed").segments.push(Segment { stream_id, index, frames, target });
    }

    let corpus = Corpus { streams };
    corpus.validate()?;
    Ok(corpus)
}

// ── Batching ─────────────────────────────────────────────────────────

/// One training sample: a segment plus the indices of its in-stream
/// neighbors under the window spec (possibly empty at stream edges).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSample {
    pub stream: usize,
    pub segment: usize,
    pub neighbors: Vec<usize>,
}

/// Deterministically shuffled batches over every segment of the corpus.
/// `stream`/`segment` are positional indices into `corpus.streams` and
/// `stream.segments`; the shuffle order is a pure function of `seed`.
pub fn make_batches(
    corpus: &Corpus,
    spec: &ContextWindowSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<BatchSample>>> {
    if batch_size == 0 {
        return Err(CorpusError::InvalidConfig { detail: "batch_size must be positive".into() });
    }
    let mut samples = Vec::with_capacity(corpus.total_segments());
    for (si, stream) in corpus.streams.iter().enumerate() {
        for pos in 0..stream.len() {
            samples.push(BatchSample {
                stream: si,
                segment: pos,
                neighbors: select_context_indices(pos, spec, stream.len())?,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    Ok(samples.chunks(batch_size).map(|c| c.to_vec()).collect())
}
