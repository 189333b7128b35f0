//! Line-based `key = value` run configuration with `[model]`, `[train]`,
//! `[window]`, and `[synth]` sections.
//!
//! Every key maps to exactly one field; unknown sections, unknown keys,
//! and duplicates are errors that name the offending line. Absent keys
//! fall back to defaults, so parse → serialize → parse is the identity on
//! values even for partial files. Mode and task are deliberately not file
//! keys: the mode is a command-line axis and the task follows the corpus.

use crate::corpus::{ContextWindowSpec, CorpusError, SynthConfig, TaskKind};
use crate::model::{Mode, ModelConfig};
use crate::train::{default_alpha, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { name: String, line: usize },
    #[error("line {line}: unknown key {key:?} in section [{section}]")]
    UnknownKey { section: String, key: String, line: usize },
    #[error("line {line}: duplicate key {key:?} in section [{section}]")]
    DuplicateKey { section: String, key: String, line: usize },
    #[error("line {line}: key {key:?} outside any section")]
    OutsideSection { key: String, line: usize },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { text: String, line: usize },
    #[error("line {line}: bad value for {key:?}: {detail}")]
    InvalidValue { key: String, line: usize, detail: String },
    #[error(transparent)]
    Window(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// `[model]` — architecture dimensions and behavioral flags. Mode and
/// task are supplied at resolution time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub frame_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub context_dim: usize,
    pub positional_encoding: bool,
    pub detach_target: bool,
    pub train_with_target_embedding: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            frame_dim: 16,
            hidden_dim: 32,
            encoder_layers: 2,
            attention_heads: 2,
            vocab_size: 12,
            num_classes: 2,
            context_dim: 8,
            positional_encoding: true,
            detach_target: false,
            train_with_target_embedding: false,
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(&self, mode: Mode, task: TaskKind) -> ModelConfig {
        ModelConfig {
            frame_dim: self.frame_dim,
            hidden_dim: self.hidden_dim,
            encoder_layers: self.encoder_layers,
            attention_heads: self.attention_heads,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            context_dim: self.context_dim,
            mode,
            task,
            positional_encoding: self.positional_encoding,
            detach_target: self.detach_target,
            train_with_target_embedding: self.train_with_target_embedding,
        }
    }
}

/// `[train]` — optimization settings. `alpha` may be left unset and is
/// resolved to the documented default for the task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub alpha: Option<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            alpha: None,
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 12,
            batch_size: 8,
            seeds: vec![0, 1, 2],
        }
    }
}

/// `[window]` — context window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSettings {
    pub length: usize,
    pub offset: i64,
}

impl Default for WindowSettings {
    fn default() -> Self {
        WindowSettings { length: 2, offset: 0 }
    }
}

impl WindowSettings {
    pub fn to_spec(&self) -> Result<ContextWindowSpec> {
        Ok(ContextWindowSpec::new(self.length, self.offset)?)
    }
}

fn default_synth() -> SynthConfig {
    SynthConfig {
        num_streams: 12,
        segments_per_stream: 10,
        tokens_per_segment_min: 3,
        tokens_per_segment_max: 6,
        frames_per_token: 2,
        frame_dim: 16,
        num_filler_tokens: 5,
        ambiguous_frac: 0.5,
        p_cue: 0.5,
        noise_stddev: 0.05,
        task: TaskKind::Ctc,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub window: WindowSettings,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            window: WindowSettings::default(),
            synth: default_synth(),
        }
    }
}

impl RunConfig {
    /// Full training configuration for one mode, with `alpha` resolved.
    pub fn to_train_config(&self, mode: Mode, task: TaskKind) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model.to_model_config(mode, task),
            window: self.window.to_spec()?,
            alpha: self.resolved_alpha(task),
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            adam_eps: self.train.adam_eps,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seeds: self.train.seeds.clone(),
        })
    }

    pub fn resolved_alpha(&self, task: TaskKind) -> f64 {
        self.train.alpha.unwrap_or_else(|| default_alpha(task))
    }
}

// ── Parsing ──────────────────────────────────────────────────────────

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        line,
        detail: e.to_string(),
    })
}

fn parse_seeds(key: &str, value: &str, line: usize) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(|part| parse_value(key, part.trim(), line))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(ConfigError::InvalidValue {
            key: key.to_string(),
            line,
            detail: "seed list is empty".into(),
        });
    }
    Ok(seeds)
}

/// Parse config text. Blank lines and `#` comments are ignored; values
/// keep interior whitespace but are trimmed at the ends.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut seen: std::collections::HashSet<(String, String)> = std::collections::HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "model" | "train" | "window" | "synth") {
                return Err(ConfigError::UnknownSection { name: name.to_string(), line });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Malformed { text: trimmed.to_string(), line });
        };
        let key = key.trim();
        let value = value.trim();
        let Some(section) = section.as_deref() else {
            return Err(ConfigError::OutsideSection { key: key.to_string(), line });
        };
        if !seen.insert((section.to_string(), key.to_string())) {
            return Err(ConfigError::DuplicateKey {
                section: section.to_string(),
                key: key.to_string(),
                line,
            });
        }
        apply(&mut cfg, section, key, value, line)?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
    match (section, key) {
        ("model", "frame_dim") => cfg.model.frame_dim = parse_value(key, value, line)?,
        ("model", "hidden_dim") => cfg.model.hidden_dim = parse_value(key, value, line)?,
        ("model", "encoder_layers") => cfg.model.encoder_layers = parse_value(key, value, line)?,
        ("model", "attention_heads") => cfg.model.attention_heads = parse_value(key, value, line)?,
        ("model", "vocab_size") => cfg.model.vocab_size = parse_value(key, value, line)?,
        ("model", "num_classes") => cfg.model.num_classes = parse_value(key, value, line)?,
        ("model", "context_dim") => cfg.model.context_dim = parse_value(key, value, line)?,
        ("model", "positional_encoding") => cfg.model.positional_encoding = parse_value(key, value, line)?,
        ("model", "detach_target") => cfg.model.detach_target = parse_value(key, value, line)?,
        ("model", "train_with_target_embedding") => {
            cfg.model.train_with_target_embedding = parse_value(key, value, line)?
        }
        ("train", "alpha") => cfg.train.alpha = Some(parse_value(key, value, line)?),
        ("train", "learning_rate") => cfg.train.learning_rate = parse_value(key, value, line)?,
        ("train", "beta1") => cfg.train.beta1 = parse_value(key, value, line)?,
        ("train", "beta2") => cfg.train.beta2 = parse_value(key, value, line)?,
        ("train", "adam_eps") => cfg.train.adam_eps = parse_value(key, value, line)?,
        ("train", "epochs") => cfg.train.epochs = parse_value(key, value, line)?,
        ("train", "batch_size") => cfg.train.batch_size = parse_value(key, value, line)?,
        ("train", "seeds") => cfg.train.seeds = parse_seeds(key, value, line)?,
        ("window", "length") => cfg.window.length = parse_value(key, value, line)?,
        ("window", "offset") => cfg.window.offset = parse_value(key, value, line)?,
        ("synth", "num_streams") => cfg.synth.num_streams = parse_value(key, value, line)?,
        ("synth", "segments_per_stream") => cfg.synth.segments_per_stream = parse_value(key, value, line)?,
        ("synth", "tokens_per_segment_min") => cfg.synth.tokens_per_segment_min = parse_value(key, value, line)?,
        ("synth", "tokens_per_segment_max") => cfg.synth.tokens_per_segment_max = parse_value(key, value, line)?,
        ("synth", "frames_per_token") => cfg.synth.frames_per_token = parse_value(key, value, line)?,
        ("synth", "frame_dim") => cfg.synth.frame_dim = parse_value(key, value, line)?,
        ("synth", "num_filler_tokens") => cfg.synth.num_filler_tokens = parse_value(key, value, line)?,
        ("synth", "ambiguous_frac") => cfg.synth.ambiguous_frac = parse_value(key, value, line)?,
        ("synth", "p_cue") => cfg.synth.p_cue = parse_value(key, value, line)?,
        ("synth", "noise_stddev") => cfg.synth.noise_stddev = parse_value(key, value, line)?,
        ("synth", "task") => cfg.synth.task = parse_value(key, value, line)?,
        ("synth", "seed") => cfg.synth.seed = parse_value(key, value, line)?,
        _ => {
            return Err(ConfigError::UnknownKey {
                section: section.to_string(),
                key: key.to_string(),
                line,
            })
        }
    }
    Ok(())
}

/// Canonical text form: every key in a fixed order. `f64` values print
/// via the shortest round-tripping representation, so serializing and
/// re-parsing reproduces the exact values.
pub fn serialize(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut push = |line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push("[model]".into());
    push(format!("frame_dim = {}", cfg.model.frame_dim));
    push(format!("hidden_dim = {}", cfg.model.hidden_dim));
    push(format!("encoder_layers = {}", cfg.model.encoder_layers));
    push(format!("attention_heads = {}", cfg.model.attention_heads));
    push(format!("vocab_size = {}", cfg.model.vocab_size));
    push(format!("num_classes = {}", cfg.model.num_classes));
    push(format!("context_dim = {}", cfg.model.context_dim));
    push(format!("positional_encoding = {}", cfg.model.positional_encoding));
    push(format!("detach_target = {}", cfg.model.detach_target));
    push(format!("train_with_target_embedding = {}", cfg.model.train_with_target_embedding));
    push(String::new());
    push("[train]".into());
    if let Some(alpha) = cfg.train.alpha {
        push(format!("alpha = {}", alpha));
    }
    push(format!("learning_rate = {}", cfg.train.learning_rate));
    push(format!("beta1 = {}", cfg.train.beta1));
    push(format!("beta2 = {}", cfg.train.beta2));
    push(format!("adam_eps = {}", cfg.train.adam_eps));
    push(format!("epochs = {}", cfg.train.epochs));
    push(format!("batch_size = {}", cfg.train.batch_size));
    let seeds: Vec<String> = cfg.train.seeds.iter().map(|s| s.to_string()).collect();
    push(format!("seeds = {}", seeds.join(",")));
    push(String::new());
    push("[window]".into());
    push(format!("length = {}", cfg.window.length));
    push(format!("offset = {}", cfg.window.offset));
    push(String::new());
    push("[synth]".into());
    push(format!("num_streams = {}", cfg.synth.num_streams));
    push(format!("segments_per_stream = {}", cfg.synth.segments_per_stream));
    push(format!("tokens_per_segment_min = {}", cfg.synth.tokens_per_segment_min));
    push(format!("tokens_per_segment_max = {}", cfg.synth.tokens_per_segment_max));
    push(format!("frames_per_token = {}", cfg.synth.frames_per_token));
    push(format!("frame_dim = {}", cfg.synth.frame_dim));
    push(format!("num_filler_tokens = {}", cfg.synth.num_filler_tokens));
    push(format!("ambiguous_frac = {}", cfg.synth.ambiguous_frac));
    push(format!("p_cue = {}", cfg.synth.p_cue));
    push(format!("noise_stddev = {}", cfg.synth.noise_stddev));
    push(format!("task = {}", cfg.synth.task));
    push(format!("seed = {}", cfg.synth.seed));
    out
}
