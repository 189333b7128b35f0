//! The encoder, context module, and task heads behind the three
//! architectures: plain fine-tuning, context injection (neighbor embedding
//! concatenated per frame), and context-aware (a generator producing the
//! embedding from the current segment alone, trained toward the neighbor
//! embedding).

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{ContextEmbedding, ContextSource, Model, Phase, TapeBinding};
pub use params::{analytic_context_overhead, count_params, ParamCount, Params};

use crate::corpus::TaskKind;
use crate::tensor::TensorError;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {detail}")]
    InvalidConfig { detail: String },
    #[error("operation requires mode {expected}, model is {actual}")]
    WrongMode { expected: Mode, actual: Mode },
    #[error("context required but no neighbor representations were provided")]
    MissingContext,
    #[error("neighbor representations supplied to a pure inference pass")]
    NeighborsAtInference,
    #[error("frame width {actual} does not match model frame_dim {expected}")]
    FrameDimMismatch { expected: usize, actual: usize },
    #[error("{path}: bad magic (expected CAFT)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found}")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated checkpoint")]
    Truncated { path: PathBuf },
    #[error("{path}: malformed checkpoint: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Injection,
    ContextAware,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Injection => "injection",
            Mode::ContextAware => "context_aware",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "injection" => Ok(Mode::Injection),
            "context_aware" => Ok(Mode::ContextAware),
            other => Err(format!("unknown mode {:?} (expected baseline|injection|context_aware)", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frame_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    /// CTC vocabulary including blank at index 0 and any tag tokens.
    pub vocab_size: usize,
    /// Classification output width; used only when `task` is classify.
    pub num_classes: usize,
    pub context_dim: usize,
    pub mode: Mode,
    pub task: TaskKind,
    /// Sinusoidal positional signal added after the input projection.
    /// Disabling it makes the encoder permutation-equivariant over time.
    pub positional_encoding: bool,
    /// Treat the neighbor embedding as a constant target in the context
    /// loss instead of backpropagating through it.
    pub detach_target: bool,
    /// Feed the neighbor embedding (rather than the generated one) to the
    /// prediction path during context-aware training.
    pub train_with_target_embedding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(ModelError::InvalidConfig { detail });
        if self.frame_dim == 0 || self.hidden_dim == 0 || self.encoder_layers == 0 {
            return fail("frame_dim, hidden_dim, and encoder_layers must be positive".into());
        }
        if self.attention_heads == 0 || self.hidden_dim % self.attention_heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        if self.mode != Mode::Baseline && self.context_dim == 0 {
            return fail(format!("context_dim must be ≥ 1 in {} mode", self.mode));
        }
        match self.task {
            TaskKind::Ctc if self.vocab_size < 2 => {
                return fail(format!("vocab_size {} < 2 cannot hold blank + one token", self.vocab_size))
            }
            TaskKind::Classify if self.num_classes < 2 => {
                return fail(format!("num_classes {} < 2", self.num_classes))
            }
            _ => {}
        }
        Ok(())
    }

    /// Head input width: H, widened by D when a context embedding is
    /// concatenated per frame.
    pub fn head_in(&self) -> usize {
        match self.mode {
            Mode::Baseline => self.hidden_dim,
            Mode::Injection | Mode::ContextAware => self.hidden_dim + self.context_dim,
        }
    }

    pub fn head_out(&self) -> usize {
        match self.task {
            TaskKind::Ctc => self.vocab_size,
            TaskKind::Classify => self.num_classes,
        }
    }

    pub fn uses_context(&self) -> bool {
        self.mode != Mode::Baseline
    }

    /// The same config with the context machinery removed; the reference
    /// point for parameter-overhead accounting.
    pub fn as_baseline(&self) -> ModelConfig {
        ModelConfig { mode: Mode::Baseline, ..self.clone() }
    }
}
