//! A small character-level decoder-only transformer, trained from scratch on
//! comparison prompts, with an optional linear probe head attached to an
//! intermediate layer during finetuning.

mod checkpoint;
mod eval;
pub mod model;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::{self, ComparisonProblem, DatasetError, PromptSpec, Side};
use crate::probes::ProbeError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use eval::{
    export_hidden_states, hidden_state_at, hidden_states, parse_response, read_responses, score_responses, verbal_eval,
    write_responses, EchoModel, Generator, GoldOracle, ParsedAnswer, ResponseRecord, ScoredResponse, VerbalEval,
    MAX_ANSWER_TOKENS,
};
pub use model::{LossParts, LossWeights, Scalar};
pub use train::{
    finetune, init_probe_head, mean_lm_loss, probe_head_accuracy, probe_head_scores, prompt_states, train_lm, AdamW,
    FinetuneConfig, LogRow, LossMode, ProbeInit, TrainConfig, TrainLog,
};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("character {0:?} is not in the vocabulary")]
    UnknownCharacter(char),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("layer {layer} is outside 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("probe head has not been initialized")]
    UninitializedProbe,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Printable ASCII plus newline and the multiplication sign.
pub fn vocabulary() -> Vec<char> {
    let mut chars = vec!['\n'];
    chars.extend((0x20u8..=0x7e).map(char::from));
    chars.push('×');
    chars
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { chars: vocabulary() }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, ToyError> {
        text.chars()
            .map(|c| match c {
                '\n' => Ok(0),
                ' '..='~' => Ok(c as u32 - 0x20 + 1),
                '×' => Ok(self.chars.len() as u32 - 1),
                other => Err(ToyError::UnknownCharacter(other)),
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.chars[t as usize]).collect()
    }

    pub fn newline(&self) -> u32 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context_len: 128,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn vocab_size(&self) -> usize {
        vocabulary().len()
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::InvalidConfig(m));
        if self.n_layers < 2 {
            return bad(format!("n_layers = {} but at least 2 are required", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len == 0 {
            return bad("context_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Probe layer for a depth fraction: `round(fraction · n_layers)` clamped to `[1, n_layers]`.
pub fn probe_layer(depth_fraction: f64, n_layers: usize) -> usize {
    ((depth_fraction * n_layers as f64).round() as usize).clamp(1, n_layers.max(1))
}

/// A prompt with its training answer and comparison labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: String,
    /// Text the model should generate after the prompt, including the final newline.
    pub answer: String,
    pub gold: Side,
    pub log_ratio: f64,
}

impl Example {
    pub fn from_problem(p: &ComparisonProblem, spec: &PromptSpec) -> Result<Self, ToyError> {
        Ok(Example {
            prompt: dataset::make_prompt(p, spec)?,
            answer: format!(" {}\n", p.answer_surface()),
            gold: p.gold,
            log_ratio: p.log_ratio,
        })
    }

    pub fn from_problems(problems: &[ComparisonProblem], spec: &PromptSpec) -> Result<Vec<Self>, ToyError> {
        problems.iter().map(|p| Example::from_problem(p, spec)).collect()
    }
}

/// Trained weights plus their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub params: Vec<f32>,
    /// Layer the probe head reads, once it has been fitted.
    pub probe_layer: Option<usize>,
    pub tokenizer: Tokenizer,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.chars == other.chars
    }
}

impl ToyModel {
    /// Freshly initialized weights, deterministic in `config.seed`.
    pub fn new(config: ToyConfig) -> Result<Self, ToyError> {
        config.validate()?;
        let params = model::init_params(&config);
        Ok(ToyModel {
            config,
            params,
            probe_layer: None,
            tokenizer: Tokenizer::default(),
        })
    }

    pub fn layout(&self) -> model::Layout {
        model::Layout::new(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn encode_fitting(&self, text: &str) -> Result<Vec<u32>, ToyError> {
        let tokens = self.tokenizer.encode(text)?;
        if tokens.len() > self.config.context_len {
            return Err(ToyError::ContextOverflow {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        Ok(tokens)
    }
}
