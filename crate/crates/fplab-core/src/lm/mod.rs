//! A tiny decoder-only transformer: tokenizer types, forward pass,
//! cross-entropy training, greedy decoding, and bit-exact checkpoint IO.
//!
//! Architecture: pre-norm blocks with four-way multi-head causal attention
//! and an up/down MLP, parameter-free RMS normalization inside blocks, a
//! learned final norm scale, sinusoidal position encodings, and untied
//! embedding / unembedding matrices. Weights are stored `(d_out x d_in)` so
//! a linear layer computes `x W^T`.

mod checkpoint;
mod decode;
mod forward;
pub(crate) mod graph;
#[cfg(test)]
mod refmodel;
mod state;
mod train;
mod vocab;

pub use checkpoint::{read_container, write_container, Container, ContainerHeader, TensorMeta, CHECKPOINT_MAGIC};
pub use decode::greedy_decode;
pub use forward::{forward, TextModel};
pub use state::{LmConfig, ModelState};
pub use train::{train, LossMask, TrainOpts};
pub use vocab::{TokenId, Vocab, BOS_ID, EOS_ID, PAD_ID, SEP_ID};

use crate::error::{Error, Result};

/// Role of a token sequence within a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Target,
}

/// A validated token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub role: Role,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, role: Role, config: &LmConfig) -> Result<Self> {
        if ids.len() > config.context_len {
            return Err(Error::SequenceTooLong { len: ids.len(), context_len: config.context_len });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::InvalidArg(format!(
                "token id {bad} out of range for vocab size {}",
                config.vocab_size
            )));
        }
        Ok(Self { ids, role })
    }

    pub fn prompt(ids: Vec<TokenId>) -> Self {
        Self { ids, role: Role::Prompt }
    }

    pub fn target(ids: Vec<TokenId>) -> Self {
        Self { ids, role: Role::Target }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A (prompt, target) training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub prompt: TokenSeq,
    pub target: TokenSeq,
}

impl Pair {
    pub fn new(prompt: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        Self { prompt: TokenSeq::prompt(prompt), target: TokenSeq::target(target) }
    }
}

/// Builds the full training sequence `BOS prompt [SEP] target EOS` plus the
/// prediction-position mask. Position `t` of the mask refers to predicting
/// token `t+1`; under targets-only masking, only predictions of target
/// tokens and the closing EOS count.
pub fn build_sequence(pair: &Pair, mask: LossMask) -> (Vec<TokenId>, Vec<bool>) {
    let mut ids = Vec::with_capacity(pair.prompt.len() + pair.target.len() + 3);
    ids.push(BOS_ID);
    ids.extend_from_slice(&pair.prompt.ids);
    if !pair.prompt.is_empty() {
        ids.push(SEP_ID);
    }
    let first_target = ids.len();
    ids.extend_from_slice(&pair.target.ids);
    ids.push(EOS_ID);

    let n_pred = ids.len() - 1;
    let mask = (0..n_pred)
        .map(|t| match mask {
            LossMask::All => true,
            LossMask::TargetsOnly => t + 1 >= first_target,
        })
        .collect();
    (ids, mask)
}
