//! Hidden-state encoders.
//!
//! An encoder maps a [`ComposedInput`] to one hidden vector per token (the
//! final layer's sequence output). [`ToyEncoder`] is the trainable reference
//! implementation; pretrained weights enter through the same type via
//! [`ToyEncoder::from_checkpoint`].

mod checkpoint;
mod toy;

use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use toy::{BlockParams, EncoderCache, ToyEncoder};

use crate::composer::{ComposedInput, Segment};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
    /// Weights loaded from an external checkpoint file.
    PretrainedAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Inner width of the per-token feed-forward sublayer.
    pub ffn_dim: usize,
    /// Add fixed sinusoidal position vectors to the token embeddings.
    pub positional: bool,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            hidden_dim: 32,
            layers: 2,
            ffn_dim: 256,
            positional: true,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 2 {
            return Err(Error::Config(format!(
                "hidden_dim must be >= 2, got {}",
                self.hidden_dim
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be >= 1".into()));
        }
        if self.kind == EncoderKind::PretrainedAdapter && self.checkpoint.is_none() {
            return Err(Error::Config(
                "pretrained_adapter encoder needs a checkpoint path".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder output: one `hidden_dim` vector per input token.
///
/// Stored token-major, so row `j` is the column `H[:, j]` of the `l x n`
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    states: Array2<f64>,
    segment_map: Vec<Segment>,
    attention_mask: Vec<u8>,
}

impl HiddenStates {
    pub fn new(states: Array2<f64>, segment_map: Vec<Segment>, attention_mask: Vec<u8>) -> Result<Self> {
        if states.nrows() != segment_map.len() || segment_map.len() != attention_mask.len() {
            return Err(Error::Shape(format!(
                "{} hidden columns for {} segment labels and {} mask entries",
                states.nrows(),
                segment_map.len(),
                attention_mask.len()
            )));
        }
        if let Some(bad) = states.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("hidden state entry {bad}")));
        }
        Ok(Self {
            states,
            segment_map,
            attention_mask,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn seq_len(&self) -> usize {
        self.states.nrows()
    }

    /// `(hidden_dim, seq_len)`, the shape of `H`.
    pub fn shape(&self) -> (usize, usize) {
        (self.hidden_dim(), self.seq_len())
    }

    pub fn column(&self, token: usize) -> ArrayView1<'_, f64> {
        self.states.row(token)
    }

    /// Token-major view (`seq_len x hidden_dim`).
    pub fn token_major(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn segment_map(&self) -> &[Segment] {
        &self.segment_map
    }

    pub fn attention_mask(&self) -> &[u8] {
        &self.attention_mask
    }
}

pub trait Encoder: Send + Sync {
    fn hidden_dim(&self) -> usize;
    fn encode(&self, input: &ComposedInput) -> Result<HiddenStates>;
}

/// Which pooled vector a token contributes to, if any.
pub fn pool_target(segment: Segment, mask: u8) -> Option<PoolSide> {
    if mask == 0 {
        return None;
    }
    match segment {
        Segment::Passage => Some(PoolSide::Passage),
        s if s.is_candidate() => Some(PoolSide::Candidate),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSide {
    Passage,
    Candidate,
}

/// Pooled passage and candidate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub passage: Array1<f64>,
    /// Mean over summary columns, plus question/answer columns when present.
    pub candidate: Array1<f64>,
    pub passage_count: usize,
    pub candidate_count: usize,
}

/// Mean-pools the passage columns and the candidate (summary, question,
/// answer) columns separately. Masked columns are ignored.
pub fn segment_pool(h: &HiddenStates) -> Result<Pooled> {
    let l = h.hidden_dim();
    let mut passage = Array1::zeros(l);
    let mut candidate = Array1::zeros(l);
    let (mut np, mut nc) = (0usize, 0usize);
    for (j, (&seg, &m)) in h.segment_map.iter().zip(&h.attention_mask).enumerate() {
        match pool_target(seg, m) {
            Some(PoolSide::Passage) => {
                passage += &h.states.row(j);
                np += 1;
            }
            Some(PoolSide::Candidate) => {
                candidate += &h.states.row(j);
                nc += 1;
            }
            None => {}
        }
    }
    if np == 0 {
        return Err(Error::Shape("no passage columns to pool".into()));
    }
    if nc == 0 {
        return Err(Error::Shape("no summary columns to pool".into()));
    }
    passage /= np as f64;
    candidate /= nc as f64;
    Ok(Pooled {
        passage,
        candidate,
        passage_count: np,
        candidate_count: nc,
    })
}

/// Gradient of a loss w.r.t. the hidden states given gradients w.r.t. the
/// pooled vectors. Token-major, same shape as the states.
pub fn segment_pool_backward(
    h: &HiddenStates,
    pooled: &Pooled,
    d_passage: &Array1<f64>,
    d_candidate: &Array1<f64>,
) -> Array2<f64> {
    let mut grad = Array2::zeros(h.states.raw_dim());
    let gp = d_passage / pooled.passage_count as f64;
    let gc = d_candidate / pooled.candidate_count as f64;
    for (j, (&seg, &m)) in h.segment_map.iter().zip(&h.attention_mask).enumerate() {
        match pool_target(seg, m) {
            Some(PoolSide::Passage) => grad.row_mut(j).assign(&gp),
            Some(PoolSide::Candidate) => grad.row_mut(j).assign(&gc),
            None => {}
        }
    }
    grad
}
