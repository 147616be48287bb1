//! Option scoring head.
//!
//! Each option's pooled passage vector `h_p` and candidate vector `h_s` are
//! scored with one shared parameter set:
//!
//! ```text
//! s_k = v . tanh(W [h_p; h_s] + b)        W: l x 2l
//! P(k) = exp(s_k) / sum_i exp(s_i)
//! J = -log P(gold)
//! ```

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, NUM_OPTIONS};

/// Floor applied to probabilities before taking logs for display.
pub const DISPLAY_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
}

impl HeadParams {
    /// `W` and `v` uniform in `[-1/sqrt(2l), 1/sqrt(2l)]`, `b = 0`.
    pub fn new(l: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((2 * l) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((l, 2 * l), || rng.gen_range(-bound..=bound));
        let v = Array1::from_shape_simple_fn(l, || rng.gen_range(-bound..=bound));
        Self {
            w,
            b: Array1::zeros(l),
            v,
        }
    }

    pub fn zeros(l: usize) -> Self {
        Self {
            w: Array2::zeros((l, 2 * l)),
            b: Array1::zeros(l),
            v: Array1::zeros(l),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b.len()
    }

    pub fn check(&self) -> Result<()> {
        let l = self.b.len();
        if self.w.shape() != [l, 2 * l] || self.v.len() != l {
            return Err(Error::Shape(format!(
                "head W {:?}, b {}, v {} are inconsistent",
                self.w.shape(),
                l,
                self.v.len()
            )));
        }
        if self.w.iter().chain(&self.b).chain(&self.v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("head parameter".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 3] {
        [
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().unwrap(),
            self.v.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().unwrap(),
            self.v.as_slice_mut().unwrap(),
        ]
    }
}

/// Pre-activation state kept for [`score_backward`].
#[derive(Debug, Clone)]
pub struct ScoreCache {
    input: Array1<f64>,
    activation: Array1<f64>,
}

fn check_inputs(h_p: ArrayView1<f64>, h_s: ArrayView1<f64>, params: &HeadParams) -> Result<()> {
    let l = params.hidden_dim();
    if params.w.shape() != [l, 2 * l] || params.v.len() != l {
        return params.check();
    }
    if h_p.len() != l || h_s.len() != l {
        return Err(Error::Shape(format!(
            "pooled vectors of length {} and {} for a head of width {l}",
            h_p.len(),
            h_s.len()
        )));
    }
    Ok(())
}

pub fn score_option(h_p: ArrayView1<f64>, h_s: ArrayView1<f64>, params: &HeadParams) -> Result<f64> {
    score_forward(h_p, h_s, params).map(|(s, _)| s)
}

pub fn score_forward(h_p: ArrayView1<f64>, h_s: ArrayView1<f64>, params: &HeadParams) -> Result<(f64, ScoreCache)> {
    check_inputs(h_p, h_s, params)?;
    let l = params.hidden_dim();
    let mut input = Array1::zeros(2 * l);
    input.slice_mut(s![..l]).assign(&h_p);
    input.slice_mut(s![l..]).assign(&h_s);
    let activation = (params.w.dot(&input) + &params.b).mapv(f64::tanh);
    let score = params.v.dot(&activation);
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("option score {score}")));
    }
    Ok((score, ScoreCache { input, activation }))
}

/// Accumulates parameter gradients for `d_score` and returns the gradients
/// w.r.t. `(h_p, h_s)`.
pub fn score_backward(
    cache: &ScoreCache,
    params: &HeadParams,
    d_score: f64,
    grads: &mut HeadParams,
) -> (Array1<f64>, Array1<f64>) {
    let l = params.hidden_dim();
    grads.v.scaled_add(d_score, &cache.activation);
    let d_pre = cache.activation.mapv(|a| (1.0 - a * a) * d_score) * &params.v;
    grads.b += &d_pre;
    for (i, &dp) in d_pre.iter().enumerate() {
        grads.w.row_mut(i).scaled_add(dp, &cache.input);
    }
    let d_input = params.w.t().dot(&d_pre);
    (d_input.slice(s![..l]).to_owned(), d_input.slice(s![l..]).to_owned())
}

/// Softmax with max subtraction. Fails on empty or non-finite logits.
pub fn option_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Precondition("no logits".into()));
    }
    if let Some(bad) = logits.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    Ok(())
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionScores {
    pub logits: [f64; NUM_OPTIONS],
    pub probabilities: [f64; NUM_OPTIONS],
    pub predicted: usize,
    pub gold: Option<usize>,
}

impl OptionScores {
    pub fn from_logits(logits: [f64; NUM_OPTIONS], gold: Option<usize>) -> Result<Self> {
        let probs = option_distribution(&logits)?;
        Ok(Self {
            logits,
            probabilities: probs.try_into().expect("five logits"),
            predicted: argmax(&logits),
            gold,
        })
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.gold.map(|g| g == self.predicted)
    }
}

/// `-log P(gold)`, computed as `logsumexp(logits) - logits[gold]`.
pub fn nll_loss(scores: &OptionScores, gold: usize) -> Result<f64> {
    nll_from_logits(&scores.logits, gold)
}

pub fn nll_from_logits(logits: &[f64], gold: usize) -> Result<f64> {
    check_logits(logits)?;
    if gold >= logits.len() {
        return Err(Error::Precondition(format!("gold index {gold} out of range")));
    }
    // Rounding can leave a tiny negative value when P(gold) is 1.
    Ok((log_sum_exp(logits) - logits[gold]).max(0.0))
}

/// `dJ/ds_k = P(k) - [k == gold]`.
pub fn nll_grad(logits: &[f64], gold: usize) -> Result<Vec<f64>> {
    let mut g = option_distribution(logits)?;
    g[gold] -= 1.0;
    Ok(g)
}

/// `log(max(p, floor))`, for plots and tables only.
pub fn display_log_prob(p: f64) -> f64 {
    p.max(DISPLAY_PROB_FLOOR).ln()
}
