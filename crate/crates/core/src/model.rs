//! Encoder, head and tokenizer bundled into one scorer.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::composer::{compose_example, ComposeConfig, InputMode, Tokenizer, WhitespaceTokenizer};
use crate::dataset::McqaExample;
use crate::encoder::{
    segment_pool, segment_pool_backward, Checkpoint, CheckpointHeader, EncoderConfig, EncoderKind, NamedTensor,
    ToyEncoder,
};
use crate::head::{nll_from_logits, nll_grad, score_backward, score_forward, HeadParams, OptionScores};
use crate::{Error, Result, NUM_OPTIONS};

/// Seed offset separating head initialisation from encoder initialisation.
const HEAD_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: ToyEncoder,
    pub head: HeadParams,
    pub tokenizer: WhitespaceTokenizer,
    pub compose: ComposeConfig,
}

/// Gradient buffers with the same layout as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: ToyEncoder,
    pub head: HeadParams,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Extras keys written by [`Model::to_checkpoint`].
const TOKENIZER_KEY: &str = "tokenizer";
const COMPOSE_KEY: &str = "compose";

#[derive(Serialize, Deserialize)]
struct TokenizerRecord {
    vocab: Vec<String>,
    #[serde(default)]
    stopwords: Vec<String>,
}

impl Model {
    /// Fresh model: encoder from `config.seed`, head from a derived seed.
    pub fn new(config: EncoderConfig, tokenizer: WhitespaceTokenizer, compose: ComposeConfig) -> Result<Self> {
        let encoder = ToyEncoder::new(config, tokenizer.vocab_size())?;
        let head = HeadParams::new(encoder.config.hidden_dim, encoder.config.seed ^ HEAD_SEED_OFFSET);
        Ok(Self {
            encoder,
            head,
            tokenizer,
            compose,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.config.hidden_dim
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            encoder: self.encoder.zeros_like(),
            head: HeadParams::zeros(self.hidden_dim()),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        out
    }

    pub fn check(&self) -> Result<()> {
        self.encoder.check_shapes()?;
        self.head.check()?;
        if self.head.hidden_dim() != self.hidden_dim() {
            return Err(Error::Shape(format!(
                "head width {} does not match encoder width {}",
                self.head.hidden_dim(),
                self.hidden_dim()
            )));
        }
        if self.tokenizer.vocab_size() != self.encoder.vocab_size() {
            return Err(Error::Shape(format!(
                "tokenizer has {} entries, embedding has {}",
                self.tokenizer.vocab_size(),
                self.encoder.vocab_size()
            )));
        }
        Ok(())
    }

    /// The five option logits of `example`.
    pub fn logits(&self, example: &McqaExample, mode: InputMode) -> Result<[f64; NUM_OPTIONS]> {
        let inputs = compose_example(example, mode, &self.compose, &self.tokenizer)?;
        let mut logits = [0.0; NUM_OPTIONS];
        for (slot, input) in logits.iter_mut().zip(&inputs) {
            let (h, _) = self.encoder.forward(input)?;
            let pooled = segment_pool(&h)?;
            *slot = score_forward(pooled.passage.view(), pooled.candidate.view(), &self.head)?.0;
        }
        Ok(logits)
    }

    pub fn predict(&self, example: &McqaExample, mode: InputMode) -> Result<OptionScores> {
        OptionScores::from_logits(self.logits(example, mode)?, example.gold)
    }

    /// Loss of one labeled example; adds `weight * dJ/dθ` into `grads`.
    pub fn accumulate_gradients(
        &self,
        example: &McqaExample,
        mode: InputMode,
        weight: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let gold = example
            .gold
            .ok_or_else(|| Error::Precondition(format!("example {:?} has no label", example.id)))?;
        let inputs = compose_example(example, mode, &self.compose, &self.tokenizer)?;
        let mut logits = [0.0; NUM_OPTIONS];
        let mut saved = Vec::with_capacity(NUM_OPTIONS);
        for (slot, input) in logits.iter_mut().zip(&inputs) {
            let (h, enc_cache) = self.encoder.forward(input)?;
            let pooled = segment_pool(&h)?;
            let (score, head_cache) = score_forward(pooled.passage.view(), pooled.candidate.view(), &self.head)?;
            *slot = score;
            saved.push((h, enc_cache, pooled, head_cache));
        }
        let loss = nll_from_logits(&logits, gold)?;
        let d_logits = nll_grad(&logits, gold)?;
        for ((h, enc_cache, pooled, head_cache), d) in saved.iter().zip(d_logits) {
            let d = d * weight;
            if d == 0.0 {
                continue;
            }
            let (d_p, d_s): (Array1<f64>, Array1<f64>) = score_backward(head_cache, &self.head, d, &mut grads.head);
            let d_states = segment_pool_backward(h, pooled, &d_p, &d_s);
            self.encoder.backward(enc_cache, &d_states, &mut grads.encoder);
        }
        Ok(loss)
    }

    pub fn loss(&self, example: &McqaExample, mode: InputMode) -> Result<f64> {
        let gold = example
            .gold
            .ok_or_else(|| Error::Precondition(format!("example {:?} has no label", example.id)))?;
        nll_from_logits(&self.logits(example, mode)?, gold)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.encoder.config;
        let header = CheckpointHeader {
            kind: cfg.kind,
            hidden_dim: cfg.hidden_dim,
            layers: cfg.layers,
            ffn_dim: cfg.ffn_dim,
            vocab_size: self.encoder.vocab_size(),
            positional: cfg.positional,
            seed: cfg.seed,
        };
        let mut tensors = self.encoder.named_tensors();
        tensors.push(NamedTensor::from_matrix("head.w", &self.head.w));
        tensors.push(NamedTensor::from_vector("head.b", &self.head.b));
        tensors.push(NamedTensor::from_vector("head.v", &self.head.v));
        let mut ckpt = Checkpoint::new(header, tensors);
        let tok = TokenizerRecord {
            vocab: self.tokenizer.vocab().to_vec(),
            stopwords: self.tokenizer.stopwords().map(String::from).collect(),
        };
        ckpt.extras
            .insert(TOKENIZER_KEY.into(), serde_json::to_value(tok).expect("serializable"));
        ckpt.extras.insert(
            COMPOSE_KEY.into(),
            serde_json::to_value(&self.compose).expect("serializable"),
        );
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        let config = EncoderConfig {
            kind: h.kind,
            hidden_dim: h.hidden_dim,
            layers: h.layers,
            ffn_dim: h.ffn_dim,
            positional: h.positional,
            seed: h.seed,
            checkpoint: None,
        };
        let encoder = ToyEncoder::from_parts(config, ckpt)?;
        let tokenizer = tokenizer_from_extras(&ckpt.extras)?;
        let compose = match ckpt.extras.get(COMPOSE_KEY) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Shape(format!("compose config: {e}")))?,
            None => ComposeConfig::default(),
        };
        let head = HeadParams {
            w: ckpt.matrix("head.w")?,
            b: ckpt.vector("head.b")?,
            v: ckpt.vector("head.v")?,
        };
        let model = Self {
            encoder,
            head,
            tokenizer,
            compose,
        };
        model.check()?;
        Ok(model)
    }

    /// Model whose encoder comes from an external checkpoint (which must carry
    /// its vocabulary) and whose head is freshly initialised.
    pub fn from_pretrained(config: &EncoderConfig, compose: ComposeConfig) -> Result<Self> {
        config.validate()?;
        let path = config
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("pretrained encoder needs a checkpoint path".into()))?;
        let ckpt = Checkpoint::read(path)?;
        let mut encoder = ToyEncoder::from_checkpoint(path)?;
        encoder.config.kind = EncoderKind::PretrainedAdapter;
        let tokenizer = tokenizer_from_extras(&ckpt.extras).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let head = HeadParams::new(encoder.config.hidden_dim, config.seed ^ HEAD_SEED_OFFSET);
        let model = Self {
            encoder,
            head,
            tokenizer,
            compose,
        };
        model.check()?;
        Ok(model)
    }
}

fn tokenizer_from_extras(extras: &BTreeMap<String, serde_json::Value>) -> Result<WhitespaceTokenizer> {
    let value = extras
        .get(TOKENIZER_KEY)
        .ok_or_else(|| Error::Shape("checkpoint carries no tokenizer vocabulary".into()))?;
    let record: TokenizerRecord =
        serde_json::from_value(value.clone()).map_err(|e| Error::Shape(format!("tokenizer record: {e}")))?;
    // The stored vocabulary includes the special entries.
    Ok(WhitespaceTokenizer::from_words(record.vocab.into_iter().skip(4)).with_stopwords(record.stopwords))
}
