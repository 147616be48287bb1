use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, NamedTensor};
use super::{Encoder, EncoderConfig, EncoderKind, HiddenStates};
use crate::composer::ComposedInput;
use crate::{Error, Result};

/// One residual block: single-head self-attention followed by a tanh
/// feed-forward sublayer.
///
/// ```text
/// X1 = X + softmax(X Wq (X Wk)^T / sqrt(l)) X Wv Wo
/// Y  = X1 + tanh(X1 W1 + b1) W2 + b2
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl BlockParams {
    fn random(l: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (l as f64).sqrt();
        let f = 1.0 / (ffn as f64).sqrt();
        let unit = (3.0 / l as f64).sqrt();
        // Query and key start equal so identical tokens attend to each other.
        let qk = uniform((l, l), unit, rng);
        Self {
            wq: qk.clone(),
            wk: qk,
            wv: uniform((l, l), unit, rng),
            wo: uniform((l, l), unit, rng),
            w1: uniform((l, ffn), a, rng),
            b1: Array1::zeros(ffn),
            w2: uniform((ffn, l), f, rng),
            b2: Array1::zeros(l),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }
}

fn uniform(shape: (usize, usize), bound: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound))
}

/// Token embedding + sinusoidal positions + residual attention blocks +
/// output projection. All arithmetic is `f64` and single-threaded, so a given
/// parameter set and input always produce bit-identical states.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    /// `vocab_size x l`
    pub embedding: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    /// `H = X Wout + bout`
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

/// Intermediate values from [`ToyEncoder::forward`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    last: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    x1: Array2<f64>,
    g: Array2<f64>,
}

pub fn sinusoidal(n: usize, l: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, l), |(pos, d)| {
        let i = (d / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / l as f64);
        if d % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl ToyEncoder {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let l = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Unit-variance embeddings.
        let embedding = uniform((vocab_size, l), 3f64.sqrt(), &mut rng);
        let blocks = (0..config.layers)
            .map(|_| BlockParams::random(l, config.ffn_dim, &mut rng))
            .collect();
        let out_weight = uniform((l, l), (3.0 / l as f64).sqrt(), &mut rng);
        Ok(Self {
            embedding,
            blocks,
            out_weight,
            out_bias: Array1::zeros(l),
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    /// A parameter set of the same shapes filled with zeros (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embedding: Array2::zeros(self.embedding.raw_dim()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            out_weight: Array2::zeros(self.out_weight.raw_dim()),
            out_bias: Array1::zeros(self.out_bias.raw_dim()),
        }
    }

    /// Checks parameter shapes against the config.
    pub fn check_shapes(&self) -> Result<()> {
        let l = self.config.hidden_dim;
        let f = self.config.ffn_dim;
        let mismatch = |what: &str, got: &[usize], want: &[usize]| {
            Err(Error::Shape(format!(
                "{what}: parameters have shape {got:?}, config implies {want:?}"
            )))
        };
        if self.embedding.ncols() != l {
            return mismatch("embedding", self.embedding.shape(), &[self.embedding.nrows(), l]);
        }
        if self.blocks.len() != self.config.layers {
            return mismatch("blocks", &[self.blocks.len()], &[self.config.layers]);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m, want) in [
                ("wq", &b.wq, [l, l]),
                ("wk", &b.wk, [l, l]),
                ("wv", &b.wv, [l, l]),
                ("wo", &b.wo, [l, l]),
                ("w1", &b.w1, [l, f]),
                ("w2", &b.w2, [f, l]),
            ] {
                if m.shape() != want {
                    return mismatch(&format!("block.{i}.{name}"), m.shape(), &want);
                }
            }
            if b.b1.len() != f || b.b2.len() != l {
                return mismatch(&format!("block.{i}.bias"), &[b.b1.len(), b.b2.len()], &[f, l]);
            }
        }
        if self.out_weight.shape() != [l, l] || self.out_bias.len() != l {
            return mismatch("output", self.out_weight.shape(), &[l, l]);
        }
        Ok(())
    }

    /// Runs the encoder, keeping what the backward pass needs.
    pub fn forward(&self, input: &ComposedInput) -> Result<(HiddenStates, EncoderCache)> {
        self.check_shapes()?;
        let n = input.tokens.len();
        let l = self.config.hidden_dim;
        if n == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        let vocab = self.vocab_size();
        let mut x = Array2::zeros((n, l));
        for (j, &t) in input.tokens.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::Shape(format!("token id {t} outside vocabulary of {vocab}")));
            }
            x.row_mut(j).assign(&self.embedding.row(t as usize));
        }
        if self.config.positional {
            x += &sinusoidal(n, l);
        }
        let scale = 1.0 / (l as f64).sqrt();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let q = x.dot(&b.wq);
            let k = x.dot(&b.wk);
            let v = x.dot(&b.wv);
            let mut attn = q.dot(&k.t()) * scale;
            masked_softmax_rows(&mut attn, &input.attention_mask);
            let ctx = attn.dot(&v);
            let x1 = &x + &ctx.dot(&b.wo);
            let g = (x1.dot(&b.w1) + &b.b1).mapv(f64::tanh);
            let y = &x1 + &g.dot(&b.w2) + &b.b2;
            caches.push(BlockCache {
                x: std::mem::replace(&mut x, y),
                q,
                k,
                v,
                attn,
                ctx,
                x1,
                g,
            });
        }
        let h = x.dot(&self.out_weight) + &self.out_bias;
        let states = HiddenStates::new(h, input.segment_map.clone(), input.attention_mask.clone())?;
        Ok((
            states,
            EncoderCache {
                tokens: input.tokens.clone(),
                blocks: caches,
                last: x,
            },
        ))
    }

    /// Accumulates into `grads` the gradient of a scalar loss given its
    /// gradient `d_states` w.r.t. the token-major hidden states.
    pub fn backward(&self, cache: &EncoderCache, d_states: &Array2<f64>, grads: &mut ToyEncoder) {
        let l = self.config.hidden_dim;
        let scale = 1.0 / (l as f64).sqrt();
        grads.out_weight += &cache.last.t().dot(d_states);
        grads.out_bias += &d_states.sum_axis(Axis(0));
        let mut dx = d_states.dot(&self.out_weight.t());

        for ((b, c), gb) in self.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            // Feed-forward sublayer.
            let dy = dx;
            gb.w2 += &c.g.t().dot(&dy);
            gb.b2 += &dy.sum_axis(Axis(0));
            let dz = dy.dot(&b.w2.t()) * &c.g.mapv(|g| 1.0 - g * g);
            gb.w1 += &c.x1.t().dot(&dz);
            gb.b1 += &dz.sum_axis(Axis(0));
            let dx1 = &dy + &dz.dot(&b.w1.t());

            // Attention sublayer.
            gb.wo += &c.ctx.t().dot(&dx1);
            let dctx = dx1.dot(&b.wo.t());
            let dattn = dctx.dot(&c.v.t());
            let dv = c.attn.t().dot(&dctx);
            let row_dot = (&dattn * &c.attn).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (&dattn - &row_dot) * &c.attn * scale;
            let dq = dscores.dot(&c.k);
            let dk = dscores.t().dot(&c.q);
            gb.wq += &c.x.t().dot(&dq);
            gb.wk += &c.x.t().dot(&dk);
            gb.wv += &c.x.t().dot(&dv);
            dx = dx1 + dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
        }

        for (j, &t) in cache.tokens.iter().enumerate() {
            let mut row = grads.embedding.row_mut(t as usize);
            row += &dx.row(j);
        }
    }

    /// Flat views of every tensor, in a fixed order shared with
    /// [`ToyEncoder::tensors_mut`] and [`ToyEncoder::named_tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.as_slice().expect("standard layout")];
        for b in &self.blocks {
            out.extend([
                b.wq.as_slice().unwrap(),
                b.wk.as_slice().unwrap(),
                b.wv.as_slice().unwrap(),
                b.wo.as_slice().unwrap(),
                b.w1.as_slice().unwrap(),
                b.b1.as_slice().unwrap(),
                b.w2.as_slice().unwrap(),
                b.b2.as_slice().unwrap(),
            ]);
        }
        out.push(self.out_weight.as_slice().unwrap());
        out.push(self.out_bias.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for b in &mut self.blocks {
            out.extend([
                b.wq.as_slice_mut().unwrap(),
                b.wk.as_slice_mut().unwrap(),
                b.wv.as_slice_mut().unwrap(),
                b.wo.as_slice_mut().unwrap(),
                b.w1.as_slice_mut().unwrap(),
                b.b1.as_slice_mut().unwrap(),
                b.w2.as_slice_mut().unwrap(),
                b.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.push(self.out_weight.as_slice_mut().unwrap());
        out.push(self.out_bias.as_slice_mut().unwrap());
        out
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor::from_matrix("encoder.embedding", &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("encoder.block.{i}");
            out.push(NamedTensor::from_matrix(&format!("{p}.wq"), &b.wq));
            out.push(NamedTensor::from_matrix(&format!("{p}.wk"), &b.wk));
            out.push(NamedTensor::from_matrix(&format!("{p}.wv"), &b.wv));
            out.push(NamedTensor::from_matrix(&format!("{p}.wo"), &b.wo));
            out.push(NamedTensor::from_matrix(&format!("{p}.w1"), &b.w1));
            out.push(NamedTensor::from_vector(&format!("{p}.b1"), &b.b1));
            out.push(NamedTensor::from_matrix(&format!("{p}.w2"), &b.w2));
            out.push(NamedTensor::from_vector(&format!("{p}.b2"), &b.b2));
        }
        out.push(NamedTensor::from_matrix("encoder.output.weight", &self.out_weight));
        out.push(NamedTensor::from_vector("encoder.output.bias", &self.out_bias));
        out
    }

    /// Rebuilds an encoder from a checkpoint's config header and tensors.
    pub fn from_parts(config: EncoderConfig, ckpt: &Checkpoint) -> Result<Self> {
        let l = config.hidden_dim;
        let matrix = |name: &str| ckpt.matrix(name);
        let vector = |name: &str| ckpt.vector(name);
        let embedding = matrix("encoder.embedding")?;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("encoder.block.{i}");
                Ok(BlockParams {
                    wq: matrix(&format!("{p}.wq"))?,
                    wk: matrix(&format!("{p}.wk"))?,
                    wv: matrix(&format!("{p}.wv"))?,
                    wo: matrix(&format!("{p}.wo"))?,
                    w1: matrix(&format!("{p}.w1"))?,
                    b1: vector(&format!("{p}.b1"))?,
                    w2: matrix(&format!("{p}.w2"))?,
                    b2: vector(&format!("{p}.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc = Self {
            embedding,
            blocks,
            out_weight: matrix("encoder.output.weight")?,
            out_bias: vector("encoder.output.bias")?,
            config,
        };
        enc.check_shapes()?;
        if enc.vocab_size() != ckpt.header.vocab_size || l != ckpt.header.hidden_dim {
            return Err(Error::Shape(format!(
                "checkpoint header says vocab {} / l {}, tensors have vocab {} / l {l}",
                ckpt.header.vocab_size,
                ckpt.header.hidden_dim,
                enc.vocab_size()
            )));
        }
        Ok(enc)
    }

    /// Loads externally supplied weights. The returned encoder is marked as a
    /// pretrained adapter and behaves exactly like a toy encoder with those
    /// weights.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::read(path)?;
        let config = EncoderConfig {
            kind: EncoderKind::PretrainedAdapter,
            hidden_dim: ckpt.header.hidden_dim,
            layers: ckpt.header.layers,
            ffn_dim: ckpt.header.ffn_dim,
            positional: ckpt.header.positional,
            seed: ckpt.header.seed,
            checkpoint: Some(path.to_path_buf()),
        };
        Self::from_parts(config, &ckpt)
    }
}

fn masked_softmax_rows(scores: &mut Array2<f64>, mask: &[u8]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (v, &m) in row.iter().zip(mask) {
            if m == 1 && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for (v, &m) in row.iter_mut().zip(mask) {
            *v = if m == 1 { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row /= sum;
    }
}

impl Encoder for ToyEncoder {
    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn encode(&self, input: &ComposedInput) -> Result<HiddenStates> {
        self.forward(input).map(|(h, _)| h)
    }
}
