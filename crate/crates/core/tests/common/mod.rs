#![allow(dead_code)]

use mcqa::composer::{compose_input, ComposeConfig, InputMode};
use mcqa::encoder::{EncoderConfig, ToyEncoder};
use mcqa::head::{score_backward, score_forward, HeadParams};
use mcqa::model::Model;
use mcqa::synthetic;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; absolute when both
/// vectors are essentially zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` over every entry of every tensor exposed by
/// `tensors`.
pub fn numeric_gradients<T>(
    target: &mut T,
    tensors: impl Fn(&mut T) -> Vec<&mut [f64]>,
    f: impl Fn(&T) -> f64,
) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = tensors(target).iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (ti, &len) in sizes.iter().enumerate() {
        let mut grad = vec![0.0; len];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = tensors(target)[ti][i];
            tensors(target)[ti][i] = orig + FD_STEP;
            let up = f(target);
            tensors(target)[ti][i] = orig - FD_STEP;
            let down = f(target);
            tensors(target)[ti][i] = orig;
            *g = (up - down) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

pub fn jitter(tensors: Vec<&mut [f64]>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in tensors {
        t.iter_mut().for_each(|x| *x += rng.gen_range(-scale..scale));
    }
}

/// Worst per-tensor relative error of the full-model loss gradient on one
/// random instance.
pub fn model_gradient_error(instance: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
    let data = synthetic::separable(3, instance);
    let example = data[rng.gen_range(0..data.len())].clone();
    let mode = InputMode::ALL[rng.gen_range(0..InputMode::ALL.len())];
    let config = EncoderConfig {
        hidden_dim: 8,
        ffn_dim: 8,
        layers: 2,
        positional: rng.gen_bool(0.5),
        seed: instance,
        ..Default::default()
    };
    let mut model = Model::new(config, synthetic::tokenizer_for(&data), ComposeConfig::default()).unwrap();
    jitter(model.tensors_mut(), &mut rng, 0.1);
    let mut grads = model.zero_grads();
    model.accumulate_gradients(&example, mode, 1.0, &mut grads).unwrap();
    let numeric = numeric_gradients(&mut model, |m| m.tensors_mut(), |m| m.loss(&example, mode).unwrap());
    grads
        .tensors()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Worst per-tensor relative error for a random linear functional
/// `sum(R * H)` of the encoder output.
pub fn encoder_gradient_error(instance: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + instance);
    let data = synthetic::separable(2, instance + 50);
    let tok = synthetic::tokenizer_for(&data);
    let config = EncoderConfig {
        hidden_dim: 8,
        ffn_dim: 6,
        layers: 2,
        seed: instance,
        ..Default::default()
    };
    let compose = ComposeConfig {
        max_len: 24,
        pad_to_max: rng.gen_bool(0.5),
        ..Default::default()
    };
    let input = compose_input(
        &data[0],
        rng.gen_range(0..5),
        InputMode::PassageSummaryQuestion,
        &compose,
        &tok,
    )
    .unwrap();
    let mut encoder = ToyEncoder::new(config, mcqa::composer::Tokenizer::vocab_size(&tok)).unwrap();
    jitter(encoder.tensors_mut(), &mut rng, 0.1);
    let r = Array2::from_shape_simple_fn((input.len(), 8), || rng.gen_range(-1.0..1.0));
    let functional = |e: &ToyEncoder| {
        let (h, _) = e.forward(&input).unwrap();
        (h.token_major() * &r).sum()
    };
    let (_, cache) = encoder.forward(&input).unwrap();
    let mut grads = encoder.zeros_like();
    encoder.backward(&cache, &r, &mut grads);
    let numeric = numeric_gradients(&mut encoder, |e| e.tensors_mut(), functional);
    grads
        .tensors()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Head-only loss gradient on random pooled vectors at width `l`.
pub fn head_gradient_error(instance: u64, l: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + instance);
    let mut params = HeadParams::new(l, instance);
    jitter(params.tensors_mut().into_iter().collect(), &mut rng, 0.2);
    let pooled: Vec<(Array1<f64>, Array1<f64>)> = (0..5)
        .map(|_| {
            let v = |rng: &mut ChaCha8Rng| Array1::from_shape_simple_fn(l, || rng.gen_range(-2.0..2.0));
            (v(&mut rng), v(&mut rng))
        })
        .collect();
    let gold = rng.gen_range(0..5);
    let loss = |p: &HeadParams| {
        let logits: Vec<f64> = pooled
            .iter()
            .map(|(hp, hs)| score_forward(hp.view(), hs.view(), p).unwrap().0)
            .collect();
        mcqa::head::nll_from_logits(&logits, gold).unwrap()
    };
    let mut grads = HeadParams::zeros(l);
    let forward: Vec<_> = pooled
        .iter()
        .map(|(hp, hs)| score_forward(hp.view(), hs.view(), &params).unwrap())
        .collect();
    let logits: Vec<f64> = forward.iter().map(|(s, _)| *s).collect();
    let d = mcqa::head::nll_grad(&logits, gold).unwrap();
    for ((_, cache), dk) in forward.iter().zip(d) {
        score_backward(cache, &params, dk, &mut grads);
    }
    let numeric = numeric_gradients(&mut params, |p| p.tensors_mut().into_iter().collect(), loss);
    grads
        .tensors()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
