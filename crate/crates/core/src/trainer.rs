//! Fine-tuning loop: Adam at a flat learning rate, example-level batches,
//! best-dev-accuracy model selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::InputMode;
use crate::dataset::McqaExample;
use crate::encoder::Checkpoint;
use crate::evaluator::evaluate;
use crate::model::{Gradients, Model};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
const TRAIN_CONFIG_KEY: &str = "train_config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Examples per step; all five options of an example share a step.
    pub batch_size: usize,
    pub max_len: usize,
    pub input_mode: InputMode,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_len: 256,
            input_mode: InputMode::PassageSummary,
            seed: 0,
            clip_norm: Some(1.0),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return fail(format!("epochs must be >= 1, got {}", self.epochs));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// The config with run-location fields cleared, for comparing runs.
    pub fn comparable(&self) -> Self {
        Self {
            checkpoint_dir: None,
            ..self.clone()
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, model: &Model) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((param, grad), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One optimizer update on `batch`. Returns the mean loss before the update.
pub fn step(
    batch: &[&McqaExample],
    mode: InputMode,
    model: &mut Model,
    optimizer: &mut Adam,
    clip_norm: Option<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grads = model.zero_grads();
    let mut total = 0.0;
    for ex in batch {
        let loss = model.accumulate_gradients(ex, mode, weight, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} on example {:?}", ex.id)));
        }
        total += loss;
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if let Some(max) = clip_norm {
        if norm > max {
            grads.scale(max / norm);
        }
    }
    optimizer.update(model, &grads);
    Ok(total * weight)
}

/// Visit order of the training set in `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected model.
    pub best: usize,
}

impl TrainHistory {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best)
    }

    /// `epoch,train_loss,dev_acc,seconds`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "dev_acc", "seconds"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.dev_accuracy.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Same history with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|r| r.seconds = 0.0);
        h
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub checkpoint: Option<PathBuf>,
}

fn require_labeled(set: &[McqaExample], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Precondition(format!("{what} set is empty")));
    }
    if let Some(ex) = set.iter().find(|e| e.gold.is_none()) {
        return Err(Error::Precondition(format!("{what} example {:?} is unlabeled", ex.id)));
    }
    Ok(())
}

/// Fine-tunes `model` and returns the parameters of the best dev epoch.
///
/// Ties in dev accuracy keep the earlier epoch. With `checkpoint_dir` set, the
/// selected model is written to `checkpoint.json` and the history to
/// `history.csv` in that directory once training has finished.
pub fn train(
    config: &TrainConfig,
    train_set: &[McqaExample],
    dev_set: &[McqaExample],
    mut model: Model,
) -> Result<TrainOutcome> {
    config.validate()?;
    require_labeled(train_set, "training")?;
    require_labeled(dev_set, "dev")?;
    model.compose.max_len = config.max_len;
    model.check()?;

    let mut optimizer = Adam::new(config, &model);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&McqaExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss =
                step(&batch, config.input_mode, &mut model, &mut optimizer, config.clip_norm).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {} batch {bi}: {m}", epoch + 1)),
                    other => other,
                })?;
            loss_sum += loss * batch.len() as f64;
        }
        let dev_accuracy = evaluate(&model, dev_set, config.input_mode)?.accuracy;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            dev_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {} loss {:.6} dev_acc {:.4}",
            epoch + 1,
            loss_sum / train_set.len() as f64,
            dev_accuracy
        );
        if best.as_ref().is_none_or(|(acc, _)| dev_accuracy > *acc) {
            best = Some((dev_accuracy, model.clone()));
            history.best = epoch;
        }
    }

    let (_, best_model) = best.expect("at least one epoch");
    let mut outcome = TrainOutcome {
        model: best_model,
        history,
        checkpoint: None,
    };
    if let Some(dir) = &config.checkpoint_dir {
        let path = persist(dir, config, &outcome).map_err(|e| Error::Persist {
            training_completed: true,
            message: e.to_string(),
        })?;
        outcome.checkpoint = Some(path);
    }
    Ok(outcome)
}

fn persist(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &outcome.model, config)?;
    outcome.history.write_csv(dir.join(HISTORY_FILE))?;
    Ok(path)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, config: &TrainConfig) -> Result<()> {
    let mut ckpt = model.to_checkpoint();
    ckpt.extras.insert(
        TRAIN_CONFIG_KEY.into(),
        serde_json::to_value(config).expect("serializable"),
    );
    ckpt.write(path)
}

/// A trained model plus the config it was trained with.
#[derive(Debug, Clone)]
pub struct TrainedCheckpoint {
    pub model: Model,
    pub config: Option<TrainConfig>,
    pub path: PathBuf,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedCheckpoint> {
    let path = path.as_ref();
    let ckpt = Checkpoint::read(path)?;
    let model = Model::from_checkpoint(&ckpt).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let config = match ckpt.extras.get(TRAIN_CONFIG_KEY) {
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("train config: {e}"),
        })?),
        None => None,
    };
    Ok(TrainedCheckpoint {
        model,
        config,
        path: path.to_path_buf(),
    })
}

/// Writes `text` to `path`, mapping IO errors to the crate error.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ComposeConfig;
    use crate::encoder::EncoderConfig;
    use crate::synthetic;

    fn small_model(data: &[McqaExample], seed: u64) -> Model {
        let cfg = EncoderConfig {
            hidden_dim: 8,
            layers: 1,
            ffn_dim: 8,
            seed,
            ..Default::default()
        };
        Model::new(cfg, synthetic::tokenizer_for(data), ComposeConfig::default()).unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let data = synthetic::separable(2, 0);
        assert!(train(&cfg, &data, &data, small_model(&data, 0)).is_err());
    }

    #[test]
    fn unlabeled_training_data_rejected() {
        let mut data = synthetic::separable(3, 0);
        data[1].gold = None;
        let err = train(&TrainConfig::default(), &data, &data, small_model(&data, 0)).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn order_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(20, 5, 3), epoch_order(20, 5, 3));
        assert_ne!(epoch_order(20, 5, 3), epoch_order(20, 5, 4));
        assert_ne!(epoch_order(20, 5, 3), epoch_order(20, 6, 3));
        let mut o = epoch_order(20, 1, 0);
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn batch_loss_is_mean_of_example_losses() {
        let data = synthetic::separable(4, 9);
        let mut model = small_model(&data, 2);
        let per_example: Vec<f64> = data
            .iter()
            .map(|e| model.loss(e, InputMode::PassageSummary).unwrap())
            .collect();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(&cfg, &model);
        let batch: Vec<&McqaExample> = data.iter().collect();
        let loss = step(&batch, InputMode::PassageSummary, &mut model, &mut opt, cfg.clip_norm).unwrap();
        let mean = per_example.iter().sum::<f64>() / 4.0;
        assert!((loss - mean).abs() <= 1e-9, "{loss} vs {mean}");
    }

    #[test]
    fn certain_example_leaves_parameters_unchanged() {
        // No blocks, identity output, one-hot-like embeddings so the gold
        // option saturates the head and P(gold) is exactly 1.
        let data = synthetic::separable(1, 4);
        let ex = &data[0];
        let gold_word = ex.options[ex.gold.unwrap()].clone();
        let tok = synthetic::tokenizer_for(&data);
        let l = 4;
        let cfg = EncoderConfig {
            hidden_dim: l,
            layers: 0,
            ffn_dim: 4,
            positional: false,
            ..Default::default()
        };
        let mut model = Model::new(cfg, tok.clone(), ComposeConfig::default()).unwrap();
        model.encoder.embedding.fill(0.0);
        let gold_id = tok.vocab().iter().position(|w| *w == gold_word).unwrap();
        for o in &ex.options {
            let id = tok.vocab().iter().position(|w| w == o).unwrap();
            model.encoder.embedding[[id, 0]] = if id == gold_id { 1000.0 } else { -1000.0 };
        }
        model.encoder.out_weight = ndarray::Array2::eye(l);
        model.head.w.fill(0.0);
        model.head.w[[0, l]] = 1.0;
        model.head.v.fill(0.0);
        model.head.v[0] = 2000.0;
        let before = model.clone();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(&cfg, &model);
        let loss = step(&[ex], InputMode::PassageSummary, &mut model, &mut opt, cfg.clip_norm).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn small_steps_descend() {
        let mut decreased = 0;
        for seed in 0..20 {
            let data = synthetic::separable(2, 100 + seed);
            let mut model = small_model(&data, seed);
            let batch: Vec<&McqaExample> = data.iter().collect();
            let cfg = TrainConfig {
                learning_rate: 1e-6,
                ..Default::default()
            };
            let mut opt = Adam::new(&cfg, &model);
            let before = step(&batch, InputMode::PassageSummary, &mut model, &mut opt, cfg.clip_norm).unwrap();
            let after: f64 = data
                .iter()
                .map(|e| model.loss(e, InputMode::PassageSummary).unwrap())
                .sum::<f64>()
                / 2.0;
            if after <= before {
                decreased += 1;
            }
        }
        assert!(decreased >= 19, "loss decreased on only {decreased}/20 seeds");
    }

    #[test]
    fn training_is_reproducible_and_checkpoint_replays() {
        let data = synthetic::separable(10, 7);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let a = train(&cfg, &data, &data, small_model(&data, 3)).unwrap();
        let b = train(
            &TrainConfig {
                checkpoint_dir: None,
                ..cfg.clone()
            },
            &data,
            &data,
            small_model(&data, 3),
        )
        .unwrap();
        assert_eq!(a.history.without_timing(), b.history.without_timing());
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.epochs.len(), 3);

        let loaded = load_checkpoint(a.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(loaded.config.unwrap().comparable(), cfg.comparable());
        let acc = evaluate(&loaded.model, &data, cfg.input_mode).unwrap().accuracy;
        assert_eq!(acc, a.history.best_record().unwrap().dev_accuracy);
        let csv = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
        assert!(csv.starts_with("epoch,train_loss,dev_acc,seconds\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn unwritable_checkpoint_dir_reports_completion() {
        let data = synthetic::separable(3, 7);
        let file = tempfile::NamedTempFile::new().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            checkpoint_dir: Some(file.path().join("sub")),
            ..Default::default()
        };
        match train(&cfg, &data, &data, small_model(&data, 3)) {
            Err(Error::Persist { training_completed, .. }) => assert!(training_completed),
            other => panic!("unexpected {other:?}"),
        }
    }
}
