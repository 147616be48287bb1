//! Accuracy, input-mode ablation and cross-dataset generalization.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::{ComposeConfig, InputMode, WhitespaceTokenizer};
use crate::dataset::McqaExample;
use crate::encoder::EncoderConfig;
use crate::model::Model;

use crate::trainer::{train, TrainConfig, TrainedCheckpoint};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub n: usize,
    pub correct: Vec<bool>,
}

impl Metrics {
    pub fn from_correct(correct: Vec<bool>) -> Result<Self> {
        if correct.is_empty() {
            return Err(Error::Precondition("cannot score an empty dataset".into()));
        }
        let hits = correct.iter().filter(|&&c| c).count();
        Ok(Self {
            accuracy: hits as f64 / correct.len() as f64,
            n: correct.len(),
            correct,
        })
    }

    pub fn hits(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }
}

/// Accuracy of `model` on a labeled dataset. Examples are scored in
/// parallel; the result does not depend on scheduling.
pub fn evaluate(model: &Model, dataset: &[McqaExample], mode: InputMode) -> Result<Metrics> {
    if let Some(ex) = dataset.iter().find(|e| e.gold.is_none()) {
        return Err(Error::Precondition(format!(
            "example {:?} is unlabeled; use the prediction path for unlabeled data",
            ex.id
        )));
    }
    model.check()?;
    let correct = dataset
        .par_iter()
        .map(|ex| Ok(model.predict(ex, mode)?.is_correct().expect("labeled")))
        .collect::<Result<Vec<bool>>>()?;
    Metrics::from_correct(correct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub mode: InputMode,
    pub n: usize,
    pub accuracy: f64,
}

/// `dataset,mode,n,accuracy`
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "mode", "n", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.mode.to_string(),
            r.n.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationDirection {
    /// `I->N` or `N->I`.
    pub direction: String,
    /// Accuracy of the model on its own task's data.
    pub in_domain: f64,
    /// Accuracy of the same model on the other task's data.
    pub cross_domain: f64,
    /// `in_domain - cross_domain`
    pub drop: f64,
}

impl GeneralizationDirection {
    pub fn new(direction: impl Into<String>, in_domain: f64, cross_domain: f64) -> Self {
        Self {
            direction: direction.into(),
            in_domain,
            cross_domain,
            drop: in_domain - cross_domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub mode: InputMode,
    pub directions: Vec<GeneralizationDirection>,
}

impl GeneralizationReport {
    /// `direction,in_domain,cross_domain,drop`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["direction", "in_domain", "cross_domain", "drop"])?;
        for d in &self.directions {
            w.write_record([
                d.direction.clone(),
                d.in_domain.to_string(),
                d.cross_domain.to_string(),
                d.drop.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, mode: InputMode) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut directions = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Precondition(format!("bad number in generalization row {rec:?}")))
            };
            directions.push(GeneralizationDirection {
                direction: rec.get(0).unwrap_or_default().to_string(),
                in_domain: num(1)?,
                cross_domain: num(2)?,
                drop: num(3)?,
            });
        }
        Ok(Self { mode, directions })
    }
}

fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Text table with one row per mode: `cross(drop ↓)` per direction.
pub fn generalization_table(reports: &[GeneralizationReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<36}{:<20}{:<20}", "Model", "I→N (%)", "N→I (%)");
    for r in reports {
        let cell = |label: &str| {
            r.directions
                .iter()
                .find(|d| d.direction == label)
                .map(|d| format!("{}({} ↓)", percent(d.cross_domain), percent(d.drop)))
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(out, "{:<36}{:<20}{:<20}", r.mode.label(), cell(I_TO_N), cell(N_TO_I));
    }
    out
}

pub const I_TO_N: &str = "I->N";
pub const N_TO_I: &str = "N->I";

fn checkpoint_config(ckpt: &TrainedCheckpoint) -> Result<TrainConfig> {
    ckpt.config
        .as_ref()
        .map(TrainConfig::comparable)
        .ok_or_else(|| Error::ConfigMismatch(format!("{} carries no training config", ckpt.path.display())))
}

/// Evaluates both models on both tasks. Drops are measured against each
/// model's accuracy on its own task's evaluation data.
pub fn cross_evaluate(
    ckpt_i: &TrainedCheckpoint,
    ckpt_n: &TrainedCheckpoint,
    data_i: &[McqaExample],
    data_n: &[McqaExample],
    mode: InputMode,
) -> Result<GeneralizationReport> {
    let (ci, cn) = (checkpoint_config(ckpt_i)?, checkpoint_config(ckpt_n)?);
    if ci != cn {
        return Err(Error::ConfigMismatch(format!(
            "{} and {} were trained with different settings: {}",
            ckpt_i.path.display(),
            ckpt_n.path.display(),
            describe_difference(&ci, &cn)
        )));
    }
    let (ei, en) = (&ckpt_i.model.encoder.config, &ckpt_n.model.encoder.config);
    if (ei.hidden_dim, ei.layers, ei.ffn_dim, ei.positional) != (en.hidden_dim, en.layers, en.ffn_dim, en.positional)
        || ckpt_i.model.compose != ckpt_n.model.compose
    {
        return Err(Error::ConfigMismatch(
            "encoder or input settings differ between checkpoints".into(),
        ));
    }
    let (ii, in_) = (
        evaluate(&ckpt_i.model, data_i, mode)?,
        evaluate(&ckpt_i.model, data_n, mode)?,
    );
    let (nn, ni) = (
        evaluate(&ckpt_n.model, data_n, mode)?,
        evaluate(&ckpt_n.model, data_i, mode)?,
    );
    Ok(GeneralizationReport {
        mode,
        directions: vec![
            GeneralizationDirection::new(I_TO_N, ii.accuracy, in_.accuracy),
            GeneralizationDirection::new(N_TO_I, nn.accuracy, ni.accuracy),
        ],
    })
}

fn describe_difference(a: &TrainConfig, b: &TrainConfig) -> String {
    let (a, b) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).cloned().unwrap_or_default()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One task of an ablation: trained on `train`, scored on `dev`.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub train: Vec<McqaExample>,
    pub dev: Vec<McqaExample>,
}

#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub compose: ComposeConfig,
    /// Words the per-cell tokenizer drops.
    pub stopwords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: InputMode,
    pub task: String,
    pub accuracy: f64,
    /// Hash of the full cell configuration with the mode field blanked.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `mode,task,accuracy`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["mode", "task", "accuracy"])?;
        for r in &self.rows {
            w.write_record([r.mode.to_string(), r.task.clone(), r.accuracy.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Text table with modes as rows and tasks as columns.
    pub fn table(&self) -> String {
        let mut tasks: Vec<&str> = Vec::new();
        let mut modes: Vec<InputMode> = Vec::new();
        for r in &self.rows {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        let mut out = format!("{:<36}", "Model");
        for t in &tasks {
            let _ = write!(out, "{:<20}", format!("{t} (%)"));
        }
        out.push('\n');
        for m in modes {
            let _ = write!(out, "{:<36}", m.label());
            for t in &tasks {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.mode == m && r.task == *t)
                    .map(|r| percent(r.accuracy))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, "{cell:<20}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn config_hash(setup: &AblationSetup) -> String {
    let mut train = setup.train.comparable();
    train.input_mode = InputMode::PassageSummary;
    let canonical = serde_json::json!({
        "train": train,
        "encoder": setup.encoder,
        "compose": setup.compose,
        "stopwords": setup.stopwords,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains and scores one model per `(mode, task)` cell, all from the same
/// seed. Cells run in parallel; rows come back in `modes x tasks` order.
pub fn run_ablation(modes: &[InputMode], tasks: &[Task], setup: &AblationSetup) -> Result<AblationReport> {
    if modes.is_empty() {
        return Err(Error::Precondition("ablation needs at least one input mode".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Precondition("ablation needs at least one task".into()));
    }
    let cells: Vec<(InputMode, &Task)> = modes.iter().flat_map(|&m| tasks.iter().map(move |t| (m, t))).collect();
    let rows = cells
        .par_iter()
        .map(|&(mode, task)| {
            let cell = AblationSetup {
                train: TrainConfig {
                    input_mode: mode,
                    checkpoint_dir: None,
                    ..setup.train.clone()
                },
                ..setup.clone()
            };
            let tokenizer = WhitespaceTokenizer::for_examples(&task.train).with_stopwords(&cell.stopwords);
            let model = Model::new(cell.encoder.clone(), tokenizer, cell.compose.clone())?;
            let outcome = train(&cell.train, &task.train, &task.dev, model)?;
            let metrics = evaluate(&outcome.model, &task.dev, mode)?;
            Ok(AblationRow {
                mode,
                task: task.name.clone(),
                accuracy: metrics.accuracy,
                config_hash: config_hash(&cell),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

/// Spread of one `(mode, task)` cell over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummaryRow {
    pub mode: InputMode,
    pub task: String,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

/// Repeats [`run_ablation`] once per seed (applied to both the encoder and
/// the shuffle order) and summarises each cell.
pub fn run_ablation_seeds(
    modes: &[InputMode],
    tasks: &[Task],
    setup: &AblationSetup,
    seeds: &[u64],
) -> Result<(Vec<AblationReport>, Vec<SeedSummaryRow>)> {
    if seeds.is_empty() {
        return Err(Error::Precondition(
            "multi-seed ablation needs at least one seed".into(),
        ));
    }
    let reports = seeds
        .iter()
        .map(|&seed| {
            let mut s = setup.clone();
            s.train.seed = seed;
            s.encoder.seed = seed;
            run_ablation(modes, tasks, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = reports[0]
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let acc: Vec<f64> = reports.iter().map(|r| r.rows[i].accuracy).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SeedSummaryRow {
                mode: row.mode,
                task: row.task.clone(),
                seeds: acc.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok((reports, summary))
}

/// `mode,task,seeds,mean,std`
pub fn write_seed_summary_csv(path: impl AsRef<Path>, rows: &[SeedSummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "task", "seeds", "mean", "std"])?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.task.clone(),
            r.seeds.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn tiny_setup(epochs: usize) -> AblationSetup {
        AblationSetup {
            train: TrainConfig {
                epochs,
                learning_rate: 1e-3,
                ..Default::default()
            },
            encoder: EncoderConfig {
                hidden_dim: 8,
                layers: 1,
                ffn_dim: 8,
                ..Default::default()
            },
            compose: ComposeConfig::default(),
            stopwords: Vec::new(),
        }
    }

    fn model_for(data: &[McqaExample], seed: u64) -> Model {
        let setup = tiny_setup(1);
        Model::new(
            EncoderConfig { seed, ..setup.encoder },
            synthetic::tokenizer_for(data),
            ComposeConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn accuracy_is_mean_of_bitmap() {
        let m = Metrics::from_correct(vec![true, false, true, true]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.hits(), 3);
        assert!(Metrics::from_correct(vec![]).is_err());
    }

    #[test]
    fn perfect_model_scores_one() {
        // A head that reads the candidate pool and an embedding that marks
        // the gold word make every prediction correct.
        let mut data = synthetic::separable(10, 2);
        for (i, ex) in data.iter_mut().enumerate() {
            ex.options[ex.gold.unwrap()] = format!("gold{i}");
        }
        let mut model = model_for(&data, 1);
        let l = model.hidden_dim();
        model.encoder.config.layers = 0;
        model.encoder.blocks.clear();
        model.encoder.config.positional = false;
        model.encoder.embedding.fill(0.0);
        model.encoder.out_weight = ndarray::Array2::eye(l);
        for ex in &data {
            let gold = &ex.options[ex.gold.unwrap()];
            let id = model.tokenizer.id(gold).unwrap() as usize;
            model.encoder.embedding[[id, 0]] = 50.0;
        }
        model.head.w.fill(0.0);
        model.head.w[[0, l]] = 1.0;
        model.head.v.fill(0.0);
        model.head.v[0] = 1.0;
        let m = evaluate(&model, &data, InputMode::PassageSummary).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.correct.len(), m.n);
    }

    #[test]
    fn unlabeled_data_is_rejected() {
        let mut data = synthetic::separable(3, 2);
        data[2].gold = None;
        let model = model_for(&data, 1);
        let err = evaluate(&model, &data, InputMode::PassageSummary).unwrap_err();
        assert!(err.to_string().contains("prediction path"));
    }

    #[test]
    fn evaluation_ignores_order() {
        let data = synthetic::uninformative(20, 5);
        let model = model_for(&data, 3);
        let a = evaluate(&model, &data, InputMode::PassageSummary).unwrap();
        let mut rev = data.clone();
        rev.reverse();
        let b = evaluate(&model, &rev, InputMode::PassageSummary).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        let mut flipped = b.correct.clone();
        flipped.reverse();
        assert_eq!(a.correct, flipped);
    }

    #[test]
    fn drop_arithmetic() {
        let d = GeneralizationDirection::new(I_TO_N, 0.75, 0.5);
        assert_eq!(d.drop, 0.25);
        let report = GeneralizationReport {
            mode: InputMode::PassageSummary,
            directions: vec![d, GeneralizationDirection::new(N_TO_I, 0.6486, 0.5173)],
        };
        let table = generalization_table(&[report]);
        assert!(table.contains("50.00(25.00 ↓)"), "{table}");
        assert!(table.contains("51.73(13.13 ↓)"), "{table}");
    }

    #[test]
    fn identical_slots_give_zero_drop() {
        let data = synthetic::separable(8, 1);
        let model = model_for(&data, 2);
        let ckpt = TrainedCheckpoint {
            model,
            config: Some(TrainConfig::default()),
            path: "a".into(),
        };
        let report = cross_evaluate(&ckpt, &ckpt, &data, &data, InputMode::PassageSummary).unwrap();
        for d in &report.directions {
            assert_eq!(d.drop, 0.0);
        }
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let data = synthetic::separable(4, 1);
        let a = TrainedCheckpoint {
            model: model_for(&data, 2),
            config: Some(TrainConfig::default()),
            path: "a".into(),
        };
        let b = TrainedCheckpoint {
            config: Some(TrainConfig {
                learning_rate: 1e-4,
                ..Default::default()
            }),
            path: "b".into(),
            ..a.clone()
        };
        let err = cross_evaluate(&a, &b, &data, &data, InputMode::PassageSummary).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn single_mode_ablation_has_one_row() {
        let task = Task {
            name: "toy".into(),
            train: synthetic::separable(5, 1),
            dev: synthetic::separable(5, 2),
        };
        let report = run_ablation(&[InputMode::PassageSummary], &[task], &tiny_setup(1)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.table().contains("Passage + summary"));
    }

    #[test]
    fn empty_mode_list_is_rejected() {
        assert!(run_ablation(&[], &[], &tiny_setup(1)).is_err());
    }

    #[test]
    fn config_hash_ignores_mode_only() {
        let a = tiny_setup(2);
        let mut b = a.clone();
        b.train.input_mode = InputMode::PassageQuestionAnswer;
        assert_eq!(config_hash(&a), config_hash(&b));
        b.train.seed = 9;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn seed_summary_matches_per_seed_rows() {
        let task = Task {
            name: "toy".into(),
            train: synthetic::separable(5, 1),
            dev: synthetic::separable(10, 2),
        };
        let (reports, summary) =
            run_ablation_seeds(&[InputMode::PassageSummary], &[task], &tiny_setup(1), &[1, 2, 3]).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(summary.len(), 1);
        let acc: Vec<f64> = reports.iter().map(|r| r.rows[0].accuracy).collect();
        let mean = acc.iter().sum::<f64>() / 3.0;
        assert!((summary[0].mean - mean).abs() < 1e-15);
        let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 2.0;
        assert!((summary[0].std - var.sqrt()).abs() < 1e-15);
    }
}
