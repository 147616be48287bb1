use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use log::{info, warn};
use mcqa::analyzer::{emit_report, prediction_records, ReportFormat};
use mcqa::composer::{InputMode, WhitespaceTokenizer};
use mcqa::dataset::{check_expected, dataset_stats, load_dataset, recam_expected_count, McqaExample, Split};
use mcqa::encoder::EncoderKind;
use mcqa::evaluator::{
    cross_evaluate, evaluate, generalization_table, run_ablation, run_ablation_seeds, write_metrics_csv,
    write_seed_summary_csv, AblationSetup, MetricsRow, Task,
};
use mcqa::model::Model;
use mcqa::trainer::{load_checkpoint, train, TrainedCheckpoint};

use crate::config::{ConfigError, RunConfig, SNAPSHOT_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Train,
    Eval,
    Ablate,
    Crosseval,
    Analyze,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Crosseval => "crosseval",
            Command::Analyze => "analyze",
        }
    }
}

fn missing(what: &str) -> anyhow::Error {
    ConfigError(what.to_string()).into()
}

fn sanitize(part: &str) -> String {
    part.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// `<out_dir>/<command>-<task>-<mode>-<seed>-<timestamp>`, or `explicit`.
/// Writes the resolved config snapshot into it.
pub fn prepare_run_dir(command: Command, config: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(dir) => dir.to_path_buf(),
        None => {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let base = format!(
                "{}-{}-{}-{}-{stamp}",
                command.name(),
                sanitize(config.task()),
                sanitize(config.str("trainer", "mode")),
                config.seed()?
            );
            let root = PathBuf::from(config.str("run", "out_dir"));
            let mut dir = root.join(&base);
            let mut n = 2;
            while dir.exists() {
                dir = root.join(format!("{base}-{n}"));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    let snapshot = dir.join(SNAPSHOT_FILE);
    std::fs::write(&snapshot, config.snapshot()).with_context(|| format!("cannot write {}", snapshot.display()))?;
    Ok(dir)
}

pub fn run(command: Command, config: &RunConfig, run_dir: &Path) -> Result<()> {
    match command {
        Command::Validate => validate(config, run_dir),
        Command::Train => train_cmd(config, run_dir),
        Command::Eval => eval(config, run_dir),
        Command::Ablate => ablate(config, run_dir),
        Command::Crosseval => crosseval(config, run_dir),
        Command::Analyze => analyze(config, run_dir),
    }
}

fn load(config: &RunConfig, path: &Path, split: Split) -> Result<Vec<McqaExample>> {
    let loaded = load_dataset(path, split, &config.load_options())?;
    for s in &loaded.skipped {
        warn!("{}:{}: skipped: {}", path.display(), s.line, s.message);
    }
    Ok(loaded.examples)
}

fn infer_split(path: &Path) -> Split {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    if name.contains("train") {
        Split::Train
    } else if name.contains("test") {
        Split::Test
    } else {
        Split::Dev
    }
}

fn validate(config: &RunConfig, run_dir: &Path) -> Result<()> {
    let path = config
        .path("run", "data")
        .ok_or_else(|| missing("validate needs a dataset: pass --data"))?;
    let split = match config.str("dataset", "split") {
        "" => infer_split(&path),
        s => s.parse()?,
    };
    let loaded = load_dataset(&path, split, &config.load_options())?;
    for s in &loaded.skipped {
        warn!("{}:{}: {}", path.display(), s.line, s.message);
    }
    let placeholder = config.str("dataset", "placeholder");
    let mut stats = dataset_stats(&split.to_string(), &loaded.examples, placeholder).with_skipped(&loaded.skipped);
    if config.is_set("run", "task") {
        stats = check_expected(stats, recam_expected_count(config.task(), split));
    }
    let line = format!("{}: {stats}", path.display());
    println!("{line}");
    std::fs::write(run_dir.join("stats.txt"), format!("{line}\n"))?;
    Ok(())
}

fn required_data(config: &RunConfig, task: &str, split: &str) -> Result<PathBuf> {
    config.data_path(task, split).ok_or_else(|| {
        missing(&format!(
            "no {split} data for task {task:?}: set data.{task}_{split} or pass --{split}"
        ))
    })
}

fn build_model(config: &RunConfig, train_set: &[McqaExample]) -> Result<Model> {
    let encoder = config.encoder_config()?;
    let compose = config.compose_config()?;
    Ok(match encoder.kind {
        EncoderKind::Toy => {
            let tokenizer =
                WhitespaceTokenizer::for_examples(train_set).with_stopwords(config.list("composer", "stopwords")?);
            Model::new(encoder, tokenizer, compose)?
        }
        EncoderKind::PretrainedAdapter => Model::from_pretrained(&encoder, compose)?,
    })
}

fn train_cmd(config: &RunConfig, run_dir: &Path) -> Result<()> {
    let task = config.task();
    let train_set = load(config, &required_data(config, task, "train")?, Split::Train)?;
    let dev_set = load(config, &required_data(config, task, "dev")?, Split::Dev)?;
    let train_config = config.train_config(Some(run_dir.to_path_buf()))?;
    let model = build_model(config, &train_set)?;
    info!(
        "training on {} examples, {} dev, mode {}",
        train_set.len(),
        dev_set.len(),
        train_config.input_mode
    );
    let outcome = train(&train_config, &train_set, &dev_set, model)?;
    let mode = train_config.input_mode;
    let metrics = evaluate(&outcome.model, &dev_set, mode)?;
    write_metrics_csv(
        run_dir.join("metrics.csv"),
        &[MetricsRow {
            dataset: format!("{task}_dev"),
            mode,
            n: metrics.n,
            accuracy: metrics.accuracy,
        }],
    )?;
    let best = outcome.history.best_record().map(|r| r.epoch).unwrap_or(0);
    println!(
        "best epoch {best}: dev accuracy {:.4} ({}/{}); checkpoint {}",
        metrics.accuracy,
        metrics.hits(),
        metrics.n,
        outcome.checkpoint.as_deref().unwrap_or(run_dir).display()
    );
    Ok(())
}

/// The flag or file value when given, otherwise the checkpoint's own mode.
fn resolve_mode(config: &RunConfig, ckpt: &TrainedCheckpoint) -> Result<InputMode> {
    if config.is_set("trainer", "mode") {
        return Ok(config.mode()?);
    }
    Ok(ckpt.config.as_ref().map(|c| c.input_mode).unwrap_or(config.mode()?))
}

fn checkpoint(config: &RunConfig, key: &str, flag: &str) -> Result<TrainedCheckpoint> {
    let path = config
        .path("run", key)
        .ok_or_else(|| missing(&format!("pass --{flag} <checkpoint.json>")))?;
    Ok(load_checkpoint(path)?)
}

fn eval_data(config: &RunConfig, key: &str, task: &str) -> Result<PathBuf> {
    config
        .path("run", key)
        .or_else(|| config.data_path(task, "dev"))
        .ok_or_else(|| {
            missing(&format!(
                "no evaluation data: pass --{} or set data.{task}_dev",
                key.replace('_', "-")
            ))
        })
}

fn eval(config: &RunConfig, run_dir: &Path) -> Result<()> {
    let ckpt = checkpoint(config, "ckpt", "ckpt")?;
    let path = eval_data(config, "data", config.task())?;
    let data = load(config, &path, infer_split(&path))?;
    let mode = resolve_mode(config, &ckpt)?;
    let metrics = evaluate(&ckpt.model, &data, mode)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_metrics_csv(
        run_dir.join("metrics.csv"),
        &[MetricsRow {
            dataset: name.clone(),
            mode,
            n: metrics.n,
            accuracy: metrics.accuracy,
        }],
    )?;
    println!(
        "{name} {mode}: accuracy {:.4} ({}/{})",
        metrics.accuracy,
        metrics.hits(),
        metrics.n
    );
    Ok(())
}

fn ablate(config: &RunConfig, run_dir: &Path) -> Result<()> {
    let modes = config.modes()?;
    let mut tasks = Vec::new();
    for name in config.list("run", "tasks")? {
        tasks.push(Task {
            train: load(config, &required_data(config, &name, "train")?, Split::Train)?,
            dev: load(config, &required_data(config, &name, "dev")?, Split::Dev)?,
            name,
        });
    }
    let encoder = config.encoder_config()?;
    if encoder.kind != EncoderKind::Toy {
        return Err(missing("ablate trains fresh toy encoders; set encoder.kind = \"toy\""));
    }
    let setup = AblationSetup {
        train: config.train_config(None)?,
        encoder,
        compose: config.compose_config()?,
        stopwords: config.list("composer", "stopwords")?,
    };
    let seeds = config.int("run", "seeds")?.max(1) as u64;
    let report = if seeds == 1 {
        run_ablation(&modes, &tasks, &setup)?
    } else {
        let first = setup.train.seed;
        let list: Vec<u64> = (first..first + seeds).collect();
        let (reports, summary) = run_ablation_seeds(&modes, &tasks, &setup, &list)?;
        write_seed_summary_csv(run_dir.join("ablation_seeds.csv"), &summary)?;
        for row in &summary {
            println!(
                "{} {}: mean {:.4} std {:.4} over {} seeds",
                row.mode, row.task, row.mean, row.std, row.seeds
            );
        }
        reports.into_iter().next().expect("at least one seed")
    };
    report.write_csv(run_dir.join("ablation.csv"))?;
    let table = report.table();
    std::fs::write(run_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn crosseval(config: &RunConfig, run_dir: &Path) -> Result<()> {
    let ckpt_i = checkpoint(config, "ckpt_i", "ckpt-i")?;
    let ckpt_n = checkpoint(config, "ckpt_n", "ckpt-n")?;
    let path_i = eval_data(config, "data_i", "imperceptibility")?;
    let path_n = eval_data(config, "data_n", "nonspecificity")?;
    let data_i = load(config, &path_i, infer_split(&path_i))?;
    let data_n = load(config, &path_n, infer_split(&path_n))?;
    let mode = resolve_mode(config, &ckpt_i)?;
    let report = cross_evaluate(&ckpt_i, &ckpt_n, &data_i, &data_n, mode)?;
    report.write_csv(run_dir.join("generalization.csv"))?;
    let table = generalization_table(&[report]);
    std::fs::write(run_dir.join("generalization.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn analyze(config: &RunConfig, run_dir: &Path) -> Result<()> {
    let ckpt = checkpoint(config, "ckpt", "ckpt")?;
    let path = eval_data(config, "data", config.task())?;
    let data = load(config, &path, infer_split(&path))?;
    let mode = resolve_mode(config, &ckpt)?;
    let ids = config.list("analyzer", "ids")?;
    let format: ReportFormat = config.str("analyzer", "format").parse()?;
    let bias = config.float("analyzer", "bias");
    let records = prediction_records(&ckpt.model, &data, (!ids.is_empty()).then_some(&ids[..]), mode, bias)?;
    let out = run_dir.join(match format {
        ReportFormat::Csv => "analysis.csv",
        ReportFormat::Plot => "analysis.svg",
    });
    emit_report(&records, &out, format)?;
    for r in &records {
        let gold = r.gold.map_or("-".to_string(), |g| g.to_string());
        println!(
            "{}: predicted {} ({:?}) gold {gold} p={:.4}",
            r.id, r.predicted, r.options[r.predicted], r.probabilities[r.predicted]
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
