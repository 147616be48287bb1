//! Layered run configuration: defaults, then a TOML file, then `MCQA_*`
//! environment variables, then command-line flags. Every value remembers
//! which layer set it.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use mcqa::composer::{ComposeConfig, InputMode};
use mcqa::dataset::{LoadOptions, Strictness, DEFAULT_PLACEHOLDER};
use mcqa::encoder::{EncoderConfig, EncoderKind};
use mcqa::trainer::TrainConfig;
use toml::Value;

pub const ENV_PREFIX: &str = "MCQA_";
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

const SECTIONS: [&str; 7] = ["dataset", "composer", "encoder", "trainer", "analyzer", "run", "data"];

/// Bad configuration or usage: reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: Value,
    source: Source,
}

fn strings(items: &[&str]) -> Value {
    Value::Array(items.iter().map(|s| Value::String(s.to_string())).collect())
}

fn defaults() -> Vec<(&'static str, &'static str, Value)> {
    let train = TrainConfig::default();
    let enc = EncoderConfig::default();
    let comp = ComposeConfig::default();
    let modes: Vec<&str> = InputMode::ALL.iter().map(|m| m.as_str()).collect();
    vec![
        ("dataset", "placeholder", Value::String(DEFAULT_PLACEHOLDER.into())),
        ("dataset", "lenient", Value::Boolean(false)),
        ("dataset", "split", Value::String(String::new())),
        ("composer", "max_len", Value::Integer(comp.max_len as i64)),
        ("composer", "passage_floor", Value::Integer(comp.passage_floor as i64)),
        ("composer", "pad_to_max", Value::Boolean(comp.pad_to_max)),
        ("composer", "stopwords", Value::Array(Vec::new())),
        ("encoder", "kind", Value::String("toy".into())),
        ("encoder", "hidden_dim", Value::Integer(enc.hidden_dim as i64)),
        ("encoder", "layers", Value::Integer(enc.layers as i64)),
        ("encoder", "ffn_dim", Value::Integer(enc.ffn_dim as i64)),
        ("encoder", "positional", Value::Boolean(enc.positional)),
        ("encoder", "checkpoint", Value::String(String::new())),
        ("trainer", "epochs", Value::Integer(train.epochs as i64)),
        ("trainer", "learning_rate", Value::Float(train.learning_rate)),
        ("trainer", "beta1", Value::Float(train.beta1)),
        ("trainer", "beta2", Value::Float(train.beta2)),
        ("trainer", "epsilon", Value::Float(train.epsilon)),
        ("trainer", "batch_size", Value::Integer(train.batch_size as i64)),
        ("trainer", "clip_norm", Value::Float(train.clip_norm.unwrap_or(0.0))),
        ("trainer", "seed", Value::Integer(train.seed as i64)),
        ("trainer", "mode", Value::String(train.input_mode.as_str().into())),
        ("analyzer", "bias", Value::Float(mcqa::analyzer::DEFAULT_DISPLAY_BIAS)),
        ("analyzer", "format", Value::String("csv".into())),
        ("analyzer", "ids", Value::Array(Vec::new())),
        ("run", "task", Value::String("imperceptibility".into())),
        ("run", "tasks", strings(&["imperceptibility", "nonspecificity"])),
        ("run", "modes", strings(&modes)),
        ("run", "seeds", Value::Integer(1)),
        ("run", "out_dir", Value::String("runs".into())),
        ("run", "data", Value::String(String::new())),
        ("run", "ckpt", Value::String(String::new())),
        ("run", "ckpt_i", Value::String(String::new())),
        ("run", "ckpt_n", Value::String(String::new())),
        ("run", "data_i", Value::String(String::new())),
        ("run", "data_n", Value::String(String::new())),
    ]
}

/// Converts `raw` to the type of `like`. Integers are accepted for floats.
fn coerce(key: &str, raw: Value, like: Option<&Value>) -> Result<Value, ConfigError> {
    match (like, raw) {
        (None, v @ Value::String(_)) => Ok(v),
        (None, v) => err(format!("{key}: expected a string, got {v}")),
        (Some(Value::Float(_)), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Some(like), v) if std::mem::discriminant(like) == std::mem::discriminant(&v) => Ok(v),
        (Some(like), v) => err(format!("{key}: expected {}, got {v}", like.type_str())),
    }
}

/// Parses text (from the environment) into the type of `like`.
fn parse_text(key: &str, text: &str, like: Option<&Value>) -> Result<Value, ConfigError> {
    let bad = || ConfigError(format!("{key}: cannot parse {text:?}"));
    Ok(match like {
        None | Some(Value::String(_)) => Value::String(text.into()),
        Some(Value::Integer(_)) => Value::Integer(text.trim().parse().map_err(|_| bad())?),
        Some(Value::Float(_)) => Value::Float(text.trim().parse().map_err(|_| bad())?),
        Some(Value::Boolean(_)) => Value::Boolean(text.trim().parse().map_err(|_| bad())?),
        Some(Value::Array(_)) => Value::Array(
            text.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.into()))
                .collect(),
        ),
        Some(_) => return Err(bad()),
    })
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: BTreeMap<(String, String), Entry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let entries = defaults()
            .into_iter()
            .map(|(s, k, value)| {
                (
                    (s.to_string(), k.to_string()),
                    Entry {
                        value,
                        source: Source::Default,
                    },
                )
            })
            .collect();
        Self { entries }
    }
}

impl RunConfig {
    /// Sets `section.key`. Keys in `[data]` are free-form strings; elsewhere
    /// only known keys are accepted.
    pub fn set(&mut self, section: &str, key: &str, value: Value, source: Source) -> Result<(), ConfigError> {
        let name = format!("{section}.{key}");
        if !SECTIONS.contains(&section) {
            return err(format!("unknown config section [{section}]"));
        }
        let slot = (section.to_string(), key.to_string());
        let like = self.entries.get(&slot).map(|e| e.value.clone());
        if like.is_none() && section != "data" {
            return err(format!("unknown config key {name}"));
        }
        let value = coerce(&name, value, like.as_ref())?;
        self.entries.insert(slot, Entry { value, source });
        Ok(())
    }

    pub fn set_text(&mut self, section: &str, key: &str, text: &str, source: Source) -> Result<(), ConfigError> {
        let like = self
            .entries
            .get(&(section.to_string(), key.to_string()))
            .map(|e| e.value.clone());
        let value = parse_text(&format!("{section}.{key}"), text, like.as_ref())?;
        self.set(section, key, value, source)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        for (section, body) in table {
            let Value::Table(body) = body else {
                return err(format!(
                    "{}: top-level key {section:?} must be a [section]",
                    path.display()
                ));
            };
            for (key, value) in body {
                self.set(&section, &key, value, Source::File)?;
            }
        }
        Ok(())
    }

    /// Applies `MCQA_<SECTION>_<KEY>` variables. Other variables with the
    /// prefix are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            let Some((section, key)) = rest.split_once('_') else {
                continue;
            };
            if SECTIONS.contains(&section) {
                self.set_text(section, key, &value, Source::Env)?;
            }
        }
        Ok(())
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    pub fn source(&self, section: &str, key: &str) -> Source {
        self.entry(section, key).map_or(Source::Default, |e| e.source)
    }

    pub fn is_set(&self, section: &str, key: &str) -> bool {
        self.source(section, key) != Source::Default
    }

    pub fn str(&self, section: &str, key: &str) -> &str {
        match self.entry(section, key).map(|e| &e.value) {
            Some(Value::String(s)) => s,
            _ => "",
        }
    }

    /// A non-empty string value as a path.
    pub fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        Some(self.str(section, key))
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    }

    pub fn int(&self, section: &str, key: &str) -> Result<usize, ConfigError> {
        match self.entry(section, key).map(|e| &e.value) {
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            other => err(format!("{section}.{key} must be a non-negative integer, got {other:?}")),
        }
    }

    pub fn float(&self, section: &str, key: &str) -> f64 {
        match self.entry(section, key).map(|e| &e.value) {
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            _ => f64::NAN,
        }
    }

    pub fn bool(&self, section: &str, key: &str) -> bool {
        matches!(self.entry(section, key).map(|e| &e.value), Some(Value::Boolean(true)))
    }

    pub fn list(&self, section: &str, key: &str) -> Result<Vec<String>, ConfigError> {
        match self.entry(section, key).map(|e| &e.value) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    other => err(format!("{section}.{key}: expected strings, got {other}")),
                })
                .collect(),
            _ => Ok(Vec::new()),
        }
    }

    pub fn mode(&self) -> Result<InputMode, ConfigError> {
        self.str("trainer", "mode")
            .parse()
            .map_err(|e: mcqa::Error| ConfigError(e.to_string()))
    }

    pub fn modes(&self) -> Result<Vec<InputMode>, ConfigError> {
        self.list("run", "modes")?
            .iter()
            .map(|m| m.parse().map_err(|e: mcqa::Error| ConfigError(e.to_string())))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        Ok(self.int("trainer", "seed")? as u64)
    }

    pub fn task(&self) -> &str {
        self.str("run", "task")
    }

    /// `data.<task>_<split>`
    pub fn data_path(&self, task: &str, split: &str) -> Option<PathBuf> {
        self.path("data", &format!("{task}_{split}"))
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            placeholder: self.str("dataset", "placeholder").to_string(),
            strictness: if self.bool("dataset", "lenient") {
                Strictness::Lenient
            } else {
                Strictness::Strict
            },
        }
    }

    pub fn compose_config(&self) -> Result<ComposeConfig, ConfigError> {
        Ok(ComposeConfig {
            max_len: self.int("composer", "max_len")?,
            passage_floor: self.int("composer", "passage_floor")?,
            placeholder: self.str("dataset", "placeholder").to_string(),
            pad_to_max: self.bool("composer", "pad_to_max"),
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, ConfigError> {
        let kind = match self.str("encoder", "kind") {
            "toy" => EncoderKind::Toy,
            "pretrained-adapter" | "pretrained_adapter" | "pretrained" => EncoderKind::PretrainedAdapter,
            other => {
                return err(format!(
                    "encoder.kind: unknown encoder {other:?} (expected toy or pretrained-adapter)"
                ))
            }
        };
        Ok(EncoderConfig {
            kind,
            hidden_dim: self.int("encoder", "hidden_dim")?,
            layers: self.int("encoder", "layers")?,
            ffn_dim: self.int("encoder", "ffn_dim")?,
            positional: self.bool("encoder", "positional"),
            seed: self.seed()?,
            checkpoint: self.path("encoder", "checkpoint"),
        })
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> Result<TrainConfig, ConfigError> {
        let clip = self.float("trainer", "clip_norm");
        Ok(TrainConfig {
            epochs: self.int("trainer", "epochs")?,
            learning_rate: self.float("trainer", "learning_rate"),
            beta1: self.float("trainer", "beta1"),
            beta2: self.float("trainer", "beta2"),
            epsilon: self.float("trainer", "epsilon"),
            batch_size: self.int("trainer", "batch_size")?,
            max_len: self.int("composer", "max_len")?,
            input_mode: self.mode()?,
            seed: self.seed()?,
            clip_norm: (clip > 0.0).then_some(clip),
            checkpoint_dir,
        })
    }

    /// TOML text of every value, each annotated with its source. Feeding it
    /// back through `--config` reproduces this configuration.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for section in SECTIONS {
            let rows: Vec<_> = self.entries.iter().filter(|((s, _), _)| s == section).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "[{section}]");
            for ((_, key), e) in rows {
                let _ = writeln!(out, "{key} = {}  # {}", e.value, e.source.as_str());
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_override_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[trainer]\nepochs = 3\nlearning_rate = 1\nbatch_size = 2\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&file).unwrap();
        c.apply_env([
            ("MCQA_TRAINER_EPOCHS".to_string(), "5".to_string()),
            ("MCQA_TRAINER_SEED".to_string(), "9".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ])
        .unwrap();
        c.set_text("trainer", "seed", "11", Source::Flag).unwrap();
        assert_eq!(c.int("trainer", "epochs").unwrap(), 5);
        assert_eq!(c.source("trainer", "epochs"), Source::Env);
        assert_eq!(c.float("trainer", "learning_rate"), 1.0);
        assert_eq!(c.source("trainer", "batch_size"), Source::File);
        assert_eq!(c.seed().unwrap(), 11);
        assert_eq!(c.source("trainer", "seed"), Source::Flag);
        assert_eq!(c.source("trainer", "beta1"), Source::Default);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set_text("trainer", "epoch", "3", Source::Flag).is_err());
        assert!(c.set_text("nowhere", "x", "3", Source::Flag).is_err());
        assert!(c.set_text("trainer", "epochs", "three", Source::Flag).is_err());
        assert!(c
            .set("trainer", "epochs", Value::String("3".into()), Source::File)
            .is_err());
        assert!(c.set_text("data", "custom_train", "x.jsonl", Source::Flag).is_ok());
        assert_eq!(c.data_path("custom", "train"), Some(PathBuf::from("x.jsonl")));
    }

    #[test]
    fn snapshot_replays() {
        let mut c = RunConfig::default();
        c.set_text("trainer", "learning_rate", "0.001", Source::Flag).unwrap();
        c.set_text("run", "modes", "passage_summary,passage_question_answer", Source::Env)
            .unwrap();
        c.set_text("dataset", "placeholder", "say \"hi\"", Source::Flag)
            .unwrap();
        c.set_text("data", "imperceptibility_train", "a b/train.jsonl", Source::File)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SNAPSHOT_FILE);
        std::fs::write(&path, c.snapshot()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back.float("trainer", "learning_rate"), 0.001);
        assert_eq!(
            back.modes().unwrap(),
            vec![InputMode::PassageSummary, InputMode::PassageQuestionAnswer]
        );
        assert_eq!(back.str("dataset", "placeholder"), "say \"hi\"");
        assert_eq!(back.train_config(None).unwrap(), c.train_config(None).unwrap());
        let values =
            |s: String| -> Vec<String> { s.lines().map(|l| l.split("  #").next().unwrap().to_string()).collect() };
        assert_eq!(values(back.snapshot()), values(c.snapshot()));
    }

    #[test]
    fn typed_views() {
        let mut c = RunConfig::default();
        c.set_text("trainer", "clip_norm", "0", Source::Flag).unwrap();
        assert_eq!(c.train_config(None).unwrap().clip_norm, None);
        assert_eq!(c.train_config(None).unwrap().learning_rate, 3e-5);
        c.set_text("encoder", "kind", "pretrained-adapter", Source::Flag)
            .unwrap();
        assert_eq!(c.encoder_config().unwrap().kind, EncoderKind::PretrainedAdapter);
        c.set_text("trainer", "mode", "nonsense", Source::Flag).unwrap();
        assert!(c.mode().is_err());
    }
}
