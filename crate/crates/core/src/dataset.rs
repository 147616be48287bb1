//! Ingestion and validation of cloze-style multiple-choice examples.
//!
//! Files are UTF-8, one JSON object per line:
//!
//! ```text
//! {"id": "...", "passage": "...", "question": "... @placeholder ...",
//!  "option_0": "...", ..., "option_4": "...", "label": 1}
//! ```
//!
//! `article` is accepted in place of `passage`. `label` may be omitted for
//! unlabeled test splits.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, NUM_OPTIONS};

pub const DEFAULT_PLACEHOLDER: &str = "@placeholder";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaExample {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub options: [String; NUM_OPTIONS],
    pub gold: Option<usize>,
}

impl McqaExample {
    /// Checks the example invariants against `placeholder`.
    pub fn validate(&self, placeholder: &str) -> Result<()> {
        let invalid = |message: String| Error::InvalidExample {
            id: self.id.clone(),
            message,
        };
        let found = count_placeholders(&self.question, placeholder);
        if found != 1 {
            return Err(invalid(format!(
                "question must contain {placeholder:?} exactly once, found {found}"
            )));
        }
        if let Some(i) = self.options.iter().position(|o| o.trim().is_empty()) {
            return Err(invalid(format!("option_{i} is empty")));
        }
        if let Some(g) = self.gold {
            if g >= NUM_OPTIONS {
                return Err(invalid(format!("label {g} outside [0, {}]", NUM_OPTIONS - 1)));
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.gold.is_some()
    }
}

pub(crate) fn count_placeholders(question: &str, placeholder: &str) -> usize {
    if placeholder.is_empty() {
        return 0;
    }
    question.matches(placeholder).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Abort on the first invalid record.
    #[default]
    Strict,
    /// Skip invalid records and count them.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub placeholder: String,
    pub strictness: Strictness,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            placeholder: DEFAULT_PLACEHOLDER.to_string(),
            strictness: Strictness::Strict,
        }
    }
}

/// Examples that survived validation plus the records that lenient mode skipped.
#[derive(Debug, Clone, Default)]
pub struct LoadedSplit {
    pub examples: Vec<McqaExample>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub line: usize,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Placeholder,
    OptionCount,
    Other,
}

#[derive(Deserialize)]
struct RawRecord {
    id: RawId,
    #[serde(alias = "article")]
    passage: String,
    question: String,
    option_0: Option<String>,
    option_1: Option<String>,
    option_2: Option<String>,
    option_3: Option<String>,
    option_4: Option<String>,
    label: Option<i64>,
}

// Some public releases use numeric ids.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Text(String),
    Number(i64),
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    passage: &'a str,
    question: &'a str,
    option_0: &'a str,
    option_1: &'a str,
    option_2: &'a str,
    option_3: &'a str,
    option_4: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

fn record_to_example(raw: RawRecord) -> std::result::Result<McqaExample, (String, ViolationKind, String)> {
    let id = match raw.id {
        RawId::Text(s) => s,
        RawId::Number(n) => n.to_string(),
    };
    let present: Vec<String> = [raw.option_0, raw.option_1, raw.option_2, raw.option_3, raw.option_4]
        .into_iter()
        .flatten()
        .collect();
    let options: [String; NUM_OPTIONS] = match present.try_into() {
        Ok(options) => options,
        Err(found) => {
            let found: Vec<String> = found;
            return Err((
                id,
                ViolationKind::OptionCount,
                format!("expected {NUM_OPTIONS} options, found {}", found.len()),
            ));
        }
    };
    let gold = match raw.label {
        None => None,
        Some(l) if (0..NUM_OPTIONS as i64).contains(&l) => Some(l as usize),
        Some(l) => {
            return Err((
                id,
                ViolationKind::Other,
                format!("label {l} outside [0, {}]", NUM_OPTIONS - 1),
            ))
        }
    };
    Ok(McqaExample {
        id,
        passage: raw.passage,
        question: raw.question,
        options,
        gold,
    })
}

fn classify(example: &McqaExample, placeholder: &str) -> ViolationKind {
    if count_placeholders(&example.question, placeholder) != 1 {
        ViolationKind::Placeholder
    } else {
        ViolationKind::Other
    }
}

/// Reads one split from a line-delimited record file.
///
/// Blank lines are ignored. In strict mode the first malformed or invalid
/// record aborts the load; in lenient mode schema violations are skipped and
/// reported in [`LoadedSplit::skipped`] (JSON syntax errors are always fatal).
pub fn load_dataset(path: impl AsRef<Path>, split: Split, options: &LoadOptions) -> Result<LoadedSplit> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = LoadedSplit::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let checked = record_to_example(raw).and_then(|ex| match ex.validate(&options.placeholder) {
            Ok(()) => Ok(ex),
            Err(e) => Err((ex.id.clone(), classify(&ex, &options.placeholder), strip_id(e))),
        });
        match checked {
            Ok(example) => loaded.examples.push(example),
            Err((id, kind, message)) => match options.strictness {
                Strictness::Strict => {
                    return Err(Error::InvalidExample {
                        id,
                        message: format!("{message} (line {line_no})"),
                    })
                }
                Strictness::Lenient => {
                    log::debug!("{split}: skipping line {line_no} ({id}): {message}");
                    loaded.skipped.push(SkippedRecord {
                        line: line_no,
                        kind,
                        message,
                    });
                }
            },
        }
    }
    Ok(loaded)
}

fn strip_id(e: Error) -> String {
    match e {
        Error::InvalidExample { message, .. } => message,
        other => other.to_string(),
    }
}

/// Writes examples in the same line-delimited format [`load_dataset`] reads.
pub fn write_dataset(path: impl AsRef<Path>, examples: &[McqaExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for ex in examples {
        let [o0, o1, o2, o3, o4] = &ex.options;
        let record = OutRecord {
            id: &ex.id,
            passage: &ex.passage,
            question: &ex.question,
            option_0: o0,
            option_1: o1,
            option_2: o2,
            option_3: o3,
            option_4: o4,
            label: ex.gold,
        };
        let line = serde_json::to_string(&record).expect("record serialization is infallible");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub split: String,
    pub count: usize,
    pub placeholder_violations: usize,
    pub option_count_violations: usize,
    pub expected: Option<ExpectedCount>,
}

impl SplitStats {
    /// `None` when no expected count is configured.
    pub fn matches_expected(&self) -> Option<bool> {
        self.expected.map(|e| e.primary == self.count)
    }

    /// Adds the violations skipped by a lenient load.
    pub fn with_skipped(mut self, skipped: &[SkippedRecord]) -> Self {
        for s in skipped {
            match s.kind {
                ViolationKind::Placeholder => self.placeholder_violations += 1,
                ViolationKind::OptionCount => self.option_count_violations += 1,
                ViolationKind::Other => {}
            }
        }
        self
    }
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "split={} count={} placeholder_violations={} option_count_violations={}",
            self.split, self.count, self.placeholder_violations, self.option_count_violations
        )?;
        if let Some(e) = self.expected {
            write!(f, " expected={}", e.primary)?;
            if let Some(alt) = e.alternate {
                write!(f, " (alt {alt})")?;
            }
        }
        Ok(())
    }
}

/// Published split size for a split. `alternate` holds the count under the
/// other reading of the ambiguous test/dev ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpectedCount {
    pub primary: usize,
    pub alternate: Option<usize>,
}

/// Known sizes of the two ReCAM subtasks, read as train/test/dev.
pub fn recam_expected_count(task: &str, split: Split) -> Option<ExpectedCount> {
    let (train, test, dev) = match task.to_ascii_lowercase().as_str() {
        "imperceptibility" | "subtask1" | "i" => (3227, 2025, 837),
        "nonspecificity" | "subtask2" | "n" => (3318, 2017, 851),
        _ => return None,
    };
    Some(match split {
        Split::Train => ExpectedCount {
            primary: train,
            alternate: None,
        },
        Split::Test => ExpectedCount {
            primary: test,
            alternate: Some(dev),
        },
        Split::Dev => ExpectedCount {
            primary: dev,
            alternate: Some(test),
        },
    })
}

pub fn dataset_stats(split: &str, examples: &[McqaExample], placeholder: &str) -> SplitStats {
    SplitStats {
        split: split.to_string(),
        count: examples.len(),
        placeholder_violations: examples
            .iter()
            .filter(|e| count_placeholders(&e.question, placeholder) != 1)
            .count(),
        option_count_violations: examples
            .iter()
            .filter(|e| e.options.iter().any(|o| o.trim().is_empty()))
            .count(),
        expected: None,
    }
}

/// Attaches an expected count and logs a warning when the observed count
/// matches neither reading.
pub fn check_expected(mut stats: SplitStats, expected: Option<ExpectedCount>) -> SplitStats {
    stats.expected = expected;
    if let Some(e) = expected {
        if e.primary != stats.count {
            if e.alternate == Some(stats.count) {
                log::warn!(
                    "{}: {} examples matches the alternate split reading, not {}",
                    stats.split,
                    stats.count,
                    e.primary
                );
            } else {
                log::warn!("{}: {} examples, expected {}", stats.split, stats.count, e.primary);
            }
        }
    }
    stats
}
