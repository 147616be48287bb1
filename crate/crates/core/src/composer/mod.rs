//! Builds model inputs: fills the placeholder with an option to form the
//! summary, then frames `[CLS] passage [SEP] summary [SEP] ...` under a token
//! budget.

mod tokenizer;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use tokenizer::{normalize, Tokenizer, WhitespaceTokenizer, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use crate::dataset::{count_placeholders, McqaExample, DEFAULT_PLACEHOLDER};
use crate::{Error, Result, NUM_OPTIONS};

/// The question with one option written into its placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub text: String,
    pub option_index: usize,
    /// Character (not byte) range of the option inside `text`.
    pub option_span: Range<usize>,
}

impl Summary {
    pub fn option_text(&self) -> &str {
        let mut chars = self.text.char_indices().map(|(i, _)| i).chain([self.text.len()]);
        let start = chars.nth(self.option_span.start).unwrap_or(self.text.len());
        let end = self
            .text
            .char_indices()
            .map(|(i, _)| i)
            .chain([self.text.len()])
            .nth(self.option_span.end)
            .unwrap_or(self.text.len());
        &self.text[start..end]
    }
}

/// The summary for option `option_index` of `example`.
pub fn summarize(example: &McqaExample, option_index: usize, placeholder: &str) -> Result<Summary> {
    let option = example
        .options
        .get(option_index)
        .ok_or_else(|| Error::Compose(format!("option index {option_index} out of range")))?;
    let mut summary = fill_placeholder(&example.question, option, placeholder)?;
    summary.option_index = option_index;
    Ok(summary)
}

/// Replaces the single `placeholder` occurrence in `question` with `option`.
pub fn fill_placeholder(question: &str, option: &str, placeholder: &str) -> Result<Summary> {
    let found = count_placeholders(question, placeholder);
    if found != 1 {
        return Err(Error::Compose(format!(
            "question must contain {placeholder:?} exactly once, found {found}"
        )));
    }
    let at = question.find(placeholder).expect("counted above");
    let start = question[..at].chars().count();
    let mut text = String::with_capacity(question.len() - placeholder.len() + option.len());
    text.push_str(&question[..at]);
    text.push_str(option);
    text.push_str(&question[at + placeholder.len()..]);
    Ok(Summary {
        text,
        option_index: 0,
        option_span: start..start + option.chars().count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    PassageSummary,
    PassageSummaryQuestion,
    PassageSummaryAnswer,
    /// Passage, raw question and raw option: the conventional baseline input.
    PassageQuestionAnswer,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [
        InputMode::PassageSummary,
        InputMode::PassageSummaryQuestion,
        InputMode::PassageSummaryAnswer,
        InputMode::PassageQuestionAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::PassageSummary => "passage_summary",
            InputMode::PassageSummaryQuestion => "passage_summary_question",
            InputMode::PassageSummaryAnswer => "passage_summary_answer",
            InputMode::PassageQuestionAnswer => "passage_question_answer",
        }
    }

    /// Row label in the style of the published result tables.
    pub fn label(self) -> &'static str {
        match self {
            InputMode::PassageSummary => "Passage + summary",
            InputMode::PassageSummaryQuestion => "Passage + summary + question",
            InputMode::PassageSummaryAnswer => "Passage + summary + answer",
            InputMode::PassageQuestionAnswer => "Passage + question + answer",
        }
    }

    /// Segments after the passage, in order.
    pub fn segments(self) -> &'static [Segment] {
        match self {
            InputMode::PassageSummary => &[Segment::Summary],
            InputMode::PassageSummaryQuestion => &[Segment::Summary, Segment::Question],
            InputMode::PassageSummaryAnswer => &[Segment::Summary, Segment::Answer],
            InputMode::PassageQuestionAnswer => &[Segment::Question, Segment::Answer],
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown input mode {s:?} (expected one of {})",
                InputMode::ALL.map(InputMode::as_str).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Special,
    Passage,
    Summary,
    Question,
    Answer,
}

impl Segment {
    /// Question and answer columns pool together with the summary.
    pub fn is_candidate(self) -> bool {
        matches!(self, Segment::Summary | Segment::Question | Segment::Answer)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub passage_dropped: usize,
    pub summary_dropped: usize,
    /// Tokens dropped from appended question/answer segments.
    pub extra_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedInput {
    pub tokens: Vec<u32>,
    pub segment_map: Vec<Segment>,
    pub attention_mask: Vec<u8>,
    pub mode: InputMode,
    pub truncation: TruncationReport,
}

impl ComposedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens carrying `segment` with a live attention mask.
    pub fn segment_tokens(&self, segment: Segment) -> Vec<u32> {
        self.tokens
            .iter()
            .zip(&self.segment_map)
            .zip(&self.attention_mask)
            .filter(|((_, s), m)| **s == segment && **m == 1)
            .map(|((t, _), _)| *t)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub max_len: usize,
    /// Passage tokens kept before any other segment is cut.
    pub passage_floor: usize,
    pub placeholder: String,
    /// Pad with `[PAD]` (mask 0) up to `max_len`.
    pub pad_to_max: bool,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            max_len: 256,
            passage_floor: 1,
            placeholder: DEFAULT_PLACEHOLDER.to_string(),
            pad_to_max: false,
        }
    }
}

pub const MIN_MAX_LEN: usize = 8;

/// Cuts segments so that `passage + others + specials <= max_len`.
///
/// The passage tail goes first, down to `passage_floor`. After that the
/// trailing segments of `others` are tail-cut in reverse order, each down to a
/// single token; `others[0]` (the summary when present) is cut last. Returns
/// the number of tokens dropped from the passage and from each other segment.
pub fn truncate(
    passage: &mut Vec<u32>,
    others: &mut [Vec<u32>],
    max_len: usize,
    passage_floor: usize,
) -> Result<(usize, Vec<usize>)> {
    let specials = 2 + others.len();
    let minimum = specials + passage_floor.min(passage.len()) + others.iter().filter(|s| !s.is_empty()).count();
    if max_len < minimum {
        return Err(Error::Compose(format!(
            "max_len {max_len} cannot hold {specials} special tokens plus the minimal segments ({minimum} tokens)"
        )));
    }
    let budget = max_len - specials;
    let mut total = passage.len() + others.iter().map(Vec::len).sum::<usize>();

    let passage_before = passage.len();
    if total > budget {
        let floor = passage_floor.min(passage.len());
        let keep = passage.len() - (total - budget).min(passage.len() - floor);
        passage.truncate(keep);
        total = passage.len() + others.iter().map(Vec::len).sum::<usize>();
    }
    let mut dropped = vec![0; others.len()];
    for (seg, drop) in others.iter_mut().zip(dropped.iter_mut()).rev() {
        if total <= budget {
            break;
        }
        let can_drop = seg.len().saturating_sub(1);
        let cut = (total - budget).min(can_drop);
        seg.truncate(seg.len() - cut);
        *drop = cut;
        total -= cut;
    }
    debug_assert!(total <= budget);
    Ok((passage_before - passage.len(), dropped))
}

/// Encodes `(example, option)` under `mode`.
pub fn compose_input(
    example: &McqaExample,
    option_index: usize,
    mode: InputMode,
    config: &ComposeConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<ComposedInput> {
    if option_index >= NUM_OPTIONS {
        return Err(Error::Compose(format!("option index {option_index} out of range")));
    }
    if config.max_len < MIN_MAX_LEN {
        return Err(Error::Config(format!(
            "max_len must be at least {MIN_MAX_LEN}, got {}",
            config.max_len
        )));
    }
    let mut passage = tokenizer.encode(&example.passage)?;
    if passage.is_empty() {
        return Err(Error::Compose(format!(
            "example {:?}: passage is empty after tokenization",
            example.id
        )));
    }
    let option = &example.options[option_index];

    let mut labels = Vec::new();
    let mut others = Vec::new();
    for &segment in mode.segments() {
        let tokens = match segment {
            Segment::Summary => {
                let summary = summarize(example, option_index, &config.placeholder)?;
                tokenizer.encode(&summary.text)?
            }
            Segment::Question => tokenizer.encode(&example.question)?,
            Segment::Answer => tokenizer.encode(option)?,
            Segment::Special | Segment::Passage => unreachable!("not a trailing segment"),
        };
        if tokens.is_empty() {
            if segment == Segment::Summary {
                return Err(Error::Compose(format!(
                    "example {:?}: summary is empty after tokenization",
                    example.id
                )));
            }
            // Empty appended segments are left out together with their separator.
            continue;
        }
        labels.push(segment);
        others.push(tokens);
    }
    if others.is_empty() {
        return Err(Error::Compose(format!(
            "example {:?}: no candidate tokens under mode {mode}",
            example.id
        )));
    }

    let (passage_dropped, dropped) = truncate(&mut passage, &mut others, config.max_len, config.passage_floor)?;
    let mut truncation = TruncationReport {
        passage_dropped,
        ..Default::default()
    };
    for (label, d) in labels.iter().zip(&dropped) {
        match label {
            Segment::Summary => truncation.summary_dropped += d,
            _ => truncation.extra_dropped += d,
        }
    }

    let mut tokens = Vec::with_capacity(config.max_len);
    let mut segment_map = Vec::with_capacity(config.max_len);
    tokens.push(CLS_ID);
    segment_map.push(Segment::Special);
    for (label, seg) in std::iter::once((Segment::Passage, passage)).chain(labels.into_iter().zip(others)) {
        segment_map.extend(std::iter::repeat_n(label, seg.len()));
        tokens.extend(seg);
        tokens.push(SEP_ID);
        segment_map.push(Segment::Special);
    }
    let mut attention_mask = vec![1u8; tokens.len()];
    if config.pad_to_max {
        let pad = config.max_len - tokens.len();
        tokens.extend(std::iter::repeat_n(PAD_ID, pad));
        segment_map.extend(std::iter::repeat_n(Segment::Special, pad));
        attention_mask.extend(std::iter::repeat_n(0, pad));
    }
    Ok(ComposedInput {
        tokens,
        segment_map,
        attention_mask,
        mode,
        truncation,
    })
}

/// The five composed inputs of one example, in option order.
pub fn compose_example(
    example: &McqaExample,
    mode: InputMode,
    config: &ComposeConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<ComposedInput>> {
    (0..NUM_OPTIONS)
        .map(|k| compose_input(example, k, mode, config, tokenizer))
        .collect()
}
