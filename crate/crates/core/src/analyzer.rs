//! Per-example prediction records and case-analysis output.
//!
//! Display values are the option logits shifted by a constant bias so that
//! bar charts start above zero. The shift is cosmetic: softmax, argmax and
//! correctness never see it.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::composer::InputMode;
use crate::dataset::McqaExample;
use crate::head::{option_distribution, OptionScores};
use crate::model::Model;
use crate::trainer::write_text;
use crate::{Error, Result, NUM_OPTIONS};

pub const DEFAULT_DISPLAY_BIAS: f64 = 12.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub options: [String; NUM_OPTIONS],
    pub logits: [f64; NUM_OPTIONS],
    pub display_bias: f64,
    pub display: [f64; NUM_OPTIONS],
    pub probabilities: [f64; NUM_OPTIONS],
    pub predicted: usize,
    pub gold: Option<usize>,
}

impl PredictionRecord {
    pub fn from_scores(example: &McqaExample, scores: &OptionScores, display_bias: f64) -> Self {
        Self {
            id: example.id.clone(),
            options: example.options.clone(),
            logits: scores.logits,
            display_bias,
            display: scores.logits.map(|s| s + display_bias),
            probabilities: scores.probabilities,
            predicted: scores.predicted,
            gold: example.gold,
        }
    }

    pub fn correct(&self) -> Option<bool> {
        self.gold.map(|g| g == self.predicted)
    }
}

pub fn prediction_record(
    model: &Model,
    example: &McqaExample,
    mode: InputMode,
    display_bias: f64,
) -> Result<PredictionRecord> {
    let scores = model.predict(example, mode)?;
    Ok(PredictionRecord::from_scores(example, &scores, display_bias))
}

/// Records for `examples`, optionally restricted to the given ids (in the
/// order the ids are listed). Unknown ids are an error.
pub fn prediction_records(
    model: &Model,
    examples: &[McqaExample],
    ids: Option<&[String]>,
    mode: InputMode,
    display_bias: f64,
) -> Result<Vec<PredictionRecord>> {
    let selected: Vec<&McqaExample> = match ids {
        None => examples.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                examples
                    .iter()
                    .find(|e| &e.id == id)
                    .ok_or_else(|| Error::Precondition(format!("no example with id {id:?}")))
            })
            .collect::<Result<_>>()?,
    };
    selected
        .par_iter()
        .map(|ex| prediction_record(model, ex, mode, display_bias))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    /// SVG bar chart.
    Plot,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "plot" | "svg" => Ok(ReportFormat::Plot),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv or plot)"))),
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "id",
    "option_index",
    "option_text",
    "logit",
    "display_value",
    "probability",
    "is_predicted",
    "is_gold",
];

pub fn emit_report(records: &[PredictionRecord], out_path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Precondition("no prediction records to report".into()));
    }
    let path = out_path.as_ref();
    match format {
        ReportFormat::Csv => write_csv(records, path),
        ReportFormat::Plot => write_text(path, &render_svg(records)),
    }
}

/// One row per option, grouped by record.
fn write_csv(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        for k in 0..NUM_OPTIONS {
            w.write_record([
                r.id.clone(),
                k.to_string(),
                r.options[k].clone(),
                r.logits[k].to_string(),
                r.display[k].to_string(),
                r.probabilities[k].to_string(),
                u8::from(r.predicted == k).to_string(),
                u8::from(r.gold == Some(k)).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads records back from [`emit_report`]'s CSV output.
pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if !rows.len().is_multiple_of(NUM_OPTIONS) {
        return Err(Error::Precondition(format!(
            "{} option rows is not a multiple of {NUM_OPTIONS}",
            rows.len()
        )));
    }
    rows.chunks(NUM_OPTIONS)
        .map(|group| {
            let field = |row: &csv::StringRecord, i: usize| row.get(i).unwrap_or_default().to_string();
            let num = |row: &csv::StringRecord, i: usize| -> Result<f64> {
                field(row, i)
                    .parse()
                    .map_err(|_| Error::Precondition(format!("bad number in column {}", CSV_HEADER[i])))
            };
            let id = field(&group[0], 0);
            let mut logits = [0.0; NUM_OPTIONS];
            let mut display = [0.0; NUM_OPTIONS];
            let mut probabilities = [0.0; NUM_OPTIONS];
            let mut options: [String; NUM_OPTIONS] = Default::default();
            let (mut predicted, mut gold) = (0, None);
            for (k, row) in group.iter().enumerate() {
                if field(row, 0) != id || field(row, 1) != k.to_string() {
                    return Err(Error::Precondition(format!("rows for {id:?} are out of order")));
                }
                options[k] = field(row, 2);
                logits[k] = num(row, 3)?;
                display[k] = num(row, 4)?;
                probabilities[k] = num(row, 5)?;
                if field(row, 6) == "1" {
                    predicted = k;
                }
                if field(row, 7) == "1" {
                    gold = Some(k);
                }
            }
            Ok(PredictionRecord {
                id,
                options,
                logits,
                display_bias: display[0] - logits[0],
                display,
                probabilities,
                predicted,
                gold,
            })
        })
        .collect()
}

/// Bar chart of display values, one panel per record. Gold bars are green,
/// the predicted option is outlined.
pub fn render_svg(records: &[PredictionRecord]) -> String {
    const PANEL_W: f64 = 420.0;
    const PANEL_H: f64 = 220.0;
    const MARGIN: f64 = 40.0;
    let width = PANEL_W + 2.0 * MARGIN;
    let height = records.len() as f64 * (PANEL_H + MARGIN) + MARGIN;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, r) in records.iter().enumerate() {
        let top = MARGIN + i as f64 * (PANEL_H + MARGIN);
        let hi = r.display.iter().copied().fold(0.0f64, f64::max);
        let lo = r.display.iter().copied().fold(0.0f64, f64::min);
        let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
        let plot_h = PANEL_H - 40.0;
        let y_of = |v: f64| top + 20.0 + (hi - v) / span * plot_h;
        let zero = y_of(0.0);
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{}">{} (bias {})</text>"#,
            top + 10.0,
            xml_escape(&r.id),
            r.display_bias
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN}" x2="{}" y1="{zero:.2}" y2="{zero:.2}" stroke="#444"/>"##,
            MARGIN + PANEL_W
        );
        let slot = PANEL_W / NUM_OPTIONS as f64;
        for k in 0..NUM_OPTIONS {
            let v = r.display[k];
            let (y, h) = if v >= 0.0 {
                (y_of(v), zero - y_of(v))
            } else {
                (zero, y_of(v) - zero)
            };
            let x = MARGIN + k as f64 * slot + slot * 0.15;
            let fill = if r.gold == Some(k) { "#2e7d32" } else { "#90a4ae" };
            let stroke = if r.predicted == k {
                r##" stroke="#000" stroke-width="2""##
            } else {
                ""
            };
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{fill}"{stroke}/>"#,
                slot * 0.7
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.2}</text>"#,
                x + slot * 0.35,
                y - 4.0,
                v
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">({}) {}</text>"#,
                x + slot * 0.35,
                top + PANEL_H - 5.0,
                (b'a' + k as u8) as char,
                xml_escape(&r.options[k])
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Probabilities recomputed from a record's logits.
pub fn recompute_probabilities(record: &PredictionRecord) -> Result<Vec<f64>> {
    option_distribution(&record.logits)
}
