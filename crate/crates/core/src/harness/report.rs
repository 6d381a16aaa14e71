use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{EvalReport, InstructionAccuracy, RescueBlock};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "instruction,total,correct,accuracy";
pub const RESCUE_HEADER: &str = "rescue_total,baseline_correct,baseline_failures,rescued,increment";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

pub fn to_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<EvalReport> {
    Ok(serde_json::from_str(text)?)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Accuracy rows, then an optional rescue section after a blank line.
pub fn to_csv(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in &report.per_instruction {
        writeln!(out, "{},{},{},{}", r.instruction, r.total, r.correct, r.accuracy).unwrap();
    }
    if let Some(b) = &report.rescue {
        writeln!(out).unwrap();
        writeln!(out, "{RESCUE_HEADER}").unwrap();
        writeln!(
            out,
            "{},{},{},{},{}",
            b.total,
            b.baseline_correct,
            b.baseline_failures,
            b.rescued,
            b.increment_display()
        )
        .unwrap();
        if let Some(note) = b.note() {
            writeln!(out, "note,{}", quote(&note)).unwrap();
        }
    }
    out
}

/// Tables recovered from a CSV rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTables {
    pub per_instruction: Vec<InstructionAccuracy>,
    /// Increment recomputed from the counts; the rendered value is rounded.
    pub rescue: Option<RescueBlock>,
}

pub fn parse_csv(text: &str) -> Result<CsvTables> {
    let bad = |line: usize, m: &str| Error::Format {
        line,
        message: m.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(bad(1, "missing accuracy header")),
    }
    let mut per_instruction = Vec::new();
    let mut rescue = None;
    let num = |line: usize, s: &str| s.parse::<usize>().map_err(|_| bad(line, "expected an integer"));
    while let Some((n, l)) = lines.next() {
        if l.is_empty() {
            break;
        }
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 4 {
            return Err(bad(n, "expected 4 fields"));
        }
        per_instruction.push(InstructionAccuracy {
            instruction: num(n, f[0])?,
            total: num(n, f[1])?,
            correct: num(n, f[2])?,
            accuracy: f[3].parse().map_err(|_| bad(n, "expected a number"))?,
        });
    }
    if let Some((n, h)) = lines.next() {
        if h != RESCUE_HEADER {
            return Err(bad(n, "missing rescue header"));
        }
        let (n, l) = lines.next().ok_or_else(|| bad(n + 1, "missing rescue row"))?;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 fields"));
        }
        let total = num(n, f[0])?;
        let rescued = num(n, f[3])?;
        rescue = Some(RescueBlock {
            total,
            baseline_correct: num(n, f[1])?,
            baseline_failures: num(n, f[2])?,
            rescued,
            increment: if total == 0 { 0.0 } else { rescued as f64 / total as f64 },
            reference_increment: None,
        });
    }
    Ok(CsvTables {
        per_instruction,
        rescue,
    })
}

pub fn render(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => Ok(to_csv(report)),
        ReportFormat::Json => to_json(report),
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render(report, format)?).map_err(|e| Error::io(path, e))
}

/// Wall-clock seconds per phase, kept apart from the report so that reports
/// stay byte-identical across runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fingerprint: String,
    pub phases: Vec<(String, f64)>,
}

impl Timing {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
