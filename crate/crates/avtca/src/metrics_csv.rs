//! Comma-separated metrics tables. Floats are written in their shortest
//! round-trip form, so a parsed row equals the in-memory report exactly.

use std::fmt::Write as _;
use std::path::Path;

use avtca_core::data::Split;
use avtca_core::metrics::MetricsReport;

use crate::error::{CliError, CliResult};

pub const HEADER: &str = "epoch,split,loss,accuracy,f1_macro,precision_at_5";
pub const PER_CLASS_HEADER: &str = "epoch,split,class,precision,recall";

pub fn row(r: &MetricsReport) -> String {
    format!("{},{},{},{},{},{}", r.epoch, r.split.as_str(), r.loss, r.accuracy, r.f1_macro, r.precision_at_5)
}

pub fn table(rows: &[MetricsReport]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        writeln!(s, "{}", row(r)).unwrap();
    }
    s
}

pub fn per_class_table(rows: &[MetricsReport]) -> String {
    let mut s = format!("{PER_CLASS_HEADER}\n");
    for r in rows {
        for (c, (p, rec)) in r.per_class.iter().enumerate() {
            writeln!(s, "{},{},{c},{p},{rec}", r.epoch, r.split.as_str()).unwrap();
        }
    }
    s
}

/// One parsed row of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub epoch: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision_at_5: f64,
}

impl From<&MetricsReport> for Row {
    fn from(r: &MetricsReport) -> Self {
        Self { epoch: r.epoch, split: r.split, loss: r.loss, accuracy: r.accuracy, f1_macro: r.f1_macro, precision_at_5: r.precision_at_5 }
    }
}

pub fn parse(text: &str) -> CliResult<Vec<Row>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(CliError::Data(format!("metrics table must start with `{HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || CliError::Data(format!("metrics line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(Row {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: Split::parse(f[1]).map_err(|_| bad())?,
                loss: num(f[2])?,
                accuracy: num(f[3])?,
                f1_macro: num(f[4])?,
                precision_at_5: num(f[5])?,
            })
        })
        .collect()
}

pub fn read(path: &Path) -> CliResult<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data_io(path, e))?;
    parse(&text)
}
