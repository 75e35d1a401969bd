use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Dataset;

/// How to interpret a CSV dataset: real feature columns followed by an integer label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct CsvSchema {
    pub has_header: bool,
    /// Number of classes; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
    /// Min-max scale every feature column to `[0, 1]`.
    pub scale: bool,
}


pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(parse_err(line, record.len(), "need at least one feature and a label".into()));
        }
        let f = record.len() - 1;
        match width {
            None => width = Some(f),
            Some(w) if w != f => {
                return Err(parse_err(line, record.len(), format!("expected {} columns", w + 1)));
            }
            _ => {}
        }
        for (col, cell) in record.iter().take(f).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, col + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, col + 1, format!("`{cell}` is not finite")));
            }
            features.push(v);
        }
        let cell = &record[f];
        let y: usize = cell.parse().map_err(|_| {
            parse_err(line, f + 1, format!("label `{cell}` is not a non-negative integer"))
        })?;
        if let Some(c) = schema.num_classes {
            if y >= c {
                return Err(parse_err(line, f + 1, format!("label {y} out of range for {c} classes")));
            }
        }
        labels.push(y);
        lines.push(line);
    }
    let Some(dim) = width else {
        return Err(Error::Empty("CSV file has no data rows"));
    };
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));

    if schema.scale {
        min_max_scale(&mut features, dim);
    }
    Dataset::new(features, labels, dim, num_classes)
}

/// Maps every column to `[0, 1]`; constant columns map to 0.
fn min_max_scale(features: &mut [f64], dim: usize) {
    for col in 0..dim {
        let (lo, hi) = features
            .iter()
            .skip(col)
            .step_by(dim)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in features.iter_mut().skip(col).step_by(dim) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}
