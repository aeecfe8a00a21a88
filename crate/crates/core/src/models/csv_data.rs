//! CSV ingestion for tabular data (header row, comma-separated, numeric
//! feature cells, one label column).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, SplitFractions, Splits};
use crate::calib::ClassLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// When set, labels are binary: rows whose label cell equals this string
    /// are class 1, all others class 0. Otherwise label cells must be
    /// non-negative integers.
    #[serde(default)]
    pub positive_class: Option<String>,
    /// Non-feature columns to skip (ids and the like).
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default)]
    pub splits: SplitFractions,
    #[serde(default)]
    pub seed: u64,
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            positive_class: None,
            drop_columns: Vec::new(),
            splits: SplitFractions::default(),
            seed: 0,
        }
    }
}

fn ingest(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a labeled table, splits it with a seeded shuffle and standardizes
/// the features with train-split statistics. Row numbers in errors count data
/// rows from 1 (the header is not a row).
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(path, format!("cannot open: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| ingest(path, format!("bad header: {e}")))?
        .clone();

    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            ingest(
                path,
                format!("unknown label column \"{}\"", schema.label_column),
            )
        })?;
    for d in &schema.drop_columns {
        if !headers.iter().any(|h| h == d) {
            return Err(ingest(
                path,
                format!("unknown column \"{d}\" in drop_columns"),
            ));
        }
    }
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| *i != label_idx && !schema.drop_columns.iter().any(|d| d == h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if feature_cols.is_empty() {
        return Err(ingest(path, "no feature columns"));
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| ingest(path, format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(ingest(
                path,
                format!(
                    "row {row}: expected {} cells, found {}",
                    headers.len(),
                    record.len()
                ),
            ));
        }
        for (c, name) in &feature_cols {
            let cell = &record[*c];
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    ingest(
                        path,
                        format!("row {row}, column \"{name}\": non-numeric cell \"{cell}\""),
                    )
                })?;
            features.push(value);
        }
        let cell = &record[label_idx];
        let label = match &schema.positive_class {
            Some(pos) => usize::from(cell == pos),
            None => cell.parse::<usize>().map_err(|_| {
                ingest(
                    path,
                    format!(
                        "row {row}, column \"{}\": label \"{cell}\" is not a class index",
                        schema.label_column
                    ),
                )
            })?,
        };
        raw_labels.push(label);
    }
    if raw_labels.is_empty() {
        return Err(ingest(path, "no data rows"));
    }
    let n_classes = match schema.positive_class {
        Some(_) => 2,
        None => raw_labels.iter().max().map_or(0, |m| m + 1).max(2),
    };
    let labels = raw_labels
        .into_iter()
        .map(ClassLabel::new)
        .collect::<Vec<_>>();
    let splits = Splits::shuffled(labels.len(), schema.splits, schema.seed)?;
    let names = feature_cols.into_iter().map(|(_, n)| n).collect();
    let n_features = features.len() / labels.len();
    Ok(
        LabeledDataset::new(features, n_features, labels, n_classes, splits)?
            .with_feature_names(names)?
            .standardized(),
    )
}
