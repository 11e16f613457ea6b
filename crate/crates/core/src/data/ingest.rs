//! Delimited-table ingestion for externally prepared datasets.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_indices, Dataset, DatasetKind, SplitSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How to read a table. Feature columns (all columns except the label and
/// ignored ones, with each categorical column replaced in place by its
/// one-hot indicators) are read time-major: with `timesteps = T` and `F`
/// feature columns, column `c` holds timestep `c / (F/T)`, feature `c % (F/T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    pub label: String,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
    /// Allowed label values in class order; inferred (sorted) when absent.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default = "one")]
    pub timesteps: usize,
    /// Field separator; inferred from the extension or header when absent.
    #[serde(default)]
    pub delimiter: Option<char>,
    /// Split whose train part provides the standardization statistics.
    #[serde(default = "external_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub split_seed: u64,
}

fn one() -> usize {
    1
}

fn external_split() -> SplitSpec {
    SplitSpec::for_kind(DatasetKind::External)
}

impl TableSchema {
    pub fn new(label: impl Into<String>) -> Self {
        TableSchema {
            label: label.into(),
            categorical: Vec::new(),
            ignore: Vec::new(),
            classes: None,
            timesteps: 1,
            delimiter: None,
            split: external_split(),
            split_seed: 0,
        }
    }
}

fn ingest_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Ingest {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

enum Column {
    Numeric(usize),
    Categorical(usize, Vec<String>),
}

/// Reads a comma- or tab-separated table with a one-line header. Rows in
/// error messages count data records from 1.
pub fn ingest_table(path: &Path, schema: &TableSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let delimiter = schema.delimiter.unwrap_or_else(|| {
        let tsv = path.extension().is_some_and(|e| e == "tsv");
        let header = text.lines().next().unwrap_or("");
        if tsv || header.contains('\t') {
            '\t'
        } else {
            ','
        }
    });
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ingest_err(0, "", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_at = header
        .iter()
        .position(|h| *h == schema.label)
        .ok_or_else(|| ingest_err(0, &schema.label, "label column not in header"))?;
    for name in schema.categorical.iter().chain(&schema.ignore) {
        if !header.contains(name) {
            return Err(ingest_err(0, name, "column not in header"));
        }
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ingest_err(i + 1, "", e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(ingest_err(0, "", "table has no data rows"));
    }

    let mut columns = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if c == label_at || schema.ignore.contains(name) {
            continue;
        }
        if schema.categorical.contains(name) {
            let levels: BTreeSet<String> = rows.iter().map(|r| r[c].clone()).collect();
            columns.push(Column::Categorical(c, levels.into_iter().collect()));
        } else {
            columns.push(Column::Numeric(c));
        }
    }

    let classes = match &schema.classes {
        Some(c) => c.clone(),
        None => infer_classes(rows.iter().map(|r| r[label_at].as_str())),
    };
    let n = rows.len();
    let mut y = Vec::with_capacity(n);
    let mut feats: Vec<f64> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let label = &r[label_at];
        let k = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| ingest_err(i + 1, &schema.label, format!("unknown label value {label:?}")))?;
        y.push(k);
        for col in &columns {
            match col {
                Column::Numeric(c) => {
                    let v: f64 = r[*c].parse().map_err(|_| {
                        ingest_err(i + 1, &header[*c], format!("non-numeric cell {:?}", r[*c]))
                    })?;
                    if !v.is_finite() {
                        return Err(ingest_err(i + 1, &header[*c], "non-finite cell"));
                    }
                    feats.push(v);
                }
                Column::Categorical(c, levels) => {
                    feats.extend(levels.iter().map(|l| (*l == r[*c]) as u8 as f64));
                }
            }
        }
    }

    let width = feats.len() / n;
    let t = schema.timesteps;
    if t == 0 || width % t != 0 || width == 0 {
        return Err(Error::Config(format!(
            "{width} feature columns cannot be laid out over {t} timesteps"
        )));
    }
    let d = width / t;
    let [train, _, _] = split_indices(n, &schema.split, schema.split_seed)?;
    let basis: Vec<usize> = if train.is_empty() { (0..n).collect() } else { train };
    standardize(&mut feats, &basis, t, d);
    Dataset::new(Tensor::new(&[n, t, d], feats)?, y, classes.len(), DatasetKind::External)
}

fn infer_classes<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = values.collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    v
}

/// Per-feature standardization with statistics over `basis` rows and all
/// timesteps. Zero-variance features become all zeros.
fn standardize(x: &mut [f64], basis: &[usize], t: usize, d: usize) {
    for j in 0..d {
        let vals = || basis.iter().flat_map(move |&i| (0..t).map(move |s| (i * t + s) * d + j));
        let count = (basis.len() * t) as f64;
        let mean = vals().map(|k| x[k]).sum::<f64>() / count;
        let var = vals().map(|k| (x[k] - mean).powi(2)).sum::<f64>() / count;
        let sd = var.sqrt();
        let n = x.len() / (t * d);
        for i in 0..n {
            for s in 0..t {
                let k = (i * t + s) * d + j;
                x[k] = if sd > 1e-12 { (x[k] - mean) / sd } else { 0.0 };
            }
        }
    }
}
