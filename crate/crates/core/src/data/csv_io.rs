//! CSV ingestion with header `domain_id,group_id,f_0,...,f_{F-1},label`.
//!
//! Rows are numbered from 1 (the first data row after the header) in every
//! error message. Nothing is coerced: a malformed cell is always an error.

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use std::path::Path;

/// Optional overrides for what a CSV file is expected to contain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvSchema {
    /// Domain count; inferred as `max(domain_id) + 1` when absent.
    pub n_domains: Option<usize>,
    /// Per-field vocabulary sizes; inferred as `max(id) + 1` when absent.
    /// When present, also fixes the number of feature columns.
    pub vocab_sizes: Option<Vec<usize>>,
}

fn header_for(n_fields: usize) -> Vec<String> {
    let mut h = vec!["domain_id".to_string(), "group_id".to_string()];
    h.extend((0..n_fields).map(|f| format!("f_{f}")));
    h.push("label".into());
    h
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header_for(dataset.n_fields()))
        .map_err(|e| csv_err(path, e))?;
    let mut record = Vec::with_capacity(dataset.n_fields() + 3);
    for s in dataset.samples() {
        record.clear();
        record.push(s.domain_id.to_string());
        record.push(s.group_id.to_string());
        record.extend(s.feature_ids.iter().map(usize::to_string));
        record.push(s.label.to_string());
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 3 {
        return Err(Error::Data(format!(
            "{}: header needs domain_id, group_id, feature columns and label",
            path.display()
        )));
    }
    let n_fields = schema
        .vocab_sizes
        .as_ref()
        .map_or(header.len() - 3, Vec::len);
    let expected = header_for(n_fields);
    for name in &expected {
        if !header.contains(name) {
            return Err(Error::Data(format!(
                "{}: missing column {name}",
                path.display()
            )));
        }
    }
    if header != expected {
        return Err(Error::Data(format!(
            "{}: header {:?} does not match expected {:?}",
            path.display(),
            header,
            expected
        )));
    }

    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record =
            record.map_err(|e| Error::Data(format!("{}: row {row}: {e}", path.display())))?;
        let cell = |col: usize| -> Result<u64> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<u64>().map_err(|_| {
                Error::Data(format!(
                    "{}: row {row}, column {}: {raw:?} is not a non-negative integer",
                    path.display(),
                    expected[col]
                ))
            })
        };
        let label = cell(n_fields + 2)?;
        if label > 1 {
            return Err(Error::Data(format!(
                "{}: row {row}: label {label} is not 0 or 1",
                path.display()
            )));
        }
        let feature_ids = (0..n_fields)
            .map(|f| cell(f + 2).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            domain_id: cell(0)? as usize,
            group_id: cell(1)?,
            feature_ids,
            label: label as u8,
        });
    }

    let n_domains = schema
        .n_domains
        .unwrap_or_else(|| samples.iter().map(|s| s.domain_id + 1).max().unwrap_or(1));
    let vocab_sizes = schema.vocab_sizes.clone().unwrap_or_else(|| {
        (0..n_fields)
            .map(|f| {
                samples
                    .iter()
                    .map(|s| s.feature_ids[f] + 1)
                    .max()
                    .unwrap_or(1)
            })
            .collect()
    });
    Dataset::new(n_domains, vocab_sizes, samples)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}
