//! Dataset export and import.
//!
//! A dataset directory holds `manifest.toml` (format version and the full
//! generator configuration) and, per domain `d`, split `s` in
//! `train`/`val`/`test` and 1-based modality `k`:
//!
//! ```text
//! d<d>_<s>_m<k>.csv      one row per sample, one column per feature, no header
//! d<d>_<s>_labels.csv    one class index per row, no header
//! ```
//!
//! Rows keep the generator's order, and values use shortest round-trip
//! formatting, so an export/import cycle is bitwise exact.

use std::path::Path;

use mbcd_core::data::{DataGenConfig, MultiModalBatch, MultiModalDataset};
use mbcd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};
use crate::table::num;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATASET_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    data: DataGenConfig,
}

/// Train/val/test batches of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub train: MultiModalBatch,
    pub val: MultiModalBatch,
    pub test: MultiModalBatch,
}

impl DomainSplits {
    pub fn split(&self, name: &str) -> Option<&MultiModalBatch> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportedDataset {
    pub config: DataGenConfig,
    pub domains: Vec<DomainSplits>,
}

impl ImportedDataset {
    /// True when every batch equals the corresponding generated one bitwise.
    pub fn matches(&self, generated: &MultiModalDataset) -> bool {
        self.config == generated.config
            && self.domains.len() == generated.domains.len()
            && self.domains.iter().zip(&generated.domains).all(|(a, b)| {
                a.train == b.train && a.val == b.val && a.test == b.test
            })
    }
}

fn lines(values: &[f64], cols: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(cols) {
        let fields: Vec<String> = row.iter().map(|&v| num(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn export(dataset: &MultiModalDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        data: dataset.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| LabError::Config(e.to_string()))?;
    write(&dir.join(MANIFEST_FILE), text)?;
    for (d, dom) in dataset.domains.iter().enumerate() {
        for (name, batch) in [("train", &dom.train), ("val", &dom.val), ("test", &dom.test)] {
            for (k, x) in batch.modalities.iter().enumerate() {
                write(&dir.join(format!("d{d}_{name}_m{}.csv", k + 1)), lines(x.data(), x.shape()[1]))?;
            }
            let labels: String = batch.labels.iter().map(|y| format!("{y}\n")).collect();
            write(&dir.join(format!("d{d}_{name}_labels.csv")), labels)?;
        }
    }
    Ok(())
}

fn parse_err(path: &Path, message: String) -> LabError {
    LabError::Parse {
        path: path.to_path_buf(),
        message,
    }
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
    let mut data = Vec::with_capacity(rows * cols);
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        if rec.len() != cols {
            return Err(parse_err(path, format!("row {} has {} columns, expected {cols}", n + 1, rec.len())));
        }
        for f in rec.iter() {
            data.push(f.parse().map_err(|_| parse_err(path, format!("row {}: bad number `{f}`", n + 1)))?);
        }
        n += 1;
    }
    if n != rows {
        return Err(parse_err(path, format!("{n} rows, expected {rows}")));
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn read_labels(path: &Path, rows: usize, classes: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let labels = text
        .lines()
        .enumerate()
        .map(|(i, l)| match l.trim().parse::<usize>() {
            Ok(y) if y < classes => Ok(y),
            _ => Err(parse_err(path, format!("row {}: `{l}` is not a class in 0..{classes}", i + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != rows {
        return Err(parse_err(path, format!("{} rows, expected {rows}", labels.len())));
    }
    Ok(labels)
}

pub fn import(dir: &Path) -> Result<ImportedDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| parse_err(&path, e.to_string()))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(parse_err(&path, format!("dataset version {} is not supported", manifest.format_version)));
    }
    let config = manifest.data;
    config.validate()?;
    let sizes = [config.train_per_domain, config.val_per_domain, config.test_per_domain];
    let mut domains = Vec::with_capacity(config.num_domains);
    for d in 0..config.num_domains {
        let mut batches = Vec::with_capacity(3);
        for (name, &rows) in SPLITS.iter().zip(&sizes) {
            let modalities = config
                .input_dims
                .iter()
                .enumerate()
                .map(|(k, &cols)| read_matrix(&dir.join(format!("d{d}_{name}_m{}.csv", k + 1)), rows, cols))
                .collect::<Result<_>>()?;
            let labels = read_labels(&dir.join(format!("d{d}_{name}_labels.csv")), rows, config.num_classes)?;
            batches.push(MultiModalBatch { modalities, labels });
        }
        let mut it = batches.into_iter();
        let (train, val, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        domains.push(DomainSplits { train, val, test });
    }
    Ok(ImportedDataset { config, domains })
}
