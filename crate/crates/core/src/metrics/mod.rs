//! Parameter/FLOPs accounting, accuracy evaluation and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SignalDataset, Split};
use crate::error::{FcosError, Result};
use crate::model::{LayerKind, ModelGraph};
use crate::tensor::kernels::argmax;
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 256;

/// Trainable scalar count and FLOPs for an input of `input_length` samples.
///
/// Conv and dense layers cost 2 FLOPs per multiply-accumulate (bias adds
/// are not counted); batchnorm costs 2 per element, relu and add 1 per
/// output element, pooling 1 per input element.
pub fn count_params_flops<T: Scalar>(model: &ModelGraph<T>, input_length: usize) -> Result<(u64, u64)> {
    let shapes = model.shapes_for_length(input_length)?;
    let mut flops: u64 = 0;
    for n in model.nodes() {
        let out = shapes[&n.id];
        let elems = (out.channels * out.length) as u64;
        let input = n.inputs.first().map(|i| shapes[i]);
        flops += match &n.kind {
            LayerKind::Input { .. } => 0,
            LayerKind::Conv1d { c_in, c_out, kernel, .. } => {
                2 * (*c_in * *c_out * *kernel * out.length) as u64
            }
            LayerKind::Dense { d_in, d_out, .. } => 2 * (*d_in * *d_out) as u64,
            LayerKind::BatchNorm { .. } => 2 * elems,
            LayerKind::Relu | LayerKind::Add => elems,
            LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool => {
                let i = input.expect("pool has an input");
                (i.channels * i.length) as u64
            }
        };
    }
    Ok((model.param_count() as u64, flops))
}

/// Anything that maps an input batch `[B, 2, L]` to logits `[B, K]`.
pub trait Classifier: Sync {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for ModelGraph<f32> {
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrAccuracy {
    pub snr_db: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Ascending by SNR.
    pub per_snr: Vec<SnrAccuracy>,
}

/// Predicted class per sample of `idx`; argmax ties go to the lowest class.
pub fn predict<C: Classifier + ?Sized>(model: &C, ds: &SignalDataset, idx: &[usize]) -> Result<Vec<usize>> {
    let chunks: Vec<Vec<usize>> = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let (x, _) = ds.batch(chunk);
            let logits = model.logits(&x)?;
            let k = logits.shape()[1];
            Ok(logits.data().chunks(k).map(argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn evaluate<C: Classifier + ?Sized>(model: &C, ds: &SignalDataset, split: Split) -> Result<Evaluation> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(FcosError::Usage(format!("the {split} split is empty")));
    }
    let pred = predict(model, ds, &idx)?;
    let mut by_snr: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&i, &p) in idx.iter().zip(&pred) {
        let hit = (p == ds.labels[i]) as usize;
        correct += hit;
        // order-preserving key for finite floats
        let bits = ds.snr_db[i].to_bits();
        let key = if bits >> 63 == 1 { !bits } else { bits | (1 << 63) };
        let e = by_snr.entry(key).or_insert((ds.snr_db[i], 0, 0));
        e.1 += hit;
        e.2 += 1;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / idx.len() as f64,
        correct,
        total: idx.len(),
        per_snr: by_snr
            .into_values()
            .map(|(snr_db, correct, total)| SnrAccuracy {
                snr_db,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
    })
}

/// Before/after comparison for one pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    pub pruning_type: String,
    pub stage: String,
    pub original_params: u64,
    pub pruned_params: u64,
    pub original_flops: u64,
    pub pruned_flops: u64,
    pub original_acc: f64,
    pub acc: f64,
    pub per_snr: Vec<SnrAccuracy>,
}

impl PruneReport {
    pub fn params_pr(&self) -> f64 {
        pruning_rate(self.original_params, self.pruned_params)
    }

    pub fn flops_pr(&self) -> f64 {
        pruning_rate(self.original_flops, self.pruned_flops)
    }

    pub fn delta_acc(&self) -> f64 {
        self.acc - self.original_acc
    }

    pub fn delta_params(&self) -> i64 {
        self.pruned_params as i64 - self.original_params as i64
    }

    pub fn delta_flops(&self) -> i64 {
        self.pruned_flops as i64 - self.original_flops as i64
    }
}

/// `1 - pruned / original`.
pub fn pruning_rate(original: u64, pruned: u64) -> f64 {
    if original == 0 {
        0.0
    } else {
        1.0 - pruned as f64 / original as f64
    }
}

/// `0.8839 -> "88.39\%"`.
pub fn format_pr(pr: f64) -> String {
    format!("{:.2}\\%", pr * 100.0)
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "Method",
    "Pruning Type",
    "Original Acc",
    "Acc",
    "ΔAcc",
    "ΔFLOPs",
    "ΔParams",
    "FLOPs PR",
    "Params PR",
];

/// One machine-readable report row; every numeric field at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(rename = "Method")]
    pub method: String,
    #[serde(rename = "Pruning Type")]
    pub pruning_type: String,
    #[serde(rename = "Original Acc")]
    pub original_acc: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "ΔAcc")]
    pub delta_acc: f64,
    #[serde(rename = "ΔFLOPs")]
    pub delta_flops: i64,
    #[serde(rename = "ΔParams")]
    pub delta_params: i64,
    #[serde(rename = "FLOPs PR")]
    pub flops_pr: f64,
    #[serde(rename = "Params PR")]
    pub params_pr: f64,
}

impl From<&PruneReport> for ReportRow {
    fn from(r: &PruneReport) -> Self {
        ReportRow {
            method: r.method.clone(),
            pruning_type: r.pruning_type.clone(),
            original_acc: r.original_acc,
            acc: r.acc,
            delta_acc: r.delta_acc(),
            delta_flops: r.delta_flops(),
            delta_params: r.delta_params(),
            flops_pr: r.flops_pr(),
            params_pr: r.params_pr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub per_snr: PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> FcosError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => FcosError::io(path, source),
        other => FcosError::Malformed(format!("{}: {other:?}", path.display())),
    }
}

fn human_count(v: i64) -> String {
    let a = v.unsigned_abs() as f64;
    let sign = if v < 0 { "-" } else { "" };
    if a >= 1e9 {
        format!("{sign}{:.2}G", a / 1e9)
    } else if a >= 1e6 {
        format!("{sign}{:.2}M", a / 1e6)
    } else if a >= 1e3 {
        format!("{sign}{:.2}K", a / 1e3)
    } else {
        format!("{sign}{a}")
    }
}

pub fn markdown_table(reports: &[PruneReport]) -> String {
    let mut s = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
    for r in reports {
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:+.2} | {} | {} | {} | {} |\n",
            r.method,
            r.pruning_type,
            r.original_acc * 100.0,
            r.acc * 100.0,
            r.delta_acc() * 100.0,
            human_count(r.delta_flops()),
            human_count(r.delta_params()),
            format_pr(r.flops_pr()),
            format_pr(r.params_pr()),
        ));
    }
    s
}

/// Writes `{stem}.csv`, `{stem}.md` and `{stem}_per_snr.csv` into `dir`.
pub fn emit_report(reports: &[PruneReport], dir: &Path, stem: &str) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(FcosError::Usage("no reports to emit".into()));
    }
    fs::create_dir_all(dir).map_err(|e| FcosError::io(dir, e))?;
    let files = ReportFiles {
        csv: dir.join(format!("{stem}.csv")),
        markdown: dir.join(format!("{stem}.md")),
        per_snr: dir.join(format!("{stem}_per_snr.csv")),
    };
    let mut w = csv::Writer::from_path(&files.csv).map_err(|e| csv_err(&files.csv, e))?;
    for r in reports {
        w.serialize(ReportRow::from(r)).map_err(|e| csv_err(&files.csv, e))?;
    }
    w.flush().map_err(|e| FcosError::io(&files.csv, e))?;

    fs::write(&files.markdown, markdown_table(reports)).map_err(|e| FcosError::io(&files.markdown, e))?;

    let mut w = csv::Writer::from_path(&files.per_snr).map_err(|e| csv_err(&files.per_snr, e))?;
    w.write_record(["method", "stage", "snr_db", "correct", "total", "accuracy"])
        .map_err(|e| csv_err(&files.per_snr, e))?;
    for r in reports {
        for s in &r.per_snr {
            w.write_record([
                r.method.clone(),
                r.stage.clone(),
                s.snr_db.to_string(),
                s.correct.to_string(),
                s.total.to_string(),
                s.accuracy.to_string(),
            ])
            .map_err(|e| csv_err(&files.per_snr, e))?;
        }
    }
    w.flush().map_err(|e| FcosError::io(&files.per_snr, e))?;
    Ok(files)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// One point of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: String,
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
}

pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FcosError::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}
