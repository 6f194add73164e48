//! Counting metrics and per-image evaluation reports.
//!
//! Two squared-error summaries are reported side by side: `mse_paper`,
//! (1/N) sqrt(sum of squared errors), and the conventional `rmse`,
//! sqrt(mean squared error). They differ by a factor of sqrt(N).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{load_entry, Manifest};
use crate::error::{Error, Result};
use crate::regressor::{forward, image_to_tensor, RegressorModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gt_count: f64,
    pub est_count_hr: f64,
    pub est_count_lr: f64,
    pub abs_error: f64,
}

/// Signed sum of all cells, Kahan-compensated. Negative model outputs count
/// as-is unless the caller clamps first.
pub fn count(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

fn errors<'a>(
    records: &'a [EvalRecord],
    est: impl Fn(&EvalRecord) -> f64 + 'a,
) -> impl Iterator<Item = f64> + 'a {
    records.iter().map(move |r| est(r) - r.gt_count)
}

pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    mae_by(records, |r| r.est_count_hr)
}

pub fn mse_paper(records: &[EvalRecord]) -> Result<f64> {
    mse_paper_by(records, |r| r.est_count_hr)
}

pub fn rmse(records: &[EvalRecord]) -> Result<f64> {
    rmse_by(records, |r| r.est_count_hr)
}

fn mae_by(records: &[EvalRecord], est: impl Fn(&EvalRecord) -> f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let abs: Vec<f64> = errors(records, est).map(f64::abs).collect();
    Ok(count(&abs) / records.len() as f64)
}

fn mse_paper_by(records: &[EvalRecord], est: impl Fn(&EvalRecord) -> f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let sq: Vec<f64> = errors(records, est).map(|e| e * e).collect();
    Ok(count(&sq).sqrt() / records.len() as f64)
}

fn rmse_by(records: &[EvalRecord], est: impl Fn(&EvalRecord) -> f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let sq: Vec<f64> = errors(records, est).map(|e| e * e).collect();
    Ok((count(&sq) / records.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub mse_paper: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary_hr: MetricSummary,
    pub summary_lr: MetricSummary,
    pub records: Vec<EvalRecord>,
}

fn summary_by(records: &[EvalRecord], est: impl Fn(&EvalRecord) -> f64 + Copy) -> Result<MetricSummary> {
    Ok(MetricSummary {
        mae: mae_by(records, est)?,
        mse_paper: mse_paper_by(records, est)?,
        rmse: rmse_by(records, est)?,
    })
}

/// Forward every manifest image through the model and summarize HR/LR counts.
/// Images whose dims are not multiples of 16 are center-cropped first.
pub fn evaluate(
    model: &RegressorModel,
    manifest_path: &Path,
    manifest: &Manifest,
    clamp_nonneg: bool,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let ann = load_entry(manifest_path, entry)?.crop_to_multiple(16);
        let input = image_to_tensor(ann.image.as_ref().unwrap());
        let (hr, lr, _) = forward(model, &input)?;
        let head_count = |t: &crate::tensor::Tensor| {
            if clamp_nonneg {
                let clamped: Vec<f64> = t.data.iter().map(|&v| v.max(0.0)).collect();
                count(&clamped)
            } else {
                count(&t.data)
            }
        };
        let est_hr = head_count(&hr);
        let est_lr = head_count(&lr);
        let gt = ann.count() as f64;
        records.push(EvalRecord {
            id: entry.annotation.clone(),
            gt_count: gt,
            est_count_hr: est_hr,
            est_count_lr: est_lr,
            abs_error: (est_hr - gt).abs(),
        });
    }
    Ok(EvalReport {
        summary_hr: summary_by(&records, |r| r.est_count_hr)?,
        summary_lr: summary_by(&records, |r| r.est_count_lr)?,
        records,
    })
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
