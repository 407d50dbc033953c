//! Depth-completion evaluation metrics in benchmark units.
//!
//! Depths are meters; reported errors are millimeters (RMSE, MAE) and
//! inverse-depth errors are 1/km (iRMSE, iMAE). Only pixels with valid
//! ground truth participate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DepthfillError, Result};

/// Full-scale leaderboard reference for this architecture; documentation
/// values only, desk-scale runs are not expected to approach them.
pub const FULL_SCALE_REFERENCE_RMSE_MM: f64 = 709.41;
pub const FULL_SCALE_REFERENCE_MAE_MM: f64 = 205.49;
pub const FULL_SCALE_REFERENCE_IRMSE: f64 = 2.03;
pub const FULL_SCALE_REFERENCE_IMAE: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
}

impl MetricReport {
    pub fn zero() -> Self {
        MetricReport {
            rmse_mm: 0.0,
            mae_mm: 0.0,
            irmse_per_km: 0.0,
            imae_per_km: 0.0,
        }
    }
}

/// Evaluate one prediction against ground truth.
pub fn metrics(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<MetricReport> {
    if pred.dim() != gt.dim() {
        return Err(DepthfillError::dimension(
            "metrics",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let mut n = 0usize;
    let mut bad = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *g > 0.0 {
            n += 1;
            if *p <= 0.0 {
                bad += 1;
            }
        }
    }
    if n == 0 {
        return Err(DepthfillError::EmptyMask);
    }
    if bad > 0 {
        return Err(DepthfillError::NonPositivePrediction { count: bad });
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ise = 0.0;
    let mut iae = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *g > 0.0 {
            let d = g - p;
            se += d * d;
            ae += d.abs();
            let id = 1.0 / g - 1.0 / p;
            ise += id * id;
            iae += id.abs();
        }
    }
    let nf = n as f64;
    Ok(MetricReport {
        rmse_mm: (se / nf).sqrt() * 1000.0,
        mae_mm: ae / nf * 1000.0,
        irmse_per_km: (ise / nf).sqrt() * 1000.0,
        imae_per_km: iae / nf * 1000.0,
    })
}

/// Root-mean-squared error in meters over valid pixels; the quantity the
/// overfit checks track.
pub fn masked_rmse_m(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    Ok((crate::loss::masked_l2(pred, gt)?).sqrt())
}

/// Mean of per-sample metric reports.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(DepthfillError::Validation(
            "cannot aggregate zero metric reports".into(),
        ));
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        rmse_mm: reports.iter().map(|r| r.rmse_mm).sum::<f64>() / n,
        mae_mm: reports.iter().map(|r| r.mae_mm).sum::<f64>() / n,
        irmse_per_km: reports.iter().map(|r| r.irmse_per_km).sum::<f64>() / n,
        imae_per_km: reports.iter().map(|r| r.imae_per_km).sum::<f64>() / n,
    })
}
