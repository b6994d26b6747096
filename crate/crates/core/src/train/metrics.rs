//! The metrics log: one row per logging event, written as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::EvalRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Train,
    Eval,
}

/// Train rows carry the batch losses at that step; eval rows carry the
/// epoch-mean training losses and the end-of-epoch report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    /// Completed fraction of training when the step started.
    pub s: f64,
    pub rho_drawn: Option<f64>,
    pub lambda_ma: Option<f64>,
    pub l_det: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_reg: Option<f64>,
    pub l_ma: Option<f64>,
    pub l_total: Option<f64>,
    pub ap50_rgb: Option<f64>,
    pub ap50_ir: Option<f64>,
    pub ap50_avg: Option<f64>,
    pub ap75_rgb: Option<f64>,
    pub ap75_ir: Option<f64>,
    pub ap75_avg: Option<f64>,
    pub ap_rgb: Option<f64>,
    pub ap_ir: Option<f64>,
    pub ap_avg: Option<f64>,
}

impl MetricsRecord {
    pub fn empty(kind: RecordKind, epoch: usize, step: usize, s: f64) -> Self {
        Self {
            kind,
            epoch,
            step,
            s,
            rho_drawn: None,
            lambda_ma: None,
            l_det: None,
            l_cls: None,
            l_reg: None,
            l_ma: None,
            l_total: None,
            ap50_rgb: None,
            ap50_ir: None,
            ap50_avg: None,
            ap75_rgb: None,
            ap75_ir: None,
            ap75_avg: None,
            ap_rgb: None,
            ap_ir: None,
            ap_avg: None,
        }
    }

    pub fn with_eval(mut self, r: EvalRow) -> Self {
        self.ap50_rgb = r.ap50_rgb;
        self.ap50_ir = r.ap50_ir;
        self.ap50_avg = r.ap50_avg;
        self.ap75_rgb = r.ap75_rgb;
        self.ap75_ir = r.ap75_ir;
        self.ap75_avg = r.ap75_avg;
        self.ap_rgb = r.ap_rgb;
        self.ap_ir = r.ap_ir;
        self.ap_avg = r.ap_avg;
        self
    }

    pub fn eval_row(&self) -> EvalRow {
        EvalRow {
            ap50_rgb: self.ap50_rgb,
            ap50_ir: self.ap50_ir,
            ap50_avg: self.ap50_avg,
            ap75_rgb: self.ap75_rgb,
            ap75_ir: self.ap75_ir,
            ap75_avg: self.ap75_avg,
            ap_rgb: self.ap_rgb,
            ap_ir: self.ap_ir,
            ap_avg: self.ap_avg,
        }
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Eval rows only, in order.
pub fn eval_records(records: &[MetricsRecord]) -> impl Iterator<Item = &MetricsRecord> {
    records.iter().filter(|r| r.kind == RecordKind::Eval)
}
