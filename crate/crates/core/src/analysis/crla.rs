//! Task accuracy conditioned on retrieval correctness.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::probe::ProbeReport;
use crate::chartgen::QaKind;
use crate::error::{Error, Result};
use crate::evalkit::InstanceRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlaIrlaReport {
    /// Fraction of samples the retrieval model got right.
    pub p: f64,
    pub crla: Option<f64>,
    pub irla: Option<f64>,
    pub overall: f64,
    pub n: usize,
}

impl CrlaIrlaReport {
    /// |overall - (p·CRLA + (1-p)·IRLA)|, with an undefined side dropped
    /// since its weight is zero.
    pub fn identity_residual(&self) -> f64 {
        let c = self.crla.map_or(0.0, |c| self.p * c);
        let i = self.irla.map_or(0.0, |i| (1.0 - self.p) * i);
        (self.overall - (c + i)).abs()
    }
}

pub fn crla_irla(retrieval_correct: &[bool], task_correct: &[bool]) -> Result<CrlaIrlaReport> {
    if retrieval_correct.len() != task_correct.len() {
        return Err(Error::shape(
            "crla_irla",
            format!("{} retrieval outcomes vs {} task outcomes", retrieval_correct.len(), task_correct.len()),
        ));
    }
    let n = retrieval_correct.len();
    if n == 0 {
        return Err(Error::Contract("crla_irla needs at least one sample".into()));
    }
    let (mut rc, mut rc_ok, mut ri_ok) = (0usize, 0usize, 0usize);
    for (&r, &c) in retrieval_correct.iter().zip(task_correct) {
        if r {
            rc += 1;
            rc_ok += c as usize;
        } else {
            ri_ok += c as usize;
        }
    }
    let ri = n - rc;
    let crla = (rc > 0).then(|| rc_ok as f64 / rc as f64);
    let irla = (ri > 0).then(|| ri_ok as f64 / ri as f64);
    Ok(CrlaIrlaReport { p: rc as f64 / n as f64, crla, irla, overall: (rc_ok + ri_ok) as f64 / n as f64, n })
}

/// Pair each probe test outcome with the retrieval outcome of the same
/// chart on the probe's QA kind. Charts without a retrieval record for
/// that kind are skipped.
pub fn paired_outcomes(
    records: &[InstanceRecord],
    kind: QaKind,
    chart_ids: &[String],
    probe: &ProbeReport,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let by_chart: HashMap<&str, bool> =
        records.iter().filter(|r| r.kind == kind).map(|r| (r.chart_id.as_str(), r.correct)).collect();
    let mut retrieval = Vec::new();
    let mut task = Vec::new();
    for &(row, ok) in &probe.test_outcomes {
        let id = chart_ids
            .get(row)
            .ok_or_else(|| Error::Contract(format!("probe row {row} beyond {} charts", chart_ids.len())))?;
        if let Some(&r) = by_chart.get(id.as_str()) {
            retrieval.push(r);
            task.push(ok);
        }
    }
    Ok((retrieval, task))
}
