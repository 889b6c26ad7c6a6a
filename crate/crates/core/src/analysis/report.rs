//! CSV, JSON and SVG emission for analysis results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::crla::CrlaIrlaReport;
use super::probe::ProbeReport;
use super::scaling::{mean_curve, sort_points, ScalingPoint};
use super::svg::LinePlot;
use crate::chartgen::dataset::write_json;
use crate::error::{Error, Result};

pub const SCALING_CSV: &str = "scaling.csv";
pub const CRLA_IRLA_CSV: &str = "crla_irla.csv";
pub const PROBES_CSV: &str = "probes.csv";
pub const SUMMARY_JSON: &str = "analysis_summary.json";
pub const SCALING_SVG: &str = "scaling.svg";
pub const CRLA_IRLA_SVG: &str = "crla_irla.svg";

/// Largest tolerated |overall - (p·CRLA + (1-p)·IRLA)|.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlaIrlaRow {
    pub checkpoint_step: usize,
    pub p: f64,
    pub crla: Option<f64>,
    pub irla: Option<f64>,
    pub overall: f64,
    pub n: usize,
}

impl CrlaIrlaRow {
    pub fn new(checkpoint_step: usize, r: &CrlaIrlaReport) -> Self {
        Self { checkpoint_step, p: r.p, crla: r.crla, irla: r.irla, overall: r.overall, n: r.n }
    }

    pub fn report(&self) -> CrlaIrlaReport {
        CrlaIrlaReport { p: self.p, crla: self.crla, irla: self.irla, overall: self.overall, n: self.n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub probe: String,
    pub task: String,
    pub split: String,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub scaling: Vec<ScalingPoint>,
    pub crla_irla: Vec<CrlaIrlaRow>,
    pub probes: Vec<ProbeReport>,
    /// Config and parameter digests the results depend on.
    pub digests: BTreeMap<String, String>,
}

impl AnalysisReport {
    pub fn probe_rows(&self) -> Vec<ProbeRow> {
        let mut rows = Vec::new();
        for p in &self.probes {
            for (split, accuracy) in [("train", p.train_accuracy), ("test", p.test_accuracy)] {
                rows.push(ProbeRow {
                    probe: p.probe.as_str().into(),
                    task: p.task.clone(),
                    split: split.into(),
                    accuracy,
                    chance: p.chance,
                });
            }
        }
        rows
    }

    pub fn check_identities(&self) -> Result<()> {
        for row in &self.crla_irla {
            let r = row.report().identity_residual();
            if !(r <= IDENTITY_TOLERANCE) {
                return Err(Error::Contract(format!(
                    "step {}: overall differs from p·CRLA + (1-p)·IRLA by {r:e}",
                    row.checkpoint_step
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    digests: &'a BTreeMap<String, String>,
    probes: &'a [ProbeReport],
    crla_irla: &'a [CrlaIrlaRow],
    scaling_means: Vec<ScalingMean>,
}

#[derive(Serialize)]
struct ScalingMean {
    variant: String,
    fraction: f64,
    mean_accuracy: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.serialize(r).map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))).collect()
}

/// Write every table, the summary and the plots into `out_dir`. Returns
/// the written paths in a fixed order.
pub fn emit_report(report: &AnalysisReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    report.check_identities()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut scaling = report.scaling.clone();
    sort_points(&mut scaling);
    let mut crla = report.crla_irla.clone();
    crla.sort_by_key(|r| r.checkpoint_step);
    let mut written = Vec::new();

    let path = out_dir.join(SCALING_CSV);
    write_csv(&path, &scaling, &["variant", "fraction", "seed", "accuracy"])?;
    written.push(path);
    let path = out_dir.join(CRLA_IRLA_CSV);
    write_csv(&path, &crla, &["checkpoint_step", "p", "crla", "irla", "overall", "n"])?;
    written.push(path);
    let path = out_dir.join(PROBES_CSV);
    write_csv(&path, &report.probe_rows(), &["probe", "task", "split", "accuracy", "chance"])?;
    written.push(path);

    let means = mean_curve(&scaling);
    let summary = Summary {
        digests: &report.digests,
        probes: &report.probes,
        crla_irla: &crla,
        scaling_means: means
            .iter()
            .map(|(v, f, a)| ScalingMean { variant: v.clone(), fraction: *f, mean_accuracy: *a })
            .collect(),
    };
    let path = out_dir.join(SUMMARY_JSON);
    write_json(&path, &summary)?;
    written.push(path);

    written.extend(write_plots(&scaling, &crla, out_dir)?);
    Ok(written)
}

/// Render the scaling and CRLA/IRLA plots into `out_dir`.
pub fn write_plots(scaling: &[ScalingPoint], crla: &[CrlaIrlaRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (v, f, a) in mean_curve(scaling) {
        match curves.last_mut() {
            Some((name, pts)) if *name == v => pts.push((f, a)),
            _ => curves.push((v, vec![(f, a)])),
        }
    }
    let plot = LinePlot {
        title: "Held-out retrieval accuracy vs training data".into(),
        x_label: "fraction of training charts".into(),
        y_label: "accuracy".into(),
        y_range: (0.0, 1.0),
        series: curves,
    };
    let path = out_dir.join(SCALING_SVG);
    fs::write(&path, plot.render()).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let mut crla = crla.to_vec();
    crla.sort_by_key(|r| r.checkpoint_step);
    let pick = |f: fn(&CrlaIrlaRow) -> Option<f64>| -> Vec<(f64, f64)> {
        crla.iter().filter_map(|r| f(r).map(|v| (r.checkpoint_step as f64, v))).collect()
    };
    let plot = LinePlot {
        title: "Probe accuracy split by retrieval outcome".into(),
        x_label: "training step".into(),
        y_label: "probe accuracy".into(),
        y_range: (0.0, 1.0),
        series: vec![
            ("CRLA".into(), pick(|r| r.crla)),
            ("IRLA".into(), pick(|r| r.irla)),
            ("overall".into(), pick(|r| Some(r.overall))),
        ],
    };
    let path = out_dir.join(CRLA_IRLA_SVG);
    fs::write(&path, plot.render()).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
