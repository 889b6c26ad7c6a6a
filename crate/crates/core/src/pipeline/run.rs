//! Pipeline stages and the end-to-end experiment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::analysis::{
    crla_irla, emit_report, extract_frozen_embeddings, fit_probe, paired_outcomes, read_csv, scaling_curves,
    write_plots, AnalysisReport, CrlaIrlaReport, CrlaIrlaRow, FrozenEmbeddings, ProbeKind, ProbeReport, ScalingPoint,
    CRLA_IRLA_CSV, SCALING_CSV,
};
use crate::chartgen::dataset::write_json;
use crate::chartgen::{Dataset, GeneratorConfig, Split};
use crate::dualenc::{init_params, EncoderParams};
use crate::error::{Error, Result};
use crate::evalkit::{
    build_retrieval_instances, evaluate_retrieval, sample_instances, ComparisonTable, RetrievalInstance,
    RetrievalReport,
};
use crate::rng::derive_seed;
use crate::trainer::{
    load_checkpoint, read_checkpoint, save_checkpoint, train, TrainConfig, TrainOptions, TrainOutcome,
};

pub const TRAIN_DATA: &str = "train";
pub const EVAL_DATA: &str = "eval";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Fixed layout of a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self, variant: Variant) -> PathBuf {
        self.root.join("checkpoints").join(variant.as_str())
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn probes(&self) -> PathBuf {
        self.root.join("probes")
    }

    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join(COMPARISON_CSV)
    }
}

/// The three rows of the method comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Init,
    Plain,
    HardNegative,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Init, Variant::Plain, Variant::HardNegative];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Init => "init",
            Variant::Plain => "plain",
            Variant::HardNegative => "hard_negative",
        }
    }

    /// Row label in the comparison table.
    pub fn row_label(self) -> &'static str {
        match self {
            Variant::Init => "init",
            Variant::Plain => "fine-tuned",
            Variant::HardNegative => "hard-negative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Variant::Init),
            "plain" => Ok(Variant::Plain),
            "hard_negative" | "hard-negative" => Ok(Variant::HardNegative),
            other => Err(Error::Config(format!("unknown variant {other:?}; expected init, plain or hard_negative"))),
        }
    }

    pub fn k_train(self, cfg: &RunConfig) -> usize {
        match self {
            Variant::HardNegative => cfg.negatives.negatives_per_positive,
            _ => 0,
        }
    }
}

fn eval_generator(cfg: &RunConfig) -> GeneratorConfig {
    GeneratorConfig { charts: cfg.evaluation.eval_charts, ..cfg.generator.clone() }
}

/// Shared starting weights for every variant.
pub fn initial_params(cfg: &RunConfig) -> Result<EncoderParams> {
    init_params(&cfg.encoder, derive_seed(cfg.seed, "init", 0))
}

/// Render both splits without negatives and write them under `data_dir`.
pub fn generate_data(cfg: &RunConfig, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_set = Dataset::generate(&cfg.generator, Split::Train)?;
    let eval_set = Dataset::generate(&eval_generator(cfg), Split::Eval)?;
    train_set.write(&data_dir.join(TRAIN_DATA))?;
    eval_set.write(&data_dir.join(EVAL_DATA))?;
    Ok((train_set, eval_set))
}

/// Add hard negatives to both splits in place. Returns the number of QAs
/// dropped per split because too few distinct negatives existed.
pub fn synthesize_data(cfg: &RunConfig, data_dir: &Path) -> Result<(usize, usize)> {
    let mut dropped = [0; 2];
    for (i, name) in [TRAIN_DATA, EVAL_DATA].iter().enumerate() {
        let dir = data_dir.join(name);
        let mut ds = Dataset::load(&dir)?;
        dropped[i] = ds.synthesize_negatives(&cfg.negatives)?;
        ds.write(&dir)?;
    }
    Ok((dropped[0], dropped[1]))
}

/// Load both splits, checking that they match the config and carry negatives.
pub fn load_data(cfg: &RunConfig, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_set = Dataset::load(&data_dir.join(TRAIN_DATA))?;
    let eval_set = Dataset::load(&data_dir.join(EVAL_DATA))?;
    for (ds, want) in [(&train_set, cfg.generator.clone()), (&eval_set, eval_generator(cfg))] {
        if ds.generator != want {
            return Err(Error::Config(format!(
                "{}: data was generated with a different generator config",
                data_dir.display()
            )));
        }
        if ds.negatives.as_ref() != Some(&cfg.negatives) {
            return Err(Error::Config(format!(
                "{}: hard negatives are missing or were built with a different config; run `neg` first",
                data_dir.display()
            )));
        }
    }
    Ok((train_set, eval_set))
}

pub fn eval_instances(cfg: &RunConfig, eval_set: &Dataset) -> Result<Vec<RetrievalInstance>> {
    let all = build_retrieval_instances(eval_set, cfg.evaluation.k, cfg.seed)?;
    Ok(match cfg.evaluation.instances {
        0 => all,
        n => sample_instances(&all, n, cfg.seed),
    })
}

/// Train one variant from the shared init. `Init` trains nothing and just
/// writes the starting weights.
pub fn train_variant(
    cfg: &RunConfig,
    variant: Variant,
    train_set: &Dataset,
    out_dir: &Path,
    keep_snapshots: bool,
) -> Result<TrainOutcome> {
    let init = initial_params(cfg)?;
    if variant == Variant::Init {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        save_checkpoint(&init, 0, &out_dir.join(FINAL_CHECKPOINT))?;
        return Ok(TrainOutcome { params: init, log: Default::default(), snapshots: Vec::new() });
    }
    let tc = TrainConfig { k_train: variant.k_train(cfg), ..cfg.training.clone() };
    train(
        train_set,
        &cfg.encoder,
        &tc,
        TrainOptions { init: Some(init), heldout: None, out_dir: Some(out_dir), keep_snapshots },
    )
}

/// Score `params` and write `<name>.json` and `<name>_records.jsonl`.
pub fn evaluate_params(
    params: &EncoderParams,
    eval_set: &Dataset,
    instances: &[RetrievalInstance],
    out_dir: &Path,
    name: &str,
) -> Result<RetrievalReport> {
    let report = evaluate_retrieval(params, eval_set, instances)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    report.write_json(&out_dir.join(format!("{name}.json")))?;
    report.write_records(&out_dir.join(format!("{name}_records.jsonl")))?;
    Ok(report)
}

/// Linear and MLP probes for every task. Task names get a `prefix/`.
pub fn probe_params(
    cfg: &RunConfig,
    params: &EncoderParams,
    eval_set: &Dataset,
    prefix: &str,
) -> Result<Vec<ProbeReport>> {
    let fe = extract_frozen_embeddings(params, eval_set, &cfg.analysis.tasks)?;
    let mut out = Vec::new();
    for (task, labels) in &fe.labels {
        for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
            out.push(fit_probe(kind, fe.features(), labels, &format!("{prefix}/{task}"), &cfg.analysis.probe)?);
        }
    }
    Ok(out)
}

/// CRLA/IRLA for one set of weights: MLP-probe outcomes on each QA-derived
/// task, paired by chart with retrieval outcomes on the same QA kind and
/// pooled over tasks.
pub fn crla_for_params(
    cfg: &RunConfig,
    params: &EncoderParams,
    eval_set: &Dataset,
    instances: &[RetrievalInstance],
) -> Result<CrlaIrlaReport> {
    let report = evaluate_retrieval(params, eval_set, instances)?;
    let fe = extract_frozen_embeddings(params, eval_set, &cfg.analysis.tasks)?;
    crla_from_parts(cfg, &fe, &report)
}

pub fn crla_from_parts(cfg: &RunConfig, fe: &FrozenEmbeddings, report: &RetrievalReport) -> Result<CrlaIrlaReport> {
    let (mut r_all, mut c_all) = (Vec::new(), Vec::new());
    for task in &cfg.analysis.tasks {
        let probe =
            fit_probe(ProbeKind::Mlp, fe.features(), fe.task_labels(&task.name)?, &task.name, &cfg.analysis.probe)?;
        let (r, c) = paired_outcomes(&report.records, task.kind, &fe.chart_ids, &probe)?;
        r_all.extend(r);
        c_all.extend(c);
    }
    crla_irla(&r_all, &c_all)
}

/// Final weights of a trained variant.
pub fn load_variant(cfg: &RunConfig, layout: &RunLayout, variant: Variant) -> Result<EncoderParams> {
    load_checkpoint(&layout.checkpoints(variant).join(FINAL_CHECKPOINT), &cfg.encoder)
}

/// Periodic checkpoints of a variant in step order, followed by the final
/// weights unless the last periodic checkpoint already is the final step.
pub fn load_trajectory(cfg: &RunConfig, layout: &RunLayout, variant: Variant) -> Result<Vec<(usize, EncoderParams)>> {
    let dir = layout.checkpoints(variant);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("step-") && n.ends_with(".ckpt"))
        .collect();
    names.sort();
    names.push(FINAL_CHECKPOINT.into());
    let mut out: Vec<(usize, EncoderParams)> = Vec::new();
    for name in names {
        let (params, step) = read_checkpoint(&dir.join(&name))?;
        if params.config != cfg.encoder {
            return Err(Error::Config(format!(
                "{}: encoder config differs from the run config",
                dir.join(&name).display()
            )));
        }
        if out.last().map(|l| l.0) != Some(step as usize) {
            out.push((step as usize, params));
        }
    }
    Ok(out)
}

/// One row per variant, in the fixed variant order.
pub fn comparison_table(reports: &BTreeMap<Variant, RetrievalReport>) -> ComparisonTable {
    let mut columns: Vec<String> = vec!["all".into()];
    for r in reports.values() {
        for k in r.per_kind.keys() {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    columns[1..].sort();
    let rows = reports
        .iter()
        .map(|(v, r)| {
            let mut vals = vec![r.accuracy];
            vals.extend(columns[1..].iter().map(|c| r.per_kind.get(c).map_or(0.0, |t| t.accuracy())));
            (v.row_label().to_string(), vals)
        })
        .collect();
    ComparisonTable { columns, rows }
}

/// Evaluate the given variants from their final checkpoints and write the
/// comparison table for them.
pub fn evaluate_variants(
    cfg: &RunConfig,
    layout: &RunLayout,
    variants: &[Variant],
    mut log: impl FnMut(&str),
) -> Result<BTreeMap<Variant, RetrievalReport>> {
    let (_, eval_set) = load_data(cfg, &layout.data())?;
    let instances = eval_instances(cfg, &eval_set)?;
    let mut reports = BTreeMap::new();
    for &v in variants {
        let params = load_variant(cfg, layout, v)?;
        let report = evaluate_params(&params, &eval_set, &instances, &layout.eval(), v.as_str())?;
        log(&format!("{} retrieval accuracy {:.3} on {} instances", v.as_str(), report.accuracy, report.n));
        reports.insert(v, report);
    }
    comparison_table(&reports).write_csv(&layout.comparison())?;
    Ok(reports)
}

/// Probe the given variants and write `probes/<variant>.json`.
pub fn probe_variants(cfg: &RunConfig, layout: &RunLayout, variants: &[Variant]) -> Result<Vec<ProbeReport>> {
    let (_, eval_set) = load_data(cfg, &layout.data())?;
    let dir = layout.probes();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut all = Vec::new();
    for &v in variants {
        let params = load_variant(cfg, layout, v)?;
        let reports = probe_params(cfg, &params, &eval_set, v.as_str())?;
        write_json(&dir.join(format!("{}.json", v.as_str())), &reports)?;
        all.extend(reports);
    }
    Ok(all)
}

/// Probes on the init and hard-negative weights, CRLA/IRLA along the
/// hard-negative trajectory and, if enabled, the scaling sweep. Everything
/// lands in `analysis/`.
pub fn analyze(
    cfg: &RunConfig,
    layout: &RunLayout,
    threads: usize,
    mut log: impl FnMut(&str),
) -> Result<AnalysisReport> {
    let (train_set, eval_set) = load_data(cfg, &layout.data())?;
    let instances = eval_instances(cfg, &eval_set)?;
    let mut digests = BTreeMap::new();
    digests.insert("config".to_string(), cfg.digest());
    digests.insert("train_data".to_string(), train_set.manifest().digest());
    digests.insert("eval_data".to_string(), eval_set.manifest().digest());
    let mut probes = Vec::new();
    for v in [Variant::Init, Variant::HardNegative] {
        log(&format!("probing {}", v.as_str()));
        let params = load_variant(cfg, layout, v)?;
        digests.insert(format!("params_{}", v.as_str()), params.digest());
        probes.extend(probe_params(cfg, &params, &eval_set, v.as_str())?);
    }
    log("conditioning probe accuracy on retrieval outcomes");
    let mut crla_rows = Vec::new();
    for (step, params) in load_trajectory(cfg, layout, Variant::HardNegative)? {
        crla_rows.push(CrlaIrlaRow::new(step, &crla_for_params(cfg, &params, &eval_set, &instances)?));
    }
    let scaling = if cfg.analysis.run_scaling {
        log("scaling sweep");
        scaling_curves(
            &train_set,
            (&eval_set, &instances),
            &cfg.encoder,
            &cfg.training,
            &cfg.analysis.scaling,
            threads,
            |p| log(&format!("scaling {} fraction {} seed {}: {:.3}", p.variant, p.fraction, p.seed, p.accuracy)),
        )?
    } else {
        Vec::new()
    };
    let report = AnalysisReport { scaling, crla_irla: crla_rows, probes, digests };
    emit_report(&report, &layout.analysis())?;
    Ok(report)
}

/// Redraw the plots from the CSVs already in `analysis/`.
pub fn plot(layout: &RunLayout) -> Result<Vec<PathBuf>> {
    let dir = layout.analysis();
    let scaling: Vec<ScalingPoint> = read_csv(&dir.join(SCALING_CSV))?;
    let crla: Vec<CrlaIrlaRow> = read_csv(&dir.join(CRLA_IRLA_CSV))?;
    write_plots(&scaling, &crla, &dir)
}

pub struct AllOutcome {
    pub comparison: ComparisonTable,
    pub reports: BTreeMap<Variant, RetrievalReport>,
    pub analysis: AnalysisReport,
}

/// Every stage in order: data, negatives, the three variants, retrieval
/// evaluation with the comparison table, then the analysis.
pub fn run_all(cfg: &RunConfig, layout: &RunLayout, threads: usize, mut log: impl FnMut(&str)) -> Result<AllOutcome> {
    cfg.validate()?;
    cfg.write_resolved(&layout.root)?;
    log("generating charts");
    generate_data(cfg, &layout.data())?;
    log("synthesizing hard negatives");
    let (d_train, d_eval) = synthesize_data(cfg, &layout.data())?;
    log(&format!("dropped {d_train} train and {d_eval} eval QAs without enough negatives"));
    let (train_set, _) = load_data(cfg, &layout.data())?;
    for v in Variant::ALL {
        log(&format!("training {}", v.as_str()));
        train_variant(cfg, v, &train_set, &layout.checkpoints(v), false)?;
    }
    drop(train_set);
    let reports = evaluate_variants(cfg, layout, &Variant::ALL, &mut log)?;
    let analysis = analyze(cfg, layout, threads, &mut log)?;
    Ok(AllOutcome { comparison: comparison_table(&reports), reports, analysis })
}
