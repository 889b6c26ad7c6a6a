//! Frozen-embedding probes, retrieval-conditioned accuracy, scaling curves
//! and report emission.

mod crla;
mod extract;
mod probe;
mod report;
mod scaling;
mod svg;

pub use crla::{crla_irla, paired_outcomes, CrlaIrlaReport};
pub use extract::{
    chart_parity, encode_dataset_images, extract_frozen_embeddings, AnswerMapping, FrozenEmbeddings, ProbeTask,
    PARITY_TASK,
};
pub use probe::{
    fit_linear_probe, fit_mlp_probe, fit_probe, HiddenMode, ProbeConfig, ProbeKind, ProbeReport, ProbeSplit,
};
pub use report::{
    emit_report, read_csv, write_plots, AnalysisReport, CrlaIrlaRow, ProbeRow, CRLA_IRLA_CSV, CRLA_IRLA_SVG,
    IDENTITY_TOLERANCE, PROBES_CSV, SCALING_CSV, SCALING_SVG, SUMMARY_JSON,
};
pub use scaling::{
    mean_curve, nested_subset_sizes, scaling_curves, sort_points, variant_name, ScalingConfig, ScalingPoint,
};
pub use svg::LinePlot;

#[cfg(test)]
mod tests;
