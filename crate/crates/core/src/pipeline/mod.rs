//! Config resolution and the stages of a full run.

mod config;
mod run;

#[cfg(test)]
mod tests;

pub use config::{
    load_config, parse_config, AnalysisConfig, EvaluationConfig, RunConfig, CONFIG_DIGEST_FILE, RESOLVED_CONFIG_FILE,
    RUN_DIR_ENV,
};
pub use run::{
    analyze, comparison_table, crla_for_params, crla_from_parts, eval_instances, evaluate_params, evaluate_variants,
    generate_data, initial_params, load_data, load_trajectory, load_variant, plot, probe_params, probe_variants,
    run_all, synthesize_data, train_variant, AllOutcome, RunLayout, Variant, COMPARISON_CSV, EVAL_DATA,
    FINAL_CHECKPOINT, TRAIN_DATA,
};
