//! Python module `chartlab`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use ::chartlab::chartgen::{generate_qa, render_chart, sample_chart_spec, GeneratorConfig};
use ::chartlab::evalkit::{relaxed_correct as relaxed, MetricConfig};
use ::chartlab::pipeline::{parse_config, run_all as run_pipeline, RunConfig, RunLayout};
use ::chartlab::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

/// Resolved default config as JSON. `preset` is "default" or "smoke".
#[pyfunction]
#[pyo3(signature = (preset = "default"))]
fn default_config(preset: &str) -> PyResult<String> {
    RunConfig::preset(preset).map(|c| json(&c)).map_err(to_py)
}

/// Parse, resolve and validate a config document. Returns the resolved
/// JSON and its digest.
#[pyfunction]
fn resolve_config(text: &str) -> PyResult<(String, String)> {
    let cfg = parse_config(text, "<python>").map_err(to_py)?;
    Ok((json(&cfg), cfg.digest()))
}

/// Sample one chart. Returns (spec JSON, QA JSON, width, height, RGB bytes).
#[pyfunction]
#[pyo3(signature = (seed, resolution = 64))]
fn chart<'py>(
    py: Python<'py>,
    seed: u64,
    resolution: u32,
) -> PyResult<(String, String, u32, u32, Bound<'py, PyBytes>)> {
    let cfg = GeneratorConfig { resolution, ..GeneratorConfig::default() };
    cfg.validate().map_err(to_py)?;
    let spec = sample_chart_spec(seed, &cfg).map_err(to_py)?;
    let image = render_chart(&spec, resolution).map_err(to_py)?;
    let qas = generate_qa(&spec, seed, &cfg.qa_kinds).map_err(to_py)?;
    Ok((json(&spec), json(&qas), image.width, image.height, PyBytes::new(py, &image.pixels)))
}

/// Relaxed numeric correctness with a relative tolerance.
#[pyfunction]
#[pyo3(signature = (prediction, truth, tolerance = 0.05))]
fn relaxed_correct(prediction: f64, truth: f64, tolerance: f64) -> PyResult<bool> {
    let cfg = MetricConfig { relaxed_tolerance: tolerance };
    cfg.validate().map_err(to_py)?;
    Ok(relaxed(prediction, truth, &cfg))
}

/// Run every stage into `out_dir`. Returns the comparison table as CSV.
#[pyfunction]
#[pyo3(signature = (config, out_dir, threads = 1))]
fn run_all(py: Python<'_>, config: &str, out_dir: PathBuf, threads: usize) -> PyResult<String> {
    let cfg = parse_config(config, "<python>").map_err(to_py)?;
    let out = py.detach(|| run_pipeline(&cfg, &RunLayout::new(out_dir), threads.max(1), |_| {})).map_err(to_py)?;
    out.comparison.to_csv().map_err(to_py)
}

#[pymodule]
fn chartlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(chart, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_correct, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}
