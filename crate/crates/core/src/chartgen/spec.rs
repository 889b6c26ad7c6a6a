use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::palette::PALETTE;
use super::QaKind;
use crate::error::{Error, Result};
use crate::rng;

pub const TITLE_POOL: [&str; 16] = [
    "Revenue", "Exports", "Rainfall", "Sales", "Profit", "Imports", "Tourism", "Output", "Budget", "Traffic",
    "Savings", "Income", "Energy", "Harvest", "Wages", "Debt",
];

pub const SERIES_POOL: [&str; 12] =
    ["Malawi", "Chad", "Kenya", "Peru", "Chile", "Nepal", "Ghana", "Laos", "Mali", "Oman", "Fiji", "Cuba"];

pub const CATEGORY_POOL: [&str; 12] =
    ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

pub const X_LABEL_POOL: [&str; 2] = ["Month", "Period"];
pub const Y_LABEL_POOL: [&str; 3] = ["Percent", "Index", "Share"];

pub const RESOLUTIONS: [u32; 3] = [64, 128, 224];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartType {
    Bar,
    Line,
    Dotline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineStyle {
    Solid,
    Dotted,
    Dashed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub color_index: usize,
    /// Only set for line and dotline charts.
    pub line_style: Option<LineStyle>,
    pub values: Vec<f64>,
}

/// Ground truth for one synthetic chart; rendering and QA both derive from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub chart_id: String,
    pub chart_type: ChartType,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
    pub y_range: (f64, f64),
    pub style_seed: u64,
}

impl ChartSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("chart {}: {m}", self.chart_id)));
        if self.series.is_empty() {
            return bad("no series".into());
        }
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        let (lo, hi) = self.y_range;
        if !(lo < hi) {
            return bad(format!("empty y-range {lo}..{hi}"));
        }
        let mut names = BTreeSet::new();
        let mut colors = BTreeSet::new();
        for s in &self.series {
            if s.values.len() != self.categories.len() {
                return bad(format!("series {} has {} values", s.name, s.values.len()));
            }
            if s.values.iter().any(|v| !v.is_finite() || *v < lo || *v > hi) {
                return bad(format!("series {} leaves the y-range", s.name));
            }
            if s.color_index >= PALETTE.len() {
                return bad(format!("series {} has color {}", s.name, s.color_index));
            }
            if !names.insert(s.name.as_str()) || !colors.insert(s.color_index) {
                return bad(format!("duplicate series name or color at {}", s.name));
            }
        }
        Ok(())
    }

    pub fn series_by_name(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

/// Generator settings. Counts are inclusive ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub charts: usize,
    pub seed: u64,
    pub series_count: (usize, usize),
    pub category_count: (usize, usize),
    pub value_range: (f64, f64),
    pub chart_types: Vec<ChartType>,
    pub resolution: u32,
    pub qa_kinds: Vec<QaKind>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            charts: 200,
            seed: 0,
            series_count: (1, 3),
            category_count: (2, 8),
            value_range: (0.0, 100.0),
            chart_types: vec![ChartType::Bar, ChartType::Line, ChartType::Dotline],
            resolution: 64,
            qa_kinds: QaKind::ALL.to_vec(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (smin, smax) = self.series_count;
        if smin == 0 || smin > smax || smax > 4 {
            return Err(Error::Config(format!("series_count {smin}..={smax} must lie in 1..=4")));
        }
        let (cmin, cmax) = self.category_count;
        if cmin < 2 || cmin > cmax || cmax > 8 {
            return Err(Error::Config(format!("category_count {cmin}..={cmax} must lie in 2..=8")));
        }
        let (lo, hi) = self.value_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("value_range {lo}..{hi} is empty")));
        }
        if self.chart_types.is_empty() {
            return Err(Error::Config("chart_types is empty".into()));
        }
        if self.qa_kinds.is_empty() {
            return Err(Error::Config("qa_kinds is empty".into()));
        }
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!("resolution {} not in {RESOLUTIONS:?}", self.resolution)));
        }
        Ok(())
    }
}

/// Round to one decimal place, the canonical precision for every number.
pub fn round1(v: f64) -> f64 {
    let r = (v * 10.0).round() / 10.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Canonical one-decimal rendering.
pub fn fmt1(v: f64) -> String {
    format!("{:.1}", round1(v))
}

/// Sample one chart specification; deterministic in `(seed, config)`.
pub fn sample_chart_spec(seed: u64, config: &GeneratorConfig) -> Result<ChartSpec> {
    config.validate()?;
    let mut r = rng::stream(seed, "chart-spec", 0);
    let chart_type = *config.chart_types.choose(&mut r).expect("validated non-empty");
    let n_series = r.random_range(config.series_count.0..=config.series_count.1);
    let n_cat = r.random_range(config.category_count.0..=config.category_count.1);

    let start = r.random_range(0..=CATEGORY_POOL.len() - n_cat);
    let categories: Vec<String> = CATEGORY_POOL[start..start + n_cat].iter().map(|s| s.to_string()).collect();

    let mut names: Vec<&str> = SERIES_POOL.to_vec();
    names.shuffle(&mut r);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(&mut r);

    let (lo, hi) = config.value_range;
    let styles = [LineStyle::Solid, LineStyle::Dotted, LineStyle::Dashed];
    let series = (0..n_series)
        .map(|i| {
            let line_style = match chart_type {
                ChartType::Bar => None,
                _ => Some(*styles.choose(&mut r).expect("non-empty")),
            };
            let values = (0..n_cat).map(|_| round1(r.random_range(lo..=hi)).clamp(lo, hi)).collect();
            Series { name: names[i].to_string(), color_index: colors[i], line_style, values }
        })
        .collect();

    let spec = ChartSpec {
        chart_id: format!("chart-{seed:020}"),
        chart_type,
        title: TITLE_POOL.choose(&mut r).expect("non-empty").to_string(),
        x_label: X_LABEL_POOL.choose(&mut r).expect("non-empty").to_string(),
        y_label: Y_LABEL_POOL.choose(&mut r).expect("non-empty").to_string(),
        categories,
        series,
        y_range: (lo, hi),
        style_seed: r.random(),
    };
    spec.validate()?;
    Ok(spec)
}
