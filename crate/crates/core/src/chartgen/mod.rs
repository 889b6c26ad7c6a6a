//! Synthetic chart specs, rasters and QA records.

pub mod dataset;
pub mod font;
pub mod palette;
pub mod qa;
pub mod render;
pub mod spec;

pub use dataset::{build_dataset, config_digest, ChartEntry, Dataset, DatasetManifest, ManifestEntry, Split};
pub use qa::{caption_from_qa, caption_with_answer, generate_qa, QaKind, QaRecord};
pub use render::{bar_rects, layout, render_chart, Layout, RasterImage};
pub use spec::{
    fmt1, round1, sample_chart_spec, ChartSpec, ChartType, GeneratorConfig, LineStyle, Series, CATEGORY_POOL,
    RESOLUTIONS, SERIES_POOL, TITLE_POOL, X_LABEL_POOL, Y_LABEL_POOL,
};
