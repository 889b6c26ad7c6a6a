//! Frozen image embeddings with per-task class labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chartgen::{ChartSpec, ChartType, Dataset, QaKind, TITLE_POOL};
use crate::dualenc::{EmbeddingMatrix, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{hex_digest, Tensor};

const ENCODE_BATCH: usize = 64;

/// Name of the designed three-bit parity task that every extraction carries.
pub const PARITY_TASK: &str = "parity";

/// XOR of three coarse chart attributes: at least five categories, more
/// than one series, and bars rather than lines. Each bit is easy to read
/// from a trained embedding on its own; their parity is not linear in them.
pub fn chart_parity(spec: &ChartSpec) -> usize {
    let many = spec.categories.len() >= 5;
    let multi = spec.series.len() >= 2;
    let bars = spec.chart_type == ChartType::Bar;
    (many ^ multi ^ bars) as usize
}

/// Maps a QA answer string onto a class index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mapping")]
pub enum AnswerMapping {
    /// Exact string match against a fixed class list.
    Categorical { classes: Vec<String> },
    /// Numeric answer binned by ascending interior edges; a value equal to
    /// an edge falls in the upper bin.
    Bins { edges: Vec<f64> },
}

impl AnswerMapping {
    pub fn classes(&self) -> usize {
        match self {
            AnswerMapping::Categorical { classes } => classes.len(),
            AnswerMapping::Bins { edges } => edges.len() + 1,
        }
    }

    pub fn class_of(&self, answer: &str) -> Option<usize> {
        match self {
            AnswerMapping::Categorical { classes } => classes.iter().position(|c| c == answer),
            AnswerMapping::Bins { edges } => {
                let v: f64 = answer.trim().parse().ok()?;
                Some(edges.iter().take_while(|&&e| v >= e).count())
            }
        }
    }
}

/// A QA kind plus an answer-class mapping. Each chart contributes the
/// label of its QA of that kind; charts without one are unlabelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTask {
    pub name: String,
    pub kind: QaKind,
    pub mapping: AnswerMapping,
}

impl ProbeTask {
    pub fn count(min: usize, max: usize) -> Self {
        Self {
            name: "count".into(),
            kind: QaKind::Count,
            mapping: AnswerMapping::Categorical { classes: (min..=max).map(|n| n.to_string()).collect() },
        }
    }

    /// Quartile bins of the value-lookup answer over `range`.
    pub fn value_lookup(range: (f64, f64)) -> Self {
        let w = (range.1 - range.0) / 4.0;
        Self {
            name: "value_lookup".into(),
            kind: QaKind::ValueLookup,
            mapping: AnswerMapping::Bins { edges: (1..4).map(|i| range.0 + w * i as f64).collect() },
        }
    }

    pub fn title() -> Self {
        Self {
            name: "title".into(),
            kind: QaKind::Title,
            mapping: AnswerMapping::Categorical { classes: TITLE_POOL.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mapping.classes() < 2 {
            return Err(Error::Config(format!("probe task {}: class count must be at least 2", self.name)));
        }
        if let AnswerMapping::Bins { edges } = &self.mapping {
            if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
                return Err(Error::Config(format!("probe task {}: bin edges must ascend", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FrozenEmbeddings {
    pub chart_ids: Vec<String>,
    pub embeddings: EmbeddingMatrix,
    /// Task name to one optional class per chart, including [`PARITY_TASK`].
    pub labels: BTreeMap<String, Vec<Option<usize>>>,
}

impl FrozenEmbeddings {
    pub fn features(&self) -> &Tensor {
        self.embeddings.tensor()
    }

    pub fn task_labels(&self, task: &str) -> Result<&[Option<usize>]> {
        self.labels.get(task).map(Vec::as_slice).ok_or_else(|| Error::Contract(format!("no labels for task {task}")))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.chart_ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for v in self.embeddings.tensor().data() {
            h.update(v.to_le_bytes());
        }
        for (task, labels) in &self.labels {
            h.update(task.as_bytes());
            for l in labels {
                h.update(l.map_or(u64::MAX, |c| c as u64).to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub fn extract_frozen_embeddings(
    params: &EncoderParams,
    dataset: &Dataset,
    tasks: &[ProbeTask],
) -> Result<FrozenEmbeddings> {
    let mut labels = BTreeMap::new();
    for task in tasks {
        task.validate()?;
        let mut col = Vec::with_capacity(dataset.len());
        for e in &dataset.entries {
            let Some(qa) = e.qas.iter().find(|q| q.kind == task.kind) else {
                col.push(None);
                continue;
            };
            let class = task.mapping.class_of(&qa.answer).ok_or_else(|| {
                Error::Contract(format!("task {}: answer {:?} of {} has no class", task.name, qa.answer, qa.qa_id))
            })?;
            col.push(Some(class));
        }
        if labels.insert(task.name.clone(), col).is_some() {
            return Err(Error::Config(format!("duplicate probe task {}", task.name)));
        }
    }
    if labels.contains_key(PARITY_TASK) {
        return Err(Error::Config(format!("probe task name {PARITY_TASK} is reserved")));
    }
    labels.insert(PARITY_TASK.to_string(), dataset.entries.iter().map(|e| Some(chart_parity(&e.spec))).collect());
    let embeddings = encode_dataset_images(params, dataset)?;
    Ok(FrozenEmbeddings {
        chart_ids: dataset.entries.iter().map(|e| e.spec.chart_id.clone()).collect(),
        embeddings,
        labels,
    })
}

pub fn encode_dataset_images(params: &EncoderParams, dataset: &Dataset) -> Result<EmbeddingMatrix> {
    let d = params.config.projection_dim;
    let mut data = Vec::with_capacity(dataset.len() * d);
    for chunk in dataset.entries.chunks(ENCODE_BATCH) {
        let imgs: Vec<_> = chunk.iter().map(|e| &e.image).collect();
        data.extend_from_slice(params.encode_images(&imgs)?.tensor().data());
    }
    EmbeddingMatrix::new(Tensor::matrix(dataset.len(), d, data)?)
}
