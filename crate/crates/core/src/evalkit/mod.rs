//! Image-to-text retrieval evaluation and answer-level metrics.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chartgen::{ChartEntry, Dataset, QaKind};
use crate::dualenc::{EmbeddingMatrix, EncoderParams};
use crate::error::{Error, Result};
use crate::negcap::{Polarity, Strategy};
use crate::rng;


const ENCODE_BATCH: usize = 64;

/// One image with its positive caption and `K` hard negatives in a seeded
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub instance_id: String,
    pub chart_id: String,
    pub image_path: String,
    pub kind: QaKind,
    pub candidates: Vec<String>,
    pub positive_index: usize,
    /// `Strategy::None` marks the positive.
    pub strategies: Vec<Strategy>,
}

impl RetrievalInstance {
    /// The non-filler strategy among the negatives, or word order when the
    /// negatives are all shuffles. Reports bucket instances by it.
    pub fn primary_strategy(&self) -> Strategy {
        self.strategies
            .iter()
            .copied()
            .filter(|&s| s != Strategy::None)
            .min_by_key(|&s| (s == Strategy::WordOrder, s))
            .unwrap_or(Strategy::None)
    }
}

/// Instances for every QA in `dataset` that has at least `k` negatives.
/// QAs with fewer are reported as an error naming the QA.
pub fn build_retrieval_instances(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<RetrievalInstance>> {
    let mut out = Vec::new();
    for e in &dataset.entries {
        for qa in &e.qas {
            out.push(instance_for(e, &qa.qa_id, qa.kind, k, seed)?);
        }
    }
    Ok(out)
}

fn instance_for(e: &ChartEntry, qa_id: &str, kind: QaKind, k: usize, seed: u64) -> Result<RetrievalInstance> {
    let pos = e
        .captions
        .iter()
        .find(|c| c.source_qa_id == qa_id && c.polarity == Polarity::Positive)
        .ok_or_else(|| Error::Contract(format!("{qa_id}: no positive caption")))?;
    let negs: Vec<_> = e.negatives_for(qa_id).take(k).collect();
    if negs.len() < k {
        return Err(Error::Exhausted { qa_id: qa_id.into(), requested: k, achieved: negs.len() });
    }
    let mut cands: Vec<(String, Strategy)> = vec![(pos.text.clone(), Strategy::None)];
    cands.extend(negs.iter().map(|n| (n.text.clone(), n.strategy)));
    let mut r = rng::stream(seed, qa_id, k as u64);
    cands.shuffle(&mut r);
    let positive_index = cands.iter().position(|c| c.1 == Strategy::None).expect("positive present");
    Ok(RetrievalInstance {
        instance_id: qa_id.into(),
        chart_id: e.spec.chart_id.clone(),
        image_path: format!("images/{}.png", e.spec.chart_id),
        kind,
        candidates: cands.iter().map(|c| c.0.clone()).collect(),
        positive_index,
        strategies: cands.iter().map(|c| c.1).collect(),
    })
}

/// Deterministic subset of `n` instances (all of them when fewer exist),
/// kept in their original order.
pub fn sample_instances(instances: &[RetrievalInstance], n: usize, seed: u64) -> Vec<RetrievalInstance> {
    let mut idx: Vec<usize> = (0..instances.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "instance-sample", 0));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| instances[i].clone()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Outcome for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub chart_id: String,
    pub kind: QaKind,
    pub strategy: Strategy,
    pub positive_index: usize,
    pub predicted_index: usize,
    pub correct: bool,
    pub cosines: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub n: usize,
    pub candidates: usize,
    pub random_baseline: f64,
    pub per_kind: BTreeMap<String, Tally>,
    pub per_strategy: BTreeMap<String, Tally>,
    #[serde(skip)]
    pub records: Vec<InstanceRecord>,
}

impl RetrievalReport {
    /// Aggregate per-instance records.
    pub fn from_records(records: Vec<InstanceRecord>, candidates: usize) -> Self {
        let mut overall = Tally::default();
        let mut per_kind: BTreeMap<String, Tally> = BTreeMap::new();
        let mut per_strategy: BTreeMap<String, Tally> = BTreeMap::new();
        for r in &records {
            overall.add(r.correct);
            per_kind.entry(r.kind.as_str().into()).or_default().add(r.correct);
            per_strategy.entry(r.strategy.as_str().into()).or_default().add(r.correct);
        }
        Self {
            accuracy: overall.accuracy(),
            n: overall.total,
            candidates,
            random_baseline: 1.0 / candidates as f64,
            per_kind,
            per_strategy,
            records,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::chartgen::dataset::write_json(path, self)
    }

    /// Per-instance records, one JSON object per line.
    pub fn write_records(&self, path: &Path) -> Result<()> {
        crate::chartgen::dataset::write_jsonl(path, &self.records)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Score already-encoded instances. `image_rows[i]` and `text_rows[i]` are
/// the embeddings of instance `i`'s image and candidates.
pub fn score_instances(
    instances: &[RetrievalInstance],
    image_rows: &[&[f64]],
    text_rows: &[Vec<&[f64]>],
) -> Result<RetrievalReport> {
    let candidates = instances.first().map_or(0, |i| i.candidates.len());
    let mut records = Vec::with_capacity(instances.len());
    for ((inst, img), texts) in instances.iter().zip(image_rows).zip(text_rows) {
        if inst.candidates.len() != candidates {
            return Err(Error::Contract(format!(
                "{}: {} candidates, expected {candidates}",
                inst.instance_id,
                inst.candidates.len()
            )));
        }
        let cosines: Vec<f64> = texts.iter().map(|t| dot(img, t)).collect();
        let predicted_index = argmax(&cosines);
        records.push(InstanceRecord {
            instance_id: inst.instance_id.clone(),
            chart_id: inst.chart_id.clone(),
            kind: inst.kind,
            strategy: inst.primary_strategy(),
            positive_index: inst.positive_index,
            predicted_index,
            correct: predicted_index == inst.positive_index,
            cosines,
        });
    }
    Ok(RetrievalReport::from_records(records, candidates))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Encode each distinct image and caption once, in batches.
pub fn evaluate_retrieval(
    params: &EncoderParams,
    dataset: &Dataset,
    instances: &[RetrievalInstance],
) -> Result<RetrievalReport> {
    let by_id: HashMap<&str, &ChartEntry> = dataset.entries.iter().map(|e| (e.spec.chart_id.as_str(), e)).collect();
    let mut chart_order: Vec<&str> = Vec::new();
    let mut chart_row: HashMap<&str, usize> = HashMap::new();
    let mut text_order: Vec<&str> = Vec::new();
    let mut text_row: HashMap<&str, usize> = HashMap::new();
    for inst in instances {
        if !by_id.contains_key(inst.chart_id.as_str()) {
            return Err(Error::Contract(format!("{}: chart {} not in dataset", inst.instance_id, inst.chart_id)));
        }
        chart_row.entry(&inst.chart_id).or_insert_with(|| {
            chart_order.push(&inst.chart_id);
            chart_order.len() - 1
        });
        for c in &inst.candidates {
            text_row.entry(c).or_insert_with(|| {
                text_order.push(c);
                text_order.len() - 1
            });
        }
    }
    let mut img_emb: Vec<EmbeddingMatrix> = Vec::new();
    for chunk in chart_order.chunks(ENCODE_BATCH) {
        let imgs: Vec<_> = chunk.iter().map(|id| &by_id[id].image).collect();
        img_emb.push(params.encode_images(&imgs)?);
    }
    let mut txt_emb: Vec<EmbeddingMatrix> = Vec::new();
    for chunk in text_order.chunks(ENCODE_BATCH) {
        txt_emb.push(params.encode_texts(chunk)?);
    }
    let img = |i: usize| img_emb[i / ENCODE_BATCH].row(i % ENCODE_BATCH);
    let txt = |i: usize| txt_emb[i / ENCODE_BATCH].row(i % ENCODE_BATCH);
    let image_rows: Vec<&[f64]> = instances.iter().map(|inst| img(chart_row[inst.chart_id.as_str()])).collect();
    let text_rows: Vec<Vec<&[f64]>> =
        instances.iter().map(|inst| inst.candidates.iter().map(|c| txt(text_row[c.as_str()])).collect()).collect();
    score_instances(instances, &image_rows, &text_rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub relaxed_tolerance: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { relaxed_tolerance: 0.05 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.relaxed_tolerance > 0.0 && self.relaxed_tolerance.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("relaxed_tolerance must be positive, got {}", self.relaxed_tolerance)))
        }
    }
}

fn normalize_answer(s: &str) -> String {
    let t = s.trim().to_lowercase();
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => format!("{}", v + 0.0),
        _ => t,
    }
}

/// Equality after trimming, lowercasing and numeric canonicalization.
pub fn exact_match(prediction: &str, truth: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(truth)
}

/// `|prediction - truth| / |truth| <= tolerance`; a zero truth needs an
/// exact match.
pub fn relaxed_correct(prediction: f64, truth: f64, config: &MetricConfig) -> bool {
    if !(prediction.is_finite() && truth.is_finite()) {
        return false;
    }
    if truth == 0.0 {
        return prediction == 0.0;
    }
    (prediction - truth).abs() / truth.abs() <= config.relaxed_tolerance
}

/// String form of [`relaxed_correct`]; an unparsable side scores false.
pub fn relaxed_correct_str(prediction: &str, truth: &str, config: &MetricConfig) -> bool {
    match (prediction.trim().parse::<f64>(), truth.trim().parse::<f64>()) {
        (Ok(p), Ok(t)) => relaxed_correct(p, t, config),
        _ => false,
    }
}

/// Accuracy table with one row per model variant and one column per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        for (name, vals) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(vals.iter().map(|v| format!("{:.1}", 100.0 * v)));
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
