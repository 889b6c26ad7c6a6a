//! Hard-negative caption synthesis.
//!
//! Each QA's answer is replaced by a plausible wrong answer and rendered
//! through the same caption template as the positive. The perturbation
//! strategy follows the answer type: binary answers are flipped, numbers
//! are moved by a bounded relative error, labels are swapped for another
//! label on the same chart and titles for another title from a pool. Word
//! order shuffling of the positive caption fills any remaining slots.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chartgen::{caption_from_qa, caption_with_answer, round1, ChartSpec, QaKind, QaRecord, TITLE_POOL};
use crate::error::{Error, Result};
use crate::numerics::hex_digest;
use crate::rng;

/// Attempts per slot before a strategy counts as exhausted.
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    HardNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Flip,
    Numeric,
    Label,
    Title,
    WordOrder,
    None,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Flip => "flip",
            Strategy::Numeric => "numeric",
            Strategy::Label => "label",
            Strategy::Title => "title",
            Strategy::WordOrder => "word_order",
            Strategy::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub chart_id: String,
    pub source_qa_id: String,
    pub text: String,
    pub polarity: Polarity,
    pub strategy: Strategy,
    /// Relative error of the embedded number, numeric strategy only.
    pub magnitude: Option<f64>,
}

impl CaptionRecord {
    pub fn positive(qa: &QaRecord) -> Self {
        Self {
            caption_id: format!("{}-pos", qa.qa_id),
            chart_id: qa.chart_id.clone(),
            source_qa_id: qa.qa_id.clone(),
            text: caption_from_qa(qa),
            polarity: Polarity::Positive,
            strategy: Strategy::None,
            magnitude: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativeSynthesisConfig {
    pub negatives_per_positive: usize,
    pub numeric_min_rel: f64,
    pub numeric_max_rel: f64,
    /// Absolute offsets used when the ground truth is 0.
    pub zero_fallback_range: (f64, f64),
    pub title_pool: Vec<String>,
    /// A weight of 0 disables a strategy. The `word_order` weight is the
    /// probability that a slot is filled by shuffling even while the
    /// primary strategy still has fresh answers; absent means filler only.
    pub strategy_weights: BTreeMap<Strategy, f64>,
    pub seed: u64,
}

impl Default for NegativeSynthesisConfig {
    fn default() -> Self {
        Self {
            negatives_per_positive: 3,
            numeric_min_rel: 0.05,
            numeric_max_rel: 0.80,
            zero_fallback_range: (1.0, 10.0),
            title_pool: TITLE_POOL.iter().map(|s| s.to_string()).collect(),
            strategy_weights: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl NegativeSynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be at least 1".into()));
        }
        if !(self.numeric_min_rel > 0.0 && self.numeric_min_rel < self.numeric_max_rel) {
            return Err(Error::Config(format!(
                "need 0 < numeric_min_rel < numeric_max_rel, got {} and {}",
                self.numeric_min_rel, self.numeric_max_rel
            )));
        }
        let (a, b) = self.zero_fallback_range;
        if !(a > 0.0 && a <= b) {
            return Err(Error::Config(format!("zero_fallback_range {a}..{b} must be positive and ordered")));
        }
        if self.title_pool.len() < 2 {
            return Err(Error::Config("title_pool needs at least 2 entries".into()));
        }
        if self.strategy_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("strategy weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn weight(&self, s: Strategy) -> Option<f64> {
        self.strategy_weights.get(&s).copied()
    }

    fn enabled(&self, s: Strategy) -> bool {
        self.weight(s) != Some(0.0)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }
}

pub fn flip_binary(answer: &str) -> Result<&'static str> {
    match answer.trim().to_ascii_lowercase().as_str() {
        "yes" => Ok("No"),
        "no" => Ok("Yes"),
        _ => Err(Error::Strategy(format!("{answer:?} is not a binary answer"))),
    }
}

fn relative_error(candidate: f64, truth: f64) -> f64 {
    (candidate - truth).abs() / truth.abs()
}

/// A wrong value whose relative error to `value` lies in the configured
/// band after rounding to the printed precision (one decimal, or whole
/// numbers when `integer` is set). A zero ground truth draws a positive
/// absolute offset from the fallback range instead.
pub fn perturb_numeric(value: f64, integer: bool, config: &NegativeSynthesisConfig, r: &mut impl Rng) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Strategy(format!("cannot perturb non-finite {value}")));
    }
    let quantize = |v: f64| if integer { v.round() } else { round1(v) };
    if value == 0.0 {
        let (a, b) = config.zero_fallback_range;
        for _ in 0..MAX_ATTEMPTS {
            let v = quantize(r.random_range(a..=b));
            if v != 0.0 {
                return Ok(v);
            }
        }
        return Err(Error::Strategy("zero fallback range rounds to zero".into()));
    }
    let (lo, hi) = (config.numeric_min_rel, config.numeric_max_rel);
    for _ in 0..MAX_ATTEMPTS {
        let rel = r.random_range(lo..=hi);
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let v = quantize(value * (1.0 + sign * rel));
        let e = relative_error(v, value);
        if v != value && (lo..=hi).contains(&e) {
            return Ok(v);
        }
    }
    Err(Error::Strategy(format!("no printable value within {lo}..{hi} relative error of {value}")))
}

pub fn substitute_categorical(answer: &str, labels: &[String], r: &mut impl Rng) -> Result<String> {
    let distinct: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    if distinct.len() < 2 {
        return Err(Error::Strategy(format!("need at least 2 labels, chart has {}", distinct.len())));
    }
    let others: Vec<&str> = distinct.into_iter().filter(|l| *l != answer).collect();
    others.choose(r).map(|s| s.to_string()).ok_or_else(|| Error::Strategy(format!("no label other than {answer:?}")))
}

pub fn perturb_title(title: &str, config: &NegativeSynthesisConfig, r: &mut impl Rng) -> Result<String> {
    let others: Vec<&String> = config.title_pool.iter().filter(|t| t.as_str() != title).collect();
    others
        .choose(r)
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Strategy(format!("title pool has no entry other than {title:?}")))
}

/// A permutation of the whitespace-separated words that differs from the
/// input. Punctuation stays attached to its word.
pub fn shuffle_words(caption: &str, r: &mut impl Rng) -> Result<String> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.len() < 2 {
        return Err(Error::Strategy(format!("cannot reorder {caption:?}")));
    }
    if words.iter().all(|w| *w == words[0]) {
        return Err(Error::Strategy(format!("every word of {caption:?} is identical")));
    }
    let mut shuffled = words.clone();
    for _ in 0..MAX_ATTEMPTS {
        shuffled.shuffle(r);
        if shuffled != words {
            return Ok(shuffled.join(" "));
        }
    }
    // swap the first pair of distinct words
    let j = words.iter().position(|w| *w != words[0]).expect("checked above");
    let mut swapped = words;
    swapped.swap(0, j);
    Ok(swapped.join(" "))
}

fn primary_strategy(kind: QaKind) -> Strategy {
    match kind {
        QaKind::CompareBinary => Strategy::Flip,
        QaKind::ValueLookup | QaKind::Count => Strategy::Numeric,
        QaKind::MinSeries | QaKind::MaxSeries => Strategy::Label,
        QaKind::Title => Strategy::Title,
    }
}

fn primary_candidate(
    qa: &QaRecord,
    spec: &ChartSpec,
    strategy: Strategy,
    config: &NegativeSynthesisConfig,
    r: &mut impl Rng,
) -> Result<(String, Option<f64>)> {
    match strategy {
        Strategy::Flip => Ok((caption_with_answer(qa, flip_binary(&qa.answer)?), None)),
        Strategy::Numeric => {
            let truth: f64 = qa.answer.parse().map_err(|_| Error::Strategy(format!("{} is not numeric", qa.answer)))?;
            let integer = !qa.answer.contains('.');
            let v = perturb_numeric(truth, integer, config, r)?;
            let text = if integer { format!("{}", v as i64) } else { crate::chartgen::fmt1(v) };
            let magnitude = (truth != 0.0).then(|| relative_error(v, truth));
            Ok((caption_with_answer(qa, &text), magnitude))
        }
        Strategy::Label => {
            let labels: Vec<String> = spec.series.iter().map(|s| s.name.clone()).collect();
            Ok((caption_with_answer(qa, &substitute_categorical(&qa.answer, &labels, r)?), None))
        }
        Strategy::Title => Ok((caption_with_answer(qa, &perturb_title(&qa.answer, config, r)?), None)),
        Strategy::WordOrder | Strategy::None => unreachable!("not a primary strategy"),
    }
}

/// Exactly `K` hard negatives for one QA, pairwise distinct and distinct
/// from the positive caption. Deterministic in `(qa_id, config.seed)`.
pub fn synthesize_negatives(
    qa: &QaRecord,
    spec: &ChartSpec,
    config: &NegativeSynthesisConfig,
) -> Result<Vec<CaptionRecord>> {
    config.validate()?;
    if qa.chart_id != spec.chart_id {
        return Err(Error::Contract(format!("QA {} does not belong to chart {}", qa.qa_id, spec.chart_id)));
    }
    let k = config.negatives_per_positive;
    let mut r = rng::stream(config.seed, &qa.qa_id, 0);
    let positive = caption_from_qa(qa);
    let mut seen: BTreeSet<String> = BTreeSet::from([positive.clone()]);
    let primary = primary_strategy(qa.kind);
    let mut primary_open = config.enabled(primary);
    let shuffle_ok = config.enabled(Strategy::WordOrder);
    let shuffle_rate = config.weight(Strategy::WordOrder).unwrap_or(0.0).min(1.0);
    let mut out = Vec::with_capacity(k);

    let try_primary = |r: &mut _, seen: &BTreeSet<String>| -> Option<(String, Option<f64>)> {
        for _ in 0..MAX_ATTEMPTS {
            match primary_candidate(qa, spec, primary, config, r) {
                Ok((t, m)) if !seen.contains(&t) => return Some((t, m)),
                Ok(_) => continue,
                Err(_) => return None,
            }
        }
        None
    };
    let try_shuffle = |r: &mut _, seen: &BTreeSet<String>| -> Option<String> {
        for _ in 0..MAX_ATTEMPTS {
            match shuffle_words(&positive, r) {
                Ok(t) if !seen.contains(&t) => return Some(t),
                Ok(_) => continue,
                Err(_) => return None,
            }
        }
        None
    };

    while out.len() < k {
        let prefer_shuffle = shuffle_ok && shuffle_rate > 0.0 && r.random_bool(shuffle_rate);
        let mut made = None;
        if primary_open && !prefer_shuffle {
            match try_primary(&mut r, &seen) {
                Some((t, m)) => made = Some((t, primary, m)),
                None => primary_open = false,
            }
        }
        if made.is_none() && shuffle_ok {
            made = try_shuffle(&mut r, &seen).map(|t| (t, Strategy::WordOrder, None));
        }
        if made.is_none() && primary_open && prefer_shuffle {
            made = try_primary(&mut r, &seen).map(|(t, m)| (t, primary, m));
        }
        let Some((text, strategy, magnitude)) = made else {
            return Err(Error::Exhausted { qa_id: qa.qa_id.clone(), requested: k, achieved: out.len() });
        };
        seen.insert(text.clone());
        out.push(CaptionRecord {
            caption_id: format!("{}-neg{}", qa.qa_id, out.len()),
            chart_id: qa.chart_id.clone(),
            source_qa_id: qa.qa_id.clone(),
            text,
            polarity: Polarity::HardNegative,
            strategy,
            magnitude,
        });
    }
    Ok(out)
}
