use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spec::{fmt1, ChartSpec};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    ValueLookup,
    Count,
    MinSeries,
    MaxSeries,
    CompareBinary,
    Title,
}

impl QaKind {
    pub const ALL: [QaKind; 6] = [
        QaKind::ValueLookup,
        QaKind::Count,
        QaKind::MinSeries,
        QaKind::MaxSeries,
        QaKind::CompareBinary,
        QaKind::Title,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QaKind::ValueLookup => "value_lookup",
            QaKind::Count => "count",
            QaKind::MinSeries => "min_series",
            QaKind::MaxSeries => "max_series",
            QaKind::CompareBinary => "compare_binary",
            QaKind::Title => "title",
        }
    }
}

/// A question about one chart with its canonical answer. `slots` carries
/// the named entities the caption template needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qa_id: String,
    pub chart_id: String,
    pub kind: QaKind,
    pub question: String,
    pub answer: String,
    pub answer_is_numeric: bool,
    pub slots: BTreeMap<String, String>,
}

impl QaRecord {
    pub fn slot(&self, key: &str) -> &str {
        self.slots.get(key).map_or("", String::as_str)
    }
}

fn record(
    spec: &ChartSpec,
    kind: QaKind,
    question: String,
    answer: String,
    numeric: bool,
    slots: &[(&str, &str)],
) -> QaRecord {
    QaRecord {
        qa_id: format!("{}-{}", spec.chart_id, kind.as_str()),
        chart_id: spec.chart_id.clone(),
        kind,
        question,
        answer,
        answer_is_numeric: numeric,
        slots: slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

/// Index of the unique extreme in `values`, or `None` on ties.
fn unique_extreme(values: &[f64], max: bool) -> Option<usize> {
    let best = values.iter().copied().fold(if max { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
        if max {
            a.max(b)
        } else {
            a.min(b)
        }
    });
    let hits: Vec<usize> = (0..values.len()).filter(|&i| values[i] == best).collect();
    (hits.len() == 1).then(|| hits[0])
}

fn one(spec: &ChartSpec, kind: QaKind, r: &mut impl Rng) -> Option<QaRecord> {
    let n_cat = spec.categories.len();
    match kind {
        QaKind::ValueLookup => {
            let s = spec.series.choose(r)?;
            let c = r.random_range(0..n_cat);
            let cat = &spec.categories[c];
            Some(record(
                spec,
                kind,
                format!("What is the value of {} in {cat}?", s.name),
                fmt1(s.values[c]),
                true,
                &[("series", &s.name), ("category", cat)],
            ))
        }
        QaKind::Count => {
            Some(record(spec, kind, "How many categories does the chart show?".into(), n_cat.to_string(), true, &[]))
        }
        QaKind::MinSeries | QaKind::MaxSeries => {
            if spec.series.len() < 2 {
                return None;
            }
            let max = kind == QaKind::MaxSeries;
            let c = r.random_range(0..n_cat);
            let column: Vec<f64> = spec.series.iter().map(|s| s.values[c]).collect();
            let winner = unique_extreme(&column, max)?;
            let cat = &spec.categories[c];
            let word = if max { "highest" } else { "lowest" };
            Some(record(
                spec,
                kind,
                format!("Which series has the {word} value in {cat}?"),
                spec.series[winner].name.clone(),
                false,
                &[("category", cat), ("extreme", word)],
            ))
        }
        QaKind::CompareBinary => {
            let cells: Vec<(usize, usize)> =
                (0..spec.series.len()).flat_map(|s| (0..n_cat).map(move |c| (s, c))).collect();
            let first = *cells.choose(r)?;
            let v1 = spec.series[first.0].values[first.1];
            let others: Vec<_> = cells.iter().copied().filter(|&(s, c)| spec.series[s].values[c] != v1).collect();
            let second = *others.choose(r)?;
            let want_yes = r.random_bool(0.5);
            let v2 = spec.series[second.0].values[second.1];
            let (a, b) = if (v1 > v2) == want_yes { (first, second) } else { (second, first) };
            let name = |(s, c): (usize, usize)| format!("{} in {}", spec.series[s].name, spec.categories[c]);
            let (an, bn) = (name(a), name(b));
            let yes = spec.series[a.0].values[a.1] > spec.series[b.0].values[b.1];
            Some(record(
                spec,
                kind,
                format!("Is {an} greater than {bn}?"),
                if yes { "Yes" } else { "No" }.into(),
                false,
                &[("a", &an), ("b", &bn)],
            ))
        }
        QaKind::Title => {
            Some(record(spec, kind, "What is the title of the chart?".into(), spec.title.clone(), false, &[]))
        }
    }
}

/// One QA per requested kind the chart supports. Kinds a chart cannot
/// support (e.g. series extremes on a single-series chart) are skipped.
pub fn generate_qa(spec: &ChartSpec, seed: u64, kinds: &[QaKind]) -> Result<Vec<QaRecord>> {
    if kinds.is_empty() {
        return Err(Error::Contract("generate_qa needs at least one kind".into()));
    }
    let mut out = Vec::new();
    for &kind in kinds {
        let mut r = rng::stream(seed, kind.as_str(), 0);
        if let Some(q) = one(spec, kind, &mut r) {
            out.push(q);
        }
    }
    Ok(out)
}

/// Assertive sentence stating the QA's answer.
pub fn caption_from_qa(qa: &QaRecord) -> String {
    caption_with_answer(qa, &qa.answer)
}

/// The caption template of `qa` filled with an arbitrary answer.
pub fn caption_with_answer(qa: &QaRecord, answer: &str) -> String {
    match qa.kind {
        QaKind::ValueLookup => format!("The value of {} in {} was {answer}.", qa.slot("series"), qa.slot("category")),
        QaKind::Count => format!("The chart shows {answer} categories."),
        QaKind::MinSeries | QaKind::MaxSeries => {
            format!("The series with the {} value in {} is {answer}.", qa.slot("extreme"), qa.slot("category"))
        }
        QaKind::CompareBinary => {
            let neg = if answer.eq_ignore_ascii_case("yes") { "" } else { "not " };
            format!("{} is {neg}greater than {}.", qa.slot("a"), qa.slot("b"))
        }
        QaKind::Title => format!("The title of the chart is {answer}."),
    }
}

#[cfg(test)]
mod tests {
    use super::super::spec::{sample_chart_spec, ChartType, GeneratorConfig, Series};
    use super::*;

    fn spec_with(values: Vec<Vec<f64>>) -> ChartSpec {
        let names = ["Malawi", "Chad", "Kenya"];
        let n = values[0].len();
        ChartSpec {
            chart_id: "c".into(),
            chart_type: ChartType::Bar,
            title: "Revenue".into(),
            x_label: "Month".into(),
            y_label: "Percent".into(),
            categories: ["Jan", "Feb", "Mar", "Apr", "May"][..n].iter().map(|s| s.to_string()).collect(),
            series: values
                .into_iter()
                .enumerate()
                .map(|(i, v)| Series { name: names[i].into(), color_index: i, line_style: None, values: v })
                .collect(),
            y_range: (0.0, 100.0),
            style_seed: 0,
        }
    }

    /// Independent recomputation of an answer from the spec.
    fn recompute(spec: &ChartSpec, qa: &QaRecord) -> String {
        match qa.kind {
            QaKind::ValueLookup => {
                let s = spec.series_by_name(qa.slot("series")).unwrap();
                fmt1(s.values[spec.category_index(qa.slot("category")).unwrap()])
            }
            QaKind::Count => spec.categories.len().to_string(),
            QaKind::MinSeries | QaKind::MaxSeries => {
                let c = spec.category_index(qa.slot("category")).unwrap();
                let mut best = &spec.series[0];
                for s in &spec.series {
                    let better = if qa.kind == QaKind::MaxSeries {
                        s.values[c] > best.values[c]
                    } else {
                        s.values[c] < best.values[c]
                    };
                    if better {
                        best = s;
                    }
                }
                best.name.clone()
            }
            QaKind::CompareBinary => {
                let cell = |t: &str| {
                    let (s, c) = t.split_once(" in ").unwrap();
                    spec.series_by_name(s).unwrap().values[spec.category_index(c).unwrap()]
                };
                if cell(qa.slot("a")) > cell(qa.slot("b")) { "Yes" } else { "No" }.into()
            }
            QaKind::Title => spec.title.clone(),
        }
    }

    #[test]
    fn answers_recompute_from_spec() {
        let cfg = GeneratorConfig::default();
        let mut kinds_seen = std::collections::BTreeSet::new();
        let mut yes = 0;
        let mut binary = 0;
        for seed in 0..300 {
            let spec = sample_chart_spec(seed, &cfg).unwrap();
            for qa in generate_qa(&spec, seed, &QaKind::ALL).unwrap() {
                assert_eq!(qa.answer, recompute(&spec, &qa), "{qa:?}");
                kinds_seen.insert(qa.kind);
                if qa.kind == QaKind::CompareBinary {
                    binary += 1;
                    yes += (qa.answer == "Yes") as i32;
                }
            }
        }
        assert_eq!(kinds_seen.len(), 6);
        assert!((yes as f64 / binary as f64 - 0.5).abs() < 0.1);
    }

    #[test]
    fn value_lookup_reads_stored_value() {
        let spec = spec_with(vec![vec![24.0, 24.0, 24.0]]);
        let qa = generate_qa(&spec, 1, &[QaKind::ValueLookup]).unwrap();
        assert_eq!(qa[0].answer, "24.0");
    }

    #[test]
    fn count_on_five_bars() {
        let spec = spec_with(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        let qa = generate_qa(&spec, 1, &[QaKind::Count]).unwrap();
        assert_eq!(qa[0].answer, "5");
    }

    #[test]
    fn compare_binary_no() {
        let spec = spec_with(vec![vec![10.0, 20.0]]);
        for seed in 0..20 {
            let qa = &generate_qa(&spec, seed, &[QaKind::CompareBinary]).unwrap()[0];
            let expect = if qa.slot("a").ends_with("Jan") { "No" } else { "Yes" };
            assert_eq!(qa.answer, expect);
        }
    }

    #[test]
    fn unsupported_kinds_are_skipped() {
        let spec = spec_with(vec![vec![1.0, 2.0]]);
        assert!(generate_qa(&spec, 0, &[QaKind::MaxSeries]).unwrap().is_empty());
        assert!(generate_qa(&spec, 0, &[]).is_err());
    }

    #[test]
    fn caption_templates() {
        let mut qa = QaRecord {
            qa_id: "q".into(),
            chart_id: "c".into(),
            kind: QaKind::ValueLookup,
            question: String::new(),
            answer: "76.3".into(),
            answer_is_numeric: true,
            slots: [("series", "Malawi"), ("category", "1991")]
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        assert_eq!(caption_from_qa(&qa), "The value of Malawi in 1991 was 76.3.");
        qa.kind = QaKind::CompareBinary;
        qa.question = "Is A greater than B?".into();
        qa.answer = "Yes".into();
        qa.slots = [("a", "A"), ("b", "B")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        assert_eq!(caption_from_qa(&qa), "A is greater than B.");
        qa.answer = "No".into();
        assert_eq!(caption_from_qa(&qa), "A is not greater than B.");
        qa.kind = QaKind::Title;
        qa.answer = "T".into();
        assert_eq!(caption_from_qa(&qa), "The title of the chart is T.");
    }
}
