use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::chartgen::{Dataset, GeneratorConfig, QaKind, Split};
use crate::dualenc::{init_params, EncoderConfig};
use crate::evalkit::build_retrieval_instances;
use crate::negcap::NegativeSynthesisConfig;
use crate::numerics::Tensor;
use crate::trainer::TrainConfig;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig { embed_dim: 16, projection_dim: 8, layers: 1, heads: 2, ..Default::default() }
}

fn toy_set(charts: usize, split: Split) -> Dataset {
    let cfg = GeneratorConfig { charts, seed: 5, ..Default::default() };
    let mut ds = Dataset::generate(&cfg, split).unwrap();
    ds.synthesize_negatives(&NegativeSynthesisConfig::default()).unwrap();
    ds
}

/// Gaussian blobs around `centers`, `per` points each, labelled by `label`.
fn blobs(
    centers: &[(f64, f64)],
    label: impl Fn(usize) -> usize,
    per: usize,
    sd: f64,
    seed: u64,
) -> (Tensor, Vec<Option<usize>>) {
    let noise = Normal::new(0.0, sd).unwrap();
    let mut r = crate::rng::stream(seed, "blobs", 0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per {
        for (c, &(x, y)) in centers.iter().enumerate() {
            data.push(x + noise.sample(&mut r));
            data.push(y + noise.sample(&mut r));
            labels.push(Some(label(c)));
        }
    }
    (Tensor::matrix(labels.len(), 2, data).unwrap(), labels)
}

fn xor_layout(seed: u64) -> (Tensor, Vec<Option<usize>>) {
    let centers = [(-1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (1.0, -1.0)];
    blobs(&centers, |c| (c >= 2) as usize, 100, 0.25, seed)
}

#[test]
fn crla_hand_count() {
    let r = crla_irla(&[true, true, false, false], &[true, false, true, false]).unwrap();
    assert_eq!((r.p, r.crla, r.irla, r.overall, r.n), (0.5, Some(0.5), Some(0.5), 0.5, 4));
}

#[test]
fn crla_total_probability() {
    let mut ret = vec![true; 60];
    ret.extend(vec![false; 40]);
    let mut task: Vec<bool> = (0..60).map(|i| i < 54).collect();
    task.extend((0..40).map(|i| i < 20));
    let r = crla_irla(&ret, &task).unwrap();
    assert!((r.p - 0.6).abs() < 1e-15);
    assert!((r.crla.unwrap() - 0.9).abs() < 1e-15);
    assert!((r.irla.unwrap() - 0.5).abs() < 1e-15);
    assert!((r.overall - 0.74).abs() < 1e-15);
    assert!(r.identity_residual() < 1e-12);
}

#[test]
fn crla_null_sides() {
    let r = crla_irla(&[true, true, true], &[true, false, true]).unwrap();
    assert_eq!(r.irla, None);
    assert_eq!(r.overall, r.crla.unwrap());
    let r = crla_irla(&[false, false], &[true, false]).unwrap();
    assert_eq!(r.crla, None);
    assert_eq!(r.overall, 0.5);
    assert!(crla_irla(&[true], &[true, false]).is_err());
    assert!(crla_irla(&[], &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn crla_identity_holds(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..300)) {
        let (r, c): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let rep = crla_irla(&r, &c).unwrap();
        prop_assert!(rep.identity_residual() <= IDENTITY_TOLERANCE);
        prop_assert_eq!(rep.crla.is_none(), !r.iter().any(|&x| x));
        prop_assert_eq!(rep.irla.is_none(), r.iter().all(|&x| x));
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let labels: Vec<Option<usize>> = (0..103).map(|i| if i % 10 == 3 { None } else { Some(i % 2) }).collect();
    let a = ProbeSplit::new(&labels, 0.2, 4).unwrap();
    assert_eq!(a, ProbeSplit::new(&labels, 0.2, 4).unwrap());
    assert_ne!(a, ProbeSplit::new(&labels, 0.2, 5).unwrap());
    let labelled = labels.iter().filter(|l| l.is_some()).count();
    assert_eq!(a.train.len() + a.test.len(), labelled);
    assert_eq!(a.test.len(), (labelled as f64 * 0.2).round() as usize);
    assert!(a.test.iter().all(|i| !a.train.contains(i) && labels[*i].is_some()));
}

#[test]
fn xor_defeats_the_linear_probe() {
    let (x, y) = xor_layout(1);
    let cfg = ProbeConfig::default();
    let lin = fit_linear_probe(&x, &y, "xor", &cfg).unwrap();
    let mlp = fit_mlp_probe(&x, &y, "xor", &cfg).unwrap();
    assert_eq!(lin.chance, 0.5);
    assert!((lin.test_accuracy - 0.5).abs() < 0.1, "linear {}", lin.test_accuracy);
    assert!(mlp.test_accuracy >= 0.95, "mlp {}", mlp.test_accuracy);
}

#[test]
fn separable_blobs_are_solved() {
    let (x, y) = blobs(&[(-2.0, 0.0), (2.0, 0.0)], |c| c, 150, 0.4, 2);
    let cfg = ProbeConfig::default();
    assert!(fit_linear_probe(&x, &y, "sep", &cfg).unwrap().test_accuracy >= 0.99);
    assert!(fit_mlp_probe(&x, &y, "sep", &cfg).unwrap().test_accuracy >= 0.99);
}

#[test]
fn constant_features_sit_at_chance() {
    let n = 400;
    let x = Tensor::full(&[n, 3], 0.7);
    let y: Vec<Option<usize>> = (0..n).map(|i| Some(i % 2)).collect();
    for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
        let r = fit_probe(kind, &x, &y, "const", &ProbeConfig::default()).unwrap();
        assert!((r.test_accuracy - 0.5).abs() < 0.1, "{kind:?} {}", r.test_accuracy);
    }
}

#[test]
fn probe_reports_are_seed_deterministic() {
    let (x, y) = xor_layout(3);
    let cfg = ProbeConfig { epochs: 100, seed: 7, ..Default::default() };
    let a = fit_mlp_probe(&x, &y, "xor", &cfg).unwrap();
    let b = fit_mlp_probe(&x, &y, "xor", &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.test_outcomes, b.test_outcomes);
}

#[test]
fn single_class_is_rejected() {
    let x = Tensor::zeros(&[10, 2]);
    let y = vec![Some(1); 10];
    assert!(fit_linear_probe(&x, &y, "one", &ProbeConfig::default()).is_err());
    let bad = ProbeConfig { hidden_dims: vec![], ..ProbeConfig::default() };
    let y2: Vec<Option<usize>> = (0..10).map(|i| Some(i % 2)).collect();
    assert!(fit_mlp_probe(&x, &y2, "cfg", &bad).is_err());
    assert!(fit_linear_probe(&Tensor::zeros(&[9, 2]), &y2, "len", &ProbeConfig::default()).is_err());
}

#[test]
fn frozen_identity_mlp_equals_linear() {
    let (x, y) = blobs(&[(-1.0, 0.5), (1.0, 0.0), (0.0, 1.5)], |c| c, 60, 0.6, 5);
    let cfg = ProbeConfig {
        hidden_dims: vec![2],
        hidden_mode: HiddenMode::FrozenIdentity,
        epochs: 200,
        ..Default::default()
    };
    let lin = fit_linear_probe(&x, &y, "t", &cfg).unwrap();
    let mlp = fit_mlp_probe(&x, &y, "t", &cfg).unwrap();
    assert_eq!(lin.train_accuracy, mlp.train_accuracy);
    assert_eq!(lin.test_accuracy, mlp.test_accuracy);
    assert_eq!(lin.test_outcomes, mlp.test_outcomes);
    let wrong = ProbeConfig { hidden_dims: vec![3], ..cfg };
    assert!(fit_mlp_probe(&x, &y, "t", &wrong).is_err());
}

proptest! {
    // The 0.02 slack is about one test-split standard deviation, so the cases are pinned.
    #![proptest_config(ProptestConfig {
        cases: 24,
        rng_seed: RngSeed::Fixed(7),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn mlp_keeps_up_with_linear(seed in 0u64..1000, spread in 0.3f64..0.6) {
        let (x, y) = blobs(&[(-1.0, 0.0), (1.0, 0.3), (0.2, 1.0)], |c| c, 500, spread, seed);
        let cfg = ProbeConfig { epochs: 300, seed, ..Default::default() };
        let lin = fit_linear_probe(&x, &y, "b", &cfg).unwrap();
        let mlp = fit_mlp_probe(&x, &y, "b", &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&lin.test_accuracy) && (0.0..=1.0).contains(&mlp.test_accuracy));
        prop_assert!(mlp.test_accuracy >= lin.test_accuracy - 0.02,
            "mlp {} linear {}", mlp.test_accuracy, lin.test_accuracy);
    }
}

#[test]
fn answer_mappings() {
    let bins = ProbeTask::value_lookup((0.0, 100.0)).mapping;
    assert_eq!(bins.classes(), 4);
    assert_eq!(bins.class_of("0.0"), Some(0));
    assert_eq!(bins.class_of("24.9"), Some(0));
    assert_eq!(bins.class_of("25.0"), Some(1));
    assert_eq!(bins.class_of("99.9"), Some(3));
    assert_eq!(bins.class_of("many"), None);
    let count = ProbeTask::count(2, 8).mapping;
    assert_eq!(count.classes(), 7);
    assert_eq!(count.class_of("2"), Some(0));
    assert_eq!(count.class_of("9"), None);
    let bad = ProbeTask {
        name: "b".into(),
        kind: QaKind::ValueLookup,
        mapping: AnswerMapping::Bins { edges: vec![5.0, 1.0] },
    };
    assert!(bad.validate().is_err());
}

#[test]
fn extraction_is_aligned_frozen_and_repeatable() {
    let ds = toy_set(20, Split::Eval);
    let params = init_params(&tiny_encoder(), 1).unwrap();
    let before = params.digest();
    let tasks = [ProbeTask::count(2, 8), ProbeTask::value_lookup((0.0, 100.0)), ProbeTask::title()];
    let a = extract_frozen_embeddings(&params, &ds, &tasks).unwrap();
    assert_eq!(a.embeddings.rows(), 20);
    assert_eq!(a.labels.len(), 4);
    for labels in a.labels.values() {
        assert_eq!(labels.len(), 20);
    }
    for (e, l) in ds.entries.iter().zip(a.task_labels("count").unwrap()) {
        assert_eq!(l.unwrap() + 2, e.spec.categories.len());
    }
    for (e, l) in ds.entries.iter().zip(a.task_labels(PARITY_TASK).unwrap()) {
        assert_eq!(l.unwrap(), chart_parity(&e.spec));
    }
    let b = extract_frozen_embeddings(&params, &ds, &tasks).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(params.digest(), before);
    let narrow = ProbeTask {
        name: "narrow".into(),
        kind: QaKind::Count,
        mapping: AnswerMapping::Categorical { classes: vec!["2".into(), "3".into()] },
    };
    assert!(extract_frozen_embeddings(&params, &ds, &[narrow]).is_err());
}

#[test]
fn probe_outcomes_pair_with_retrieval() {
    let ds = toy_set(30, Split::Eval);
    let params = init_params(&tiny_encoder(), 2).unwrap();
    let fe = extract_frozen_embeddings(&params, &ds, &[ProbeTask::count(2, 8)]).unwrap();
    let probe = fit_mlp_probe(
        fe.features(),
        fe.task_labels("count").unwrap(),
        "count",
        &ProbeConfig { epochs: 20, ..Default::default() },
    )
    .unwrap();
    let inst = build_retrieval_instances(&ds, 3, 0).unwrap();
    let rep = crate::evalkit::evaluate_retrieval(&params, &ds, &inst).unwrap();
    let (r, c) = paired_outcomes(&rep.records, QaKind::Count, &fe.chart_ids, &probe).unwrap();
    assert_eq!(r.len(), probe.n_test);
    assert_eq!(c, probe.test_outcomes.iter().map(|o| o.1).collect::<Vec<_>>());
    assert!(crla_irla(&r, &c).unwrap().identity_residual() <= IDENTITY_TOLERANCE);
}

#[test]
fn nested_sizes() {
    assert_eq!(nested_subset_sizes(200, &[0.25, 0.5, 1.0], 16).unwrap(), vec![50, 100, 200]);
    assert!(nested_subset_sizes(200, &[0.05, 1.0], 16).is_err());
    assert!(nested_subset_sizes(200, &[0.5, 0.25], 16).is_err());
    assert!(nested_subset_sizes(200, &[0.0, 1.0], 16).is_err());
    assert!(nested_subset_sizes(200, &[1.5], 16).is_err());
    let ds = toy_set(40, Split::Train);
    let small = ds.prefix(10);
    let large = ds.prefix(20);
    assert!(small.entries.iter().all(|e| large.entries.contains(e)));
}

#[test]
fn scaling_emits_one_point_per_cell() {
    let train = toy_set(32, Split::Train);
    let eval = toy_set(12, Split::Eval);
    let inst = build_retrieval_instances(&eval, 3, 0).unwrap();
    let base = TrainConfig { batch_size: 4, epochs: 1, ..Default::default() };
    let cfg = ScalingConfig { fractions: vec![0.25, 0.5, 1.0], seeds: vec![0], k_variants: vec![0, 3] };
    let mut seen = 0;
    let pts = scaling_curves(&train, (&eval, &inst), &tiny_encoder(), &base, &cfg, 1, |_| seen += 1).unwrap();
    assert_eq!((pts.len(), seen), (6, 6));
    let variants: Vec<&str> = pts.iter().map(|p| p.variant.as_str()).collect();
    assert_eq!(variants, ["hard_negative_k3"; 3].iter().chain(&["plain"; 3]).copied().collect::<Vec<_>>());
    assert!(pts.iter().all(|p| (0.0..=1.0).contains(&p.accuracy)));
    assert_eq!(mean_curve(&pts).len(), 6);
    let threaded = scaling_curves(&train, (&eval, &inst), &tiny_encoder(), &base, &cfg, 3, |_| {}).unwrap();
    assert_eq!(threaded, pts);
    let tight = TrainConfig { batch_size: 16, ..base };
    assert!(scaling_curves(&train, (&eval, &inst), &tiny_encoder(), &tight, &cfg, 1, |_| {}).is_err());
}

fn sample_report() -> AnalysisReport {
    let (x, y) = xor_layout(4);
    let cfg = ProbeConfig { epochs: 50, ..Default::default() };
    let scaling = [
        ("plain", 0.25, 0, 0.31),
        ("plain", 1.0, 0, 0.4),
        ("hard_negative_k3", 0.25, 0, 0.35),
        ("hard_negative_k3", 1.0, 0, 0.5),
    ]
    .iter()
    .map(|&(v, f, s, a)| ScalingPoint { variant: v.into(), fraction: f, seed: s, accuracy: a })
    .collect();
    AnalysisReport {
        scaling,
        crla_irla: vec![
            CrlaIrlaRow::new(100, &crla_irla(&[true, false, true], &[true, false, false]).unwrap()),
            CrlaIrlaRow::new(50, &crla_irla(&[true, true], &[true, false]).unwrap()),
        ],
        probes: vec![fit_linear_probe(&x, &y, "xor", &cfg).unwrap(), fit_mlp_probe(&x, &y, "xor", &cfg).unwrap()],
        digests: [("encoder".to_string(), "abc".to_string())].into_iter().collect(),
    }
}

#[test]
fn report_bytes_are_deterministic() {
    let report = sample_report();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = emit_report(&report, a.path()).unwrap();
    let fb = emit_report(&report, b.path()).unwrap();
    assert_eq!(fa.len(), 6);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn csv_round_trips() {
    let report = sample_report();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let mut scaling = report.scaling.clone();
    sort_points(&mut scaling);
    assert_eq!(read_csv::<ScalingPoint>(&dir.path().join(SCALING_CSV)).unwrap(), scaling);
    let crla: Vec<CrlaIrlaRow> = read_csv(&dir.path().join(CRLA_IRLA_CSV)).unwrap();
    assert_eq!(crla.iter().map(|r| r.checkpoint_step).collect::<Vec<_>>(), vec![50, 100]);
    assert_eq!(crla[0].irla, None);
    assert_eq!(crla[1], report.crla_irla[0]);
    assert_eq!(read_csv::<ProbeRow>(&dir.path().join(PROBES_CSV)).unwrap(), report.probe_rows());
    let header = std::fs::read_to_string(dir.path().join(CRLA_IRLA_CSV)).unwrap();
    assert!(header.starts_with("checkpoint_step,p,crla,irla,overall,n\n"));
}

#[test]
fn svg_is_well_formed() {
    let report = sample_report();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    for name in [SCALING_SVG, CRLA_IRLA_SVG] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().any(|n| n.tag_name().name() == "polyline"));
    }
    let empty = LinePlot {
        title: "a<b & c".into(),
        x_label: "x".into(),
        y_label: "y".into(),
        y_range: (0.0, 1.0),
        series: vec![],
    };
    roxmltree::Document::parse(&empty.render()).unwrap();
}

#[test]
fn broken_identity_is_refused() {
    let mut report = sample_report();
    report.crla_irla[0].overall += 1e-9;
    assert!(emit_report(&report, tempfile::tempdir().unwrap().path()).is_err());
}
