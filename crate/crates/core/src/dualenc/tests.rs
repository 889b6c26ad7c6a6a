use proptest::prelude::*;

use super::*;
use crate::chartgen::{render_chart, sample_chart_spec, GeneratorConfig};
use crate::numerics::finite_diff_check_sampled;

fn image(seed: u64) -> RasterImage {
    let spec = sample_chart_spec(seed, &GeneratorConfig::default()).unwrap();
    render_chart(&spec, 64).unwrap()
}

fn small_config() -> EncoderConfig {
    EncoderConfig { embed_dim: 16, projection_dim: 8, layers: 1, heads: 2, ..Default::default() }
}

fn ids(cfg: &EncoderConfig, toks: &[&str]) -> Vec<usize> {
    toks.iter().map(|t| cfg.vocabulary.iter().position(|v| v == t).unwrap()).collect()
}

#[test]
fn digits_are_split_per_character() {
    let cfg = EncoderConfig::default();
    let t = tokenize("76.3", &cfg);
    assert_eq!(&t[..4], ids(&cfg, &["7", "6", ".", "3"]).as_slice());
    assert!(t[4..].iter().all(|&i| i == cfg.pad_id()));
}

#[test]
fn caption_tokenization() {
    let cfg = EncoderConfig::default();
    let t = tokenize("The value of Malawi in Mar was 76.3.", &cfg);
    let want = ids(&cfg, &["the", "value", "of", "malawi", "in", "mar", "was", "7", "6", ".", "3", "."]);
    assert_eq!(&t[..want.len()], want.as_slice());
    let t = tokenize("The chart shows 5 categories.", &cfg);
    assert_eq!(&t[..5], ids(&cfg, &["the", "chart", "shows", "5", "categories"]).as_slice());
}

#[test]
fn unknown_words_map_to_unk() {
    let cfg = EncoderConfig::default();
    assert_eq!(tokenize("zebra", &cfg)[0], cfg.unk_id());
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    let bad = EncoderConfig { patch_size: 7, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = EncoderConfig { heads: 5, ..Default::default() };
    assert!(bad.validate().is_err());
    let mut bad = EncoderConfig::default();
    bad.vocabulary.retain(|t| t != "7");
    assert!(bad.validate().is_err());
}

#[test]
fn init_is_seeded() {
    let cfg = small_config();
    let a = init_params(&cfg, 1).unwrap();
    let b = init_params(&cfg, 1).unwrap();
    let c = init_params(&cfg, 2).unwrap();
    assert!(a.store.bit_eq(&b.store));
    assert!(!a.store.bit_eq(&c.store));
    assert_eq!(a.logit_scale(), cfg.logit_scale_init);
}

#[test]
fn image_embeddings_are_unit_rows() {
    let p = init_params(&EncoderConfig::default(), 0).unwrap();
    let imgs: Vec<_> = (0..3).map(image).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let e = encode_image(&refs, &p).unwrap();
    assert_eq!((e.rows(), e.dim()), (3, 32));
    for i in 0..3 {
        let n: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identical_inputs_give_identical_rows() {
    let p = init_params(&small_config(), 0).unwrap();
    let img = image(4);
    let e = encode_image(&[&img, &img], &p).unwrap();
    assert_eq!(e.row(0), e.row(1));
    let t = encode_text(&["The chart shows 4 categories.", "The chart shows 4 categories."], &p).unwrap();
    assert_eq!(t.row(0), t.row(1));
}

#[test]
fn batch_composition_does_not_matter() {
    let p = init_params(&small_config(), 3).unwrap();
    let imgs: Vec<_> = (0..4).map(image).collect();
    let alone = encode_image(&[&imgs[2]], &p).unwrap();
    let batch = encode_image(&imgs.iter().collect::<Vec<_>>(), &p).unwrap();
    for (a, b) in alone.row(0).iter().zip(batch.row(2)) {
        assert!((a - b).abs() < 1e-9);
    }
    let short = encode_text(&["Yes"], &p).unwrap();
    let mixed = encode_text(&["The title of the chart is Revenue.", "Yes"], &p).unwrap();
    for (a, b) in short.row(0).iter().zip(mixed.row(1)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn pad_suffix_is_ignored() {
    let cfg = small_config();
    let p = init_params(&cfg, 5).unwrap();
    let full = tokenize("Chad is greater than Peru.", &cfg);
    let len = full.iter().rposition(|&t| t != cfg.pad_id()).unwrap() + 1;
    let minimal = TokenBatch { ids: full[..len].to_vec(), lens: vec![len], seq_len: len };
    let padded = TokenBatch { ids: full.clone(), lens: vec![len], seq_len: full.len() };
    let a = p.encode_tokens(&minimal).unwrap();
    let b = p.encode_tokens(&padded).unwrap();
    for (x, y) in a.row(0).iter().zip(b.row(0)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let p = init_params(&small_config(), 0).unwrap();
    let spec = sample_chart_spec(0, &GeneratorConfig::default()).unwrap();
    let big = render_chart(&spec, 128).unwrap();
    assert!(encode_image(&[&big], &p).is_err());
}

#[test]
fn similarity_scaling() {
    let p = init_params(&small_config(), 0).unwrap();
    let e = EmbeddingMatrix::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let s = scaled_similarity(&e, &e, &p).unwrap();
    // exp(ln(1/0.07)) = 14.2857...
    assert!((s.get(0, 0) - 14.285_714_285_714_286).abs() < 1e-9);
    assert_eq!(s.get(0, 1), 0.0);
    let other = EmbeddingMatrix::new(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
    assert!(scaled_similarity(&e, &other, &p).is_err());
}

#[test]
fn logit_scale_is_clamped() {
    let mut p = init_params(&small_config(), 0).unwrap();
    let id = p.logit_scale_id();
    p.store.get_mut(id).data_mut()[0] = 9.0;
    p.clamp_logit_scale();
    assert_eq!(p.logit_scale(), 100f64.ln());
}

#[test]
fn from_store_checks_layout() {
    let cfg = small_config();
    let p = init_params(&cfg, 7).unwrap();
    let q = EncoderParams::from_store(&cfg, p.store.clone()).unwrap();
    assert_eq!(p, q);
    assert!(EncoderParams::from_store(&EncoderConfig::default(), p.store).is_err());
}

#[test]
fn both_towers_are_differentiable() {
    let cfg = EncoderConfig { embed_dim: 8, projection_dim: 4, layers: 1, heads: 2, ..Default::default() };
    let p = init_params(&cfg, 11).unwrap();
    let imgs: Vec<_> = (0..2).map(image).collect();
    let patches = patchify(&imgs.iter().collect::<Vec<_>>(), &cfg).unwrap();
    let toks = TokenBatch::from_texts(&["The chart shows 3 categories.", "Chad is greater than Peru."], &cfg).unwrap();
    let err = finite_diff_check_sampled(
        |g, store| {
            let b = p.bind(g, store)?;
            let i = p.image_forward(g, &b, &patches)?;
            let t = p.text_forward(g, &b, &toks)?;
            let l = p.logits_forward(g, &b, i, t)?;
            g.cross_entropy(l, &[0, 1])
        },
        &p.store,
        1e-5,
        300,
        1,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tokenize_is_bounded_and_deterministic(text in "[a-zA-Z0-9 .,]{0,80}") {
        let cfg = EncoderConfig::default();
        let a = tokenize(&text, &cfg);
        prop_assert_eq!(a.len(), cfg.text_max_length);
        prop_assert_eq!(a, tokenize(&text, &cfg));
    }

    #[test]
    fn argmax_ignores_temperature(seed in 0u64..1000, scale in -3.0f64..4.6) {
        let mut p = init_params(&small_config(), seed).unwrap();
        let img = image(seed);
        let e = encode_image(&[&img], &p).unwrap();
        let t = encode_text(&["Yes", "The chart shows 3 categories.", "Chad is greater than Peru."], &p).unwrap();
        let argmax = |m: &Tensor| (0..m.cols()).fold(0, |b, j| if m.get(0, j) > m.get(0, b) { j } else { b });
        let before = argmax(&scaled_similarity(&e, &t, &p).unwrap());
        let id = p.logit_scale_id();
        p.store.get_mut(id).data_mut()[0] = scale;
        prop_assert_eq!(before, argmax(&scaled_similarity(&e, &t, &p).unwrap()));
    }
}
