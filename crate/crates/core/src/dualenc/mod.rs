//! Compact dual encoder: a patch transformer for rasters and a token
//! transformer for captions, both projected onto a shared unit sphere.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chartgen::{RasterImage, CATEGORY_POOL, SERIES_POOL, TITLE_POOL, X_LABEL_POOL, Y_LABEL_POOL};
use crate::error::{Error, Result};
use crate::numerics::{hex_digest, Graph, ParamId, ParamStore, Tensor, Var};

#[cfg(test)]
mod tests;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

const TEMPLATE_WORDS: [&str; 22] = [
    "the",
    "value",
    "of",
    "in",
    "was",
    "chart",
    "shows",
    "categories",
    "series",
    "with",
    "highest",
    "lowest",
    "is",
    "not",
    "greater",
    "than",
    "title",
    "a",
    "and",
    "yes",
    "no",
    "-",
];
const PUNCT: [&str; 4] = [".", ",", "?", "%"];

/// Closed vocabulary: specials, digits, punctuation, template words and
/// every generator pool, lowercased and deduplicated in first-seen order.
pub fn default_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = vec![PAD.into(), UNK.into()];
    let digits: Vec<String> = (0..10).map(|d| d.to_string()).collect();
    let words = digits
        .iter()
        .map(String::as_str)
        .chain(PUNCT)
        .chain(TEMPLATE_WORDS)
        .chain(TITLE_POOL)
        .chain(SERIES_POOL)
        .chain(CATEGORY_POOL)
        .chain(X_LABEL_POOL)
        .chain(Y_LABEL_POOL);
    for w in words {
        let w = w.to_lowercase();
        if !v.contains(&w) {
            v.push(w);
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_resolution: u32,
    pub patch_size: u32,
    pub embed_dim: usize,
    pub projection_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_max_length: usize,
    pub vocabulary: Vec<String>,
    pub logit_scale_init: f64,
    pub logit_scale_max: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_resolution: 64,
            patch_size: 8,
            embed_dim: 64,
            projection_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            text_max_length: 20,
            vocabulary: default_vocabulary(),
            logit_scale_init: (1.0f64 / 0.07).ln(),
            logit_scale_max: 100f64.ln(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_resolution.is_multiple_of(self.patch_size) {
            return bad(format!(
                "encoder.image_resolution {} is not divisible by patch_size {}",
                self.image_resolution, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("encoder.embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.projection_dim == 0 || self.layers == 0 || self.mlp_ratio == 0 || self.text_max_length == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        let digits = (0..10).map(|d| d.to_string());
        for tok in [PAD, UNK, "."].into_iter().map(String::from).chain(digits) {
            if !self.vocabulary.contains(&tok) {
                return bad(format!("encoder.vocabulary lacks {tok:?}"));
            }
        }
        let mut sorted = self.vocabulary.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.vocabulary.len() {
            return bad("encoder.vocabulary has duplicate tokens".into());
        }
        if !(self.logit_scale_init.is_finite() && self.logit_scale_init <= self.logit_scale_max) {
            return bad("encoder.logit_scale_init must be finite and at most logit_scale_max".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }

    pub fn patches_per_side(&self) -> usize {
        (self.image_resolution / self.patch_size) as usize
    }

    pub fn patch_count(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        (self.patch_size * self.patch_size * 3) as usize
    }

    fn token_id(&self, tok: &str) -> usize {
        self.vocabulary.iter().position(|v| v == tok).unwrap_or_else(|| self.unk_id())
    }

    pub fn pad_id(&self) -> usize {
        self.vocabulary.iter().position(|v| v == PAD).expect("validated vocabulary")
    }

    pub fn unk_id(&self) -> usize {
        self.vocabulary.iter().position(|v| v == UNK).expect("validated vocabulary")
    }
}

fn is_numeric_word(w: &str) -> bool {
    w.chars().any(|c| c.is_ascii_digit()) && w.chars().all(|c| c.is_ascii_digit() || c == '.' || c == '-')
}

/// Token ids for `text`, padded with PAD (or truncated) to
/// `text_max_length`.
pub fn tokenize(text: &str, config: &EncoderConfig) -> Vec<usize> {
    let mut toks: Vec<usize> = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        if is_numeric_word(word) {
            let mut buf = [0u8; 4];
            toks.extend(word.chars().map(|c| config.token_id(c.encode_utf8(&mut buf))));
            continue;
        }
        let core = word.trim_end_matches(|c: char| c.is_ascii_punctuation() && c != '-');
        let tail = &word[core.len()..];
        if !core.is_empty() {
            toks.push(config.token_id(core));
        }
        let mut buf = [0u8; 4];
        toks.extend(tail.chars().map(|c| config.token_id(c.encode_utf8(&mut buf))));
    }
    toks.truncate(config.text_max_length);
    toks.resize(config.text_max_length, config.pad_id());
    toks
}

/// Packed token ids trimmed to the longest sequence in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn from_tokens(rows: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty text batch".into()));
        }
        // an all-PAD sequence keeps one position so pooling stays defined
        let lens: Vec<usize> = rows.iter().map(|r| r.iter().rposition(|&t| t != pad_id).map_or(1, |p| p + 1)).collect();
        let seq_len = *lens.iter().max().expect("non-empty");
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            ids.extend((0..seq_len).map(|i| r.get(i).copied().unwrap_or(pad_id)));
        }
        Ok(Self { ids, lens, seq_len })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], config: &EncoderConfig) -> Result<Self> {
        let rows: Vec<Vec<usize>> = texts.iter().map(|t| tokenize(t.as_ref(), config)).collect();
        Self::from_tokens(&rows, config.pad_id())
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }
}

/// Patch rows for a batch of rasters: `[n * patches, patch * patch * 3]`,
/// pixels mapped to [-1, 1].
pub fn patchify(images: &[&RasterImage], config: &EncoderConfig) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Contract("empty image batch".into()));
    }
    let res = config.image_resolution;
    let (ps, side) = (config.patch_size as usize, config.patches_per_side());
    let mut data = Vec::with_capacity(images.len() * config.patch_count() * config.patch_dim());
    for img in images {
        if img.width != res || img.height != res {
            return Err(Error::shape(
                "encode_image",
                format!("image is {}x{}, encoder expects {res}x{res}", img.width, img.height),
            ));
        }
        let w = img.width as usize;
        for py in 0..side {
            for px in 0..side {
                for y in py * ps..(py + 1) * ps {
                    let start = (y * w + px * ps) * 3;
                    data.extend(img.pixels[start..start + ps * 3].iter().map(|&v| v as f64 / 127.5 - 1.0));
                }
            }
        }
    }
    Tensor::matrix(images.len() * config.patch_count(), config.patch_dim(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TowerIds {
    input_w: ParamId,
    input_b: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_g: ParamId,
    ln_b: ParamId,
    proj: ParamId,
}

/// Weights of both towers plus the log logit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    image: TowerIds,
    text: TowerIds,
    logit_scale: ParamId,
}

/// Graph leaves for every parameter, indexed by `ParamId`.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut rand_chacha::ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> (ParamId, ParamId) {
        let w = self.normal(format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt());
        let b = self.constant(format!("{name}.b"), &[fan_out], 0.0);
        (w, b)
    }

    fn tower(&mut self, prefix: &str, cfg: &EncoderConfig, input_rows: usize, seq: usize, image: bool) -> TowerIds {
        let d = cfg.embed_dim;
        let (input_w, input_b) = if image {
            let (w, b) = self.linear(&format!("{prefix}.patch"), input_rows, d, 1.0);
            (w, Some(b))
        } else {
            (self.normal(format!("{prefix}.tok"), &[input_rows, d], 1.0), None)
        };
        let pos = self.normal(format!("{prefix}.pos"), &[seq, d], 0.1);
        let resid = 1.0 / ((2 * cfg.layers) as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.blk{l}");
                let ln1_g = self.constant(format!("{p}.ln1.g"), &[d], 1.0);
                let ln1_b = self.constant(format!("{p}.ln1.b"), &[d], 0.0);
                let (qkv_w, qkv_b) = self.linear(&format!("{p}.qkv"), d, 3 * d, 1.0);
                let (out_w, out_b) = self.linear(&format!("{p}.out"), d, d, resid);
                let ln2_g = self.constant(format!("{p}.ln2.g"), &[d], 1.0);
                let ln2_b = self.constant(format!("{p}.ln2.b"), &[d], 0.0);
                let h = d * cfg.mlp_ratio;
                let (fc1_w, fc1_b) = self.linear(&format!("{p}.fc1"), d, h, 1.0);
                let (fc2_w, fc2_b) = self.linear(&format!("{p}.fc2"), h, d, resid);
                BlockIds { ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b }
            })
            .collect();
        let ln_g = self.constant(format!("{prefix}.ln.g"), &[d], 1.0);
        let ln_b = self.constant(format!("{prefix}.ln.b"), &[d], 0.0);
        let proj = self.normal(format!("{prefix}.proj"), &[d, cfg.projection_dim], 1.0 / (d as f64).sqrt());
        TowerIds { input_w, input_b, pos, blocks, ln_g, ln_b, proj }
    }
}

/// Seeded initialization: scaled-normal weights, zero biases, unit norms.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = crate::rng::stream(seed, "encoder-init", 0);
    let mut init = Init { store: ParamStore::new(), rng: &mut rng };
    let image = init.tower("img", config, config.patch_dim(), config.patch_count(), true);
    let text = init.tower("txt", config, config.vocabulary.len(), config.text_max_length, false);
    let logit_scale = init.constant("logit_scale".into(), &[1], config.logit_scale_init);
    Ok(EncoderParams { config: config.clone(), store: init.store, image, text, logit_scale })
}

impl EncoderParams {
    /// Rebuild from a store with the same layout as `init_params(config, _)`.
    pub fn from_store(config: &EncoderConfig, store: ParamStore) -> Result<Self> {
        let mut p = init_params(config, 0)?;
        if p.store.len() != store.len() {
            return Err(Error::Contract(format!("expected {} tensors, found {}", p.store.len(), store.len())));
        }
        for ((_, name, want), (_, got_name, got)) in p.store.iter().zip(store.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Contract(format!(
                    "tensor {got_name} {:?} does not match {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        p.store = store;
        Ok(p)
    }

    pub fn logit_scale(&self) -> f64 {
        self.store.get(self.logit_scale).item()
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    /// Enforce `logit_scale <= logit_scale_max`.
    pub fn clamp_logit_scale(&mut self) {
        let max = self.config.logit_scale_max;
        let v = self.store.get_mut(self.logit_scale);
        if v.data()[0] > max {
            v.data_mut()[0] = max;
        }
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Graph leaves for the tensors of `store` (which must share this layout).
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<Bound> {
        store.ids().map(|id| g.param(store, id)).collect::<Result<Vec<_>>>().map(Bound)
    }

    fn block(&self, g: &mut Graph, b: &Bound, ids: &BlockIds, x: Var, seq: usize, lens: &[usize]) -> Result<Var> {
        let h = g.layer_norm(x, b.get(ids.ln1_g), b.get(ids.ln1_b))?;
        let h = g.matmul(h, b.get(ids.qkv_w))?;
        let h = g.add_bias(h, b.get(ids.qkv_b))?;
        let h = g.attention(h, seq, self.config.heads, lens)?;
        let h = g.matmul(h, b.get(ids.out_w))?;
        let h = g.add_bias(h, b.get(ids.out_b))?;
        let x = g.add(x, h)?;
        let h = g.layer_norm(x, b.get(ids.ln2_g), b.get(ids.ln2_b))?;
        let h = g.matmul(h, b.get(ids.fc1_w))?;
        let h = g.add_bias(h, b.get(ids.fc1_b))?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, b.get(ids.fc2_w))?;
        let h = g.add_bias(h, b.get(ids.fc2_b))?;
        g.add(x, h)
    }

    fn tower_tail(&self, g: &mut Graph, b: &Bound, t: &TowerIds, x: Var, seq: usize, lens: &[usize]) -> Result<Var> {
        let mut x = g.add_tiled(x, b.get(t.pos), seq)?;
        for blk in &t.blocks {
            x = self.block(g, b, blk, x, seq, lens)?;
        }
        let x = g.layer_norm(x, b.get(t.ln_g), b.get(t.ln_b))?;
        let x = g.mean_pool(x, seq, lens)?;
        let x = g.matmul(x, b.get(t.proj))?;
        g.l2_normalize(x)
    }

    /// Unit-norm image embeddings `[n, projection_dim]` inside `g`.
    pub fn image_forward(&self, g: &mut Graph, b: &Bound, patches: &Tensor) -> Result<Var> {
        let seq = self.config.patch_count();
        if patches.cols() != self.config.patch_dim() || !patches.rows().is_multiple_of(seq) {
            return Err(Error::shape("encode_image", format!("patch tensor {:?}", patches.shape())));
        }
        let lens = vec![seq; patches.rows() / seq];
        let x = g.input(patches.clone())?;
        let x = g.matmul(x, b.get(self.image.input_w))?;
        let x = g.add_bias(x, b.get(self.image.input_b.expect("image tower has a patch bias")))?;
        self.tower_tail(g, b, &self.image, x, seq, &lens)
    }

    /// Unit-norm text embeddings `[n, projection_dim]` inside `g`.
    pub fn text_forward(&self, g: &mut Graph, b: &Bound, batch: &TokenBatch) -> Result<Var> {
        if batch.seq_len > self.config.text_max_length {
            return Err(Error::shape("encode_text", format!("sequence length {} exceeds maximum", batch.seq_len)));
        }
        let x = g.gather(b.get(self.text.input_w), &batch.ids)?;
        self.tower_tail(g, b, &self.text, x, batch.seq_len, &batch.lens)
    }

    /// `exp(logit_scale) * img · txtᵀ` inside `g`.
    pub fn logits_forward(&self, g: &mut Graph, b: &Bound, img: Var, txt: Var) -> Result<Var> {
        let s = g.exp(b.get(self.logit_scale))?;
        let l = g.matmul_t(img, txt, false, true)?;
        g.scale_by(l, s)
    }

    pub fn encode_images(&self, images: &[&RasterImage]) -> Result<EmbeddingMatrix> {
        let patches = patchify(images, &self.config)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.store)?;
        let v = self.image_forward(&mut g, &b, &patches)?;
        EmbeddingMatrix::new(g.value(v).clone())
    }

    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<EmbeddingMatrix> {
        let batch = TokenBatch::from_texts(texts, &self.config)?;
        self.encode_tokens(&batch)
    }

    pub fn encode_tokens(&self, batch: &TokenBatch) -> Result<EmbeddingMatrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.store)?;
        let v = self.text_forward(&mut g, &b, batch)?;
        EmbeddingMatrix::new(g.value(v).clone())
    }
}

pub fn encode_image(images: &[&RasterImage], params: &EncoderParams) -> Result<EmbeddingMatrix> {
    params.encode_images(images)
}

pub fn encode_text<S: AsRef<str>>(texts: &[S], params: &EncoderParams) -> Result<EmbeddingMatrix> {
    params.encode_texts(texts)
}

/// Row-unit-norm embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("expected a matrix, got {:?}", t.shape())));
        }
        for i in 0..t.rows() {
            let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(Error::Contract(format!("embedding row {i} has norm {n}")));
            }
        }
        Ok(Self(t))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Raw cosine similarities `[self.rows, other.rows]`.
    pub fn cosine(&self, other: &EmbeddingMatrix) -> Result<Tensor> {
        if self.dim() != other.dim() {
            return Err(Error::shape("similarity", format!("dims {} and {}", self.dim(), other.dim())));
        }
        self.0.matmul(&other.0.transpose())
    }
}

/// `exp(logit_scale) * img · txtᵀ`.
pub fn scaled_similarity(img: &EmbeddingMatrix, txt: &EmbeddingMatrix, params: &EncoderParams) -> Result<Tensor> {
    let mut t = img.cosine(txt)?;
    let s = params.logit_scale().exp();
    t.data_mut().iter_mut().for_each(|v| *v *= s);
    Ok(t)
}
