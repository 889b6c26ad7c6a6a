use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean of row-wise and column-wise cross-entropy with the diagonal as
/// targets.
pub fn symmetric_infonce(g: &mut Graph, logits: Var) -> Result<Var> {
    let lv = g.value(logits);
    if lv.shape().len() != 2 || lv.rows() != lv.cols() {
        return Err(Error::shape("symmetric_infonce", format!("logits {:?} are not square", lv.shape())));
    }
    let n = lv.rows();
    let rows = g.cross_entropy(logits, &diagonal(n))?;
    let t = g.transpose(logits)?;
    let cols = g.cross_entropy(t, &diagonal(n))?;
    let both = g.add(rows, cols)?;
    g.scale(both, 0.5)
}

/// `exp(scale) * img · txtᵀ`.
pub fn contrastive_logits(g: &mut Graph, img: Var, txt: Var, log_scale: Var) -> Result<Var> {
    let s = g.exp(log_scale)?;
    let l = g.matmul_t(img, txt, false, true)?;
    g.scale_by(l, s)
}

/// Contrastive loss where the `n * K` hard negatives join the image-to-text
/// candidates as extra columns. Text-to-image uses the positives only.
pub fn hardneg_infonce(g: &mut Graph, img: Var, pos: Var, negs: Option<Var>, log_scale: Var) -> Result<Var> {
    let (iv, pv) = (g.value(img), g.value(pos));
    let n = iv.rows();
    if pv.rows() != n || pv.cols() != iv.cols() {
        return Err(Error::shape("hardneg_infonce", format!("images {:?}, positives {:?}", iv.shape(), pv.shape())));
    }
    let Some(negs) = negs else {
        let l = contrastive_logits(g, img, pos, log_scale)?;
        return symmetric_infonce(g, l);
    };
    let nv = g.value(negs);
    if nv.cols() != iv.cols() || !nv.rows().is_multiple_of(n) {
        return Err(Error::shape(
            "hardneg_infonce",
            format!("{} hard negatives of width {} for {n} images", nv.rows(), nv.cols()),
        ));
    }
    let txt = g.concat_rows(pos, negs)?;
    let full = contrastive_logits(g, img, txt, log_scale)?;
    let i2t = g.cross_entropy(full, &diagonal(n))?;
    let square = g.slice_cols(full, 0, n)?;
    let t = g.transpose(square)?;
    let t2i = g.cross_entropy(t, &diagonal(n))?;
    let both = g.add(i2t, t2i)?;
    g.scale(both, 0.5)
}

/// Value of [`symmetric_infonce`] for a constant logit matrix.
pub fn symmetric_infonce_value(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.input(logits.clone())?;
    let loss = symmetric_infonce(&mut g, l)?;
    Ok(g.value(loss).item())
}

/// Value of [`hardneg_infonce`] for constant embeddings.
pub fn hardneg_infonce_value(img: &Tensor, pos: &Tensor, negs: Option<&Tensor>, log_scale: f64) -> Result<f64> {
    let mut g = Graph::new();
    let i = g.input(img.clone())?;
    let p = g.input(pos.clone())?;
    let n = negs.map(|t| g.input(t.clone())).transpose()?;
    let s = g.input(Tensor::scalar(log_scale))?;
    let loss = hardneg_infonce(&mut g, i, p, n, s)?;
    Ok(g.value(loss).item())
}
