//! Retrieval accuracy as a function of training-set size.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::chartgen::Dataset;
use crate::dualenc::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_retrieval, RetrievalInstance};
use crate::trainer::{train, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Hard negatives per positive during training; 0 is the plain variant.
    pub k_variants: Vec<usize>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { fractions: vec![0.25, 0.5, 1.0], seeds: vec![0, 1, 2], k_variants: vec![0, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub variant: String,
    pub fraction: f64,
    pub seed: u64,
    pub accuracy: f64,
}

pub fn variant_name(k_train: usize) -> String {
    if k_train == 0 {
        "plain".into()
    } else {
        format!("hard_negative_k{k_train}")
    }
}

/// Chart counts for each fraction of `n`. Every subset is a prefix of the
/// dataset's fixed order, so smaller subsets nest inside larger ones.
pub fn nested_subset_sizes(n: usize, fractions: &[f64], batch_size: usize) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(Error::Config("scaling needs at least one fraction".into()));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("scaling fractions {fractions:?} must ascend strictly")));
    }
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("scaling fraction {f} outside (0,1]")));
            }
            let m = (n as f64 * f).round() as usize;
            if m < batch_size {
                return Err(Error::Config(format!(
                    "fraction {f} of {n} charts gives {m}, less than one batch of {batch_size}"
                )));
            }
            Ok(m)
        })
        .collect()
}

/// Train one model per (variant, fraction, seed) and score it on the
/// held-out instances. Cells are independent, so with `threads > 1` they
/// run concurrently; each cell is deterministic on its own and the result
/// is sorted by (variant, fraction, seed) either way.
pub fn scaling_curves(
    train_set: &Dataset,
    heldout: (&Dataset, &[RetrievalInstance]),
    encoder: &EncoderConfig,
    base: &TrainConfig,
    config: &ScalingConfig,
    threads: usize,
    mut progress: impl FnMut(&ScalingPoint),
) -> Result<Vec<ScalingPoint>> {
    if config.seeds.is_empty() || config.k_variants.is_empty() {
        return Err(Error::Config("scaling needs at least one seed and one variant".into()));
    }
    let sizes = nested_subset_sizes(train_set.len(), &config.fractions, base.batch_size)?;
    let mut cells = Vec::new();
    for &k in &config.k_variants {
        for (&fraction, &size) in config.fractions.iter().zip(&sizes) {
            for &seed in &config.seeds {
                cells.push((k, fraction, size, seed));
            }
        }
    }
    let run = |&(k, fraction, size, seed): &(usize, f64, usize, u64)| -> Result<ScalingPoint> {
        let cfg = TrainConfig { k_train: k, seed, ..base.clone() };
        let out = train(&train_set.prefix(size), encoder, &cfg, TrainOptions::default())?;
        let report = evaluate_retrieval(&out.params, heldout.0, heldout.1)?;
        Ok(ScalingPoint { variant: variant_name(k), fraction, seed, accuracy: report.accuracy })
    };
    let mut points = Vec::with_capacity(cells.len());
    if threads <= 1 {
        for cell in &cells {
            let p = run(cell)?;
            progress(&p);
            points.push(p);
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ScalingPoint>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..threads.min(cells.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(cell) = cells.get(i) else { break };
                    let r = run(cell);
                    slots.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
        for slot in slots.into_inner().expect("no worker panicked") {
            let p = slot.expect("every cell ran")?;
            progress(&p);
            points.push(p);
        }
    }
    sort_points(&mut points);
    Ok(points)
}

pub fn sort_points(points: &mut [ScalingPoint]) {
    points.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.fraction.total_cmp(&b.fraction)).then(a.seed.cmp(&b.seed)));
}

/// Mean accuracy per (variant, fraction), in sorted order.
pub fn mean_curve(points: &[ScalingPoint]) -> Vec<(String, f64, f64)> {
    let mut sorted = points.to_vec();
    sort_points(&mut sorted);
    let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
    for p in &sorted {
        match out.last_mut() {
            Some(last) if last.0 == p.variant && last.1 == p.fraction => {
                last.2 += p.accuracy;
                last.3 += 1;
            }
            _ => out.push((p.variant.clone(), p.fraction, p.accuracy, 1)),
        }
    }
    out.into_iter().map(|(v, f, s, n)| (v, f, s / n as f64)).collect()
}
