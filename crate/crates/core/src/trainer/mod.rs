//! Contrastive objectives and the training loop.

mod checkpoint;
mod loss;

use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, read_checkpoint, save_checkpoint, FORMAT_VERSION,
};
pub use loss::{
    contrastive_logits, hardneg_infonce, hardneg_infonce_value, symmetric_infonce, symmetric_infonce_value,
};

use crate::chartgen::{ChartEntry, Dataset, RasterImage};
use crate::dualenc::{init_params, patchify, EncoderConfig, EncoderParams, TokenBatch};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_retrieval, RetrievalInstance};
use crate::negcap::{CaptionRecord, Polarity};
use crate::numerics::{finite_diff_check_sampled, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const FD_ENTRIES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// How positive captions become training pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSampling {
    /// One uniformly drawn positive per image per epoch.
    OnePerImage,
    /// Every positive caption is its own pair each epoch.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub k_train: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub caption_sampling: CaptionSampling,
    pub verify_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 3e-4,
            epochs: 3,
            k_train: 0,
            seed: 0,
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            checkpoint_every: 0,
            caption_sampling: CaptionSampling::OnePerImage,
            verify_gradients: false,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning hyperparameters for a pretrained encoder: batch 64,
    /// learning rate 5e-6, 3 epochs, constant rate.
    pub fn finetune_preset() -> Self {
        Self { learning_rate: 5e-6, schedule: Schedule::Constant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("training.batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("training.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("training.epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        };
        self.learning_rate * warm * decay
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Equality ignoring wall-clock fields.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| -> Vec<(usize, u64, Option<u64>)> {
            l.epochs.iter().map(|e| (e.epoch, e.mean_loss.to_bits(), e.heldout_accuracy.map(f64::to_bits))).collect()
        };
        self.steps == other.steps && strip(self) == strip(other)
    }

    /// `step,epoch,loss,lr` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "epoch", "loss", "lr"]).map_err(|e| Error::Format(e.to_string()))?;
        for s in &self.steps {
            w.write_record([s.step.to_string(), s.epoch.to_string(), format!("{:e}", s.loss), format!("{:e}", s.lr)])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("train_log.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        // Wall-clock time goes to its own file so everything else stays
        // byte-identical across reruns.
        let summary: Vec<_> = self
            .epochs
            .iter()
            .map(|e| serde_json::json!({"epoch": e.epoch, "mean_loss": e.mean_loss, "heldout_accuracy": e.heldout_accuracy}))
            .collect();
        crate::chartgen::dataset::write_json(&dir.join("train_summary.json"), &summary)?;
        let timing: Vec<_> =
            self.epochs.iter().map(|e| serde_json::json!({"epoch": e.epoch, "wall_seconds": e.wall_seconds})).collect();
        crate::chartgen::dataset::write_json(&dir.join(TIMING_FILE), &timing)
    }
}

/// The one training artifact that differs between identical runs.
pub const TIMING_FILE: &str = "timing.json";

/// Optional inputs to [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Starting weights; a fresh init from the training seed otherwise.
    pub init: Option<EncoderParams>,
    /// Evaluated after every epoch.
    pub heldout: Option<(&'a Dataset, &'a [RetrievalInstance])>,
    /// Periodic and final checkpoints go here.
    pub out_dir: Option<&'a Path>,
    /// Keep in-memory copies of the weights at every periodic checkpoint.
    pub keep_snapshots: bool,
}

pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: TrainLog,
    pub snapshots: Vec<(usize, EncoderParams)>,
}

struct Pair<'a> {
    image: &'a RasterImage,
    positive: &'a CaptionRecord,
    negatives: Vec<&'a CaptionRecord>,
}

fn positives(e: &ChartEntry) -> Vec<&CaptionRecord> {
    e.captions.iter().filter(|c| c.polarity == Polarity::Positive).collect()
}

fn make_pair<'a>(e: &'a ChartEntry, pos: &'a CaptionRecord, k: usize, r: &mut impl rand::Rng) -> Result<Pair<'a>> {
    let mut negs: Vec<_> = e.negatives_for(&pos.source_qa_id).collect();
    if negs.len() < k {
        return Err(Error::Exhausted { qa_id: pos.source_qa_id.clone(), requested: k, achieved: negs.len() });
    }
    negs.shuffle(r);
    negs.truncate(k);
    Ok(Pair { image: &e.image, positive: pos, negatives: negs })
}

fn epoch_pairs<'a>(dataset: &'a Dataset, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Pair<'a>>> {
    let mut r = rng::stream(cfg.seed, "epoch", epoch as u64);
    let mut pairs = Vec::new();
    for e in &dataset.entries {
        let pos = positives(e);
        match cfg.caption_sampling {
            CaptionSampling::OnePerImage => {
                if let Some(&p) = pos.choose(&mut r) {
                    pairs.push(make_pair(e, p, cfg.k_train, &mut r)?);
                }
            }
            CaptionSampling::All => {
                for p in pos {
                    pairs.push(make_pair(e, p, cfg.k_train, &mut r)?);
                }
            }
        }
    }
    pairs.shuffle(&mut r);
    Ok(pairs)
}

fn steps_per_epoch(pairs: usize, batch: usize) -> usize {
    pairs / batch + usize::from(pairs % batch >= 2)
}

struct Batch {
    patches: crate::numerics::Tensor,
    pos: TokenBatch,
    negs: Option<TokenBatch>,
}

impl Batch {
    fn new(pairs: &[Pair], config: &EncoderConfig) -> Result<Self> {
        let imgs: Vec<&RasterImage> = pairs.iter().map(|p| p.image).collect();
        let pos: Vec<&str> = pairs.iter().map(|p| p.positive.text.as_str()).collect();
        let negs: Vec<&str> = pairs.iter().flat_map(|p| p.negatives.iter().map(|n| n.text.as_str())).collect();
        Ok(Self {
            patches: patchify(&imgs, config)?,
            pos: TokenBatch::from_texts(&pos, config)?,
            negs: if negs.is_empty() { None } else { Some(TokenBatch::from_texts(&negs, config)?) },
        })
    }

    fn loss(&self, params: &EncoderParams, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let b = params.bind(g, store)?;
        let img = params.image_forward(g, &b, &self.patches)?;
        let pos = params.text_forward(g, &b, &self.pos)?;
        let negs = self.negs.as_ref().map(|n| params.text_forward(g, &b, n)).transpose()?;
        hardneg_infonce(g, img, pos, negs, b.get(params.logit_scale_id()))
    }
}

/// Train the dual encoder on `dataset`.
pub fn train(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    encoder.validate()?;
    if dataset.entries.iter().all(|e| positives(e).is_empty()) {
        return Err(Error::Contract("training set has no positive captions".into()));
    }
    let mut params = match opts.init {
        Some(p) if &p.config != encoder => {
            return Err(Error::DigestMismatch { expected: encoder.digest(), found: p.config.digest() })
        }
        Some(p) => p,
        None => init_params(encoder, rng::derive_seed(cfg.seed, "init", 0))?,
    };
    let per_epoch = steps_per_epoch(epoch_pairs(dataset, cfg, 0)?.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::Contract(format!("fewer than 2 training pairs for batch size {}", cfg.batch_size)));
    }
    let total = per_epoch * cfg.epochs;
    let mut adam =
        AdamState::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() }, &params.store)?;
    let mut log = TrainLog::default();
    let mut snapshots = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let pairs = epoch_pairs(dataset, cfg, epoch)?;
        let mut losses = Vec::new();
        for chunk in pairs.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = Batch::new(chunk, encoder)?;
            let mut g = Graph::new();
            let loss = match batch.loss(&params, &mut g, &params.store) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = g.backward(loss)?;
            if cfg.verify_gradients {
                let err = finite_diff_check_sampled(
                    |g, store| batch.loss(&params, g, store),
                    &params.store,
                    FD_STEP,
                    FD_ENTRIES,
                    rng::derive_seed(cfg.seed, "fd", step as u64),
                )?;
                if err >= FD_TOLERANCE {
                    return Err(Error::Contract(format!("step {step}: gradient check error {err:e}")));
                }
            }
            let lr = cfg.learning_rate_at(step, total);
            adam.config.learning_rate = lr;
            adam.apply(&mut params.store, &grads)?;
            params.clamp_logit_scale();
            log.steps.push(StepLog { step, epoch, loss: value, lr });
            losses.push(value);
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(dir) = opts.out_dir {
                    save_checkpoint(&params, step as u64, &dir.join(format!("step-{step:06}.ckpt")))?;
                }
                if opts.keep_snapshots {
                    snapshots.push((step, params.clone()));
                }
            }
        }
        let heldout_accuracy = match opts.heldout {
            Some((ds, inst)) => Some(evaluate_retrieval(&params, ds, inst)?.accuracy),
            None => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            heldout_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(dir) = opts.out_dir {
        save_checkpoint(&params, step as u64, &dir.join("final.ckpt"))?;
        log.write(dir)?;
    }
    Ok(TrainOutcome { params, log, snapshots })
}
