//! Linear and one-hidden-layer probes trained on frozen features.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
        }
    }
}

/// How the MLP hidden layer is set up. `FrozenIdentity` keeps an identity
/// weight matrix with no nonlinearity, which reduces the MLP to the linear
/// probe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenMode {
    #[default]
    Trained,
    FrozenIdentity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden_dims: Vec<usize>,
    pub hidden_mode: HiddenMode,
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on weight matrices (biases are not penalized).
    pub weight_decay: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            hidden_mode: HiddenMode::Trained,
            epochs: 500,
            learning_rate: 1e-2,
            weight_decay: 1e-2,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.len() != 1 || self.hidden_dims[0] == 0 {
            return Err(Error::Config("probe hidden_dims must hold one positive width".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("probe epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("probe learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("probe weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("probe test_fraction {} must be in (0,1)", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: ProbeKind,
    pub task: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub chance: f64,
    /// (sample row, correct) for every test sample, in row order.
    #[serde(skip)]
    pub test_outcomes: Vec<(usize, bool)>,
}

/// Seeded train/test partition of the labelled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeSplit {
    pub fn new(labels: &[Option<usize>], test_fraction: f64, seed: u64) -> Result<Self> {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        if rows.len() < 2 {
            return Err(Error::Contract(format!("probe needs at least 2 labelled samples, got {}", rows.len())));
        }
        rows.shuffle(&mut rng::stream(seed, "probe-split", 0));
        let n_test = ((rows.len() as f64 * test_fraction).round() as usize).clamp(1, rows.len() - 1);
        let mut test = rows.split_off(rows.len() - n_test);
        rows.sort_unstable();
        test.sort_unstable();
        Ok(Self { train: rows, test })
    }
}

pub fn fit_linear_probe(
    features: &Tensor,
    labels: &[Option<usize>],
    task: &str,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    fit(ProbeKind::Linear, features, labels, task, config)
}

pub fn fit_mlp_probe(
    features: &Tensor,
    labels: &[Option<usize>],
    task: &str,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    fit(ProbeKind::Mlp, features, labels, task, config)
}

pub fn fit_probe(
    kind: ProbeKind,
    features: &Tensor,
    labels: &[Option<usize>],
    task: &str,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    fit(kind, features, labels, task, config)
}

fn fit(
    kind: ProbeKind,
    features: &Tensor,
    labels: &[Option<usize>],
    task: &str,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    config.validate()?;
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::shape("probe", format!("features {:?} vs {} labels", features.shape(), labels.len())));
    }
    let mut present: Vec<usize> = labels.iter().flatten().copied().collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Contract(format!("task {task}: labels hold a single class")));
    }
    let classes = present[present.len() - 1] + 1;
    let split = ProbeSplit::new(labels, config.test_fraction, config.seed)?;
    let x_train = standardize(features, &split.train, &split.train);
    let x_test = standardize(features, &split.train, &split.test);
    let y_train: Vec<usize> = split.train.iter().map(|&i| labels[i].expect("labelled")).collect();
    let y_test: Vec<usize> = split.test.iter().map(|&i| labels[i].expect("labelled")).collect();

    let d = features.cols();
    let model = Model::init(kind, d, classes, config)?;
    let model = train(model, &x_train, &y_train, config)?;
    let train_pred = model.predict(&x_train)?;
    let test_pred = model.predict(&x_test)?;
    let acc = |p: &[usize], y: &[usize]| p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    Ok(ProbeReport {
        probe: kind,
        task: task.to_string(),
        train_accuracy: acc(&train_pred, &y_train),
        test_accuracy: acc(&test_pred, &y_test),
        n_train: y_train.len(),
        n_test: y_test.len(),
        classes: present.len(),
        chance: 1.0 / present.len() as f64,
        test_outcomes: split.test.iter().zip(test_pred.iter().zip(&y_test)).map(|(&i, (p, y))| (i, p == y)).collect(),
    })
}

/// z-score `rows` of `x` with statistics taken from `stat_rows`.
fn standardize(x: &Tensor, stat_rows: &[usize], rows: &[usize]) -> Tensor {
    let d = x.cols();
    let n = stat_rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in stat_rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in stat_rows {
        for ((s, v), m) in sd.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        data.extend(x.row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s));
    }
    Tensor::matrix(rows.len(), d, data).expect("shape is consistent")
}

struct Model {
    kind: ProbeKind,
    store: ParamStore,
    frozen_identity: bool,
}

impl Model {
    fn init(kind: ProbeKind, d: usize, classes: usize, config: &ProbeConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut frozen_identity = false;
        let out_in = match kind {
            ProbeKind::Linear => d,
            ProbeKind::Mlp => {
                let h = config.hidden_dims[0];
                let w = match config.hidden_mode {
                    HiddenMode::Trained => {
                        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
                        let mut r = rng::stream(config.seed, "probe-init", 0);
                        Tensor::matrix(d, h, (0..d * h).map(|_| normal.sample(&mut r)).collect())?
                    }
                    HiddenMode::FrozenIdentity => {
                        if h != d {
                            return Err(Error::Config(format!(
                                "frozen identity hidden layer needs width {d}, got {h}"
                            )));
                        }
                        frozen_identity = true;
                        let mut eye = Tensor::zeros(&[d, d]);
                        for i in 0..d {
                            eye.data_mut()[i * d + i] = 1.0;
                        }
                        eye
                    }
                };
                store.add("hidden.weight", w);
                store.add("hidden.bias", Tensor::zeros(&[1, h]));
                h
            }
        };
        store.add("out.weight", Tensor::zeros(&[out_in, classes]));
        store.add("out.bias", Tensor::zeros(&[1, classes]));
        Ok(Self { kind, store, frozen_identity })
    }

    fn logits(&self, g: &mut Graph, x: &Tensor) -> Result<crate::numerics::Var> {
        let mut h = g.input(x.clone())?;
        let ids: Vec<_> = self.store.ids().collect();
        let mut next = 0;
        if self.kind == ProbeKind::Mlp {
            let w = g.param(&self.store, ids[0])?;
            let b = g.param(&self.store, ids[1])?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if !self.frozen_identity {
                h = g.tanh(h)?;
            }
            next = 2;
        }
        let w = g.param(&self.store, ids[next])?;
        let b = g.param(&self.store, ids[next + 1])?;
        let z = g.matmul(h, w)?;
        g.add_bias(z, b)
    }

    /// Weight matrices that carry the L2 penalty.
    fn penalized(&self) -> Vec<crate::numerics::ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| name.ends_with("weight"))
            .filter(|(_, name, _)| !(self.frozen_identity && name.starts_with("hidden")))
            .map(|(id, _, _)| id)
            .collect()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let z = self.logits(&mut g, x)?;
        let z = g.value(z);
        Ok((0..z.rows()).map(|i| crate::evalkit::argmax(z.row(i))).collect())
    }
}

fn train(mut model: Model, x: &Tensor, y: &[usize], config: &ProbeConfig) -> Result<Model> {
    let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new(adam, &model.store)?;
    for _ in 0..config.epochs {
        let mut g = Graph::new();
        let z = model.logits(&mut g, x)?;
        let mut loss = g.cross_entropy(z, y)?;
        if config.weight_decay > 0.0 {
            for id in model.penalized() {
                let w = g.param(&model.store, id)?;
                let sq = g.mul(w, w)?;
                let sq = g.sum(sq)?;
                let pen = g.scale(sq, 0.5 * config.weight_decay)?;
                loss = g.add(loss, pen)?;
            }
        }
        let mut grads = g.backward(loss)?;
        if model.frozen_identity {
            let ids: Vec<_> = model.store.ids().take(2).collect();
            for id in ids {
                grads.insert(id, Tensor::zeros(model.store.get(id).shape()));
            }
        }
        state.apply(&mut model.store, &grads)?;
    }
    Ok(model)
}
