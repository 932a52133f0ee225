use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, gradient, AdamConfig, AdamState, Tensor, Var};
use crate::error::{Error, Result};
use crate::fp::DualState;
use crate::model::{ChannelSample, SystemConfig};

use super::graph::{batch_forward, BatchGraph};
use super::UnfoldModel;

/// A model trained by [`train_phase`]: supervised on per-sample labels,
/// then unsupervised on the sum rate of its output beamformers.
pub trait Learner {
    type Label;

    fn parameters(&self) -> Vec<Tensor>;
    fn set_parameters(&mut self, params: &[Tensor]) -> Result<()>;
    fn check(&self, cfg: &SystemConfig) -> Result<()>;
    /// Forward graph whose `params` are this model's parameters in
    /// [`Learner::parameters`] order.
    fn forward(&self, cfg: &SystemConfig, samples: &[&ChannelSample]) -> Result<BatchGraph>;
    fn supervised_loss(&self, graph: &mut BatchGraph, labels: &[&Self::Label]) -> Result<Var>;
}

impl Learner for UnfoldModel {
    type Label = LabelPair;

    fn parameters(&self) -> Vec<Tensor> {
        UnfoldModel::parameters(self)
    }

    fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        UnfoldModel::set_parameters(self, params)
    }

    fn check(&self, cfg: &SystemConfig) -> Result<()> {
        UnfoldModel::check(self, cfg)
    }

    fn forward(&self, cfg: &SystemConfig, samples: &[&ChannelSample]) -> Result<BatchGraph> {
        batch_forward(self, cfg, samples)
    }

    fn supervised_loss(&self, graph: &mut BatchGraph, labels: &[&LabelPair]) -> Result<Var> {
        supervised_loss(graph, labels)
    }
}

/// Duals after the first and the last outer iteration of the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPair {
    pub first: DualState,
    pub last: DualState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub supervised_epochs: usize,
    pub unsupervised_epochs: usize,
    /// Epochs without a validation improvement before a phase stops.
    pub patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            learning_rate: 1e-4,
            supervised_epochs: 50,
            unsupervised_epochs: 150,
            patience: 7,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("batch size and patience must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    Unsupervised,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Supervised => "supervised",
            Phase::Unsupervised => "unsupervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_sr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Phases that ended on the patience rule.
    pub early_stops: Vec<Phase>,
}

/// Seeded split into (training, validation) indices.  With fewer than two
/// samples both sets are the whole dataset.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 || fraction <= 0.0 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn dual_tensor(duals: &[&DualState]) -> Result<Tensor> {
    let k1 = duals[0].lambda.len() + 1;
    let data: Vec<f64> = duals.iter().flat_map(|d| d.to_vec()).collect();
    Tensor::new(vec![duals.len(), k1], data)
}

fn xi(graph: &mut BatchGraph, layer: usize) -> Result<Var> {
    let (lambda, mu) = graph.duals[layer];
    let mu_col = graph.tape.reshape(mu, vec![graph.batch, 1])?;
    graph.tape.concat(&[lambda, mu_col], 1)
}

/// Batch mean of `||xi^[0] - xi_first||^2 + ||xi^[L] - xi_last||^2`.
pub fn supervised_loss(graph: &mut BatchGraph, labels: &[&LabelPair]) -> Result<Var> {
    if labels.len() != graph.batch {
        return Err(Error::dims(graph.batch, labels.len()));
    }
    let last_layer = graph.duals.len() - 1;
    let mut terms = Vec::with_capacity(2);
    for (layer, target) in [(0, dual_tensor(&labels.iter().map(|l| &l.first).collect::<Vec<_>>())?), (last_layer, dual_tensor(&labels.iter().map(|l| &l.last).collect::<Vec<_>>())?)] {
        let pred = xi(graph, layer)?;
        let t = &mut graph.tape;
        if t.shape(pred) != target.shape() {
            return Err(Error::dims(format!("{:?}", t.shape(pred)), format!("{:?}", target.shape())));
        }
        let target = t.constant(target);
        let diff = t.sub(pred, target)?;
        let sq = t.mul(diff, diff)?;
        terms.push(t.sum_last(sq)?);
    }
    let t = &mut graph.tape;
    let per_sample = t.add(terms[0], terms[1])?;
    t.mean(per_sample)
}

/// Batch mean of the negative sum rate of the network output.
pub fn unsupervised_loss(graph: &mut BatchGraph, cfg: &SystemConfig) -> Result<Var> {
    let p = graph.output();
    let sr = graph.sum_rate(cfg, p)?;
    let mean = graph.tape.mean(sr)?;
    graph.tape.scale(mean, -1.0)
}

struct Evaluation {
    loss: f64,
    sum_rate: f64,
}

fn phase_loss<M: Learner>(
    model: &M,
    graph: &mut BatchGraph,
    cfg: &SystemConfig,
    phase: Phase,
    labels: &[&M::Label],
) -> Result<Var> {
    match phase {
        Phase::Supervised => model.supervised_loss(graph, labels),
        Phase::Unsupervised => unsupervised_loss(graph, cfg),
    }
}

fn batch_labels<'a, L>(labels: Option<&'a [Option<L>]>, idx: &[usize]) -> Vec<&'a L> {
    match labels {
        Some(l) => idx.iter().filter_map(|&i| l[i].as_ref()).collect(),
        None => Vec::new(),
    }
}

fn evaluate<M: Learner>(
    model: &M,
    cfg: &SystemConfig,
    samples: &[ChannelSample],
    labels: Option<&[Option<M::Label>]>,
    idx: &[usize],
    phase: Phase,
    batch_size: usize,
) -> Result<Evaluation> {
    let (mut loss, mut sr) = (0.0, 0.0);
    for chunk in idx.chunks(batch_size) {
        let batch: Vec<&ChannelSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let mut graph = model.forward(cfg, &batch)?;
        let l = phase_loss(model, &mut graph, cfg, phase, &batch_labels(labels, chunk))?;
        let p = graph.output();
        let rates = graph.sum_rate(cfg, p)?;
        loss += graph.tape.value(l).item() * chunk.len() as f64;
        sr += graph.tape.value(rates).data().iter().sum::<f64>();
    }
    let n = idx.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        sum_rate: sr / n,
    })
}

/// Runs one training phase in place, keeping the weights with the best
/// validation loss seen (the starting weights included).
pub fn train_phase<M: Learner>(
    model: &mut M,
    cfg: &SystemConfig,
    samples: &[ChannelSample],
    labels: Option<&[Option<M::Label>]>,
    phase: Phase,
    tcfg: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<()> {
    tcfg.validate()?;
    model.check(cfg)?;
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let (mut train_idx, mut val_idx) = split_validation(samples.len(), tcfg.validation_fraction, tcfg.seed);
    let epochs = match phase {
        Phase::Supervised => {
            let labels = labels.ok_or_else(|| Error::invalid("supervised phase needs labels"))?;
            if labels.len() != samples.len() {
                return Err(Error::dims(format!("{} labels", samples.len()), labels.len()));
            }
            train_idx.retain(|&i| labels[i].is_some());
            val_idx.retain(|&i| labels[i].is_some());
            if train_idx.is_empty() || val_idx.is_empty() {
                return Err(Error::invalid("no labelled samples in the training or validation split"));
            }
            tcfg.supervised_epochs
        }
        Phase::Unsupervised => tcfg.unsupervised_epochs,
    };
    let labels = if phase == Phase::Supervised { labels } else { None };
    if epochs == 0 {
        return Ok(());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ if phase == Phase::Supervised { 0x5u64 } else { 0xau64 });
    let adam = AdamConfig::new(tcfg.learning_rate);
    let mut params = model.parameters();
    let mut state = AdamState::new(&params);
    let mut best_loss = evaluate(model, cfg, samples, labels, &val_idx, phase, tcfg.batch_size)?.loss;
    let mut best_params = params.clone();
    let mut stale = 0;

    for epoch in 1..=epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(tcfg.batch_size) {
            let batch: Vec<&ChannelSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut graph = model.forward(cfg, &batch)?;
            let loss = phase_loss(model, &mut graph, cfg, phase, &batch_labels(labels, chunk))?;
            let grads = gradient(&graph.tape, loss, &graph.params)?;
            total += graph.tape.value(loss).item() * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut state, &adam)?;
            model.set_parameters(&params)?;
        }
        let eval = evaluate(model, cfg, samples, labels, &val_idx, phase, tcfg.batch_size)?;
        history.epochs.push(EpochRecord {
            phase,
            epoch,
            train_loss: total / train_idx.len() as f64,
            validation_loss: eval.loss,
            validation_sr: eval.sum_rate,
        });
        if eval.loss < best_loss {
            best_loss = eval.loss;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                history.early_stops.push(phase);
                break;
            }
        }
    }
    model.set_parameters(&best_params)
}

/// Supervised phase on the solver labels, then the unsupervised phase on
/// the sum rate.
pub fn train<M: Learner>(
    model: &mut M,
    cfg: &SystemConfig,
    samples: &[ChannelSample],
    labels: &[Option<M::Label>],
    tcfg: &TrainConfig,
) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    train_phase(model, cfg, samples, Some(labels), Phase::Supervised, tcfg, &mut history)?;
    train_phase(model, cfg, samples, None::<&[Option<M::Label>]>, Phase::Unsupervised, tcfg, &mut history)?;
    Ok(history)
}
