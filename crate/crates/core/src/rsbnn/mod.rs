//! Deep-unfolded beamforming network.
//!
//! Each unfolded layer refreshes the FP auxiliaries from the previous
//! beamformers, predicts the duals `(lambda, mu)` with a one-hidden-layer
//! network, forms the OBS beamformers at those duals and rescales them onto
//! the power constraint.  An extra network (layer 0) predicts the initial
//! duals from the warm-start beamformers.
//!
//! Network input layout, per sample:
//!
//! ```text
//! [ Re(H) | Im(H) | Re(P) | Im(P) | lambda | mu ]
//! ```
//!
//! with `H` listed user by user (`h_1` first), `P` stream by stream
//! (common stream first), for a length of `2 K N_t + 2 (K + 1) N_t + K + 1`.
//! `P` enters in units of `sqrt(P_t)` and `mu` in units of `K / P_t`, and
//! the predicted `mu` is returned in the same unit.

pub(crate) mod graph;
mod io;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fp::{obs_beamformers, update_aux, DualState};
use crate::hfpi::init_beamformers;
use crate::model::{rate_report, rectify_power, BeamMatrix, ChannelSample, SystemConfig};

pub use graph::{batch_forward, batch_sum_rate, BatchGraph};
pub use io::{load_model, read_model, save_model, write_model};
pub use train::{
    split_validation, supervised_loss, train, train_phase, unsupervised_loss, EpochRecord, LabelPair, Learner, Phase,
    TrainConfig, TrainHistory,
};

/// Offset added to `|raw|` so the predicted `mu` is strictly positive.
pub const MU_OFFSET: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnfoldConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Floor `epsilon` in the multiplier normalization.
    pub epsilon: f64,
    /// Stop gradients at the auxiliary variables.
    pub detach_aux: bool,
}

impl Default for UnfoldConfig {
    fn default() -> Self {
        UnfoldConfig {
            num_layers: 5,
            hidden_dim: 512,
            epsilon: 0.01,
            detach_aux: false,
        }
    }
}

impl UnfoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("layer count and hidden width must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

pub fn feature_dim(num_users: usize, num_tx_antennas: usize) -> usize {
    2 * num_users * num_tx_antennas + 2 * (num_users + 1) * num_tx_antennas + num_users + 1
}

/// One-hidden-layer dual predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[M, D]`
    pub w1: Tensor,
    /// `[M]`
    pub b1: Tensor,
    /// `[K + 1, M]`
    pub w2: Tensor,
    /// `[K + 1]`
    pub b2: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized to shape")
}

impl DenseLayer {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        DenseLayer {
            w1: xavier(rng, hidden, input),
            b1: Tensor::zeros(vec![hidden]),
            w2: xavier(rng, output, hidden),
            b2: Tensor::zeros(vec![output]),
        }
    }

    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        DenseLayer {
            w1: Tensor::zeros(vec![hidden, input]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![output, hidden]),
            b2: Tensor::zeros(vec![output]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `W2 relu(W1 x + b1) + b2`.
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let (hidden, input) = (self.w1.shape()[0], self.w1.shape()[1]);
        let w1 = self.w1.data();
        let h: Vec<f64> = (0..hidden)
            .map(|m| {
                let row = &w1[m * input..(m + 1) * input];
                let z: f64 = row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.b1.data()[m];
                z.max(0.0)
            })
            .collect();
        let outputs = self.w2.shape()[0];
        let w2 = self.w2.data();
        (0..outputs)
            .map(|o| w2[o * hidden..(o + 1) * hidden].iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + self.b2.data()[o])
            .collect()
    }
}

/// Networks for layers `0..=L`, each mapping features to `K + 1` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldModel {
    pub num_users: usize,
    pub num_tx_antennas: usize,
    pub config: UnfoldConfig,
    pub layers: Vec<DenseLayer>,
}

impl UnfoldModel {
    /// Xavier-uniform weights and zero biases from `seed`.
    pub fn new(num_users: usize, num_tx_antennas: usize, config: UnfoldConfig, seed: u64) -> Result<Self> {
        Self::build(num_users, num_tx_antennas, config, |d, m, o| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            move |_| DenseLayer::init(&mut rng, d, m, o)
        })
    }

    /// All parameters zero.
    pub fn zeros(num_users: usize, num_tx_antennas: usize, config: UnfoldConfig) -> Result<Self> {
        Self::build(num_users, num_tx_antennas, config, |d, m, o| move |_| DenseLayer::zeros(d, m, o))
    }

    fn build<F, G>(num_users: usize, num_tx_antennas: usize, config: UnfoldConfig, make: F) -> Result<Self>
    where
        F: FnOnce(usize, usize, usize) -> G,
        G: FnMut(usize) -> DenseLayer,
    {
        config.validate()?;
        if num_users == 0 || num_tx_antennas == 0 {
            return Err(Error::invalid("K and N_t must be positive"));
        }
        let layer = make(feature_dim(num_users, num_tx_antennas), config.hidden_dim, num_users + 1);
        Ok(UnfoldModel {
            num_users,
            num_tx_antennas,
            config,
            layers: (0..=config.num_layers).map(layer).collect(),
        })
    }

    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if cfg.num_users != self.num_users || cfg.num_tx_antennas != self.num_tx_antennas {
            return Err(Error::dims(
                format!("K={}, N_t={}", self.num_users, self.num_tx_antennas),
                format!("K={}, N_t={}", cfg.num_users, cfg.num_tx_antennas),
            ));
        }
        let (d, m, o) = (
            feature_dim(self.num_users, self.num_tx_antennas),
            self.config.hidden_dim,
            self.num_users + 1,
        );
        let expected: [&[usize]; 4] = [&[m, d], &[m], &[o, m], &[o]];
        if self.layers.len() != self.config.num_layers + 1 {
            return Err(Error::dims(self.config.num_layers + 1, self.layers.len()));
        }
        for layer in &self.layers {
            for (t, e) in layer.tensors().iter().zip(expected) {
                if t.shape() != e {
                    return Err(Error::dims(format!("{e:?}"), format!("{:?}", t.shape())));
                }
                if !t.is_finite() {
                    return Err(Error::invalid("model has non-finite parameters"));
                }
            }
        }
        Ok(())
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.tensors().map(Tensor::clone)).collect()
    }

    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 4 * self.layers.len() {
            return Err(Error::dims(4 * self.layers.len(), params.len()));
        }
        for (slot, p) in self.layers.iter_mut().flat_map(|l| l.tensors_mut()).zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::dims(format!("{:?}", slot.shape()), format!("{:?}", p.shape())));
            }
            *slot = p.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(Tensor::len).sum()
    }
}

/// Scale of the beamformer features, `1 / sqrt(P_t)`.
pub fn beam_feature_scale(cfg: &SystemConfig) -> f64 {
    1.0 / cfg.total_power.sqrt()
}

/// Unit of `mu` at the network boundary, `K / P_t`.
pub fn mu_unit(cfg: &SystemConfig) -> f64 {
    cfg.num_users as f64 / cfg.total_power
}

/// Network input for one sample; see the module docs for the layout.
pub fn build_features(cfg: &SystemConfig, ch: &ChannelSample, p_prev: &BeamMatrix, duals: &DualState) -> Result<Vec<f64>> {
    let (nt, k) = (ch.num_tx_antennas(), ch.num_users());
    if p_prev.0.nrows() != nt || p_prev.0.ncols() != k + 1 {
        return Err(Error::dims(
            format!("{nt}x{} beam matrix", k + 1),
            format!("{}x{}", p_prev.0.nrows(), p_prev.0.ncols()),
        ));
    }
    if duals.lambda.len() != k {
        return Err(Error::dims(format!("{k} multipliers"), duals.lambda.len()));
    }
    let c = beam_feature_scale(cfg);
    let mut f = Vec::with_capacity(feature_dim(k, nt));
    f.extend((0..k).flat_map(|u| (0..nt).map(move |n| ch.channels[(n, u)].re)));
    f.extend((0..k).flat_map(|u| (0..nt).map(move |n| ch.channels[(n, u)].im)));
    f.extend((0..=k).flat_map(|s| (0..nt).map(move |n| c * p_prev.0[(n, s)].re)));
    f.extend((0..=k).flat_map(|s| (0..nt).map(move |n| c * p_prev.0[(n, s)].im)));
    f.extend_from_slice(&duals.lambda);
    f.push(duals.mu / mu_unit(cfg));
    Ok(f)
}

/// Raw network outputs mapped to `(lambda', mu)`: a sigmoid on the first
/// `K`, `unit * (|raw| + MU_OFFSET)` on the last.
pub fn output_map(raw: &[f64], unit: f64) -> (Vec<f64>, f64) {
    let k = raw.len() - 1;
    let lambda = raw[..k].iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    (lambda, unit * (raw[k].abs() + MU_OFFSET))
}

/// `mu` is returned in units of `unit` (see [`mu_unit`]).
pub fn layer_forward(layer: &DenseLayer, features: &[f64], unit: f64) -> Result<(Vec<f64>, f64)> {
    if features.len() != layer.w1.shape()[1] {
        return Err(Error::dims(layer.w1.shape()[1], features.len()));
    }
    let raw = layer.apply(features);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite network output"));
    }
    Ok(output_map(&raw, unit))
}

/// `lambda_k = (lambda'_k + eps) / (sum_j lambda'_j + K eps)`.
pub fn normalize_lambda(raw: &[f64], epsilon: f64) -> Vec<f64> {
    let denom = raw.iter().sum::<f64>() + raw.len() as f64 * epsilon;
    raw.iter().map(|&v| (v + epsilon) / denom).collect()
}

/// Duals fed to the layer-0 network.
pub fn initial_duals(cfg: &SystemConfig) -> DualState {
    DualState::uniform(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldTrace {
    /// `xi^[0..=L]`.
    pub duals: Vec<DualState>,
    /// `P^[0..=L]`; entry 0 is the warm start.
    pub beams: Vec<BeamMatrix>,
}

impl UnfoldTrace {
    pub fn output(&self) -> &BeamMatrix {
        self.beams.last().expect("at least the warm start")
    }
}

fn predict_duals(
    model: &UnfoldModel,
    layer: usize,
    cfg: &SystemConfig,
    ch: &ChannelSample,
    p: &BeamMatrix,
    prev: &DualState,
) -> Result<DualState> {
    let features = build_features(cfg, ch, p, prev)?;
    let (raw, mu) = layer_forward(&model.layers[layer], &features, mu_unit(cfg))?;
    DualState::new(normalize_lambda(&raw, model.config.epsilon), mu)
}

/// Inference without a tape.
pub fn unfold_forward(model: &UnfoldModel, cfg: &SystemConfig, ch: &ChannelSample) -> Result<UnfoldTrace> {
    model.check(cfg)?;
    ch.check(cfg)?;
    let p0 = init_beamformers(cfg, ch)?;
    let xi0 = predict_duals(model, 0, cfg, ch, &p0, &initial_duals(cfg))?;
    let mut trace = UnfoldTrace {
        duals: vec![xi0],
        beams: vec![p0],
    };
    for l in 1..=model.config.num_layers {
        let p_prev = &trace.beams[l - 1];
        let aux = update_aux(cfg, ch, p_prev)?;
        let xi = predict_duals(model, l, cfg, ch, p_prev, &trace.duals[l - 1])?;
        let p = rectify_power(&obs_beamformers(cfg, ch, &aux, &xi)?, cfg.total_power)?;
        trace.duals.push(xi);
        trace.beams.push(p);
    }
    Ok(trace)
}

/// Sum rate of the network output.
pub fn unfold_sum_rate(model: &UnfoldModel, cfg: &SystemConfig, ch: &ChannelSample) -> Result<f64> {
    let trace = unfold_forward(model, cfg, ch)?;
    Ok(rate_report(cfg, ch, trace.output())?.sum_rate)
}
