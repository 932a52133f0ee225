//! The unfolded network as a batched computation graph.
//!
//! Every tensor carries the batch as its leading axis; complex tensors end
//! in an axis of length 2.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hfpi::init_beamformers;
use crate::model::{BeamMatrix, ChannelSample, SystemConfig};

use super::{beam_feature_scale, initial_duals, mu_unit, UnfoldModel, MU_OFFSET};

/// Forward graph of one batch.
pub struct BatchGraph {
    pub tape: Tape,
    /// `[W1, b1, W2, b2]` for every layer, in layer order.
    pub params: Vec<Var>,
    /// `(lambda [B, K], mu [B])` for layers `0..=L`.
    pub duals: Vec<(Var, Var)>,
    /// `P^[0..=L]`, each `[B, N_t, K + 1, 2]`.
    pub beams: Vec<Var>,
    pub batch: usize,
    channels: Tensor,
    channels_var: Var,
    num_users: usize,
    num_tx_antennas: usize,
}

fn channel_tensor(samples: &[&ChannelSample], nt: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * nt * k * 2);
    for s in samples {
        for n in 0..nt {
            for u in 0..k {
                let z = s.channels[(n, u)];
                data.extend([z.re, z.im]);
            }
        }
    }
    Tensor::new(vec![samples.len(), nt, k, 2], data).expect("sized to shape")
}

pub(crate) fn beam_tensor(beams: &[BeamMatrix]) -> Tensor {
    let (nt, s) = (beams[0].0.nrows(), beams[0].0.ncols());
    let mut data = Vec::with_capacity(beams.len() * nt * s * 2);
    for p in beams {
        for n in 0..nt {
            for j in 0..s {
                data.extend([p.0[(n, j)].re, p.0[(n, j)].im]);
            }
        }
    }
    Tensor::new(vec![beams.len(), nt, s, 2], data).expect("sized to shape")
}

/// Channel part of the features, constant over layers.
pub(crate) fn channel_features(samples: &[&ChannelSample], nt: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * 2 * k * nt);
    for s in samples {
        for part in 0..2 {
            for u in 0..k {
                for n in 0..nt {
                    let z = s.channels[(n, u)];
                    data.push(if part == 0 { z.re } else { z.im });
                }
            }
        }
    }
    Tensor::new(vec![samples.len(), 2 * k * nt], data).expect("sized to shape")
}

/// Square-root factors and `beta` for one layer.
struct Aux {
    sqrt_common: Var,
    sqrt_private: Var,
    beta_common: Var,
    beta_private: Var,
}

/// Received powers for each user: common `|h_k^H p_0|^2`, own private
/// `|h_k^H p_k|^2`, and the sum over all private streams.
struct Powers {
    inner: Var,
    common: Var,
    own: Var,
    private_total: Var,
}

impl BatchGraph {
    /// Graph holding only the batch channels, before any parameters.
    pub(crate) fn with_channels(cfg: &SystemConfig, samples: &[&ChannelSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in samples {
            s.check(cfg)?;
        }
        let (k, nt) = (cfg.num_users, cfg.num_tx_antennas);
        let mut tape = Tape::new();
        let channels = channel_tensor(samples, nt, k);
        let channels_var = tape.constant(channels.clone());
        Ok(BatchGraph {
            tape,
            params: Vec::new(),
            duals: Vec::new(),
            beams: Vec::new(),
            batch: samples.len(),
            channels,
            channels_var,
            num_users: k,
            num_tx_antennas: nt,
        })
    }

    fn k(&self) -> usize {
        self.num_users
    }

    /// `[B, K]` from `[B, K, K + 1]` by `(b, k) -> (b, k, col(k))`.
    fn pick(&mut self, x: Var, col: impl Fn(usize) -> usize, complex: bool) -> Result<Var> {
        let (b, k) = (self.batch, self.k());
        let parts = if complex { 2 } else { 1 };
        let mut idx = Vec::with_capacity(b * k * parts);
        for bi in 0..b {
            for u in 0..k {
                for part in 0..parts {
                    idx.push(((bi * k + u) * (k + 1) + col(u)) * parts + part);
                }
            }
        }
        let mut shape = vec![b, k];
        if complex {
            shape.push(2);
        }
        self.tape.gather(x, idx, shape)
    }

    /// Repeats each entry of `x` `times` times along a new trailing axis.
    fn repeat_last(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.value(x).len();
        let idx = (0..n).flat_map(|i| std::iter::repeat_n(i, times)).collect();
        let mut out = shape;
        out.push(times);
        self.tape.gather(x, idx, out)
    }

    fn powers(&mut self, p: Var) -> Result<Powers> {
        let (b, k) = (self.batch, self.k());
        let inner = self.tape.complex_matmul(self.channels_var, p, true)?;
        let gains = self.tape.abs_sq(inner)?;
        let common = self.pick(gains, |_| 0, false)?;
        let own = self.pick(gains, |u| u + 1, false)?;
        let idx = (0..b * k).flat_map(|row| (1..=k).map(move |i| row * (k + 1) + i)).collect();
        let private = self.tape.gather(gains, idx, vec![b, k, k])?;
        let private_total = self.tape.sum_last(private)?;
        Ok(Powers {
            inner,
            common,
            own,
            private_total,
        })
    }

    fn aux(&mut self, p: Var, noise: f64, detach: bool) -> Result<Aux> {
        let pw = self.powers(p)?;
        let t = &mut self.tape;
        let denom_private = t.add_scalar(pw.private_total, noise)?;
        let alpha_common = t.div(pw.common, denom_private)?;
        let denom_common = t.add(pw.common, denom_private)?;
        let interference = t.sub(pw.private_total, pw.own)?;
        let interference = t.add_scalar(interference, noise)?;
        let alpha_private = t.div(pw.own, interference)?;

        let one_plus = t.add_scalar(alpha_common, 1.0)?;
        let sqrt_common = t.sqrt(one_plus)?;
        let coef_common = t.div(sqrt_common, denom_common)?;
        let one_plus = t.add_scalar(alpha_private, 1.0)?;
        let sqrt_private = t.sqrt(one_plus)?;
        let coef_private = t.div(sqrt_private, denom_private)?;

        let z_common = self.pick(pw.inner, |_| 0, true)?;
        let z_own = self.pick(pw.inner, |u| u + 1, true)?;
        let coef_common = self.repeat_last(coef_common, 2)?;
        let coef_private = self.repeat_last(coef_private, 2)?;
        let beta_common = self.tape.mul(z_common, coef_common)?;
        let beta_private = self.tape.mul(z_own, coef_private)?;
        let mut aux = Aux {
            sqrt_common,
            sqrt_private,
            beta_common,
            beta_private,
        };
        if detach {
            aux = Aux {
                sqrt_common: self.tape.detach(aux.sqrt_common),
                sqrt_private: self.tape.detach(aux.sqrt_private),
                beta_common: self.tape.detach(aux.beta_common),
                beta_private: self.tape.detach(aux.beta_private),
            };
        }
        Ok(aux)
    }

    /// Rectified OBS beamformers at duals `(lambda, mu)`.
    fn obs(&mut self, aux: &Aux, lambda: Var, mu: Var, total_power: f64) -> Result<Var> {
        let (b, k, nt) = (self.batch, self.k(), self.num_tx_antennas);
        let t = &mut self.tape;
        let bc = t.abs_sq(aux.beta_common)?;
        let w_common = t.mul(lambda, bc)?;
        let bp = t.abs_sq(aux.beta_private)?;
        let w_private = t.add(bp, w_common)?;
        let a_common = t.weighted_gram(&self.channels, w_common, mu)?;
        let a_private = t.weighted_gram(&self.channels, w_private, mu)?;

        let scale_common = t.mul(aux.sqrt_common, lambda)?;
        let scale_common = self.repeat_last(scale_common, 2)?;
        let coef_common = self.tape.mul(aux.beta_common, scale_common)?;
        let coef_common = self.tape.reshape(coef_common, vec![b, k, 1, 2])?;
        let rhs_common = self.tape.complex_matmul(self.channels_var, coef_common, false)?;

        let scale_private = self.repeat_last(aux.sqrt_private, 2)?;
        let coef_private = self.tape.mul(aux.beta_private, scale_private)?;
        let idx = (0..b)
            .flat_map(|bi| (0..nt).flat_map(move |_| (0..2 * k).map(move |j| bi * 2 * k + j)))
            .collect();
        let coef_private = self.tape.gather(coef_private, idx, vec![b, nt, k, 2])?;
        let rhs_private = self.tape.complex_mul(self.channels_var, coef_private)?;

        let t = &mut self.tape;
        let p_common = t.hermitian_solve(a_common, rhs_common)?;
        let p_private = t.hermitian_solve(a_private, rhs_private)?;
        let p = t.concat(&[p_common, p_private], 2)?;
        t.scale_to_power(p, total_power)
    }

    /// Runs layer `l`'s network on `(H, P, xi)` and returns normalized duals.
    fn predict(&mut self, cfg: &SystemConfig, layer: usize, h_features: Var, p: Var, lambda: Var, mu: Var, eps: f64) -> Result<(Var, Var)> {
        let (b, k, nt) = (self.batch, self.k(), self.num_tx_antennas);
        let s = k + 1;
        let mut idx = Vec::with_capacity(b * 2 * s * nt);
        for bi in 0..b {
            for part in 0..2 {
                for j in 0..s {
                    for n in 0..nt {
                        idx.push(((bi * nt + n) * s + j) * 2 + part);
                    }
                }
            }
        }
        let t = &mut self.tape;
        let unit = mu_unit(cfg);
        let p_features = t.gather(p, idx, vec![b, 2 * s * nt])?;
        let p_features = t.scale(p_features, beam_feature_scale(cfg))?;
        let mu_col = t.scale(mu, 1.0 / unit)?;
        let mu_col = t.reshape(mu_col, vec![b, 1])?;
        let x = t.concat(&[h_features, p_features, lambda, mu_col], 1)?;
        let w = &self.params[4 * layer..4 * layer + 4];
        let hidden = t.affine(x, w[0], w[1])?;
        let hidden = t.relu(hidden)?;
        let out = t.affine(hidden, w[2], w[3])?;

        let lambda_idx = (0..b).flat_map(|bi| (0..k).map(move |u| bi * s + u)).collect();
        let raw = t.gather(out, lambda_idx, vec![b, k])?;
        let raw = t.sigmoid(raw)?;
        let mu_raw = t.gather(out, (0..b).map(|bi| bi * s + k).collect(), vec![b])?;
        let mu_abs = t.abs(mu_raw)?;
        let mu_next = t.add_scalar(mu_abs, MU_OFFSET)?;
        let mu_next = t.scale(mu_next, unit)?;

        let num = t.add_scalar(raw, eps)?;
        let den = t.sum_last(raw)?;
        let den = t.add_scalar(den, k as f64 * eps)?;
        let den = self.repeat_last(den, k)?;
        let lambda_next = self.tape.div(num, den)?;
        Ok((lambda_next, mu_next))
    }

    /// Per-sample sum rate `[B]` of beamformers `p`.
    pub fn sum_rate(&mut self, cfg: &SystemConfig, p: Var) -> Result<Var> {
        let pw = self.powers(p)?;
        let t = &mut self.tape;
        let denom = t.add_scalar(pw.private_total, cfg.noise_power)?;
        let sinr_common = t.div(pw.common, denom)?;
        let interference = t.sub(pw.private_total, pw.own)?;
        let interference = t.add_scalar(interference, cfg.noise_power)?;
        let sinr_private = t.div(pw.own, interference)?;
        let r_common = t.log2_1p(sinr_common)?;
        let r_common = t.min_last(r_common)?;
        let r_private = t.log2_1p(sinr_private)?;
        let r_private = t.sum_last(r_private)?;
        t.add(r_common, r_private)
    }

    pub fn output(&self) -> Var {
        *self.beams.last().expect("warm start is always present")
    }
}

/// Builds the forward graph of `model` over a batch of samples.
pub fn batch_forward(model: &UnfoldModel, cfg: &SystemConfig, samples: &[&ChannelSample]) -> Result<BatchGraph> {
    model.check(cfg)?;
    let (k, nt, b) = (cfg.num_users, cfg.num_tx_antennas, samples.len());
    let mut g = BatchGraph::with_channels(cfg, samples)?;
    g.params = model.parameters().into_iter().map(|p| g.tape.param(p)).collect();

    let warm: Vec<BeamMatrix> = samples.iter().map(|s| init_beamformers(cfg, s)).collect::<Result<_>>()?;
    let p0 = g.tape.constant(beam_tensor(&warm));
    let h_features = g.tape.constant(channel_features(samples, nt, k));
    let uniform = initial_duals(cfg);
    let lambda0 = g.tape.constant(Tensor::new(vec![b, k], uniform.lambda.repeat(b))?);
    let mu0 = g.tape.constant(Tensor::new(vec![b], vec![uniform.mu; b])?);
    let eps = model.config.epsilon;

    let xi0 = g.predict(cfg, 0, h_features, p0, lambda0, mu0, eps)?;
    g.duals.push(xi0);
    g.beams.push(p0);
    for l in 1..=model.config.num_layers {
        let p_prev = g.beams[l - 1];
        let (lambda_prev, mu_prev) = g.duals[l - 1];
        let aux = g.aux(p_prev, cfg.noise_power, model.config.detach_aux)?;
        let (lambda, mu) = g.predict(cfg, l, h_features, p_prev, lambda_prev, mu_prev, eps)?;
        let p = g.obs(&aux, lambda, mu, cfg.total_power)?;
        g.duals.push((lambda, mu));
        g.beams.push(p);
    }
    Ok(g)
}

/// Sum rate of arbitrary beamformers through the graph, for checking the
/// differentiable rate against the reference implementation.
pub fn batch_sum_rate(cfg: &SystemConfig, samples: &[&ChannelSample], beams: &[BeamMatrix]) -> Result<Vec<f64>> {
    if samples.len() != beams.len() {
        return Err(Error::dims(samples.len(), beams.len()));
    }
    let mut g = BatchGraph::with_channels(cfg, samples)?;
    for p in beams {
        p.check(cfg)?;
    }
    let p = g.tape.constant(beam_tensor(beams));
    g.beams.push(p);
    let sr = g.sum_rate(cfg, p)?;
    Ok(g.tape.value(sr).data().to_vec())
}
