//! Dense black-box baseline ("blackbox-mlp").
//!
//! Maps `[Re(H) | Im(H)]` through two relu hidden layers of width
//! `4 D_in` to the `2 N_t (K + 1)` entries `[Re(P) | Im(P)]` and rescales
//! the result onto the power constraint.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::binio::{put_u32, put_f64s, read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::model::{rectify_power, BeamMatrix, ChannelSample, SystemConfig};
use crate::rsbnn::graph::{beam_tensor, channel_features, BatchGraph};
use crate::rsbnn::Learner;

use super::io::unflatten_beams;

const MAGIC: &[u8; 8] = b"RSBBXMDL";
const VERSION: u8 = 1;
const HEADER_BYTES: u64 = 8 + 1 + 3 * 4;

pub const SCHEME_NAME: &str = "blackbox-mlp";

#[derive(Debug, Clone, PartialEq)]
pub struct BlackboxModel {
    pub num_users: usize,
    pub num_tx_antennas: usize,
    pub hidden_dim: usize,
    /// `[W1, b1, W2, b2, W3, b3]`.
    pub params: Vec<Tensor>,
}

fn shapes(k: usize, nt: usize, m: usize) -> [Vec<usize>; 6] {
    let (d, o) = (2 * k * nt, 2 * nt * (k + 1));
    [vec![m, d], vec![m], vec![m, m], vec![m], vec![o, m], vec![o]]
}

fn dense(w: &Tensor, b: &Tensor, x: &[f64], relu: bool) -> Vec<f64> {
    let n = w.shape()[1];
    w.data()
        .chunks_exact(n)
        .zip(b.data())
        .map(|(row, bias)| {
            let z = row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias;
            if relu {
                z.max(0.0)
            } else {
                z
            }
        })
        .collect()
}

impl BlackboxModel {
    /// Xavier-uniform weights and zero biases, width `4 * 2 K N_t`.
    pub fn new(num_users: usize, num_tx_antennas: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(num_users, num_tx_antennas, 8 * num_users * num_tx_antennas, seed)
    }

    pub fn with_hidden(num_users: usize, num_tx_antennas: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if num_users == 0 || num_tx_antennas == 0 || hidden_dim == 0 {
            return Err(Error::invalid("K, N_t and the hidden width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes(num_users, num_tx_antennas, hidden_dim)
            .into_iter()
            .map(|s| {
                if s.len() == 1 {
                    return Tensor::zeros(s);
                }
                let bound = (6.0 / (s[0] + s[1]) as f64).sqrt();
                let data = (0..s[0] * s[1]).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(s, data).expect("sized to shape")
            })
            .collect();
        Ok(BlackboxModel {
            num_users,
            num_tx_antennas,
            hidden_dim,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        2 * self.num_users * self.num_tx_antennas
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_tx_antennas * (self.num_users + 1)
    }

    /// Beamformers for one channel, at full power.
    pub fn infer(&self, cfg: &SystemConfig, ch: &ChannelSample) -> Result<BeamMatrix> {
        Learner::check(self, cfg)?;
        ch.check(cfg)?;
        let x = channel_features(&[ch], self.num_tx_antennas, self.num_users);
        let p = &self.params;
        let h1 = dense(&p[0], &p[1], x.data(), true);
        let h2 = dense(&p[2], &p[3], &h1, true);
        let out = dense(&p[4], &p[5], &h2, false);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network output"));
        }
        let beams = unflatten_beams(&out, self.num_tx_antennas, self.num_users + 1)?;
        rectify_power(&beams, cfg.total_power)
    }
}

impl Learner for BlackboxModel {
    type Label = BeamMatrix;

    fn parameters(&self) -> Vec<Tensor> {
        self.params.clone()
    }

    fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dims(self.params.len(), params.len()));
        }
        for (slot, p) in self.params.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::dims(format!("{:?}", slot.shape()), format!("{:?}", p.shape())));
            }
            *slot = p.clone();
        }
        Ok(())
    }

    fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if cfg.num_users != self.num_users || cfg.num_tx_antennas != self.num_tx_antennas {
            return Err(Error::dims(
                format!("K={}, N_t={}", self.num_users, self.num_tx_antennas),
                format!("K={}, N_t={}", cfg.num_users, cfg.num_tx_antennas),
            ));
        }
        let expected = shapes(self.num_users, self.num_tx_antennas, self.hidden_dim);
        if self.params.len() != expected.len() {
            return Err(Error::dims(expected.len(), self.params.len()));
        }
        for (t, e) in self.params.iter().zip(&expected) {
            if t.shape() != e.as_slice() {
                return Err(Error::dims(format!("{e:?}"), format!("{:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::invalid("model has non-finite parameters"));
            }
        }
        Ok(())
    }

    fn forward(&self, cfg: &SystemConfig, samples: &[&ChannelSample]) -> Result<BatchGraph> {
        Learner::check(self, cfg)?;
        let mut g = BatchGraph::with_channels(cfg, samples)?;
        g.params = self.params.iter().map(|p| g.tape.param(p.clone())).collect();
        let (b, nt, s) = (g.batch, self.num_tx_antennas, self.num_users + 1);
        let x = g.tape.constant(channel_features(samples, nt, self.num_users));
        let w: Vec<Var> = g.params.clone();
        let t = &mut g.tape;
        let h = t.affine(x, w[0], w[1])?;
        let h = t.relu(h)?;
        let h = t.affine(h, w[2], w[3])?;
        let h = t.relu(h)?;
        let out = t.affine(h, w[4], w[5])?;
        let half = nt * s;
        let mut idx = Vec::with_capacity(b * 2 * half);
        for bi in 0..b {
            for n in 0..nt {
                for j in 0..s {
                    for part in 0..2 {
                        idx.push(bi * 2 * half + part * half + j * nt + n);
                    }
                }
            }
        }
        let p = t.gather(out, idx, vec![b, nt, s, 2])?;
        let p = t.scale_to_power(p, cfg.total_power)?;
        g.beams.push(p);
        Ok(g)
    }

    /// Mean squared error between the output and the label entries.
    fn supervised_loss(&self, graph: &mut BatchGraph, labels: &[&BeamMatrix]) -> Result<Var> {
        if labels.len() != graph.batch {
            return Err(Error::dims(graph.batch, labels.len()));
        }
        let target: Vec<BeamMatrix> = labels.iter().map(|&l| l.clone()).collect();
        let target = beam_tensor(&target);
        let p = graph.output();
        let t = &mut graph.tape;
        if t.shape(p) != target.shape() {
            return Err(Error::dims(format!("{:?}", t.shape(p)), format!("{:?}", target.shape())));
        }
        let target = t.constant(target);
        let diff = t.sub(p, target)?;
        let sq = t.mul(diff, diff)?;
        t.mean(sq)
    }
}

/// Magic, version byte, `K, N_t, M` as u32, then the six parameter tensors.
pub fn write_blackbox(model: &BlackboxModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for v in [model.num_users, model.num_tx_antennas, model.hidden_dim] {
        put_u32(&mut buf, v as u32);
    }
    for p in &model.params {
        put_f64s(&mut buf, p.data());
    }
    buf
}

pub fn read_blackbox(bytes: &[u8]) -> Result<BlackboxModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.format_error(at, format!("unsupported model version {version}")));
    }
    let at = r.offset();
    let (k, nt, m) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if k == 0 || nt == 0 || m == 0 {
        return Err(r.format_error(at, "K, N_t and the hidden width must be positive"));
    }
    let (kw, nw, mw) = (k as u128, nt as u128, m as u128);
    let (d, o) = (2 * kw * nw, 2 * nw * (kw + 1));
    let reals = mw * d + mw + mw * mw + mw + o * mw + o;
    let total = u64::try_from(reals * 8 + HEADER_BYTES as u128).map_err(|_| r.format_error(at, "model dimensions overflow"))?;
    r.expect_total(total)?;
    let params = shapes(k, nt, m)
        .into_iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s, r.f64s(n)?)
        })
        .collect::<Result<_>>()?;
    Ok(BlackboxModel {
        num_users: k,
        num_tx_antennas: nt,
        hidden_dim: m,
        params,
    })
}

pub fn save_blackbox(model: &BlackboxModel, path: &Path) -> Result<()> {
    write_file(path, &write_blackbox(model))
}

pub fn load_blackbox(path: &Path) -> Result<BlackboxModel> {
    read_blackbox(&read_file(path)?)
}
