use std::path::Path;

use crate::autodiff::Tensor;
use crate::binio::{put_f64s, put_u32, read_file, write_file, ByteReader};
use crate::error::Result;

use super::{feature_dim, DenseLayer, UnfoldConfig, UnfoldModel};

const MAGIC: &[u8; 8] = b"RSBNNMDL";
const VERSION: u8 = 1;
const HEADER_BYTES: u64 = 8 + 1 + 4 * 4 + 8;

/// Serializes `model`: magic, version byte, `K, N_t, L, M` as u32, `epsilon`,
/// then `W1, b1, W2, b2` of every layer as little-endian f64.
pub fn write_model(model: &UnfoldModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_BYTES as usize + 8 * model.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for v in [
        model.num_users,
        model.num_tx_antennas,
        model.config.num_layers,
        model.config.hidden_dim,
    ] {
        put_u32(&mut buf, v as u32);
    }
    put_f64s(&mut buf, &[model.config.epsilon]);
    for layer in &model.layers {
        for t in layer.tensors() {
            put_f64s(&mut buf, t.data());
        }
    }
    buf
}

pub fn read_model(bytes: &[u8]) -> Result<UnfoldModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.format_error(at, format!("unsupported model version {version}")));
    }
    let at = r.offset();
    let (k, nt, l, m) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let epsilon = r.f64()?;
    let (kw, nw, mw) = (k as u128, nt as u128, m as u128);
    let d = 2 * kw * nw + 2 * (kw + 1) * nw + kw + 1;
    let per_layer = mw * (d + kw + 2) + kw + 1;
    let total = (l as u128 + 1)
        .checked_mul(per_layer * 8)
        .and_then(|n| u64::try_from(n + HEADER_BYTES as u128).ok())
        .ok_or_else(|| r.format_error(at, "model dimensions overflow"))?;
    r.expect_total(total)?;
    let config = UnfoldConfig {
        num_layers: l,
        hidden_dim: m,
        epsilon,
        detach_aux: false,
    };
    let mut model = UnfoldModel::zeros(k, nt, config).map_err(|e| r.format_error(at, e.to_string()))?;
    let d = feature_dim(k, nt);
    for layer in model.layers.iter_mut() {
        *layer = DenseLayer {
            w1: Tensor::new(vec![m, d], r.f64s(m * d)?)?,
            b1: Tensor::new(vec![m], r.f64s(m)?)?,
            w2: Tensor::new(vec![k + 1, m], r.f64s((k + 1) * m)?)?,
            b2: Tensor::new(vec![k + 1], r.f64s(k + 1)?)?,
        };
    }
    Ok(model)
}

pub fn save_model(model: &UnfoldModel, path: &Path) -> Result<()> {
    write_file(path, &write_model(model))
}

pub fn load_model(path: &Path) -> Result<UnfoldModel> {
    read_model(&read_file(path)?)
}
