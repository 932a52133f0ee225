//! Binary dataset and label files.
//!
//! All numbers are little-endian.  A dataset file is
//!
//! ```text
//! "RSBEAMv1" | K u32 | N_t u32 | count u64 | snr_db f64 | seed u64
//! | radius f64 | d_0 f64 | alpha f64 | min_distance f64
//! | count x ( Re(H) | Im(H) | d_k | rho_k )
//! ```
//!
//! with `H` user by user (`h_1` first), so a sample is `2 K N_t + 2 K` reals.
//! Label files repeat the dataset's `K, N_t, count, seed` so they can be
//! matched to it, then store one row per sample; a row of NaN marks a
//! sample the solver did not label.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::binio::{put_f64s, put_u32, put_u64, read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::fp::DualState;
use crate::model::{BeamMatrix, ChannelSample};
use crate::rsbnn::LabelPair;

use super::channel::{ChannelParams, Dataset, DatasetHeader};

const DATASET_MAGIC: &[u8; 8] = b"RSBEAMv1";
const LABELS_MAGIC: &[u8; 8] = b"RSLABLv1";
const BEAM_LABELS_MAGIC: &[u8; 8] = b"RSBMLBv1";

const DATASET_HEADER_BYTES: u64 = 8 + 4 + 4 + 8 + 8 + 8 + 4 * 8;
const LABELS_HEADER_BYTES: u64 = 8 + 4 + 4 + 8 + 8;

/// Identifies the dataset a label file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelKey {
    pub num_users: u32,
    pub num_tx_antennas: u32,
    pub sample_count: u64,
    pub seed: u64,
}

impl LabelKey {
    pub fn of(dataset: &Dataset) -> Self {
        LabelKey {
            num_users: dataset.header.num_users,
            num_tx_antennas: dataset.header.num_tx_antennas,
            sample_count: dataset.header.sample_count,
            seed: dataset.header.seed,
        }
    }

    /// Fails unless the labels were made for `dataset`.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let want = LabelKey::of(dataset);
        if *self != want {
            return Err(Error::invalid(format!(
                "labels are for K={}, N_t={}, {} samples, seed {}; dataset is K={}, N_t={}, {} samples, seed {}",
                self.num_users,
                self.num_tx_antennas,
                self.sample_count,
                self.seed,
                want.num_users,
                want.num_tx_antennas,
                want.sample_count,
                want.seed
            )));
        }
        Ok(())
    }
}

fn checked_total(header: u64, count: u64, reals_per_sample: u64, r: &ByteReader, at: u64) -> Result<u64> {
    count
        .checked_mul(reals_per_sample)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| r.format_error(at, "sample count overflows the file size"))
}

pub fn write_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let h = &dataset.header;
    if h.sample_count == 0 || h.sample_count != dataset.samples.len() as u64 {
        return Err(Error::invalid(format!(
            "header count {} does not match {} samples",
            h.sample_count,
            dataset.samples.len()
        )));
    }
    let (k, nt) = (h.num_users as usize, h.num_tx_antennas as usize);
    let mut buf = Vec::with_capacity((DATASET_HEADER_BYTES as usize) + dataset.len() * 8 * (2 * k * nt + 2 * k));
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, h.num_users);
    put_u32(&mut buf, h.num_tx_antennas);
    put_u64(&mut buf, h.sample_count);
    put_f64s(&mut buf, &[h.snr_db]);
    put_u64(&mut buf, h.seed);
    let p = &dataset.params;
    put_f64s(&mut buf, &[p.cell_radius, p.ref_distance, p.pathloss_exponent, p.min_distance]);
    for s in &dataset.samples {
        if s.num_users() != k || s.num_tx_antennas() != nt {
            return Err(Error::dims(format!("{nt}x{k}"), format!("{}x{}", s.num_tx_antennas(), s.num_users())));
        }
        for part in 0..2 {
            for u in 0..k {
                for n in 0..nt {
                    let z = s.channels[(n, u)];
                    put_f64s(&mut buf, &[if part == 0 { z.re } else { z.im }]);
                }
            }
        }
        put_f64s(&mut buf, &s.distances);
        put_f64s(&mut buf, &s.large_scale_gains);
    }
    Ok(buf)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let at = r.offset();
    let (num_users, num_tx_antennas) = (r.u32()?, r.u32()?);
    let count_at = r.offset();
    let sample_count = r.u64()?;
    let snr_db = r.f64()?;
    let seed = r.u64()?;
    let v = r.f64s(4)?;
    if num_users == 0 || num_tx_antennas == 0 {
        return Err(r.format_error(at, "K and N_t must be positive"));
    }
    if sample_count == 0 {
        return Err(r.format_error(count_at, "sample count must be positive"));
    }
    let params = ChannelParams {
        cell_radius: v[0],
        ref_distance: v[1],
        pathloss_exponent: v[2],
        min_distance: v[3],
    };
    let (k, nt) = (num_users as usize, num_tx_antennas as usize);
    let per_sample = 2 * k as u64 * nt as u64 + 2 * k as u64;
    r.expect_total(checked_total(DATASET_HEADER_BYTES, sample_count, per_sample, &r, count_at)?)?;
    let header = DatasetHeader {
        num_users,
        num_tx_antennas,
        sample_count,
        snr_db,
        seed,
    };
    let mut samples = Vec::with_capacity(sample_count as usize);
    for _ in 0..sample_count {
        let at = r.offset();
        let re = r.f64s(k * nt)?;
        let im = r.f64s(k * nt)?;
        let distances = r.f64s(k)?;
        let gains = r.f64s(k)?;
        let h = DMatrix::from_fn(nt, k, |n, u| Complex64::new(re[u * nt + n], im[u * nt + n]));
        samples.push(ChannelSample::new(h, gains, distances).map_err(|e| r.format_error(at, e.to_string()))?);
    }
    Ok(Dataset {
        header,
        params,
        samples,
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &write_dataset(dataset)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&read_file(path)?)
}

fn write_rows(magic: &[u8; 8], key: &LabelKey, row_len: usize, rows: &[Option<Vec<f64>>]) -> Result<Vec<u8>> {
    if rows.len() as u64 != key.sample_count {
        return Err(Error::dims(key.sample_count, rows.len()));
    }
    let mut buf = Vec::with_capacity(LABELS_HEADER_BYTES as usize + rows.len() * row_len * 8);
    buf.extend_from_slice(magic);
    put_u32(&mut buf, key.num_users);
    put_u32(&mut buf, key.num_tx_antennas);
    put_u64(&mut buf, key.sample_count);
    put_u64(&mut buf, key.seed);
    let missing = vec![f64::NAN; row_len];
    for row in rows {
        match row {
            Some(v) if v.len() == row_len => put_f64s(&mut buf, v),
            Some(v) => return Err(Error::dims(row_len, v.len())),
            None => put_f64s(&mut buf, &missing),
        }
    }
    Ok(buf)
}

type Rows = (LabelKey, Vec<(u64, Option<Vec<f64>>)>);

fn read_rows(bytes: &[u8], magic: &[u8; 8], row_len: impl Fn(usize, usize) -> usize) -> Result<Rows> {
    let mut r = ByteReader::new(bytes);
    r.magic(magic)?;
    let at = r.offset();
    let (num_users, num_tx_antennas) = (r.u32()?, r.u32()?);
    let count_at = r.offset();
    let sample_count = r.u64()?;
    let seed = r.u64()?;
    if num_users == 0 || num_tx_antennas == 0 {
        return Err(r.format_error(at, "K and N_t must be positive"));
    }
    if sample_count == 0 {
        return Err(r.format_error(count_at, "sample count must be positive"));
    }
    let len = row_len(num_users as usize, num_tx_antennas as usize);
    r.expect_total(checked_total(LABELS_HEADER_BYTES, sample_count, len as u64, &r, count_at)?)?;
    let mut rows = Vec::with_capacity(sample_count as usize);
    for _ in 0..sample_count {
        let at = r.offset();
        let v = r.f64s(len)?;
        if v.iter().all(|x| x.is_nan()) {
            rows.push((at, None));
        } else if v.iter().all(|x| x.is_finite()) {
            rows.push((at, Some(v)));
        } else {
            return Err(r.format_error(at, "partially missing label row"));
        }
    }
    let key = LabelKey {
        num_users,
        num_tx_antennas,
        sample_count,
        seed,
    };
    Ok((key, rows))
}

/// Dual labels: per sample `xi_first` then `xi_last`, each `(lambda, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLabels {
    pub key: LabelKey,
    pub labels: Vec<Option<LabelPair>>,
}

pub fn write_dual_labels(labels: &DualLabels) -> Result<Vec<u8>> {
    let k1 = labels.key.num_users as usize + 1;
    let rows: Vec<Option<Vec<f64>>> = labels
        .labels
        .iter()
        .map(|l| {
            l.as_ref().map(|p| {
                let mut v = p.first.to_vec();
                v.extend(p.last.to_vec());
                v
            })
        })
        .collect();
    write_rows(LABELS_MAGIC, &labels.key, 2 * k1, &rows)
}

pub fn read_dual_labels(bytes: &[u8]) -> Result<DualLabels> {
    let (key, rows) = read_rows(bytes, LABELS_MAGIC, |k, _| 2 * (k + 1))?;
    let k1 = key.num_users as usize + 1;
    let labels = rows
        .into_iter()
        .map(|(at, row)| match row {
            None => Ok(None),
            Some(v) => {
                let pair = DualState::from_slice(&v[..k1])
                    .and_then(|first| Ok(LabelPair { first, last: DualState::from_slice(&v[k1..])? }));
                pair.map(Some).map_err(|e| Error::Format {
                    offset: at,
                    reason: e.to_string(),
                })
            }
        })
        .collect::<Result<_>>()?;
    Ok(DualLabels { key, labels })
}

pub fn save_dual_labels(labels: &DualLabels, path: &Path) -> Result<()> {
    write_file(path, &write_dual_labels(labels)?)
}

pub fn load_dual_labels(path: &Path) -> Result<DualLabels> {
    read_dual_labels(&read_file(path)?)
}

/// `[Re(P) | Im(P)]`, each stream by stream (common first).
pub fn flatten_beams(p: &BeamMatrix) -> Vec<f64> {
    let m = &p.0;
    let mut v: Vec<f64> = (0..m.ncols()).flat_map(|j| (0..m.nrows()).map(move |n| m[(n, j)].re)).collect();
    v.extend((0..m.ncols()).flat_map(|j| (0..m.nrows()).map(move |n| m[(n, j)].im)));
    v
}

/// Inverse of [`flatten_beams`].
pub fn unflatten_beams(v: &[f64], num_tx_antennas: usize, num_streams: usize) -> Result<BeamMatrix> {
    let half = num_tx_antennas * num_streams;
    if v.len() != 2 * half {
        return Err(Error::dims(2 * half, v.len()));
    }
    Ok(BeamMatrix(DMatrix::from_fn(num_tx_antennas, num_streams, |n, j| {
        Complex64::new(v[j * num_tx_antennas + n], v[half + j * num_tx_antennas + n])
    })))
}

/// Beamformer labels for the black-box baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamLabels {
    pub key: LabelKey,
    pub beams: Vec<Option<BeamMatrix>>,
}

pub fn write_beam_labels(labels: &BeamLabels) -> Result<Vec<u8>> {
    let (k, nt) = (labels.key.num_users as usize, labels.key.num_tx_antennas as usize);
    let rows: Vec<Option<Vec<f64>>> = labels.beams.iter().map(|b| b.as_ref().map(flatten_beams)).collect();
    write_rows(BEAM_LABELS_MAGIC, &labels.key, 2 * nt * (k + 1), &rows)
}

pub fn read_beam_labels(bytes: &[u8]) -> Result<BeamLabels> {
    let (key, rows) = read_rows(bytes, BEAM_LABELS_MAGIC, |k, nt| 2 * nt * (k + 1))?;
    let (k, nt) = (key.num_users as usize, key.num_tx_antennas as usize);
    let beams = rows
        .into_iter()
        .map(|(_, row)| row.map(|v| unflatten_beams(&v, nt, k + 1)).transpose())
        .collect::<Result<_>>()?;
    Ok(BeamLabels { key, beams })
}

pub fn save_beam_labels(labels: &BeamLabels, path: &Path) -> Result<()> {
    write_file(path, &write_beam_labels(labels)?)
}

pub fn load_beam_labels(path: &Path) -> Result<BeamLabels> {
    read_beam_labels(&read_file(path)?)
}
