use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ChannelSample, SystemConfig};

/// Single-cell drop geometry and distance-dependent path loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub cell_radius: f64,
    pub ref_distance: f64,
    pub pathloss_exponent: f64,
    pub min_distance: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            cell_radius: 100.0,
            ref_distance: 30.0,
            pathloss_exponent: 3.0,
            min_distance: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_distance > 0.0 && self.cell_radius > self.min_distance) {
            return Err(Error::invalid("need cell_radius > min_distance > 0"));
        }
        if !(self.ref_distance > 0.0 && self.pathloss_exponent > 0.0) {
            return Err(Error::invalid("reference distance and path-loss exponent must be positive"));
        }
        Ok(())
    }
}

/// `rho = 1 / (1 + (d / d_0)^alpha)`.
pub fn large_scale_gain(distance: f64, ref_distance: f64, exponent: f64) -> f64 {
    1.0 / (1.0 + (distance / ref_distance).powf(exponent))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub num_users: u32,
    pub num_tx_antennas: u32,
    pub sample_count: u64,
    pub snr_db: f64,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn system_config(&self) -> Result<SystemConfig> {
        SystemConfig::from_snr_db(self.num_tx_antennas as usize, self.num_users as usize, self.snr_db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub params: ChannelParams,
    pub samples: Vec<ChannelSample>,
}

impl Dataset {
    pub fn system_config(&self) -> Result<SystemConfig> {
        self.header.system_config()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Independent stream per sample, so the output does not depend on
/// iteration order or thread count.
fn sample_rng(master_seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

fn draw_sample(cfg: &SystemConfig, cparams: &ChannelParams, rng: &mut ChaCha20Rng) -> ChannelSample {
    let (nt, k) = (cfg.num_tx_antennas, cfg.num_users);
    let (r_min, r_max) = (cparams.min_distance, cparams.cell_radius);
    let distances: Vec<f64> = (0..k)
        .map(|_| {
            // area-uniform over the annulus [r_min, r_max]
            let u: f64 = rng.random();
            (r_min * r_min + u * (r_max * r_max - r_min * r_min)).sqrt()
        })
        .collect();
    let gains: Vec<f64> = distances
        .iter()
        .map(|&d| large_scale_gain(d, cparams.ref_distance, cparams.pathloss_exponent))
        .collect();
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut h = DMatrix::zeros(nt, k);
    for user in 0..k {
        let amp = gains[user].sqrt();
        for n in 0..nt {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            h[(n, user)] = Complex64::new(re * scale, im * scale) * amp;
        }
    }
    ChannelSample {
        channels: h,
        large_scale_gains: gains,
        distances,
    }
}

pub fn generate_channels(cfg: &SystemConfig, cparams: &ChannelParams, n_samples: usize, master_seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    cparams.validate()?;
    if n_samples == 0 {
        return Err(Error::invalid("sample count must be at least one"));
    }
    let samples: Vec<ChannelSample> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| draw_sample(cfg, cparams, &mut sample_rng(master_seed, i)))
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            num_users: cfg.num_users as u32,
            num_tx_antennas: cfg.num_tx_antennas as u32,
            sample_count: n_samples as u64,
            snr_db: cfg.snr_db,
            seed: master_seed,
        },
        params: *cparams,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_formula() {
        assert_eq!(large_scale_gain(0.0, 1.0, 3.0), 1.0);
        assert_eq!(large_scale_gain(5.0, 5.0, 3.0), 0.5);
    }

    #[test]
    fn distances_in_cell_and_gains_consistent() {
        let cfg = SystemConfig::from_snr_db(2, 3, 20.0).unwrap();
        let p = ChannelParams::default();
        let ds = generate_channels(&cfg, &p, 200, 1).unwrap();
        for s in &ds.samples {
            for (d, g) in s.distances.iter().zip(&s.large_scale_gains) {
                assert!(*d >= p.min_distance && *d <= p.cell_radius);
                assert_eq!(*g, large_scale_gain(*d, p.ref_distance, p.pathloss_exponent));
            }
        }
    }

    #[test]
    fn order_independent() {
        let cfg = SystemConfig::from_snr_db(2, 2, 20.0).unwrap();
        let p = ChannelParams::default();
        let a = generate_channels(&cfg, &p, 50, 9).unwrap();
        let b = generate_channels(&cfg, &p, 20, 9).unwrap();
        assert_eq!(a.samples[..20], b.samples[..]);
        let c = generate_channels(&cfg, &p, 20, 10).unwrap();
        assert_ne!(b.samples, c.samples);
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = SystemConfig::from_snr_db(2, 2, 20.0).unwrap();
        assert!(generate_channels(&cfg, &ChannelParams::default(), 0, 0).is_err());
    }

    #[test]
    fn small_scale_fading_has_unit_variance() {
        let cfg = SystemConfig::from_snr_db(4, 1, 20.0).unwrap();
        let ds = generate_channels(&cfg, &ChannelParams::default(), 100_000, 42).unwrap();
        let mean: f64 = ds
            .samples
            .iter()
            .map(|s| s.channels.column(0).norm_squared() / s.large_scale_gains[0])
            .sum::<f64>()
            / ds.len() as f64;
        assert!((mean - 4.0).abs() < 0.02 * 4.0, "mean {mean}");
    }
}
