//! Physical-layer types and the SINR / rate arithmetic of 1-layer rate splitting.
//!
//! User `k` first decodes the common stream `s_0`, treating every private
//! stream as interference, then removes it and decodes its own private
//! stream `s_k`.  Rates are in bits per channel use.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Static dimensions and power budget of the downlink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemConfig {
    pub num_tx_antennas: usize,
    pub num_users: usize,
    /// Total transmit power `P_t` in linear units.
    pub total_power: f64,
    /// Per-user noise power `sigma^2` in linear units.
    pub noise_power: f64,
    /// Informational: `P_t = sigma^2 * 10^(snr_db / 10)`.
    pub snr_db: f64,
}

impl SystemConfig {
    pub fn new(num_tx_antennas: usize, num_users: usize, total_power: f64, noise_power: f64) -> Result<Self> {
        let cfg = SystemConfig {
            num_tx_antennas,
            num_users,
            total_power,
            noise_power,
            snr_db: 10.0 * (total_power / noise_power).log10(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unit noise power with `P_t` set from the SNR.
    pub fn from_snr_db(num_tx_antennas: usize, num_users: usize, snr_db: f64) -> Result<Self> {
        let cfg = SystemConfig {
            num_tx_antennas,
            num_users,
            total_power: 10f64.powf(snr_db / 10.0),
            noise_power: 1.0,
            snr_db,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tx_antennas == 0 || self.num_users == 0 {
            return Err(Error::invalid("antenna and user counts must be positive"));
        }
        if !(self.total_power > 0.0 && self.total_power.is_finite()) {
            return Err(Error::invalid(format!("total power must be positive, got {}", self.total_power)));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return Err(Error::invalid(format!("noise power must be positive, got {}", self.noise_power)));
        }
        Ok(())
    }

    /// Number of transmitted streams, `K + 1`.
    pub fn num_streams(&self) -> usize {
        self.num_users + 1
    }
}

/// Channel state for one drop of users.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// `N_t x K`; column `k` is `h_k`.
    pub channels: DMatrix<Complex64>,
    pub large_scale_gains: Vec<f64>,
    /// Base-station to user distances in meters (provenance only).
    pub distances: Vec<f64>,
}

impl ChannelSample {
    pub fn new(channels: DMatrix<Complex64>, large_scale_gains: Vec<f64>, distances: Vec<f64>) -> Result<Self> {
        let k = channels.ncols();
        if large_scale_gains.len() != k || distances.len() != k {
            return Err(Error::dims(
                format!("{k} gains and distances"),
                format!("{} gains, {} distances", large_scale_gains.len(), distances.len()),
            ));
        }
        if channels.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("channel entries must be finite"));
        }
        if large_scale_gains.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::invalid("large-scale gains must be positive"));
        }
        Ok(ChannelSample {
            channels,
            large_scale_gains,
            distances,
        })
    }

    /// Wraps a bare channel matrix, with unit gains and zero distances.
    pub fn from_channels(channels: DMatrix<Complex64>) -> Result<Self> {
        let k = channels.ncols();
        Self::new(channels, vec![1.0; k], vec![0.0; k])
    }

    pub fn num_users(&self) -> usize {
        self.channels.ncols()
    }

    pub fn num_tx_antennas(&self) -> usize {
        self.channels.nrows()
    }

    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if self.num_users() != cfg.num_users || self.num_tx_antennas() != cfg.num_tx_antennas {
            return Err(Error::dims(
                format!("channel {}x{}", cfg.num_tx_antennas, cfg.num_users),
                format!("channel {}x{}", self.num_tx_antennas(), self.num_users()),
            ));
        }
        Ok(())
    }
}

/// Beamforming matrix `P = [p_0, p_1, ..., p_K]`, `N_t x (K + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamMatrix(pub DMatrix<Complex64>);

impl BeamMatrix {
    pub fn zeros(cfg: &SystemConfig) -> Self {
        BeamMatrix(DMatrix::zeros(cfg.num_tx_antennas, cfg.num_streams()))
    }

    pub fn as_matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn common(&self) -> nalgebra::DVectorView<'_, Complex64> {
        self.0.column(0)
    }

    pub fn private(&self, user: usize) -> nalgebra::DVectorView<'_, Complex64> {
        self.0.column(user + 1)
    }

    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if self.0.nrows() != cfg.num_tx_antennas || self.0.ncols() != cfg.num_streams() {
            return Err(Error::dims(
                format!("beam matrix {}x{}", cfg.num_tx_antennas, cfg.num_streams()),
                format!("beam matrix {}x{}", self.0.nrows(), self.0.ncols()),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        BeamMatrix(self.0.map(|z| z * factor))
    }
}

/// Per-user SINRs for the common and private streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinrs {
    pub common: Vec<f64>,
    pub private: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// `R_0 = min_k R_{0,k}`.
    pub common_rate: f64,
    pub private_rates: Vec<f64>,
    pub per_user_common_rates: Vec<f64>,
    pub sum_rate: f64,
}

/// `|h_k^H p_i|^2` for every user `k` (row) and stream `i` (column).
pub fn cross_gains(ch: &ChannelSample, p: &BeamMatrix) -> DMatrix<f64> {
    (ch.channels.adjoint() * &p.0).map(|z| z.norm_sqr())
}

fn check_all(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix) -> Result<()> {
    cfg.validate()?;
    ch.check(cfg)?;
    p.check(cfg)
}

pub fn compute_sinrs(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix) -> Result<Sinrs> {
    check_all(cfg, ch, p)?;
    let gains = cross_gains(ch, p);
    let k_users = cfg.num_users;
    let mut common = Vec::with_capacity(k_users);
    let mut private = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let private_total: f64 = (1..=k_users).map(|i| gains[(k, i)]).sum();
        common.push(gains[(k, 0)] / (private_total + cfg.noise_power));
        let interference: f64 = (1..=k_users).filter(|&i| i != k + 1).map(|i| gains[(k, i)]).sum();
        private.push(gains[(k, k + 1)] / (interference + cfg.noise_power));
    }
    Ok(Sinrs { common, private })
}

pub fn rate_report(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix) -> Result<RateReport> {
    let sinrs = compute_sinrs(cfg, ch, p)?;
    Ok(rates_from_sinrs(&sinrs))
}

pub fn rates_from_sinrs(sinrs: &Sinrs) -> RateReport {
    let per_user_common_rates: Vec<f64> = sinrs.common.iter().map(|g| g.ln_1p() / std::f64::consts::LN_2).collect();
    let private_rates: Vec<f64> = sinrs.private.iter().map(|g| g.ln_1p() / std::f64::consts::LN_2).collect();
    let common_rate = per_user_common_rates.iter().copied().fold(f64::INFINITY, f64::min);
    let sum_rate = common_rate + private_rates.iter().sum::<f64>();
    RateReport {
        common_rate,
        private_rates,
        per_user_common_rates,
        sum_rate,
    }
}

/// `tr(P P^H)`, the squared Frobenius norm.
pub fn power_used(p: &BeamMatrix) -> f64 {
    p.0.iter().map(|z| z.norm_sqr()).sum()
}

/// Scales `P` onto the power sphere: `sqrt(P_t / tr(P P^H)) P`.
pub fn rectify_power(p: &BeamMatrix, total_power: f64) -> Result<BeamMatrix> {
    let used = power_used(p);
    if !(used > 0.0 && used.is_finite()) {
        return Err(Error::invalid(format!("cannot rectify a beam matrix with power {used}")));
    }
    Ok(p.scaled((total_power / used).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_instance(seed: u64, nt: usize, k: usize) -> (SystemConfig, ChannelSample, BeamMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SystemConfig::new(nt, k, 10.0, 0.7).unwrap();
        let h = DMatrix::from_fn(nt, k, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let p = DMatrix::from_fn(nt, k + 1, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        (cfg, ChannelSample::from_channels(h).unwrap(), BeamMatrix(p))
    }

    // Term-by-term evaluation of the SINR definitions with explicit loops.
    fn scalar_oracle(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix) -> (Vec<f64>, Vec<f64>) {
        let (nt, k) = (cfg.num_tx_antennas, cfg.num_users);
        let inner = |user: usize, stream: usize| {
            let mut acc = c(0.0, 0.0);
            for n in 0..nt {
                acc += ch.channels[(n, user)].conj() * p.0[(n, stream)];
            }
            acc.re * acc.re + acc.im * acc.im
        };
        let mut common = vec![];
        let mut private = vec![];
        for user in 0..k {
            let mut all_private = 0.0;
            let mut others = 0.0;
            for i in 1..=k {
                all_private += inner(user, i);
                if i != user + 1 {
                    others += inner(user, i);
                }
            }
            common.push(inner(user, 0) / (all_private + cfg.noise_power));
            private.push(inner(user, user + 1) / (others + cfg.noise_power));
        }
        (common, private)
    }

    #[test]
    fn single_user_scalar() {
        let cfg = SystemConfig::new(1, 1, 4.0, 1.0).unwrap();
        let ch = ChannelSample::from_channels(DMatrix::from_element(1, 1, c(1.0, 0.0))).unwrap();
        let p = BeamMatrix(DMatrix::from_row_slice(1, 2, &[c(0.0, 0.0), c(2.0, 0.0)]));
        let s = compute_sinrs(&cfg, &ch, &p).unwrap();
        assert_eq!(s.common, vec![0.0]);
        assert_eq!(s.private, vec![4.0]);
    }

    #[test]
    fn single_user_rate_is_two_bits() {
        let cfg = SystemConfig::new(1, 1, 3.0, 1.0).unwrap();
        let ch = ChannelSample::from_channels(DMatrix::from_element(1, 1, c(1.0, 0.0))).unwrap();
        let p = BeamMatrix(DMatrix::from_row_slice(1, 2, &[c(0.0, 0.0), c(3f64.sqrt(), 0.0)]));
        let r = rate_report(&cfg, &ch, &p).unwrap();
        assert!((r.sum_rate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_beams_give_zero() {
        let (cfg, ch, _) = random_instance(3, 3, 2);
        let p = BeamMatrix::zeros(&cfg);
        let s = compute_sinrs(&cfg, &ch, &p).unwrap();
        assert!(s.common.iter().chain(&s.private).all(|&v| v == 0.0));
        assert_eq!(rate_report(&cfg, &ch, &p).unwrap().sum_rate, 0.0);
        assert_eq!(power_used(&p), 0.0);
    }

    #[test]
    fn matches_scalar_oracle() {
        let (cfg, ch, p) = random_instance(11, 2, 2);
        let s = compute_sinrs(&cfg, &ch, &p).unwrap();
        let (common, private) = scalar_oracle(&cfg, &ch, &p);
        for k in 0..2 {
            assert!((s.common[k] - common[k]).abs() < 1e-12 * common[k].max(1.0));
            assert!((s.private[k] - private[k]).abs() < 1e-12 * private[k].max(1.0));
        }
        let r = rate_report(&cfg, &ch, &p).unwrap();
        let r0 = common.iter().map(|g| (1.0 + g).log2()).fold(f64::INFINITY, f64::min);
        let sr = r0 + private.iter().map(|g| (1.0 + g).log2()).sum::<f64>();
        assert!((r.sum_rate - sr).abs() < 1e-12);
        assert_eq!(r.common_rate, r.per_user_common_rates.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn power_used_elementwise() {
        let (_, _, p) = random_instance(5, 4, 3);
        let mut expected = 0.0;
        for z in p.0.iter() {
            expected += z.re * z.re + z.im * z.im;
        }
        assert!((power_used(&p) - expected).abs() < 1e-12);
        let mut unit = DMatrix::zeros(3, 2);
        unit[(1, 1)] = c(1.0, 0.0);
        assert_eq!(power_used(&BeamMatrix(unit)), 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (cfg, ch, _) = random_instance(1, 2, 2);
        let bad = BeamMatrix(DMatrix::zeros(3, 3));
        assert!(matches!(compute_sinrs(&cfg, &ch, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn phase_rotation_invariance() {
        let (cfg, ch, p) = random_instance(9, 3, 3);
        let base = compute_sinrs(&cfg, &ch, &p).unwrap();
        let mut rotated = p.clone();
        for (col, theta) in [0.3, 1.1, -2.0, 2.9].iter().enumerate() {
            let phase = Complex64::from_polar(1.0, *theta);
            for n in 0..3 {
                rotated.0[(n, col)] *= phase;
            }
        }
        let rot = compute_sinrs(&cfg, &ch, &rotated).unwrap();
        for k in 0..3 {
            assert!((base.common[k] - rot.common[k]).abs() < 1e-12);
            assert!((base.private[k] - rot.private[k]).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn scaling_scales_power_quadratically(seed in 0u64..1000, scale in 0.01f64..=1.0) {
            let (_, _, p) = random_instance(seed, 3, 2);
            let base = power_used(&p);
            let scaled = power_used(&p.scaled(scale));
            proptest::prop_assert!((scaled - scale * scale * base).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn rates_are_consistent(seed in 0u64..1000) {
            let (cfg, ch, p) = random_instance(seed, 2, 3);
            let r = rate_report(&cfg, &ch, &p).unwrap();
            let min = r.per_user_common_rates.iter().copied().fold(f64::INFINITY, f64::min);
            proptest::prop_assert_eq!(r.common_rate, min);
            proptest::prop_assert!(r.private_rates.iter().all(|&x| x >= 0.0));
            let sr = r.common_rate + r.private_rates.iter().sum::<f64>();
            proptest::prop_assert!((r.sum_rate - sr).abs() < 1e-12);
        }
    }
}
