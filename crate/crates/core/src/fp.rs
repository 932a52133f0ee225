//! Fractional-programming surrogate of the sum rate and the closed-form
//! optimal beamforming structure (OBS).
//!
//! Each rate `log2(1 + A / B)` is replaced by
//!
//! ```text
//! g(P, a, b) = [ ln(1 + a) - a + 2 sqrt(1 + a) Re{ conj(b) h^H p } - |b|^2 (A + B) ] / ln 2
//! ```
//!
//! which is tight at `a = A / B`, `b = sqrt(1 + a) h^H p / (A + B)`.  The
//! surrogate is evaluated in nats and converted once, so the optimal `a`
//! is exactly the SINR and the bound holds for every `(a, b)`.
//!
//! For fixed auxiliaries the beamforming subproblem is concave.  Its
//! stationary point for given duals `(lambda, mu)` is
//!
//! ```text
//! p_0 = (sum_j lambda_j |b_0j|^2 h_j h_j^H + mu I)^-1 sum_j sqrt(1 + a_0j) b_0j lambda_j h_j
//! p_k = (sum_j (|b_j|^2 + lambda_j |b_0j|^2) h_j h_j^H + mu I)^-1 sqrt(1 + a_k) b_k h_k
//! ```

use std::f64::consts::LN_2;

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{power_used, BeamMatrix, ChannelSample, SystemConfig};

/// FP auxiliary variables, one pair per (stream, user) where it is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxState {
    pub alpha_common: Vec<f64>,
    pub alpha_private: Vec<f64>,
    pub beta_common: Vec<Complex64>,
    pub beta_private: Vec<Complex64>,
}

impl AuxState {
    pub fn zeros(num_users: usize) -> Self {
        AuxState {
            alpha_common: vec![0.0; num_users],
            alpha_private: vec![0.0; num_users],
            beta_common: vec![Complex64::new(0.0, 0.0); num_users],
            beta_private: vec![Complex64::new(0.0, 0.0); num_users],
        }
    }

    pub fn num_users(&self) -> usize {
        self.alpha_common.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        let lens = [
            self.alpha_common.len(),
            self.alpha_private.len(),
            self.beta_common.len(),
            self.beta_private.len(),
        ];
        if lens.iter().any(|&l| l != k) {
            return Err(Error::dims(format!("{k} auxiliaries per block"), format!("{lens:?}")));
        }
        Ok(())
    }
}

/// Lagrange multipliers: `lambda` on the simplex for the common-rate
/// constraints and `mu > 0` for the power constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub mu: f64,
}

impl DualState {
    pub const SIMPLEX_TOL: f64 = 1e-9;

    pub fn new(lambda: Vec<f64>, mu: f64) -> Result<Self> {
        let duals = DualState { lambda, mu };
        duals.validate()?;
        Ok(duals)
    }

    /// `lambda_k = 1/K`, `mu = K / P_t`.
    pub fn uniform(cfg: &SystemConfig) -> Self {
        let k = cfg.num_users;
        DualState {
            lambda: vec![1.0 / k as f64; k],
            mu: k as f64 / cfg.total_power,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() {
            return Err(Error::invalid("lambda must be non-empty"));
        }
        if self.lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("lambda entries must be positive: {:?}", self.lambda)));
        }
        let sum: f64 = self.lambda.iter().sum();
        if (sum - 1.0).abs() > Self::SIMPLEX_TOL {
            return Err(Error::invalid(format!("lambda must sum to one, sums to {sum}")));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be positive, got {}", self.mu)));
        }
        Ok(())
    }

    /// Concatenated `xi = [lambda, mu]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.lambda.clone();
        v.push(self.mu);
        v
    }

    pub fn from_slice(xi: &[f64]) -> Result<Self> {
        match xi.split_last() {
            Some((&mu, lambda)) => DualState::new(lambda.to_vec(), mu),
            None => Err(Error::invalid("empty dual vector")),
        }
    }
}

/// Optimal auxiliaries for fixed `P`: `alpha = SINR` and the matching `beta`.
pub fn update_aux(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix) -> Result<AuxState> {
    ch.check(cfg)?;
    p.check(cfg)?;
    if !p.is_finite() {
        return Err(Error::invalid("beam matrix has non-finite entries"));
    }
    let k_users = cfg.num_users;
    let inner = ch.channels.adjoint() * &p.0;
    let gains = inner.map(|z| z.norm_sqr());
    let mut aux = AuxState::zeros(k_users);
    for k in 0..k_users {
        let private_total: f64 = (1..=k_users).map(|i| gains[(k, i)]).sum();
        let interference: f64 = (1..=k_users).filter(|&i| i != k + 1).map(|i| gains[(k, i)]).sum();

        let alpha0 = gains[(k, 0)] / (private_total + cfg.noise_power);
        let denom0 = gains[(k, 0)] + private_total + cfg.noise_power;
        aux.alpha_common[k] = alpha0;
        aux.beta_common[k] = inner[(k, 0)] * ((1.0 + alpha0).sqrt() / denom0);

        let alpha = gains[(k, k + 1)] / (interference + cfg.noise_power);
        // {k} u K = K: the private denominator holds every private stream once
        aux.alpha_private[k] = alpha;
        aux.beta_private[k] = inner[(k, k + 1)] * ((1.0 + alpha).sqrt() / (private_total + cfg.noise_power));
    }
    Ok(aux)
}

/// Surrogate values `g_{0,k}` and `g_k` in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct GValues {
    pub common: Vec<f64>,
    pub private: Vec<f64>,
}

fn g_values_nats(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix, aux: &AuxState) -> Result<GValues> {
    ch.check(cfg)?;
    p.check(cfg)?;
    aux.check(cfg.num_users)?;
    let k_users = cfg.num_users;
    let inner = ch.channels.adjoint() * &p.0;
    let gains = inner.map(|z| z.norm_sqr());
    let surrogate = |alpha: f64, beta: Complex64, signal: Complex64, total: f64| {
        (1.0 + alpha).ln() - alpha + 2.0 * (1.0 + alpha).sqrt() * (beta.conj() * signal).re - beta.norm_sqr() * total
    };
    let mut common = Vec::with_capacity(k_users);
    let mut private = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let private_total: f64 = (1..=k_users).map(|i| gains[(k, i)]).sum();
        common.push(surrogate(
            aux.alpha_common[k],
            aux.beta_common[k],
            inner[(k, 0)],
            gains[(k, 0)] + private_total + cfg.noise_power,
        ));
        private.push(surrogate(
            aux.alpha_private[k],
            aux.beta_private[k],
            inner[(k, k + 1)],
            private_total + cfg.noise_power,
        ));
    }
    Ok(GValues { common, private })
}

pub fn g_values(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix, aux: &AuxState) -> Result<GValues> {
    let mut g = g_values_nats(cfg, ch, p, aux)?;
    g.common.iter_mut().chain(g.private.iter_mut()).for_each(|v| *v /= LN_2);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpObjective {
    /// `min_k g_{0,k} + sum_k g_k`.
    pub value: f64,
    /// `min_k g_{0,k}`, the optimal slack `y`.
    pub worst_common_g: f64,
}

pub fn fp_objective(cfg: &SystemConfig, ch: &ChannelSample, p: &BeamMatrix, aux: &AuxState) -> Result<FpObjective> {
    let g = g_values(cfg, ch, p, aux)?;
    let worst = g.common.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FpObjective {
        value: worst + g.private.iter().sum::<f64>(),
        worst_common_g: worst,
    })
}

/// Lagrangian of the fixed-auxiliary subproblem, with the surrogates in nats
/// (the unit in which the OBS is its exact stationary point) and the slack at
/// `y = min_k g_{0,k}`.
pub fn lagrangian(
    cfg: &SystemConfig,
    ch: &ChannelSample,
    p: &BeamMatrix,
    aux: &AuxState,
    duals: &DualState,
) -> Result<f64> {
    let g = g_values_nats(cfg, ch, p, aux)?;
    let y = g.common.iter().copied().fold(f64::INFINITY, f64::min);
    let coupling: f64 = duals.lambda.iter().zip(&g.common).map(|(l, g0)| l * (y - g0)).sum();
    Ok(g.private.iter().sum::<f64>() + y - coupling - duals.mu * (power_used(p) - cfg.total_power))
}

/// `sum_j w_j h_j h_j^H + mu I`.
pub(crate) fn weighted_gram(h: &DMatrix<Complex64>, weights: &[f64], mu: f64) -> DMatrix<Complex64> {
    let nt = h.nrows();
    let mut a = DMatrix::from_diagonal_element(nt, nt, Complex64::new(mu, 0.0));
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let col = h.column(j);
        for c in 0..nt {
            let hc = col[c].conj() * w;
            for r in 0..nt {
                a[(r, c)] += col[r] * hc;
            }
        }
    }
    a
}

/// Cholesky factor of a Hermitian matrix.  The complex square root never
/// fails, so positivity is checked on the pivots.
pub(crate) fn cholesky(a: DMatrix<Complex64>) -> Result<Cholesky<Complex64, nalgebra::Dyn>> {
    let chol = Cholesky::new(a).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    if (0..l.nrows()).any(|i| !(l[(i, i)].re > 0.0 && l[(i, i)].im.abs() < l[(i, i)].re)) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(chol)
}

fn hermitian_solve(a: DMatrix<Complex64>, b: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    Ok(cholesky(a)?.solve(b))
}

/// Closed-form beamformers for given auxiliaries and duals.
pub fn obs_beamformers(cfg: &SystemConfig, ch: &ChannelSample, aux: &AuxState, duals: &DualState) -> Result<BeamMatrix> {
    ch.check(cfg)?;
    aux.check(cfg.num_users)?;
    if duals.lambda.len() != cfg.num_users {
        return Err(Error::dims(format!("{} multipliers", cfg.num_users), duals.lambda.len()));
    }
    if !(duals.mu > 0.0 && duals.mu.is_finite()) {
        return Err(Error::invalid(format!("mu must be positive, got {}", duals.mu)));
    }
    let k_users = cfg.num_users;
    let nt = cfg.num_tx_antennas;
    let h = &ch.channels;

    let common_weights: Vec<f64> = (0..k_users)
        .map(|j| duals.lambda[j] * aux.beta_common[j].norm_sqr())
        .collect();
    let private_weights: Vec<f64> = (0..k_users)
        .map(|j| aux.beta_private[j].norm_sqr() + common_weights[j])
        .collect();

    let mut rhs_common = DMatrix::zeros(nt, 1);
    for j in 0..k_users {
        let coef = aux.beta_common[j] * ((1.0 + aux.alpha_common[j]).sqrt() * duals.lambda[j]);
        for n in 0..nt {
            rhs_common[(n, 0)] += h[(n, j)] * coef;
        }
    }
    let mut rhs_private = DMatrix::zeros(nt, k_users);
    for k in 0..k_users {
        let coef = aux.beta_private[k] * (1.0 + aux.alpha_private[k]).sqrt();
        for n in 0..nt {
            rhs_private[(n, k)] = h[(n, k)] * coef;
        }
    }

    let p0 = hermitian_solve(weighted_gram(h, &common_weights, duals.mu), &rhs_common)?;
    let pk = hermitian_solve(weighted_gram(h, &private_weights, duals.mu), &rhs_private)?;

    let mut p = DMatrix::zeros(nt, k_users + 1);
    p.column_mut(0).copy_from(&p0.column(0));
    p.columns_mut(1, k_users).copy_from(&pk);
    Ok(BeamMatrix(p))
}

/// Central finite-difference gradient of the Lagrangian with respect to the
/// real and imaginary parts of every entry of `P`, and its norm relative to
/// the power-penalty gradient `2 mu ||P||`.
pub fn stationarity_residual(
    cfg: &SystemConfig,
    ch: &ChannelSample,
    p: &BeamMatrix,
    aux: &AuxState,
    duals: &DualState,
    step: f64,
) -> Result<f64> {
    let mut grad_sq = 0.0;
    let mut probe = p.clone();
    for idx in 0..p.0.len() {
        for part in 0..2 {
            let orig = probe.0[idx];
            let delta = if part == 0 {
                Complex64::new(step, 0.0)
            } else {
                Complex64::new(0.0, step)
            };
            probe.0[idx] = orig + delta;
            let up = lagrangian(cfg, ch, &probe, aux, duals)?;
            probe.0[idx] = orig - delta;
            let down = lagrangian(cfg, ch, &probe, aux, duals)?;
            probe.0[idx] = orig;
            let d = (up - down) / (2.0 * step);
            grad_sq += d * d;
        }
    }
    let scale = 2.0 * duals.mu * power_used(p).sqrt();
    Ok(grad_sq.sqrt() / scale.max(1e-300))
}
