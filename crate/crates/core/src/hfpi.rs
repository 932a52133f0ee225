//! Hyperplane fixed-point iteration (HFPI) for the duals and the two-loop
//! FP-HFPI solver.
//!
//! Each alternating-optimization (outer) iteration refreshes the FP
//! auxiliaries from the current beamformers, runs HFPI (inner loop) to
//! find the duals of the fixed-auxiliary subproblem, and takes the OBS at
//! those duals as the next beamformers.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fp::{g_values, obs_beamformers, update_aux, AuxState, DualState};
use crate::model::{power_used, rate_report, rectify_power, BeamMatrix, ChannelSample, RateReport, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HfpiConfig {
    /// Damping constant added to numerator and denominator of every ratio.
    pub rho: f64,
    pub inner_tol: f64,
    pub outer_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    /// Averaging weight `theta` in `xi <- (1 - theta) xi + theta T(xi)`;
    /// `1` is the plain fixed-point update.
    pub relaxation: f64,
    /// Lower bound on every `lambda_k` inside the inner loop.
    pub lambda_floor: f64,
}

impl Default for HfpiConfig {
    fn default() -> Self {
        HfpiConfig {
            rho: 0.1,
            inner_tol: 1e-5,
            outer_tol: 1e-4,
            max_inner: 500,
            max_outer: 2000,
            relaxation: 0.5,
            lambda_floor: 1e-10,
        }
    }
}

impl HfpiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be non-negative, got {}", self.rho)));
        }
        if !(self.inner_tol > 0.0 && self.outer_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(Error::invalid("iteration caps must be at least one"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::invalid(format!("relaxation must be in (0, 1], got {}", self.relaxation)));
        }
        if !(self.lambda_floor >= 0.0 && self.lambda_floor < 1e-3) {
            return Err(Error::invalid(format!("lambda floor must be in [0, 1e-3), got {}", self.lambda_floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub outer_iters: usize,
    pub inner_iters_per_outer: Vec<usize>,
    pub final_sr: f64,
    /// Sum rate after every outer iteration (the FP objective at refreshed
    /// auxiliaries).
    pub objective_trace: Vec<f64>,
    pub wall_time: f64,
    /// Outer loop met `outer_tol` before `max_outer`.
    pub converged: bool,
    /// Number of inner loops that stopped at `max_inner`.
    pub inner_capped: usize,
}

impl SolveDiagnostics {
    pub fn mean_inner_iters(&self) -> f64 {
        if self.inner_iters_per_outer.is_empty() {
            return 0.0;
        }
        self.inner_iters_per_outer.iter().sum::<usize>() as f64 / self.inner_iters_per_outer.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beams: BeamMatrix,
    pub rates: RateReport,
    pub diagnostics: SolveDiagnostics,
    /// Duals after the first outer iteration's inner loop.
    pub first_duals: DualState,
    /// Duals at termination.
    pub final_duals: DualState,
}

/// One HFPI update of `(lambda, mu)`.
///
/// `g_common` holds `g_{0,k}` at the current beamformers; the worst user
/// (lowest index on ties) absorbs the mass taken from the others, so the
/// simplex sum is preserved algebraically.
pub fn hfpi_step(duals: &DualState, g_common: &[f64], used_power: f64, total_power: f64, rho: f64) -> Result<DualState> {
    if g_common.len() != duals.lambda.len() {
        return Err(Error::dims(duals.lambda.len(), g_common.len()));
    }
    if g_common.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("non-finite surrogate value"));
    }
    let mut worst = 0;
    for (k, &g) in g_common.iter().enumerate() {
        if g < g_common[worst] {
            worst = k;
        }
    }
    for (k, &g) in g_common.iter().enumerate() {
        if g + rho <= 0.0 {
            return Err(Error::NonPositiveRatio { user: k, value: g + rho });
        }
    }
    let anchor = g_common[worst] + rho;
    let mut lambda = duals.lambda.clone();
    let mut moved = 0.0;
    for (k, &g) in g_common.iter().enumerate() {
        if k == worst {
            continue;
        }
        let ratio = anchor / (g + rho);
        moved += (1.0 - ratio) * duals.lambda[k];
        lambda[k] = ratio * duals.lambda[k];
    }
    lambda[worst] += moved;
    let mu = duals.mu * (used_power + rho) / (total_power + rho);
    Ok(DualState { lambda, mu })
}

fn max_relative_change(prev: &DualState, next: &DualState) -> f64 {
    prev.lambda
        .iter()
        .zip(&next.lambda)
        .chain(std::iter::once((&prev.mu, &next.mu)))
        .map(|(a, b)| (b - a).abs() / (a.abs() + 1e-12))
        .fold(0.0, f64::max)
}

fn relax(prev: &DualState, step: &DualState, theta: f64, floor: f64) -> DualState {
    let mix = |a: f64, b: f64| (1.0 - theta) * a + theta * b;
    let mut lambda: Vec<f64> = prev.lambda.iter().zip(&step.lambda).map(|(&a, &b)| mix(a, b).max(floor)).collect();
    let sum: f64 = lambda.iter().sum();
    if sum != 1.0 {
        lambda.iter_mut().for_each(|l| *l /= sum);
    }
    DualState {
        lambda,
        mu: mix(prev.mu, step.mu),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub duals: DualState,
    /// OBS at `duals`.
    pub beams: BeamMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternates OBS and HFPI until the duals stop moving.  If any `g_{0,k}`
/// is negative all of them are shifted up so the smallest is zero before
/// the HFPI step, so `rho > 0` is required in that case.  Hitting
/// `max_inner` is reported through `converged = false`, not as an error.
pub fn hfpi_inner_loop(
    cfg: &SystemConfig,
    ch: &ChannelSample,
    aux: &AuxState,
    duals_init: &DualState,
    hcfg: &HfpiConfig,
) -> Result<InnerResult> {
    duals_init.validate()?;
    let mut duals = duals_init.clone();
    let mut beams = obs_beamformers(cfg, ch, aux, &duals)?;
    for iter in 1..=hcfg.max_inner {
        let g = g_values(cfg, ch, &beams, aux)?;
        // Away from the point the auxiliaries were taken at, g_{0,k} can be
        // negative.  A common shift keeps the ordering and the equalizing
        // fixed point while keeping every ratio positive.
        let shift = g.common.iter().copied().fold(0.0, f64::min);
        let shifted: Vec<f64> = g.common.iter().map(|v| v - shift).collect();
        let raw = hfpi_step(&duals, &shifted, power_used(&beams), cfg.total_power, hcfg.rho)?;
        let next = relax(&duals, &raw, hcfg.relaxation, hcfg.lambda_floor);
        let change = max_relative_change(&duals, &next);
        duals = next;
        beams = obs_beamformers(cfg, ch, aux, &duals)?;
        if change < hcfg.inner_tol {
            return Ok(InnerResult {
                duals,
                beams,
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(InnerResult {
        duals,
        beams,
        iterations: hcfg.max_inner,
        converged: false,
    })
}

/// Matched-filter warm start: half the power on private MRT beams split
/// equally, half on the principal eigenvector of the average channel
/// covariance for the common stream.
pub fn init_beamformers(cfg: &SystemConfig, ch: &ChannelSample) -> Result<BeamMatrix> {
    cfg.validate()?;
    ch.check(cfg)?;
    let nt = cfg.num_tx_antennas;
    let k_users = cfg.num_users;
    let h = &ch.channels;
    let mut p = DMatrix::zeros(nt, k_users + 1);

    let private_amp = (cfg.total_power / (2.0 * k_users as f64)).sqrt();
    for k in 0..k_users {
        let norm = h.column(k).norm();
        if norm > 0.0 {
            p.column_mut(k + 1).copy_from(&(h.column(k) * Complex64::new(private_amp / norm, 0.0)));
        } else {
            p[(0, k + 1)] = Complex64::new(private_amp, 0.0);
        }
    }

    let cov = (h * h.adjoint()).map(|z| z / k_users as f64);
    let eig = SymmetricEigen::new(cov);
    let mut best = 0;
    for i in 1..nt {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut u = eig.eigenvectors.column(best).into_owned();
    // fix the phase so the largest entry is real and positive
    let mut pivot = 0;
    for i in 1..nt {
        if u[i].norm() > u[pivot].norm() {
            pivot = i;
        }
    }
    let norm = u.norm();
    if u[pivot].norm() > 0.0 && norm > 0.0 {
        let phase = u[pivot].conj() / u[pivot].norm();
        u.iter_mut().for_each(|z| *z = *z * phase / norm);
    } else {
        u.fill(Complex64::new(0.0, 0.0));
        u[0] = Complex64::new(1.0, 0.0);
    }
    let common_amp = (cfg.total_power / 2.0).sqrt();
    p.column_mut(0).copy_from(&(u * Complex64::new(common_amp, 0.0)));

    // exact power despite rounding in the normalizations
    rectify_power(&BeamMatrix(p), cfg.total_power)
}

/// Full FP-HFPI.  Duals start uniform and are warm-started across outer
/// iterations; every OBS output is rescaled onto the power sphere.
pub fn fp_hfpi_solve(cfg: &SystemConfig, ch: &ChannelSample, hcfg: &HfpiConfig) -> Result<Solution> {
    hcfg.validate()?;
    let start = Instant::now();
    let mut beams = init_beamformers(cfg, ch)?;
    let mut duals = DualState::uniform(cfg);
    let mut first_duals = None;
    let mut sr_prev = rate_report(cfg, ch, &beams)?.sum_rate;
    let mut trace = Vec::new();
    let mut inner_iters = Vec::new();
    let mut inner_capped = 0;
    let mut converged = false;

    for _ in 0..hcfg.max_outer {
        let aux = update_aux(cfg, ch, &beams)?;
        let inner = hfpi_inner_loop(cfg, ch, &aux, &duals, hcfg)?;
        inner_iters.push(inner.iterations);
        if !inner.converged {
            inner_capped += 1;
        }
        duals = inner.duals;
        if first_duals.is_none() {
            first_duals = Some(duals.clone());
        }
        beams = rectify_power(&inner.beams, cfg.total_power)?;
        let sr = rate_report(cfg, ch, &beams)?.sum_rate;
        trace.push(sr);
        let rel = (sr - sr_prev).abs() / sr_prev.max(1e-12);
        sr_prev = sr;
        if rel < hcfg.outer_tol {
            converged = true;
            break;
        }
    }

    let rates = rate_report(cfg, ch, &beams)?;
    let diagnostics = SolveDiagnostics {
        outer_iters: inner_iters.len(),
        inner_iters_per_outer: inner_iters,
        final_sr: rates.sum_rate,
        objective_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        converged,
        inner_capped,
    };
    Ok(Solution {
        beams,
        rates,
        diagnostics,
        first_duals: first_duals.expect("max_outer >= 1"),
        final_duals: duals,
    })
}
