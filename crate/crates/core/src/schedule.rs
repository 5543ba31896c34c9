//! Attenuation and noise tables plus the one-step coefficients they induce.
//!
//! Component `k` of the state keeps full strength until its window
//! `(T_k, T_{k+1}]` opens, decays exponentially to `lambda_min` inside it, and
//! stays there afterwards; the deepest component is never attenuated. The
//! shared noise scale grows like the DDPM variance-exploding reparameterization
//! `sqrt(1/alpha_bar - 1)`, then is stretched after each turning point so the
//! signal-to-noise ratio at the end of the chain survives the downsampling.

use crate::{Error, Result};
use sha2::{Digest, Sha256};

/// One-step transition coefficients in the two-value diagonal form.
///
/// `lambda_pair.0` multiplies the attenuating block, `lambda_pair.1` (always 1
/// within a window) the deeper blocks; `l_pair` are the matching noise stds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs {
    pub lambda_pair: (f64, f64),
    pub l_pair: (f64, f64),
}

/// Dense per-timestep tables for a cascade of `K` turning points.
#[derive(Clone, Debug)]
pub struct DvdpSchedule {
    pub(crate) t_total: usize,
    pub(crate) turning_points: Vec<usize>,
    pub(crate) lambda_min: f64,
    /// `lambda_bar[k][t]` for component `k` in `0..=K`, `t` in `0..=T`.
    pub(crate) lambda_bar: Vec<Vec<f64>>,
    /// `sigma_bar[t]` for `t` in `0..=T`; shared by every component.
    pub(crate) sigma_bar: Vec<f64>,
}

fn check_turning_points(t_total: usize, turning_points: &[usize]) -> Result<()> {
    if t_total == 0 {
        return Err(Error::InvalidSchedule("total timesteps must be positive".into()));
    }
    let mut prev = 0usize;
    for &tp in turning_points {
        if tp <= prev || tp >= t_total {
            return Err(Error::InvalidSchedule(format!(
                "turning points must satisfy 0 < T_1 < ... < T_K < {t_total}, got {turning_points:?}"
            )));
        }
        prev = tp;
    }
    Ok(())
}

/// Attenuation tables `lambda_bar[k][t]`.
///
/// Component `k < K` holds 1 until `T_k`, decays as
/// `lambda_min^((t - T_k) / (T_{k+1} - T_k))` through its window, and stays at
/// `lambda_min` beyond; the deepest component is identically 1.
pub fn build_attenuation(
    t_total: usize,
    turning_points: &[usize],
    lambda_min: f64,
) -> Result<Vec<Vec<f64>>> {
    check_turning_points(t_total, turning_points)?;
    if !(lambda_min > 0.0 && lambda_min < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "lambda_min must lie in (0, 1), got {lambda_min}"
        )));
    }
    let levels = turning_points.len();
    let mut tables = Vec::with_capacity(levels + 1);
    for k in 0..=levels {
        let mut row = vec![1.0; t_total + 1];
        if k < levels {
            let lo = if k == 0 { 0 } else { turning_points[k - 1] };
            let hi = turning_points[k];
            let span = (hi - lo) as f64;
            for (t, value) in row.iter_mut().enumerate().skip(lo + 1) {
                *value = if t <= hi {
                    lambda_min.powf((t - lo) as f64 / span)
                } else {
                    lambda_min
                };
            }
        }
        tables.push(row);
    }
    Ok(tables)
}

/// Noise table `sigma_bar[t]` with the SNR-preserving stretch.
///
/// Base: a linear beta ramp `beta_lo..beta_hi`, `alpha_bar` its running
/// product of `1 - beta`, and `sigma_bar = sqrt(1/alpha_bar - 1)`. Then for
/// each turning point in order, the tail `sigma_bar[T_k..]` is rescaled
/// affinely about `sigma_bar[T_k - 1]` by the dimension ratio `factors[k-1]`,
/// which anchors the value just before the turn and keeps the table
/// continuous.
pub fn build_noise(
    t_total: usize,
    turning_points: &[usize],
    factors: &[f64],
    beta_lo: f64,
    beta_hi: f64,
) -> Result<Vec<f64>> {
    check_turning_points(t_total, turning_points)?;
    if factors.len() != turning_points.len() {
        return Err(Error::InvalidSchedule(format!(
            "{} turning points need {} dimension factors, got {}",
            turning_points.len(),
            turning_points.len(),
            factors.len()
        )));
    }
    if !(0.0 < beta_lo && beta_lo < beta_hi && beta_hi < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "beta endpoints must satisfy 0 < beta_lo < beta_hi < 1, got {beta_lo}, {beta_hi}"
        )));
    }
    let mut sigma = vec![0.0; t_total + 1];
    let mut alpha_bar = 1.0f64;
    for t in 1..=t_total {
        let frac = if t_total == 1 {
            0.0
        } else {
            (t - 1) as f64 / (t_total - 1) as f64
        };
        let beta = beta_lo + (beta_hi - beta_lo) * frac;
        alpha_bar *= 1.0 - beta;
        sigma[t] = (1.0 / alpha_bar - 1.0).sqrt();
    }
    for (k, &tp) in turning_points.iter().enumerate() {
        let f = factors[k];
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "dimension factor {f} at turning point {tp} is not positive"
            )));
        }
        let anchor = sigma[tp - 1];
        for value in sigma.iter_mut().skip(tp) {
            *value = anchor + f * (*value - anchor);
        }
    }
    sigma[0] = 0.0;
    for t in 1..=t_total {
        if !(sigma[t] > sigma[t - 1]) {
            return Err(Error::InvalidSchedule(format!(
                "noise table not strictly increasing at t = {t}"
            )));
        }
    }
    Ok(sigma)
}

impl DvdpSchedule {
    /// Builds both tables. `factors` are the per-turn dimension ratios
    /// `d_{k-1}/d_k` (see [`crate::cascade::SubspaceCascade::factors`]).
    pub fn build(
        t_total: usize,
        turning_points: &[usize],
        factors: &[f64],
        lambda_min: f64,
        beta_lo: f64,
        beta_hi: f64,
    ) -> Result<Self> {
        let lambda_bar = build_attenuation(t_total, turning_points, lambda_min)?;
        let sigma_bar = build_noise(t_total, turning_points, factors, beta_lo, beta_hi)?;
        Ok(DvdpSchedule {
            t_total,
            turning_points: turning_points.to_vec(),
            lambda_min,
            lambda_bar,
            sigma_bar,
        })
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    /// Number of turning points `K`.
    pub fn levels(&self) -> usize {
        self.turning_points.len()
    }

    pub fn turning_points(&self) -> &[usize] {
        &self.turning_points
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_bar(&self, k: usize, t: usize) -> f64 {
        self.lambda_bar[k][t]
    }

    pub fn sigma_bar(&self, t: usize) -> f64 {
        self.sigma_bar[t]
    }

    /// The window `(lo, hi]` of timesteps the chain spends at `level`.
    pub fn window(&self, level: usize) -> (usize, usize) {
        let lo = if level == 0 {
            0
        } else {
            self.turning_points[level - 1]
        };
        let hi = if level == self.levels() {
            self.t_total
        } else {
            self.turning_points[level]
        };
        (lo, hi)
    }

    /// The level whose window contains `t` (level 0 at `t = 0`).
    pub fn level_of_time(&self, t: usize) -> usize {
        self.turning_points.iter().filter(|&&tp| tp < t).count()
    }

    pub(crate) fn check_window(&self, level: usize, t: usize) -> Result<()> {
        if level > self.levels() {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.levels(),
            });
        }
        let (lo, hi) = self.window(level);
        if t <= lo || t > hi {
            return Err(Error::TimeOutOfWindow {
                time: t,
                level,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// One-step coefficients for the transition into `(level, t)`.
    ///
    /// The attenuating block steps by the table ratio; the noise std makes the
    /// marginal variance telescope: `l^2 = sigma_t^2 - lambda^2 sigma_{t-1}^2`.
    pub fn step_coeffs(&self, level: usize, t: usize) -> Result<StepCoeffs> {
        self.check_window(level, t)?;
        let a = self.lambda_bar[level][t] / self.lambda_bar[level][t - 1];
        let (s_prev, s_cur) = (self.sigma_bar[t - 1], self.sigma_bar[t]);
        let la2 = s_cur * s_cur - a * a * s_prev * s_prev;
        let lb2 = s_cur * s_cur - s_prev * s_prev;
        let floor = -1e-9 * s_cur * s_cur;
        if la2 < floor || lb2 < floor {
            return Err(Error::InvalidSchedule(format!(
                "transition variance negative at level {level}, t = {t}"
            )));
        }
        Ok(StepCoeffs {
            lambda_pair: (a, 1.0),
            l_pair: (la2.max(0.0).sqrt(), lb2.max(0.0).sqrt()),
        })
    }

    /// Digest of the realized tables, stored in checkpoints so trained
    /// parameters cannot be reused against a different schedule.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"dvdp-schedule-v1");
        h.update((self.t_total as u64).to_le_bytes());
        h.update((self.turning_points.len() as u64).to_le_bytes());
        for &tp in &self.turning_points {
            h.update((tp as u64).to_le_bytes());
        }
        h.update(self.lambda_min.to_le_bytes());
        for row in &self.lambda_bar {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.sigma_bar {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}
