//! Forward machinery: marginals, one-step transitions, the forward posterior,
//! and full trajectories across turning points.
//!
//! Every Gaussian in the forward process is diagonal in the cascade basis
//! with at most two distinct values inside a level's window, so all sampling
//! here runs through the two-value diagonal operator. Between windows (an
//! analysis-only case) deeper components attenuate too, and the marginal
//! falls back to a nested per-level application.

use crate::cascade::{LatentState, SubspaceCascade};
use crate::schedule::DvdpSchedule;
use crate::{check_len, Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// The forward posterior `q(x_{t-1} | x_t, x_0)`: a Gaussian with two
/// distinct variances in the cascade basis.
#[derive(Clone, Debug)]
pub struct ForwardPosterior {
    pub mean: Vec<f64>,
    /// Variance on the attenuating block and on the deeper blocks.
    pub var_pair: (f64, f64),
}

/// Standard normal vector of length `n`.
pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Applies the full attenuation operator of `(level, t)` to `x`.
///
/// Inside the level's window only the shallowest component attenuates and
/// this is exactly the two-value diagonal operator; for `t` beyond the
/// window (analysis use) deeper components attenuate as well, handled by
/// recursing through the ladder.
pub fn marginal_attenuation(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    level: usize,
    t: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    c.check_level(level)?;
    check_len(c.dim(level), x.len())?;
    if level == c.levels() {
        let lam = s.lambda_bar(level, t);
        return Ok(x.iter().map(|v| lam * v).collect());
    }
    let lam = s.lambda_bar(level, t);
    let deeper_start = s.window(level + 1).0;
    if t <= deeper_start {
        // Deeper components still sit at full strength: plain two-value form.
        return c.apply_diag_pair(level, lam, 1.0, x);
    }
    let down = c.downsample(level + 1, x)?;
    let deeper = marginal_attenuation(c, s, level + 1, t, &down)?;
    let correction: Vec<f64> = deeper.iter().zip(&down).map(|(d, p)| d - lam * p).collect();
    let up = c.upsample(level + 1, &correction)?;
    Ok(x.iter().zip(&up).map(|(xi, ui)| lam * xi + ui).collect())
}

/// Draws `x_t` at `level` from the marginal given level-`level` data `x0`
/// and a standard normal draw `eps`.
pub fn marginal_sample(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x0: &[f64],
    level: usize,
    t: usize,
    eps: &[f64],
) -> Result<LatentState> {
    check_len(x0.len(), eps.len())?;
    if t > s.t_total() {
        return Err(Error::TimeOutOfWindow {
            time: t,
            level,
            lo: 0,
            hi: s.t_total(),
        });
    }
    let attenuated = marginal_attenuation(c, s, level, t, x0)?;
    let sigma = s.sigma_bar(t);
    let data = attenuated
        .iter()
        .zip(eps)
        .map(|(a, e)| a + sigma * e)
        .collect();
    Ok(LatentState::new(level, t, data))
}

/// Advances `x_prev` one step to `t = x_prev.time + 1` within its window.
pub fn transition_sample(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x_prev: &LatentState,
    eps: &[f64],
) -> Result<LatentState> {
    c.check_state(x_prev)?;
    check_len(x_prev.data.len(), eps.len())?;
    let t = x_prev.time + 1;
    let coeffs = s.step_coeffs(x_prev.level, t)?;
    let scaled = c.apply_diag_pair(
        x_prev.level,
        coeffs.lambda_pair.0,
        coeffs.lambda_pair.1,
        &x_prev.data,
    )?;
    let noise = c.apply_diag_pair(x_prev.level, coeffs.l_pair.0, coeffs.l_pair.1, eps)?;
    let data = scaled.iter().zip(&noise).map(|(a, n)| a + n).collect();
    Ok(LatentState::new(x_prev.level, t, data))
}

/// The forward posterior `q(x_{t-1} | x_t, x_0)` at `x_t`'s level.
///
/// `x0` is level-`k` data. Coefficients follow from Bayes' rule on the
/// marginal and transition Gaussians; both are two-value diagonal, so the
/// posterior is too.
pub fn posterior(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x_t: &LatentState,
    x0: &[f64],
) -> Result<ForwardPosterior> {
    c.check_state(x_t)?;
    check_len(x_t.data.len(), x0.len())?;
    if x_t.time == 0 {
        return Err(Error::TimeZero);
    }
    let (k, t) = (x_t.level, x_t.time);
    let coeffs = s.step_coeffs(k, t)?;
    let sig2 = s.sigma_bar(t) * s.sigma_bar(t);
    if sig2 <= 0.0 {
        return Err(Error::InvalidSchedule(format!("sigma_bar({t}) must be positive")));
    }
    let sig2_prev = s.sigma_bar(t - 1) * s.sigma_bar(t - 1);
    let (la2, lb2) = (
        coeffs.l_pair.0 * coeffs.l_pair.0,
        coeffs.l_pair.1 * coeffs.l_pair.1,
    );
    let lam_prev = s.lambda_bar(k, t - 1);

    let coef_x0 = (lam_prev * la2 / sig2, lb2 / sig2);
    let coef_xt = (
        coeffs.lambda_pair.0 * sig2_prev / sig2,
        coeffs.lambda_pair.1 * sig2_prev / sig2,
    );
    let from_x0 = c.apply_diag_pair(k, coef_x0.0, coef_x0.1, x0)?;
    let from_xt = c.apply_diag_pair(k, coef_xt.0, coef_xt.1, &x_t.data)?;
    let mean = from_x0.iter().zip(&from_xt).map(|(a, b)| a + b).collect();
    Ok(ForwardPosterior {
        mean,
        var_pair: (la2 * sig2_prev / sig2, lb2 * sig2_prev / sig2),
    })
}

/// Downsamples a state sitting exactly at its turning point.
pub fn turn_down(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x: &LatentState,
) -> Result<LatentState> {
    c.check_state(x)?;
    let k = x.level + 1;
    if k > c.levels() || s.turning_points().get(x.level) != Some(&x.time) {
        return Err(Error::NotTurningPoint(x.time, x.level));
    }
    Ok(LatentState::new(k, x.time, c.downsample(k, &x.data)?))
}

/// Runs the full forward chain from level-0 data, downsampling at each
/// turning point. Returns every state: `T + K + 1` of them, turning points
/// contributing two states at the same time index.
pub fn forward_trajectory(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x0: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<LatentState>> {
    check_len(c.dim(0), x0.len())?;
    if c.levels() != s.levels() {
        return Err(Error::InvalidSchedule(format!(
            "schedule has {} turning points but cascade has {} levels",
            s.levels(),
            c.levels()
        )));
    }
    let mut states = Vec::with_capacity(s.t_total() + c.levels() + 1);
    let mut cur = LatentState::new(0, 0, x0.to_vec());
    states.push(cur.clone());
    for level in 0..=c.levels() {
        if level > 0 {
            cur = turn_down(c, s, &cur)?;
            states.push(cur.clone());
        }
        let (lo, hi) = s.window(level);
        for _t in lo + 1..=hi {
            let eps = standard_normal(rng, cur.data.len());
            cur = transition_sample(c, s, &cur, &eps)?;
            states.push(cur.clone());
        }
    }
    Ok(states)
}
