//! Numerical validation of the reverse-process error analysis: closed-form
//! turning-point marginals, Monte Carlo Jensen-Shannon divergence with
//! antithetic pairing, the theoretical upper bounds, and the no-attenuation
//! special case used for comparison sweeps.
//!
//! Everything here works with exact mixture densities; Monte Carlo enters
//! only through where the densities are evaluated.

use crate::cascade::{LatentState, SubspaceCascade};
use crate::denoiser::GaussianMixture;
use crate::process::standard_normal;
use crate::schedule::DvdpSchedule;
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};
use std::f64::consts::{LN_2, PI, SQRT_2};

/// `ln Gamma(z)` for `z = two_z / 2` (integer or half-integer), by the
/// recurrence from `Gamma(1) = 1` and `Gamma(1/2) = sqrt(pi)`.
fn ln_gamma_half(two_z: usize) -> f64 {
    debug_assert!(two_z >= 1);
    let mut acc = if two_z % 2 == 0 {
        0.0
    } else {
        0.5 * PI.ln()
    };
    let mut cur = if two_z % 2 == 0 { 2 } else { 1 };
    while cur + 2 <= two_z {
        acc += (cur as f64 / 2.0).ln();
        cur += 2;
    }
    acc
}

/// Volume of the d-dimensional ball of radius r, `pi^{d/2} r^d / Gamma(d/2+1)`,
/// computed in log space to stay finite at large d or r.
pub fn sphere_volume(d: usize, r: f64) -> f64 {
    assert!(d >= 1, "dimension must be positive");
    assert!(r >= 0.0, "radius must be non-negative");
    if r == 0.0 {
        return 0.0;
    }
    ((d as f64 / 2.0) * PI.ln() + d as f64 * r.ln() - ln_gamma_half(d + 2)).exp()
}

/// Shared kernel of the two analytic bounds:
/// `(sqrt2/2) e^{-1/2} b (2 sqrt2 + V_d(r)/(2 pi)^{d/2}) gap`.
fn bound_core(b: f64, d: usize, r: f64, gap: f64) -> f64 {
    let ratio = if r > 0.0 {
        ((d as f64 / 2.0) * PI.ln() + d as f64 * r.ln()
            - ln_gamma_half(d + 2)
            - (d as f64 / 2.0) * (2.0 * PI).ln())
        .exp()
    } else {
        0.0
    };
    0.5f64.sqrt() * (-0.5f64).exp() * b * (2.0 * SQRT_2 + ratio) * gap
}

/// Total-variation-style bound between two linear pushforwards of a
/// norm-bounded distribution: operators and covariance given as two-value
/// diagonal pairs, `b` the support radius, `d` the ambient dimension.
///
/// Spectral norms of diagonal-pair operators reduce to the max absolute
/// entry; `r = 2 b |Sigma^{-1/2} A1|` and the bound scales linearly in
/// `|Sigma^{-1/2}(A1 - A2)|`.
pub fn pushforward_gap_bound(
    a1: (f64, f64),
    a2: (f64, f64),
    sigma: (f64, f64),
    b: f64,
    d: usize,
) -> Result<f64> {
    if !(sigma.0 > 0.0 && sigma.1 > 0.0) {
        return Err(Error::InvalidConfig(
            "covariance pair must be positive".into(),
        ));
    }
    if !(a2.0 >= 0.0 && a2.1 >= 0.0 && a1.0 >= a2.0 && a1.1 >= a2.1) {
        return Err(Error::InvalidConfig(
            "bound requires A1 >= A2 >= 0 on both diagonal blocks".into(),
        ));
    }
    let isr = (1.0 / sigma.0.sqrt(), 1.0 / sigma.1.sqrt());
    let gap = ((a1.0 - a2.0) * isr.0).max((a1.1 - a2.1) * isr.1);
    let a1_norm = (a1.0 * isr.0).max(a1.1 * isr.1);
    Ok(bound_core(b, d, 2.0 * b * a1_norm, gap))
}

/// The single-turning-point error bound at level transition `k` (crossing
/// from level k-1 to k at its turning point): proportional to the surviving
/// attenuation over the noise scale, with `d` the level-(k-1) dimension and
/// the support radius taken as `sqrt(d)` per the data-normalization
/// assumption.
pub fn turning_error_bound(s: &DvdpSchedule, k: usize, d: usize) -> f64 {
    assert!(k >= 1 && k <= s.levels(), "level transition out of range");
    let tk = s.turning_points()[k - 1];
    let sig = s.sigma_bar(tk);
    assert!(sig > 0.0);
    let lam = s.lambda_bar(k - 1, tk);
    let max_lam = (k - 1..=s.levels())
        .map(|i| s.lambda_bar(i, tk))
        .fold(0.0f64, f64::max);
    let b = (d as f64).sqrt();
    bound_core(b, d, 2.0 * b * max_lam / sig, lam / sig)
}

/// A distribution with an exact log-density and antithetic sampling, the
/// contract the divergence estimator works against.
pub trait Dist: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> Result<f64>;
    /// A pair `(mu + A z, mu - A z)` sharing one underlying draw; pairing
    /// cancels the odd error terms in divergence estimates.
    fn sample_antithetic(&self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Gaussian mixture whose component covariances are two-value diagonal pairs
/// at a fixed cascade level: the closed form of every turning-point marginal.
pub struct PairMixture<'a> {
    cascade: &'a SubspaceCascade,
    level: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    cov_pairs: Vec<(f64, f64)>,
    log_norms: Vec<f64>,
}

impl<'a> PairMixture<'a> {
    pub fn new(
        cascade: &'a SubspaceCascade,
        level: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        cov_pairs: Vec<(f64, f64)>,
    ) -> Result<Self> {
        cascade.check_level(level)?;
        let d = cascade.dim(level);
        if weights.is_empty() || weights.len() != means.len() || weights.len() != cov_pairs.len() {
            return Err(Error::InvalidMixture(
                "weights, means, covariance pairs must be equal-length and non-empty".into(),
            ));
        }
        if means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidMixture(
                "component mean has the wrong dimension".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture("weights must form a simplex".into()));
        }
        let d_ret = if level < cascade.levels() {
            cascade.dim(level + 1)
        } else {
            0
        };
        let d_comp = d - d_ret;
        let mut log_norms = Vec::with_capacity(cov_pairs.len());
        for &(vc, vr) in &cov_pairs {
            if !(vc > 0.0) || (d_ret > 0 && !(vr > 0.0)) {
                return Err(Error::InvalidMixture(
                    "covariance pair must be positive".into(),
                ));
            }
            log_norms.push(
                -0.5 * (d_comp as f64 * (2.0 * PI * vc).ln()
                    + d_ret as f64 * (2.0 * PI * vr).ln()),
            );
        }
        Ok(PairMixture {
            cascade,
            level,
            weights,
            means,
            cov_pairs,
            log_norms,
        })
    }

    fn split_sq_norms(&self, r: &[f64]) -> Result<(f64, f64)> {
        let total: f64 = r.iter().map(|v| v * v).sum();
        if self.level < self.cascade.levels() {
            let q_ret: f64 = self
                .cascade
                .downsample(self.level + 1, r)?
                .iter()
                .map(|v| v * v)
                .sum();
            Ok(((total - q_ret).max(0.0), q_ret))
        } else {
            Ok((total, 0.0))
        }
    }
}

impl Dist for PairMixture<'_> {
    fn dim(&self) -> usize {
        self.cascade.dim(self.level)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for (j, m) in self.means.iter().enumerate() {
            let r: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
            let (q_comp, q_ret) = self.split_sq_norms(&r)?;
            let (vc, vr) = self.cov_pairs[j];
            let quad = q_comp / vc + if q_ret > 0.0 { q_ret / vr } else { 0.0 };
            terms.push(self.weights[j].ln() + self.log_norms[j] - 0.5 * quad);
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    fn sample_antithetic(&self, mut rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)> {
        let u: f64 = Rng::gen(&mut rng);
        let mut j = self.weights.len() - 1;
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let z = standard_normal(&mut rng, self.dim());
        let (vc, vr) = self.cov_pairs[j];
        let delta = self
            .cascade
            .apply_diag_pair(self.level, vc.sqrt(), vr.sqrt(), &z)?;
        let m = &self.means[j];
        let plus = m.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let minus = m.iter().zip(&delta).map(|(a, b)| a - b).collect();
        Ok((plus, minus))
    }
}

/// Online mean/variance accumulator (Welford).
struct MeanVar {
    n: f64,
    mean: f64,
    m2: f64,
}

impl MeanVar {
    fn new() -> Self {
        MeanVar {
            n: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn var(&self) -> f64 {
        if self.n > 1.0 {
            (self.m2 / (self.n - 1.0)).max(0.0)
        } else {
            0.0
        }
    }
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Monte Carlo Jensen-Shannon divergence with antithetic pairing:
/// `1/2 E_p[ln p - ln m] + 1/2 E_q[ln q - ln m]`, `m = (p+q)/2`, estimated
/// from `n/2` draws per side grouped into antithetic pairs. Returns the
/// estimate and its standard error.
pub fn jsd_estimate(
    p: &dyn Dist,
    q: &dyn Dist,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if n < 10_000 {
        return Err(Error::InvalidConfig(format!(
            "divergence estimate needs n >= 10000 samples, got {n}"
        )));
    }
    let pairs = n / 4;
    let side = |main: &dyn Dist, other: &dyn Dist, rng: &mut dyn RngCore| -> Result<MeanVar> {
        let mut acc = MeanVar::new();
        for _ in 0..pairs {
            let (x1, x2) = main.sample_antithetic(rng)?;
            let mut term = 0.0;
            for x in [&x1, &x2] {
                let lp = main.log_density(x)?;
                let lq = other.log_density(x)?;
                let lm = logsumexp2(lp, lq) - LN_2;
                let f = lp - lm;
                if !f.is_finite() {
                    return Err(Error::NonFinite("divergence integrand"));
                }
                term += 0.5 * f;
            }
            acc.push(term);
        }
        Ok(acc)
    };
    let p_side = side(p, q, &mut *rng)?;
    let q_side = side(q, p, &mut *rng)?;
    let est = 0.5 * (p_side.mean + q_side.mean);
    let se = 0.5 * (p_side.var() / p_side.n + q_side.var() / q_side.n).sqrt();
    Ok((est, se))
}

/// Verdict sheet for one turning-point comparison.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub jsd: f64,
    pub stderr: f64,
    pub bound: f64,
    pub lambda_at_turn: f64,
    pub sigma_at_turn: f64,
    /// Dimension the comparison lives in (level k-1) and the retained
    /// dimension below it (level k).
    pub dim: usize,
    pub dim_next: usize,
    pub turn_time: usize,
    /// Plain `jsd <= bound` check.
    pub ok: bool,
}

/// Closed-form forward marginal at the turning point of level transition `k`,
/// one level above the turn: each data component is attenuated by the pair
/// `(lambda, 1)` and blurred by the accumulated noise.
pub fn forward_turn_mixture<'a>(
    c: &'a SubspaceCascade,
    s: &DvdpSchedule,
    gm: &GaussianMixture,
    k: usize,
) -> Result<PairMixture<'a>> {
    turn_mixture(c, s, gm, k, true)
}

/// Closed-form marginal of the reconstruction at the same turning point:
/// descend to level k, then upsample with complement noise. The lost block
/// keeps only noise; the retained block is untouched.
pub fn reverse_turn_mixture<'a>(
    c: &'a SubspaceCascade,
    s: &DvdpSchedule,
    gm: &GaussianMixture,
    k: usize,
) -> Result<PairMixture<'a>> {
    turn_mixture(c, s, gm, k, false)
}

fn turn_mixture<'a>(
    c: &'a SubspaceCascade,
    s: &DvdpSchedule,
    gm: &GaussianMixture,
    k: usize,
    forward: bool,
) -> Result<PairMixture<'a>> {
    if k == 0 || k > s.levels() || c.levels() != s.levels() {
        return Err(Error::LevelOutOfRange {
            level: k,
            max: s.levels(),
        });
    }
    if !gm.is_isotropic() {
        return Err(Error::InvalidMixture(
            "turning-point marginals need isotropic components".into(),
        ));
    }
    let d0 = c.dim(0);
    if gm.dim() != d0 {
        return Err(Error::ShapeMismatch {
            expected: d0,
            got: gm.dim(),
        });
    }
    let radius = (d0 as f64).sqrt();
    for m in gm.means() {
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > radius + 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "component mean norm {norm:.3} exceeds the sqrt(d) support assumption"
            )));
        }
    }
    let tk = s.turning_points()[k - 1];
    let sig2 = s.sigma_bar(tk).powi(2);
    let lam = s.lambda_bar(k - 1, tk);
    let km1 = k - 1;
    let mut means = Vec::with_capacity(gm.components());
    let mut covs = Vec::with_capacity(gm.components());
    for (m, cov) in gm.means().iter().zip(gm.covariances()) {
        let mk = c.downsample_to(km1, m)?;
        let c2 = cov[0];
        if forward {
            means.push(c.apply_diag_pair(km1, lam, 1.0, &mk)?);
            covs.push((lam * lam * c2 + sig2, c2 + sig2));
        } else {
            means.push(c.apply_diag_pair(km1, 0.0, 1.0, &mk)?);
            covs.push((sig2, c2 + sig2));
        }
    }
    PairMixture::new(c, km1, gm.weights().to_vec(), means, covs)
}

/// Measures the actual turning-point error at level transition `k`: JSD
/// between the forward marginal and its reverse-side reconstruction, plus
/// the analytic ceiling.
pub fn turning_error(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    gm: &GaussianMixture,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<BoundReport> {
    let fwd = forward_turn_mixture(c, s, gm, k)?;
    let rev = reverse_turn_mixture(c, s, gm, k)?;
    let (jsd, stderr) = jsd_estimate(&fwd, &rev, n, rng)?;
    let tk = s.turning_points()[k - 1];
    let d = c.dim(k - 1);
    let bound = turning_error_bound(s, k, d);
    Ok(BoundReport {
        jsd,
        stderr,
        bound,
        lambda_at_turn: s.lambda_bar(k - 1, tk),
        sigma_at_turn: s.sigma_bar(tk),
        dim: d,
        dim_next: c.dim(k),
        turn_time: tk,
        ok: jsd <= bound,
    })
}

/// The no-attenuation special case: same noise schedule, every attenuation
/// row forced to one. Dimension reduction then happens by truncation alone.
pub fn subspace_mode(s: &DvdpSchedule) -> DvdpSchedule {
    let mut out = s.clone();
    let rows = out.lambda_bar.len();
    let cols = out.lambda_bar[0].len();
    out.lambda_bar = vec![vec![1.0; cols]; rows];
    out
}

/// Exact posterior of one reverse step by dense Gaussian conditioning on the
/// joint of `(x_{t-1}, x_t)` given the data point: the independent oracle for
/// the pair-form posterior. Returns the conditional mean and covariance.
pub fn posterior_oracle(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x_t: &LatentState,
    x0: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    c.check_state(x_t)?;
    let (k, t) = (x_t.level, x_t.time);
    if t == 0 {
        return Err(Error::TimeZero);
    }
    s.check_window(k, t)?;
    let coeffs = s.step_coeffs(k, t)?;
    let sig_prev2 = s.sigma_bar(t - 1).powi(2);
    let lam_prev = s.lambda_bar(k, t - 1);
    let d = c.dim(k);

    let step = c.pair_matrix(k, coeffs.lambda_pair.0, coeffs.lambda_pair.1)?;
    let l2 = c.pair_matrix(
        k,
        coeffs.l_pair.0 * coeffs.l_pair.0,
        coeffs.l_pair.1 * coeffs.l_pair.1,
    )?;
    let att_prev = c.pair_matrix(k, lam_prev, 1.0)?;

    let x0v = DVector::from_column_slice(x0);
    let xtv = DVector::from_column_slice(&x_t.data);
    let mu1 = &att_prev * &x0v;
    let mu2 = &step * &mu1;

    // Cov[x_{t-1}] = sig_prev^2 I; Cov[x_t] = sig_prev^2 A A^T + L^2.
    let s22 = &step * step.transpose() * sig_prev2 + &l2;
    let chol = Cholesky::new(s22)
        .ok_or_else(|| Error::InvalidSchedule("joint covariance not positive definite".into()))?;
    // Gain = Cov[x_{t-1}, x_t] S22^{-1} = sig_prev^2 A^T S22^{-1}.
    let gain = chol.solve(&(step.clone() * sig_prev2)).transpose();
    let mean = &mu1 + &gain * (&xtv - &mu2);
    // Sigma = S11 - Gain S21 with S21 = sig_prev^2 A.
    let cov = DMatrix::identity(d, d) * sig_prev2 - &gain * &step * sig_prev2;
    Ok((mean.as_slice().to_vec(), cov))
}

/// 1-dim JSD between two Gaussians by Simpson quadrature; oracle for the
/// Monte Carlo estimator.
pub fn jsd_gaussians_quadrature(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    assert!(s1 > 0.0 && s2 > 0.0);
    let ln_normal = |x: f64, m: f64, s: f64| {
        let z = (x - m) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
    };
    let f = |x: f64| {
        let lp = ln_normal(x, m1, s1);
        let lq = ln_normal(x, m2, s2);
        let lm = logsumexp2(lp, lq) - LN_2;
        0.5 * (lp.exp() * (lp - lm) + lq.exp() * (lq - lm))
    };
    let lo = (m1 - 14.0 * s1).min(m2 - 14.0 * s2);
    let hi = (m1 + 14.0 * s1).max(m2 + 14.0 * s2);
    let n = 40_000usize;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Error function, Abramowitz-Stegun style rational approximation
/// (absolute error below 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Kolmogorov-Smirnov statistic of a sample against a reference CDF.
/// At significance 0.001 the critical value is about `1.95 / sqrt(n)`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        worst = worst
            .max((f - i as f64 / n).abs())
            .max((f - (i as f64 + 1.0) / n).abs());
    }
    worst
}
