//! Noise predictors: the `Denoiser` contract, a closed-form optimal denoiser
//! for Gaussian-mixture data, and a small trainable MLP with hand-written
//! backpropagation.
//!
//! The analytic denoiser computes `E[eps | x_t]` exactly under the linear
//! observation `x_t = Lambda_bar x0 + sigma_bar eps`. For isotropic mixture
//! components every covariance stays in the two-value diagonal-pair form, so
//! evaluation runs in O(d) per component on either backend. General diagonal
//! covariances lose that structure under projection and use small dense
//! solves, which requires the explicit-basis backend.

use crate::cascade::{Backend, LatentState, SubspaceCascade};
use crate::process::marginal_sample;
use crate::schedule::DvdpSchedule;
use crate::{check_len, Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Predicts the standard normal noise in a noisy state. The state carries its
/// own level and time. Output length equals input length; implementations
/// panic on states outside their schedule rather than guessing.
pub trait Denoiser: Sync {
    fn evaluate(&self, x: &LatentState) -> Vec<f64>;
}

/// Weighted Gaussian components over level-0 data with diagonal covariances.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covariances.len()
        {
            return Err(Error::InvalidMixture(
                "weights, means, covariances must be equal-length and non-empty".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("zero-dimensional mixture".into()));
        }
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim || c.len() != dim {
                return Err(Error::InvalidMixture(
                    "component dimensions disagree".into(),
                ));
            }
            if c.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidMixture("variances must be positive".into()));
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights must be a simplex vector, got sum {total}"
            )));
        }
        Ok(GaussianMixture {
            weights,
            means,
            covariances,
        })
    }

    /// Convenience constructor for per-component isotropic variances.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let dim = means.first().map(|m| m.len()).unwrap_or(0);
        let covs = variances.iter().map(|&v| vec![v; dim]).collect();
        GaussianMixture::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    /// Every component has a scalar covariance, the condition for the fast
    /// diagonal-pair evaluation path.
    pub fn is_isotropic(&self) -> bool {
        self.covariances
            .iter()
            .all(|c| c.iter().all(|&v| v == c[0]))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut j = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        self.means[j]
            .iter()
            .zip(&self.covariances[j])
            .map(|(&m, &v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Mixture mean at level 0.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, &v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}

/// Closed-form `E[eps | x_t]` for Gaussian-mixture data: the minimizer of the
/// noise-prediction objective, used as a verification oracle and as a
/// reference denoiser for sampling.
pub struct AnalyticDenoiser<'a> {
    cascade: &'a SubspaceCascade,
    schedule: &'a DvdpSchedule,
    mixture: GaussianMixture,
    /// Per-level projected component means, indexed `[level][component]`.
    proj_means: Vec<Vec<Vec<f64>>>,
    /// Per-component scalar variance when the mixture is isotropic.
    iso_vars: Option<Vec<f64>>,
    /// Per-level projected covariance matrices for the dense path.
    proj_covs: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl<'a> AnalyticDenoiser<'a> {
    pub fn new(
        cascade: &'a SubspaceCascade,
        schedule: &'a DvdpSchedule,
        mixture: GaussianMixture,
    ) -> Result<Self> {
        if mixture.dim() != cascade.dim(0) {
            return Err(Error::ShapeMismatch {
                expected: cascade.dim(0),
                got: mixture.dim(),
            });
        }
        if cascade.levels() != schedule.levels() {
            return Err(Error::InvalidSchedule(format!(
                "schedule has {} turning points but cascade has {} levels",
                schedule.levels(),
                cascade.levels()
            )));
        }
        let mut proj_means = Vec::with_capacity(cascade.levels() + 1);
        for k in 0..=cascade.levels() {
            let mut level_means = Vec::with_capacity(mixture.components());
            for m in mixture.means() {
                level_means.push(cascade.downsample_to(k, m)?);
            }
            proj_means.push(level_means);
        }
        let iso = mixture.is_isotropic();
        let iso_vars = iso.then(|| mixture.covariances().iter().map(|c| c[0]).collect());
        let proj_covs = if iso {
            None
        } else {
            if cascade.backend() != Backend::Dense {
                return Err(Error::InvalidMixture(
                    "non-isotropic covariances need the explicit-basis backend".into(),
                ));
            }
            Some(Self::project_covariances(cascade, &mixture)?)
        };
        Ok(AnalyticDenoiser {
            cascade,
            schedule,
            mixture,
            proj_means,
            iso_vars,
            proj_covs,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    /// `C_j` at level k is `G C_j G^T` with `G` the cumulative downsampling
    /// map, built column-by-column so it works identically on both backends.
    fn project_covariances(
        c: &SubspaceCascade,
        gm: &GaussianMixture,
    ) -> Result<Vec<Vec<DMatrix<f64>>>> {
        let d0 = c.dim(0);
        let mut all = Vec::with_capacity(c.levels() + 1);
        for k in 0..=c.levels() {
            let dk = c.dim(k);
            let mut g = DMatrix::zeros(dk, d0);
            for i in 0..d0 {
                let mut e = vec![0.0; d0];
                e[i] = 1.0;
                let col = c.downsample_to(k, &e)?;
                g.column_mut(i).copy_from_slice(&col);
            }
            let mut level = Vec::with_capacity(gm.components());
            for cov in gm.covariances() {
                let scaled = {
                    let mut s = g.clone();
                    for (mut col, &v) in s.column_iter_mut().zip(cov) {
                        col *= v;
                    }
                    s
                };
                level.push(&scaled * g.transpose());
            }
            all.push(level);
        }
        Ok(all)
    }

    /// `E[eps | x_t]` at the state's level and time.
    pub fn epsilon(&self, x: &LatentState) -> Result<Vec<f64>> {
        self.cascade.check_state(x)?;
        let (k, t) = (x.level, x.time);
        self.schedule.check_window(k, t)?;
        let sig = self.schedule.sigma_bar(t);
        if sig <= 0.0 {
            return Err(Error::TimeZero);
        }
        let post_mean = if self.iso_vars.is_some() {
            self.posterior_mean_isotropic(x)?
        } else {
            self.posterior_mean_dense(x)?
        };
        let lam = self.schedule.lambda_bar(k, t);
        let att = self.cascade.apply_diag_pair(k, lam, 1.0, &post_mean)?;
        Ok(x.data
            .iter()
            .zip(&att)
            .map(|(xt, am)| (xt - am) / sig)
            .collect())
    }

    /// Isotropic path: per component the marginal covariance of `x_t` is the
    /// pair `(lam^2 c^2 + sig^2, c^2 + sig^2)`, so likelihoods reduce to the
    /// residual's split norms across the retained subspace and its complement.
    fn posterior_mean_isotropic(&self, x: &LatentState) -> Result<Vec<f64>> {
        let (k, t) = (x.level, x.time);
        let lam = self.schedule.lambda_bar(k, t);
        let sig2 = self.schedule.sigma_bar(t).powi(2);
        let iso = self.iso_vars.as_ref().unwrap();
        let d = self.cascade.dim(k);
        let d_ret = if k < self.cascade.levels() {
            self.cascade.dim(k + 1)
        } else {
            0
        };
        let d_comp = d - d_ret;

        let mut log_lik = Vec::with_capacity(self.mixture.components());
        let mut residuals = Vec::with_capacity(self.mixture.components());
        for (j, m) in self.proj_means[k].iter().enumerate() {
            let am = self.cascade.apply_diag_pair(k, lam, 1.0, m)?;
            let r: Vec<f64> = x.data.iter().zip(&am).map(|(a, b)| a - b).collect();
            // |P r|^2 via the orthonormal-row identity |D^T D r|^2 = |D r|^2.
            let q_ret = if d_ret > 0 {
                self.cascade
                    .downsample(k + 1, &r)?
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            } else {
                0.0
            };
            let q_comp = r.iter().map(|v| v * v).sum::<f64>() - q_ret;
            let c2 = iso[j];
            let s_comp = lam * lam * c2 + sig2;
            let s_ret = c2 + sig2;
            log_lik.push(
                self.mixture.weights()[j].ln()
                    - 0.5 * (q_comp.max(0.0) / s_comp + q_ret / s_ret)
                    - 0.5 * (d_comp as f64 * s_comp.ln() + d_ret as f64 * s_ret.ln()),
            );
            residuals.push(r);
        }
        let resp = softmax(&log_lik);

        let mut out = vec![0.0; d];
        for (j, r) in residuals.iter().enumerate() {
            let c2 = iso[j];
            let s_comp = lam * lam * c2 + sig2;
            let s_ret = c2 + sig2;
            // mu_post = m + c^2 Lambda_bar S^{-1} r, all diagonal pairs.
            let gain = self
                .cascade
                .apply_diag_pair(k, c2 * lam / s_comp, c2 / s_ret, r)?;
            for ((o, &m), g) in out.iter_mut().zip(&self.proj_means[k][j]).zip(&gain) {
                *o += resp[j] * (m + g);
            }
        }
        Ok(out)
    }

    /// Dense path for diagonal (non-isotropic) covariances: exact small
    /// linear-Gaussian conditioning per component.
    fn posterior_mean_dense(&self, x: &LatentState) -> Result<Vec<f64>> {
        let (k, t) = (x.level, x.time);
        let lam_mat = self
            .cascade
            .pair_matrix(k, self.schedule.lambda_bar(k, t), 1.0)?;
        let sig2 = self.schedule.sigma_bar(t).powi(2);
        let covs = &self.proj_covs.as_ref().unwrap()[k];
        let d = self.cascade.dim(k);
        let xv = DVector::from_column_slice(&x.data);

        let mut log_lik = Vec::with_capacity(self.mixture.components());
        let mut posts = Vec::with_capacity(self.mixture.components());
        for (j, m) in self.proj_means[k].iter().enumerate() {
            let mv = DVector::from_column_slice(m);
            let mut s = &lam_mat * &covs[j] * lam_mat.transpose();
            for i in 0..d {
                s[(i, i)] += sig2;
            }
            let chol = Cholesky::new(s).ok_or_else(|| {
                Error::InvalidMixture("marginal covariance not positive definite".into())
            })?;
            let r = &xv - &lam_mat * &mv;
            let sinv_r = chol.solve(&r);
            let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            log_lik.push(self.mixture.weights()[j].ln() - 0.5 * (r.dot(&sinv_r) + log_det));
            posts.push(mv + &covs[j] * lam_mat.transpose() * sinv_r);
        }
        let resp = softmax(&log_lik);
        let mut out = vec![0.0; d];
        for (j, p) in posts.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(p.iter()) {
                *o += resp[j] * v;
            }
        }
        Ok(out)
    }
}

impl Denoiser for AnalyticDenoiser<'_> {
    fn evaluate(&self, x: &LatentState) -> Vec<f64> {
        self.epsilon(x).expect("analytic denoiser on invalid state")
    }
}

fn softmax(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = log_w.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Noise-prediction objective for one `(x0, k, t, eps)` draw:
/// `|eps - d(marginal_sample(x0 at level k, t, eps))|^2`.
pub fn loss_term(
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    den: &dyn Denoiser,
    x0: &[f64],
    k: usize,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    s.check_window(k, t)?;
    let x0k = c.downsample_to(k, x0)?;
    check_len(x0k.len(), eps.len())?;
    let xt = marginal_sample(c, s, &x0k, k, t, eps)?;
    let pred = den.evaluate(&xt);
    check_len(eps.len(), pred.len())?;
    Ok(eps
        .iter()
        .zip(&pred)
        .map(|(e, p)| (e - p) * (e - p))
        .sum())
}

/// How training draws the level and timestep for each sample.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum LevelRule {
    /// Level uniform over `0..=K`, then time uniform in that level's window.
    /// Windows of unequal length get equal level weight.
    #[default]
    UniformLevel,
    /// Time uniform over `1..=T`, level implied. Longer windows get more
    /// samples.
    UniformTime,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Learning rate; zero is allowed and leaves parameters bit-identical.
    pub lr: f64,
    pub seed: u64,
    pub level_rule: LevelRule,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig(
                "iterations and batch must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Width of the sinusoidal time-feature block appended to network inputs.
/// Fixed by the parameter layout; checkpoints depend on it.
pub const TIME_EMBED_DIM: usize = 16;
const EMBED_DIM: usize = TIME_EMBED_DIM;

/// Sinusoidal time features: `sin(t w_j), cos(t w_j)` over a geometric
/// frequency ladder.
fn time_embedding(t: usize) -> [f64; EMBED_DIM] {
    let mut e = [0.0; EMBED_DIM];
    for j in 0..EMBED_DIM / 2 {
        let omega = 10000f64.powf(-(j as f64) / (EMBED_DIM as f64 / 2.0));
        let arg = t as f64 * omega;
        e[2 * j] = arg.sin();
        e[2 * j + 1] = arg.cos();
    }
    e
}

/// One two-layer tanh network per level; the time embedding is concatenated
/// to the (variance-normalized) state.
struct LevelNet {
    dim: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl LevelNet {
    fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let n_in = dim + EMBED_DIM;
        let lim1 = (6.0 / (n_in + hidden) as f64).sqrt();
        let lim2 = (6.0 / (hidden + dim) as f64).sqrt();
        LevelNet {
            dim,
            hidden,
            w1: (0..hidden * n_in)
                .map(|_| rng.gen_range(-lim1..lim1))
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..dim * hidden)
                .map(|_| rng.gen_range(-lim2..lim2))
                .collect(),
            b2: vec![0.0; dim],
        }
    }

    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn forward(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_in = self.dim + EMBED_DIM;
        debug_assert_eq!(input.len(), n_in);
        let mut a1 = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            let row = &self.w1[h * n_in..(h + 1) * n_in];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.b1[h];
            a1[h] = z.tanh();
        }
        let mut out = vec![0.0; self.dim];
        for o in 0..self.dim {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            out[o] = row.iter().zip(&a1).map(|(w, a)| w * a).sum::<f64>() + self.b2[o];
        }
        (out, a1)
    }
}

/// Per-iteration state of the moment-based optimizer.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

/// Small trainable noise predictor: per-level two-layer tanh networks over
/// the normalized state plus a sinusoidal time embedding.
pub struct MlpDenoiser {
    nets: Vec<LevelNet>,
    /// Copied from the schedule so evaluation is self-contained.
    sigma_bar: Vec<f64>,
    hidden: usize,
}

impl MlpDenoiser {
    pub fn new(c: &SubspaceCascade, s: &DvdpSchedule, hidden: usize, seed: u64) -> Self {
        let nets = (0..=c.levels())
            .map(|k| LevelNet::new(c.dim(k), hidden, &mut crate::stream_rng(seed, k as u64)))
            .collect();
        MlpDenoiser {
            nets,
            sigma_bar: (0..=s.t_total()).map(|t| s.sigma_bar(t)).collect(),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn levels(&self) -> usize {
        self.nets.len() - 1
    }

    pub fn level_dim(&self, k: usize) -> usize {
        self.nets[k].dim
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.param_count()).sum()
    }

    /// Flattened parameter vector, levels ascending, each level in
    /// `w1, b1, w2, b2` order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for n in &self.nets {
            out.extend_from_slice(&n.w1);
            out.extend_from_slice(&n.b1);
            out.extend_from_slice(&n.w2);
            out.extend_from_slice(&n.b2);
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        check_len(self.param_count(), theta.len())?;
        let mut at = 0;
        for n in &mut self.nets {
            for field in [&mut n.w1, &mut n.b1, &mut n.w2, &mut n.b2] {
                let len = field.len();
                field.copy_from_slice(&theta[at..at + len]);
                at += len;
            }
        }
        Ok(())
    }

    fn net_input(&self, x: &LatentState) -> Vec<f64> {
        let sig = self.sigma_bar[x.time];
        let norm = (1.0 + sig * sig).sqrt();
        let mut input = Vec::with_capacity(x.data.len() + EMBED_DIM);
        input.extend(x.data.iter().map(|v| v / norm));
        input.extend_from_slice(&time_embedding(x.time));
        input
    }

    /// Squared-error loss on one noisy state plus the parameter gradient,
    /// laid out exactly like [`Self::params`]. `scale` multiplies the loss
    /// (gradients are linear in it), the hook for loss weighting.
    fn loss_and_grad(&self, x: &LatentState, eps: &[f64], scale: f64) -> (f64, Vec<f64>) {
        let k = x.level;
        let input = self.net_input(x);
        let (out, a1) = self.nets[k].forward(&input);
        let loss: f64 = out
            .iter()
            .zip(eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            * scale;

        let net = &self.nets[k];
        let n_in = net.dim + EMBED_DIM;
        let g_out: Vec<f64> = out
            .iter()
            .zip(eps)
            .map(|(p, e)| 2.0 * scale * (p - e))
            .collect();
        let mut g_w2 = vec![0.0; net.w2.len()];
        for o in 0..net.dim {
            for h in 0..net.hidden {
                g_w2[o * net.hidden + h] = g_out[o] * a1[h];
            }
        }
        let mut g_a1 = vec![0.0; net.hidden];
        for h in 0..net.hidden {
            g_a1[h] = (0..net.dim)
                .map(|o| net.w2[o * net.hidden + h] * g_out[o])
                .sum();
        }
        let g_z1: Vec<f64> = g_a1
            .iter()
            .zip(&a1)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut g_w1 = vec![0.0; net.w1.len()];
        for h in 0..net.hidden {
            for i in 0..n_in {
                g_w1[h * n_in + i] = g_z1[h] * input[i];
            }
        }

        // Assemble the full-theta gradient with zeros on other levels' slots.
        let mut grad = vec![0.0; self.param_count()];
        let mut at = 0;
        for (lvl, n) in self.nets.iter().enumerate() {
            if lvl == k {
                grad[at..at + n.w1.len()].copy_from_slice(&g_w1);
                grad[at + n.w1.len()..at + n.w1.len() + n.b1.len()].copy_from_slice(&g_z1);
                let w2_at = at + n.w1.len() + n.b1.len();
                grad[w2_at..w2_at + n.w2.len()].copy_from_slice(&g_w2);
                grad[w2_at + n.w2.len()..w2_at + n.w2.len() + n.b2.len()]
                    .copy_from_slice(&g_out);
            }
            at += n.param_count();
        }
        (loss, grad)
    }
}

impl Denoiser for MlpDenoiser {
    fn evaluate(&self, x: &LatentState) -> Vec<f64> {
        assert!(
            x.time < self.sigma_bar.len(),
            "time {} outside schedule",
            x.time
        );
        let input = self.net_input(x);
        self.nets[x.level].forward(&input).0
    }
}

/// Runs the training loop: per iteration draw `(k, t)` by the level rule,
/// a batch of `(x0, eps)` pairs, and take one moment-averaged gradient step
/// on the mean noise-prediction loss. Returns the per-iteration loss trace.
///
/// Aborts with a diagnostic if the loss exceeds 1e6.
pub fn train(
    den: &mut MlpDenoiser,
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    data: &GaussianMixture,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if den.levels() != c.levels() {
        return Err(Error::InvalidConfig(
            "denoiser was built for a different cascade".into(),
        ));
    }
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let n = den.param_count();
    let mut adam = AdamState {
        m: vec![0.0; n],
        v: vec![0.0; n],
        step: 0,
    };
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let (k, t) = match cfg.level_rule {
            LevelRule::UniformLevel => {
                let k = rng.gen_range(0..=c.levels());
                let (lo, hi) = s.window(k);
                (k, rng.gen_range(lo + 1..=hi))
            }
            LevelRule::UniformTime => {
                let t = rng.gen_range(1..=s.t_total());
                (s.level_of_time(t), t)
            }
        };
        let mut grad = vec![0.0; n];
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            let x0 = data.sample(rng);
            let x0k = c.downsample_to(k, &x0)?;
            let eps = crate::process::standard_normal(rng, x0k.len());
            let xt = marginal_sample(c, s, &x0k, k, t, &eps)?;
            let (loss, g) = den.loss_and_grad(&xt, &eps, 1.0);
            loss_sum += loss;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let inv_b = 1.0 / cfg.batch as f64;
        let loss = loss_sum * inv_b;
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Diverged {
                iteration: it,
                loss,
            });
        }
        trace.push(loss);

        adam.step += 1;
        let bc1 = 1.0 - beta1.powi(adam.step as i32);
        let bc2 = 1.0 - beta2.powi(adam.step as i32);
        let mut theta = den.params();
        for i in 0..n {
            let g = grad[i] * inv_b;
            adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * g;
            adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * g * g;
            let update = (adam.m[i] / bc1) / ((adam.v[i] / bc2).sqrt() + adam_eps);
            theta[i] -= cfg.lr * update;
        }
        den.set_params(&theta)?;
    }
    Ok(trace)
}

/// Compares the analytic parameter gradient of the loss on one probe against
/// central finite differences (step 1e-5) and returns the max relative error,
/// with the relative scale floored to avoid 0/0 on dead parameters.
pub fn grad_check(
    den: &mut MlpDenoiser,
    c: &SubspaceCascade,
    s: &DvdpSchedule,
    x0: &[f64],
    k: usize,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    s.check_window(k, t)?;
    let x0k = c.downsample_to(k, x0)?;
    check_len(x0k.len(), eps.len())?;
    let xt = marginal_sample(c, s, &x0k, k, t, eps)?;
    let (_, analytic) = den.loss_and_grad(&xt, eps, 1.0);

    let h = 1e-5;
    let mut theta = den.params();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        den.set_params(&theta)?;
        let up = den.loss_and_grad(&xt, eps, 1.0).0;
        theta[i] = orig - h;
        den.set_params(&theta)?;
        let dn = den.loss_and_grad(&xt, eps, 1.0).0;
        theta[i] = orig;
        let fd = (up - dn) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    den.set_params(&theta)?;
    Ok(worst)
}
