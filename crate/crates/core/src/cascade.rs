//! Subspace ladder and its linear operators.
//!
//! A cascade is a chain of spaces of strictly decreasing dimension connected
//! by scaled average-pooling maps `D_k` (level k-1 down to level k). Each
//! `D_k` is row-orthonormal (`D_k D_k^T = I`), so its transpose is an exact
//! right inverse on the retained subspace. The operator the diffusion needs,
//! `U_k diag(a I, b I) U_k^T`, never requires the basis `U_k` itself: it
//! equals `a x + (b - a) D^T D x`.

use crate::{check_len, Error, Result};
use nalgebra::{DMatrix, DVector};

/// Which operator realization a cascade uses.
///
/// `Pooling` applies the average pool by index arithmetic and supports image
/// shapes of any size. `Dense` materializes every `D_k` (and the bases `U_k`)
/// as matrices; it is meant for small states where dense Gaussian algebra or
/// basis-explicit cross-checks are wanted.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Backend {
    Pooling,
    Dense,
}

/// Per-level tensor layout.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    /// Row-major `channels x height x width`; pooled over 2x2 spatial blocks.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// Flat vector pooled over `group` consecutive entries.
    Flat { len: usize, group: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            Shape::Flat { len, .. } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pooling factor toward the next level down.
    pub fn factor(&self) -> usize {
        match *self {
            Shape::Image { .. } => 4,
            Shape::Flat { group, .. } => group,
        }
    }

    fn child(&self) -> Result<Shape> {
        match *self {
            Shape::Image {
                channels,
                height,
                width,
            } => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::InvalidCascade(format!(
                        "cannot pool {height}x{width}: height and width must be even"
                    )));
                }
                Ok(Shape::Image {
                    channels,
                    height: height / 2,
                    width: width / 2,
                })
            }
            Shape::Flat { len, group } => {
                if group < 2 {
                    return Err(Error::InvalidCascade(format!(
                        "flat pooling group must be at least 2, got {group}"
                    )));
                }
                if len % group != 0 {
                    return Err(Error::InvalidCascade(format!(
                        "cannot pool flat length {len} by group {group}"
                    )));
                }
                Ok(Shape::Flat {
                    len: len / group,
                    group,
                })
            }
        }
    }
}

/// A state tensor tagged with its cascade level and timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub level: usize,
    pub time: usize,
    pub data: Vec<f64>,
}

impl LatentState {
    pub fn new(level: usize, time: usize, data: Vec<f64>) -> Self {
        LatentState { level, time, data }
    }
}

/// Dense-backend matrices: `down[k-1]` is `D_k`, `basis[k]` is `U_k`.
struct DenseOps {
    down: Vec<DMatrix<f64>>,
    basis: Vec<DMatrix<f64>>,
}

/// The dimension ladder `d0 > d1 > ... > dK` with its operators.
pub struct SubspaceCascade {
    backend: Backend,
    shapes: Vec<Shape>,
    dims: Vec<usize>,
    dense: Option<DenseOps>,
}

/// Builds a cascade of `levels + 1` spaces below `base`.
///
/// Errors if the base shape cannot be pooled `levels` times (odd spatial size
/// or non-divisible flat length along the way).
pub fn build_cascade(base: Shape, levels: usize, backend: Backend) -> Result<SubspaceCascade> {
    if base.is_empty() {
        return Err(Error::InvalidCascade("base shape has zero length".into()));
    }
    let mut shapes = vec![base];
    for _ in 0..levels {
        let next = shapes.last().unwrap().child()?;
        if next.is_empty() {
            return Err(Error::InvalidCascade(
                "too many levels: dimension reached zero".into(),
            ));
        }
        shapes.push(next);
    }
    let dims: Vec<usize> = shapes.iter().map(Shape::len).collect();
    let dense = match backend {
        Backend::Pooling => {
            if matches!(base, Shape::Flat { .. }) {
                return Err(Error::InvalidCascade(
                    "flat shapes require the dense backend".into(),
                ));
            }
            None
        }
        Backend::Dense => Some(build_dense_ops(&shapes)?),
    };
    Ok(SubspaceCascade {
        backend,
        shapes,
        dims,
        dense,
    })
}

fn pool_matrix(shape: &Shape) -> DMatrix<f64> {
    match *shape {
        Shape::Image {
            channels,
            height,
            width,
        } => {
            let (oh, ow) = (height / 2, width / 2);
            let mut m = DMatrix::zeros(channels * oh * ow, channels * height * width);
            for c in 0..channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let row = (c * oh + i) * ow + j;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let col = (c * height + 2 * i + di) * width + 2 * j + dj;
                                m[(row, col)] = 0.5;
                            }
                        }
                    }
                }
            }
            m
        }
        Shape::Flat { len, group } => {
            let scale = 1.0 / (group as f64).sqrt();
            let mut m = DMatrix::zeros(len / group, len);
            for row in 0..len / group {
                for dj in 0..group {
                    m[(row, row * group + dj)] = scale;
                }
            }
            m
        }
    }
}

fn build_dense_ops(shapes: &[Shape]) -> Result<DenseOps> {
    let levels = shapes.len() - 1;
    let down: Vec<DMatrix<f64>> = shapes[..levels].iter().map(pool_matrix).collect();
    for (k, d) in down.iter().enumerate() {
        let gram = d * d.transpose();
        let err = (&gram - DMatrix::identity(gram.nrows(), gram.ncols())).abs().max();
        if err > 1e-12 {
            return Err(Error::InvalidCascade(format!(
                "downsampling rows at level {} not orthonormal (defect {err:.2e})",
                k + 1
            )));
        }
    }
    // U_K is the identity; below it, U_k = [N_k, B_k] with B_k = D_{k+1}^T U_{k+1}
    // and N_k an orthonormal basis of the null space of D_{k+1}.
    let mut basis = vec![DMatrix::zeros(0, 0); levels + 1];
    basis[levels] = DMatrix::identity(shapes[levels].len(), shapes[levels].len());
    for k in (0..levels).rev() {
        let n = shapes[k].len();
        let retained = shapes[k + 1].len();
        let complement = complement_basis(&down[k], n - retained)?;
        let b = down[k].transpose() * &basis[k + 1];
        let mut u = DMatrix::zeros(n, n);
        u.columns_mut(0, n - retained).copy_from(&complement);
        u.columns_mut(n - retained, retained).copy_from(&b);
        basis[k] = u;
    }
    Ok(DenseOps { down, basis })
}

// Orthonormal completion of the null space of `d`, built by Gram-Schmidt over
// the canonical basis vectors in index order. Any completion is valid; this
// one is deterministic. A second orthogonalization pass keeps the defect near
// machine precision.
fn complement_basis(d: &DMatrix<f64>, count: usize) -> Result<DMatrix<f64>> {
    let n = d.ncols();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(count);
    for i in 0..n {
        if cols.len() == count {
            break;
        }
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        for _ in 0..2 {
            let pooled = d * &v;
            v -= d.transpose() * pooled;
            for c in &cols {
                let dot = c.dot(&v);
                v -= c * dot;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    if cols.len() != count {
        return Err(Error::InvalidCascade(format!(
            "null-space completion found {} of {count} directions",
            cols.len()
        )));
    }
    Ok(DMatrix::from_columns(&cols))
}

impl SubspaceCascade {
    /// Number of turning levels; the ladder has `levels() + 1` spaces.
    pub fn levels(&self) -> usize {
        self.shapes.len() - 1
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn shape(&self, level: usize) -> Shape {
        self.shapes[level]
    }

    /// State length at `level`.
    pub fn dim(&self, level: usize) -> usize {
        self.dims[level]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// `d_{k-1} / d_k`, the pooling factor into `level`.
    pub fn factor(&self, level: usize) -> usize {
        debug_assert!(level >= 1 && level <= self.levels());
        self.dims[level - 1] / self.dims[level]
    }

    /// Per-level factors `f_1 .. f_K` as the noise-schedule adaptation wants them.
    pub fn factors(&self) -> Vec<f64> {
        (1..=self.levels()).map(|k| self.factor(k) as f64).collect()
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.levels() {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.levels(),
            });
        }
        Ok(())
    }

    /// Validates that a state's buffer matches its level and is finite.
    pub fn check_state(&self, state: &LatentState) -> Result<()> {
        self.check_level(state.level)?;
        check_len(self.dims[state.level], state.data.len())?;
        if state.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent state"));
        }
        Ok(())
    }

    /// Applies `D_k`: level `k-1` data down to level `k`.
    ///
    /// Each output entry is the scaled block average: `2 x mean` of a 2x2
    /// image block, or `sum / sqrt(group)` of a flat group.
    pub fn downsample(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::LevelOutOfRange {
                level: 0,
                max: self.levels(),
            });
        }
        self.check_level(k)?;
        check_len(self.dims[k - 1], x.len())?;
        match self.backend {
            Backend::Dense => {
                let d = &self.dense.as_ref().unwrap().down[k - 1];
                Ok((d * DVector::from_column_slice(x)).as_slice().to_vec())
            }
            Backend::Pooling => Ok(self.pool_down(k, x)),
        }
    }

    /// Applies `D_k^T`: level `k` data up to level `k-1`.
    pub fn upsample(&self, k: usize, y: &[f64]) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::LevelOutOfRange {
                level: 0,
                max: self.levels(),
            });
        }
        self.check_level(k)?;
        check_len(self.dims[k], y.len())?;
        match self.backend {
            Backend::Dense => {
                let d = &self.dense.as_ref().unwrap().down[k - 1];
                Ok((d.transpose() * DVector::from_column_slice(y))
                    .as_slice()
                    .to_vec())
            }
            Backend::Pooling => Ok(self.pool_up(k, y)),
        }
    }

    fn pool_down(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let Shape::Image {
            channels,
            height,
            width,
        } = self.shapes[k - 1]
        else {
            unreachable!("pooling backend stores image shapes only");
        };
        let (oh, ow) = (height / 2, width / 2);
        let mut out = vec![0.0; channels * oh * ow];
        for c in 0..channels {
            for i in 0..oh {
                for j in 0..ow {
                    let base = (c * height + 2 * i) * width + 2 * j;
                    let sum = x[base] + x[base + 1] + x[base + width] + x[base + width + 1];
                    out[(c * oh + i) * ow + j] = 0.5 * sum;
                }
            }
        }
        out
    }

    fn pool_up(&self, k: usize, y: &[f64]) -> Vec<f64> {
        let Shape::Image {
            channels,
            height,
            width,
        } = self.shapes[k - 1]
        else {
            unreachable!("pooling backend stores image shapes only");
        };
        let (oh, ow) = (height / 2, width / 2);
        let mut out = vec![0.0; channels * height * width];
        for c in 0..channels {
            for i in 0..oh {
                for j in 0..ow {
                    let v = 0.5 * y[(c * oh + i) * ow + j];
                    let base = (c * height + 2 * i) * width + 2 * j;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + width] = v;
                    out[base + width + 1] = v;
                }
            }
        }
        out
    }

    /// Cumulative projection of level-0 data down to `level`.
    pub fn downsample_to(&self, level: usize, x0: &[f64]) -> Result<Vec<f64>> {
        self.check_level(level)?;
        check_len(self.dims[0], x0.len())?;
        let mut x = x0.to_vec();
        for k in 1..=level {
            x = self.downsample(k, &x)?;
        }
        Ok(x)
    }

    /// The two-value diagonal operator at `level`: `a x + (b - a) D^T D x`,
    /// with `a` acting on the complement block and `b` on the retained block.
    ///
    /// At the deepest level there is no split; the operator is `a I` and `b`
    /// is ignored.
    pub fn apply_diag_pair(&self, level: usize, a: f64, b: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_level(level)?;
        check_len(self.dims[level], x.len())?;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("diagonal pair"));
        }
        if level == self.levels() {
            return Ok(x.iter().map(|v| a * v).collect());
        }
        let pooled = self.downsample(level + 1, x)?;
        let projected = self.upsample(level + 1, &pooled)?;
        Ok(x.iter()
            .zip(&projected)
            .map(|(xi, pi)| a * xi + (b - a) * pi)
            .collect())
    }

    /// Same operator computed literally as `U diag(a I, b I) U^T x`.
    ///
    /// Dense backend only; this is the cross-check oracle for
    /// [`apply_diag_pair`](Self::apply_diag_pair), not a fast path.
    pub fn apply_diag_pair_via_basis(
        &self,
        level: usize,
        a: f64,
        b: f64,
        x: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_level(level)?;
        check_len(self.dims[level], x.len())?;
        let Some(dense) = &self.dense else {
            return Err(Error::InvalidCascade(
                "basis-explicit path needs the dense backend".into(),
            ));
        };
        let u = &dense.basis[level];
        let mut coeffs = u.transpose() * DVector::from_column_slice(x);
        let split = if level == self.levels() {
            self.dims[level]
        } else {
            self.dims[level] - self.dims[level + 1]
        };
        for i in 0..coeffs.len() {
            coeffs[i] *= if i < split { a } else { b };
        }
        Ok((u * coeffs).as_slice().to_vec())
    }

    /// The diagonal-pair operator at `level` as an explicit matrix, built
    /// column by column so it works on either backend. Oracle/test helper.
    pub fn pair_matrix(&self, level: usize, a: f64, b: f64) -> Result<DMatrix<f64>> {
        let d = self.dim(level);
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            let col = self.apply_diag_pair(level, a, b, &e)?;
            m.column_mut(i).copy_from_slice(&col);
        }
        Ok(m)
    }

    /// `D_k` as a dense matrix (dense backend only).
    pub fn down_matrix(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.dense.as_ref().map(|d| &d.down[k - 1])
    }

    /// `U_k` as a dense matrix (dense backend only).
    pub fn basis_matrix(&self, level: usize) -> Option<&DMatrix<f64>> {
        self.dense.as_ref().map(|d| &d.basis[level])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn image(c: usize, h: usize, w: usize) -> Shape {
        Shape::Image {
            channels: c,
            height: h,
            width: w,
        }
    }

    fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn pools_a_2x2_block_to_twice_its_mean() {
        let c = build_cascade(image(1, 2, 2), 1, Backend::Pooling).unwrap();
        let out = c.downsample(1, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(out, vec![8.0]);
    }

    #[test]
    fn constant_image_pools_to_doubled_constant() {
        let c = build_cascade(image(1, 4, 4), 2, Backend::Pooling).unwrap();
        let out = c.downsample(1, &vec![3.0; 16]).unwrap();
        assert!(out.iter().all(|&v| v == 6.0));
    }

    #[test]
    fn upsample_spreads_half_the_value() {
        let c = build_cascade(image(1, 2, 2), 1, Backend::Pooling).unwrap();
        let out = c.upsample(1, &[8.0]).unwrap();
        assert_eq!(out, vec![4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn down_of_up_is_identity() {
        let mut rng = crate::stream_rng(11, 0);
        for backend in [Backend::Pooling, Backend::Dense] {
            let c = build_cascade(image(2, 8, 8), 2, backend).unwrap();
            for k in 1..=2 {
                let y = randn(&mut rng, c.dim(k));
                let round = c.downsample(k, &c.upsample(k, &y).unwrap()).unwrap();
                for (a, b) in y.iter().zip(&round) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn flat_dense_single_row_is_the_scaled_average() {
        let c = build_cascade(Shape::Flat { len: 4, group: 4 }, 1, Backend::Dense).unwrap();
        let d = c.down_matrix(1).unwrap();
        assert_eq!(d.nrows(), 1);
        let row: Vec<f64> = d.row(0).iter().copied().collect();
        for v in row {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
        let gram = (d * d.transpose())[(0, 0)];
        assert_abs_diff_eq!(gram, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_levels_is_a_single_space() {
        let c = build_cascade(image(1, 3, 5), 0, Backend::Pooling).unwrap();
        assert_eq!(c.levels(), 0);
        assert_eq!(c.dims(), &[15]);
        // The diagonal operator degenerates to a*I.
        let x = vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0, 1.0, 1.0, 2.0, -1.0, 0.0, 4.0, 5.0, -3.0, 2.5];
        let y = c.apply_diag_pair(0, 2.0, 99.0, &x).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(2.0 * xi, *yi);
        }
    }

    #[test]
    fn rejects_shapes_that_do_not_pool() {
        assert!(build_cascade(image(1, 6, 6), 2, Backend::Pooling).is_err());
        assert!(build_cascade(image(1, 2, 2), 2, Backend::Pooling).is_err());
        assert!(build_cascade(Shape::Flat { len: 6, group: 4 }, 1, Backend::Dense).is_err());
        assert!(build_cascade(Shape::Flat { len: 4, group: 1 }, 1, Backend::Dense).is_err());
        assert!(build_cascade(Shape::Flat { len: 8, group: 2 }, 1, Backend::Pooling).is_err());
    }

    #[test]
    fn diag_pair_identity_and_projection_cases() {
        let mut rng = crate::stream_rng(12, 0);
        let c = build_cascade(image(1, 4, 4), 1, Backend::Pooling).unwrap();
        let x = randn(&mut rng, 16);

        let same = c.apply_diag_pair(0, 1.0, 1.0, &x).unwrap();
        for (a, b) in x.iter().zip(&same) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }

        // Constants live entirely in the pooled subspace.
        let killed = c.apply_diag_pair(0, 1.0, 0.0, &vec![2.5; 16]).unwrap();
        for v in killed {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-13);
        }

        let projected = c.apply_diag_pair(0, 0.0, 1.0, &x).unwrap();
        let expect = c.upsample(1, &c.downsample(1, &x).unwrap()).unwrap();
        assert_eq!(projected, expect);
    }

    #[test]
    fn diag_pair_composition_multiplies_pointwise() {
        let mut rng = crate::stream_rng(13, 0);
        let c = build_cascade(image(1, 8, 8), 1, Backend::Pooling).unwrap();
        let x = randn(&mut rng, 64);
        let one = c
            .apply_diag_pair(0, 0.3, 1.7, &c.apply_diag_pair(0, -0.5, 0.25, &x).unwrap())
            .unwrap();
        let two = c.apply_diag_pair(0, 0.3 * -0.5, 1.7 * 0.25, &x).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn backends_agree_on_small_images() {
        let mut rng = crate::stream_rng(14, 0);
        let pool = build_cascade(image(1, 8, 8), 2, Backend::Pooling).unwrap();
        let dense = build_cascade(image(1, 8, 8), 2, Backend::Dense).unwrap();
        let x = randn(&mut rng, 64);
        let a = pool.downsample(1, &x).unwrap();
        let b = dense.downsample(1, &x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-9);
        }
        let pa = pool.apply_diag_pair(0, 0.2, 1.3, &x).unwrap();
        let da = dense.apply_diag_pair(0, 0.2, 1.3, &x).unwrap();
        for (p, q) in pa.iter().zip(&da) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-9);
        }
    }

    #[test]
    fn basis_path_matches_pooled_path() {
        let mut rng = crate::stream_rng(15, 0);
        let c = build_cascade(image(1, 4, 4), 2, Backend::Dense).unwrap();
        for level in 0..=2 {
            let x = randn(&mut rng, c.dim(level));
            let fast = c.apply_diag_pair(level, 0.37, 1.21, &x).unwrap();
            let slow = c.apply_diag_pair_via_basis(level, 0.37, 1.21, &x).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn basis_matrices_are_orthonormal() {
        let c = build_cascade(Shape::Flat { len: 8, group: 2 }, 3, Backend::Dense).unwrap();
        for level in 0..=3 {
            let u = c.basis_matrix(level).unwrap();
            let gram = u.transpose() * u;
            let defect = (&gram - DMatrix::identity(gram.nrows(), gram.ncols()))
                .abs()
                .max();
            assert!(defect < 1e-12, "level {level} defect {defect:.2e}");
        }
        // D_{k+1} kills the complement block of U_k.
        for level in 0..3 {
            let u = c.basis_matrix(level).unwrap();
            let d = c.down_matrix(level + 1).unwrap();
            let comp = u.columns(0, c.dim(level) - c.dim(level + 1)).into_owned();
            assert!((d * comp).abs().max() < 1e-12);
        }
    }
}
