//! Shared two-directional PCA stage.
//!
//! Both scatter matrices are built from the raw image matrices: the column
//! scatter `(1/N) Σ (A_i - Ā)ᵀ(A_i - Ā)` is `n×n`, the row scatter
//! `(1/N) Σ (A_i - Ā)(A_i - Ā)ᵀ` is `m×m`. Their leading eigenvectors give a
//! column projector `x_p` (`n×g`) and a row projector `z_p` (`h×m`), and a
//! sample is reduced to `z_p · A · x_p`.

mod jacobi;

use std::borrow::Borrow;
use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};

/// Symmetric, finite square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    const REL_TOL: f64 = 1e-12;

    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape((m.nrows(), m.nrows()), m.shape()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let asym = (&m - m.transpose()).amax();
        if asym > Self::REL_TOL * m.norm() {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self(m))
    }

    /// Symmetrises `(m + mᵀ)/2` before wrapping.
    pub fn symmetrize(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape((m.nrows(), m.nrows()), m.shape()));
        }
        let s = (&m + m.transpose()) * 0.5;
        Self::new(s)
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Number of eigenvalues above `rel_tol * trace`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let trace = self.trace();
        if trace <= 0.0 {
            return 0;
        }
        let (values, _) = jacobi::eigen(&self.0);
        values.iter().filter(|&&v| v > rel_tol * trace).count()
    }
}

/// Leading eigenpairs of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// `order × k`, orthonormal columns.
    pub vectors: DMatrix<f64>,
    /// Descending.
    pub values: Vec<f64>,
}

/// Top-`k` eigenpairs, values descending. Each eigenvector is signed so its
/// largest-magnitude entry is positive.
pub fn top_eigvecs_sym(s: &SymMatrix, k: usize) -> Result<EigenPairs> {
    let n = s.order();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenpairs of an order-{n} matrix"
        )));
    }
    let (values, vectors) = jacobi::eigen(s.as_matrix());
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep Jacobi's column order
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut out = DMatrix::zeros(n, k);
    let mut out_values = Vec::with_capacity(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        let mut col = vectors.column(src).clone_owned();
        fix_sign(col.as_mut_slice());
        out.set_column(j, &col);
        out_values.push(values[src]);
    }
    Ok(EigenPairs {
        vectors: out,
        values: out_values,
    })
}

pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn check_shapes<M: Borrow<DMatrix<f64>>>(samples: &[M]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::EmptyInput("no samples"))?;
    let shape = first.borrow().shape();
    for s in samples {
        if s.borrow().shape() != shape {
            return Err(Error::shape(shape, s.borrow().shape()));
        }
    }
    Ok(shape)
}

/// Elementwise mean of equally shaped matrices.
pub fn mean_matrix<M: Borrow<DMatrix<f64>>>(samples: &[M]) -> Result<DMatrix<f64>> {
    let (m, n) = check_shapes(samples)?;
    let mut acc = DMatrix::zeros(m, n);
    for s in samples {
        acc += s.borrow();
    }
    Ok(acc / samples.len() as f64)
}

/// `(1/N) Σ (A_i - Ā)ᵀ(A_i - Ā)`, order `n`.
pub fn column_total_scatter<M: Borrow<DMatrix<f64>>>(samples: &[M]) -> Result<SymMatrix> {
    let mean = mean_matrix(samples)?;
    let n = mean.ncols();
    let mut acc = DMatrix::zeros(n, n);
    for s in samples {
        let d = s.borrow() - &mean;
        acc.gemm_tr(1.0, &d, &d, 1.0);
    }
    SymMatrix::symmetrize(acc / samples.len() as f64)
}

/// `(1/N) Σ (A_i - Ā)(A_i - Ā)ᵀ`, order `m`.
pub fn row_total_scatter<M: Borrow<DMatrix<f64>>>(samples: &[M]) -> Result<SymMatrix> {
    let mean = mean_matrix(samples)?;
    let m = mean.nrows();
    let mut acc = DMatrix::zeros(m, m);
    for s in samples {
        let d = s.borrow() - &mean;
        acc.gemm(1.0, &d, &d.transpose(), 1.0);
    }
    SymMatrix::symmetrize(acc / samples.len() as f64)
}

/// How many leading eigenvectors to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Fixed(usize),
    /// Smallest count whose eigenvalues reach this fraction of the trace.
    Energy(f64),
}

impl Default for Components {
    fn default() -> Self {
        Components::Energy(0.95)
    }
}

impl Components {
    /// Resolves against descending eigenvalues of an order-`values.len()` matrix.
    pub fn resolve(&self, values: &[f64]) -> Result<usize> {
        let order = values.len();
        match *self {
            Components::Fixed(k) if k >= 1 && k <= order => Ok(k),
            Components::Fixed(k) => Err(Error::InvalidArgument(format!(
                "{k} components requested, dimension is {order}"
            ))),
            Components::Energy(f) if f > 0.0 && f <= 1.0 => {
                let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
                if total <= 0.0 {
                    return Ok(1);
                }
                let mut acc = 0.0;
                for (i, v) in values.iter().enumerate() {
                    acc += v.max(0.0);
                    if acc >= f * total {
                        return Ok(i + 1);
                    }
                }
                Ok(order)
            }
            Components::Energy(f) => Err(Error::InvalidArgument(format!(
                "energy fraction {f} outside (0, 1]"
            ))),
        }
    }
}

/// Fitted first-stage projectors shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaStage {
    pub m: usize,
    pub n: usize,
    pub g: usize,
    pub h: usize,
    /// `n×g`, orthonormal columns.
    #[serde(with = "codec::matrix")]
    pub x_p: DMatrix<f64>,
    /// `h×m`, orthonormal rows.
    #[serde(with = "codec::matrix")]
    pub z_p: DMatrix<f64>,
    /// Grand mean of the training samples, `m×n`.
    #[serde(with = "codec::matrix")]
    pub mean: DMatrix<f64>,
    #[serde(with = "codec::vector")]
    pub eigvals_col: Vec<f64>,
    #[serde(with = "codec::vector")]
    pub eigvals_row: Vec<f64>,
}

impl PcaStage {
    /// Dimension and orthonormality checks, used when loading a model.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::ModelFormat(what));
        if self.g == 0 || self.g > self.n || self.h == 0 || self.h > self.m {
            return bad(format!(
                "pca stage g={} h={} out of range for {}x{}",
                self.g, self.h, self.m, self.n
            ));
        }
        if self.x_p.shape() != (self.n, self.g) {
            return bad(format!(
                "x_p is {:?}, expected {:?}",
                self.x_p.shape(),
                (self.n, self.g)
            ));
        }
        if self.z_p.shape() != (self.h, self.m) {
            return bad(format!(
                "z_p is {:?}, expected {:?}",
                self.z_p.shape(),
                (self.h, self.m)
            ));
        }
        if self.mean.shape() != (self.m, self.n) {
            return bad(format!(
                "mean is {:?}, expected {:?}",
                self.mean.shape(),
                (self.m, self.n)
            ));
        }
        if self.eigvals_col.len() != self.g || self.eigvals_row.len() != self.h {
            return bad("eigenvalue counts disagree with g, h".into());
        }
        let xtx = self.x_p.transpose() * &self.x_p;
        let zzt = &self.z_p * self.z_p.transpose();
        if (xtx - DMatrix::identity(self.g, self.g)).amax() > 1e-8
            || (zzt - DMatrix::identity(self.h, self.h)).amax() > 1e-8
        {
            return bad("pca projectors are not orthonormal".into());
        }
        Ok(())
    }
}

fn lexicographic(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Fits the first stage on training samples.
///
/// Samples are accumulated in a canonical (lexicographic) order, so any
/// permutation of the input yields a bit-identical stage.
pub fn fit_pca_stage<M: Borrow<DMatrix<f64>>>(
    samples: &[M],
    g: Components,
    h: Components,
) -> Result<PcaStage> {
    let (m, n) = check_shapes(samples)?;
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(
            "pca stage needs at least 2 samples".into(),
        ));
    }
    let mut sorted: Vec<&DMatrix<f64>> = samples.iter().map(Borrow::borrow).collect();
    sorted.sort_by(|a, b| lexicographic(a, b));

    let sc_t = column_total_scatter(&sorted)?;
    let sr_t = row_total_scatter(&sorted)?;
    let col = top_eigvecs_sym(&sc_t, n)?;
    let row = top_eigvecs_sym(&sr_t, m)?;
    let clamp = |v: &[f64]| v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let col_values = clamp(&col.values);
    let row_values = clamp(&row.values);
    let g = g.resolve(&col_values)?;
    let h = h.resolve(&row_values)?;

    Ok(PcaStage {
        m,
        n,
        g,
        h,
        x_p: col.vectors.columns(0, g).clone_owned(),
        z_p: row.vectors.columns(0, h).transpose(),
        mean: mean_matrix(&sorted)?,
        eigvals_col: col_values[..g].to_vec(),
        eigvals_row: row_values[..h].to_vec(),
    })
}

/// `z_p · a · x_p`, no centring.
pub fn pca_project(stage: &PcaStage, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != (stage.m, stage.n) {
        return Err(Error::shape((stage.m, stage.n), a.shape()));
    }
    Ok(&stage.z_p * a * &stage.x_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(rng: &mut impl Rng, count: usize, m: usize, n: usize) -> Vec<DMatrix<f64>> {
        (0..count)
            .map(|_| DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identical_samples_have_zero_scatter() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = vec![a.clone(), a.clone(), a];
        assert_eq!(
            column_total_scatter(&s).unwrap().as_matrix(),
            &DMatrix::zeros(3, 3)
        );
        assert_eq!(
            row_total_scatter(&s).unwrap().as_matrix(),
            &DMatrix::zeros(2, 2)
        );
    }

    #[test]
    fn hand_evaluated_pair() {
        let s = vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]),
        ];
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(column_total_scatter(&s).unwrap().as_matrix(), &expected);
        assert_eq!(row_total_scatter(&s).unwrap().as_matrix(), &expected);
    }

    #[test]
    fn scatter_errors() {
        let empty: Vec<DMatrix<f64>> = vec![];
        assert!(matches!(
            column_total_scatter(&empty),
            Err(Error::EmptyInput(_))
        ));
        let mixed = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)];
        assert!(matches!(
            row_total_scatter(&mixed),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eigen_examples() {
        let id = SymMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let e = top_eigvecs_sym(&id, 2).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        let vtv = e.vectors.transpose() * &e.vectors;
        assert_abs_diff_eq!((vtv - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-12);

        let d = SymMatrix::new(DMatrix::from_diagonal(&nalgebra::dvector![3.0, 1.0])).unwrap();
        let e = top_eigvecs_sym(&d, 1).unwrap();
        assert_eq!(e.values, vec![3.0]);
        assert_eq!(e.vectors.column(0).as_slice(), &[1.0, 0.0]);

        let s = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let e = top_eigvecs_sym(&s, 2).unwrap();
        assert_abs_diff_eq!(e.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], 1.0, epsilon = 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(e.vectors[(0, 0)], r, epsilon = 1e-12);
        assert_abs_diff_eq!(e.vectors[(1, 0)], r, epsilon = 1e-12);
        // (1,-1)/√2 up to the largest-entry-positive sign rule
        assert_abs_diff_eq!(e.vectors[(0, 1)].abs(), r, epsilon = 1e-12);
        assert_abs_diff_eq!(e.vectors[(0, 1)] + e.vectors[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_argument_errors() {
        let s = SymMatrix::new(DMatrix::identity(3, 3)).unwrap();
        assert!(top_eigvecs_sym(&s, 0).is_err());
        assert!(top_eigvecs_sym(&s, 4).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(SymMatrix::new(asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn full_rank_stage_reconstructs_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_samples(&mut rng, 6, 4, 3);
        let stage = fit_pca_stage(&s, Components::Fixed(3), Components::Fixed(4)).unwrap();
        stage.validate().unwrap();
        for a in &s {
            let w = pca_project(&stage, &(a - &stage.mean)).unwrap();
            let back = stage.z_p.transpose() * w * stage.x_p.transpose();
            assert!((back - (a - &stage.mean)).amax() < 1e-8);
        }
    }

    #[test]
    fn rank_one_deviations_have_one_column_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = DMatrix::from_fn(5, 4, |_, _| rng.random_range(0.0..1.0));
        let u = nalgebra::DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let v = nalgebra::DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let uv = &u * v.transpose();
        let s: Vec<_> = [1.0, -1.0, 0.5, -0.5, 2.0, -2.0]
            .iter()
            .map(|c| &base + &uv * *c)
            .collect();
        let stage = fit_pca_stage(&s, Components::Fixed(4), Components::Fixed(5)).unwrap();
        assert!(stage.eigvals_col[0] > 1e-3);
        assert!(stage.eigvals_col[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_samples_give_zero_eigenvalues() {
        let s = vec![DMatrix::<f64>::zeros(3, 3); 4];
        let stage = fit_pca_stage(&s, Components::Fixed(2), Components::default()).unwrap();
        assert!(stage
            .eigvals_col
            .iter()
            .chain(&stage.eigvals_row)
            .all(|v| *v == 0.0));
        stage.validate().unwrap();
    }

    #[test]
    fn stage_argument_errors() {
        let s = vec![DMatrix::<f64>::zeros(3, 3); 4];
        assert!(fit_pca_stage(&s, Components::Fixed(4), Components::Fixed(1)).is_err());
        assert!(fit_pca_stage(&s[..1], Components::Fixed(1), Components::Fixed(1)).is_err());
    }

    #[test]
    fn project_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_samples(&mut rng, 5, 4, 3);
        let mut stage = fit_pca_stage(&s, Components::Fixed(3), Components::Fixed(4)).unwrap();
        stage.x_p = DMatrix::identity(3, 3);
        stage.z_p = DMatrix::identity(4, 4);
        assert_eq!(pca_project(&stage, &s[0]).unwrap(), s[0]);
        assert_eq!(
            pca_project(&stage, &DMatrix::zeros(4, 3)).unwrap(),
            DMatrix::zeros(4, 3)
        );
        assert!(pca_project(&stage, &DMatrix::zeros(3, 4)).is_err());

        // hand-built orthonormal projectors against a scalar-loop triple product
        let c = (0.3f64).cos();
        let sn = (0.3f64).sin();
        stage.z_p = DMatrix::from_row_slice(2, 4, &[c, sn, 0.0, 0.0, 0.0, 0.0, c, -sn]);
        stage.x_p = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
        stage.g = 2;
        stage.h = 2;
        let a = &s[1];
        let got = pca_project(&stage, a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut sum = 0.0;
                for r in 0..4 {
                    for k in 0..3 {
                        sum += stage.z_p[(i, r)] * a[(r, k)] * stage.x_p[(k, j)];
                    }
                }
                assert_abs_diff_eq!(got[(i, j)], sum, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn energy_resolution() {
        let v = [6.0, 3.0, 0.5, 0.5];
        assert_eq!(Components::Energy(0.9).resolve(&v).unwrap(), 2);
        assert_eq!(Components::Energy(0.95).resolve(&v).unwrap(), 3);
        assert_eq!(Components::Energy(1.0).resolve(&v).unwrap(), 4);
        assert_eq!(Components::Energy(0.95).resolve(&[0.0, 0.0]).unwrap(), 1);
        assert!(Components::Energy(1.5).resolve(&v).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn stage_invariants(seed in any::<u64>(), count in 2usize..8, m in 2usize..7, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_samples(&mut rng, count, m, n);
            let sc = column_total_scatter(&s).unwrap();
            let sr = row_total_scatter(&s).unwrap();
            // trace identity
            let frob: f64 = s.iter().map(|a| (a - mean_matrix(&s).unwrap()).norm_squared()).sum::<f64>() / count as f64;
            prop_assert!((sc.trace() - frob).abs() <= 1e-10 * (1.0 + frob));
            prop_assert!((sr.trace() - frob).abs() <= 1e-10 * (1.0 + frob));
            // PSD
            let all = top_eigvecs_sym(&sc, n).unwrap();
            prop_assert!(all.values.iter().all(|v| *v >= -1e-10));

            let stage = fit_pca_stage(&s, Components::Energy(0.9), Components::Energy(0.9)).unwrap();
            prop_assert!(stage.validate().is_ok());
            prop_assert!(stage.eigvals_col.windows(2).all(|w| w[0] >= w[1]));
            // energy capture equals the projected trace
            let captured: f64 = stage.eigvals_col.iter().sum();
            let projected = (stage.x_p.transpose() * sc.as_matrix() * &stage.x_p).trace();
            prop_assert!((captured - projected).abs() <= 1e-6 * (1.0 + captured));
            // contraction
            for a in &s {
                let d = a - &stage.mean;
                prop_assert!(pca_project(&stage, &d).unwrap().norm() <= d.norm() + 1e-12);
            }
            // permutation determinism
            let mut rev = s.clone();
            rev.reverse();
            let again = fit_pca_stage(&rev, Components::Energy(0.9), Components::Energy(0.9)).unwrap();
            prop_assert_eq!(stage, again);
        }
    }
}
