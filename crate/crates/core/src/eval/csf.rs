//! Client-specific Fisherfaces baseline: vectorised grey images, a global
//! PCA, and one Fisher direction per client in the reduced space.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::calibrate_eer;
use crate::discriminant::{regularize, ScatterCache};
use crate::error::{Error, Result};
use crate::imaging::FaceSample;
use crate::model::{canonical_order, ThresholdMode};
use crate::subspace::{fix_sign, Components, SymMatrix};

/// Eigenvalues below this fraction of the largest are dropped.
const EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsfParams {
    pub components: Components,
    pub ridge: f64,
}

impl Default for CsfParams {
    fn default() -> Self {
        Self {
            components: Components::default(),
            ridge: 1e-6,
        }
    }
}

/// PCA over vectorised images.
#[derive(Debug, Clone)]
pub struct VectorPca {
    pub mean: DVector<f64>,
    /// `mn × p`, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub values: Vec<f64>,
}

fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

impl VectorPca {
    /// Fits on `samples` using the `N × N` Gram matrix.
    pub fn fit<M: Borrow<DMatrix<f64>>>(samples: &[M], components: Components) -> Result<Self> {
        let first = samples
            .first()
            .ok_or(Error::EmptyInput("no samples"))?
            .borrow();
        let dim = first.len();
        let n = samples.len();
        let mut x = DMatrix::zeros(n, dim);
        for (i, s) in samples.iter().enumerate() {
            let s = s.borrow();
            if s.shape() != first.shape() {
                return Err(Error::shape(first.shape(), s.shape()));
            }
            x.row_mut(i).copy_from_slice(s.as_slice());
        }
        let mean = DVector::from_iterator(dim, x.column_iter().map(|c| c.mean()));
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
        let gram = (&x * x.transpose()) / n as f64;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let top = values.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return Err(Error::InvalidArgument(
                "training images are all identical".into(),
            ));
        }
        let usable = values.iter().take_while(|&&v| v > EIG_FLOOR * top).count();
        let p = components.resolve(&values)?.min(usable);
        let mut basis = DMatrix::zeros(dim, p);
        for k in 0..p {
            let v = eig.eigenvectors.column(order[k]);
            let mut u = x.tr_mul(&v) / (n as f64 * values[k]).sqrt();
            u /= u.norm();
            fix_sign(u.as_mut_slice());
            basis.set_column(k, &u);
        }
        Ok(Self {
            mean,
            basis,
            values: values[..p].to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, image: &DMatrix<f64>) -> Result<DVector<f64>> {
        if image.len() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "image has {} pixels, the baseline expects {}",
                image.len(),
                self.mean.len()
            )));
        }
        Ok(self.basis.tr_mul(&(vectorize(image) - &self.mean)))
    }
}

/// `a = S_w⁻¹ (μ_c − μ_i)`, unit length, with `S_w` ridge-regularised.
pub fn fisher_vector(
    s_w: &SymMatrix,
    mu_c: &DVector<f64>,
    mu_i: &DVector<f64>,
    ridge: f64,
) -> Result<DVector<f64>> {
    let diff = mu_c - mu_i;
    if diff.norm() <= 1e-12 {
        return Err(Error::InvalidArgument("class means coincide".into()));
    }
    let chol =
        Cholesky::new(regularize(s_w, ridge)).ok_or(Error::SingularScatter { diagnosis: None })?;
    let mut a = chol.solve(&diff);
    let norm = a.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::SingularScatter { diagnosis: None });
    }
    a /= norm;
    fix_sign(a.as_mut_slice());
    Ok(a)
}

/// One client's scalar projection and projected class means.
#[derive(Debug, Clone)]
pub struct CsfClient {
    pub client_id: String,
    pub direction: DVector<f64>,
    pub m_c: f64,
    pub m_i: f64,
}

impl CsfClient {
    /// `|y − m_i| − |y − m_c|` for the reduced probe `z`.
    pub fn score(&self, z: &DVector<f64>) -> f64 {
        let y = self.direction.dot(z);
        (y - self.m_i).abs() - (y - self.m_c).abs()
    }
}

#[derive(Debug, Clone)]
pub struct CsfModel {
    pub pca: VectorPca,
    pub clients: BTreeMap<String, CsfClient>,
    pub thresholds: BTreeMap<String, f64>,
}

fn build_client(cache: &ScatterCache, id: &str, ridge: f64) -> Result<CsfClient> {
    let s = cache.client_scatters(id)?;
    let mu_c = s.m_c.column(0).into_owned();
    let mu_i = s.m_i.column(0).into_owned();
    let direction = fisher_vector(&s.sr_w, &mu_c, &mu_i, ridge).map_err(|e| match e {
        Error::InvalidArgument(_) => Error::DegenerateClient(id.to_string()),
        e => e,
    })?;
    Ok(CsfClient {
        client_id: id.to_string(),
        m_c: direction.dot(&mu_c),
        m_i: direction.dot(&mu_i),
        direction,
    })
}

fn fit_reduced<F: Borrow<FaceSample>>(
    samples: &[F],
    params: &CsfParams,
) -> Result<(VectorPca, ScatterCache)> {
    let samples = canonical_order(samples);
    let greys: Vec<&DMatrix<f64>> = samples.iter().map(|s| &s.grey).collect();
    let pca = VectorPca::fit(&greys, params.components)?;
    let reduced = samples
        .iter()
        .map(|s| {
            let z = pca.project(&s.grey)?;
            Ok((
                DMatrix::from_column_slice(z.len(), 1, z.as_slice()),
                s.subject_id.as_str(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let cache = ScatterCache::new(&reduced)?;
    Ok((pca, cache))
}

/// Baseline model for a single client; every other subject in `samples`
/// forms the impostor class.
pub fn csf_baseline<F: Borrow<FaceSample>>(
    samples: &[F],
    client_id: &str,
    params: &CsfParams,
) -> Result<CsfModel> {
    let (pca, cache) = fit_reduced(samples, params)?;
    let client = build_client(&cache, client_id, params.ridge)?;
    Ok(CsfModel {
        pca,
        clients: BTreeMap::from([(client_id.to_string(), client)]),
        thresholds: BTreeMap::new(),
    })
}

/// Baseline model for every subject in `samples`.
pub fn train_csf<F: Borrow<FaceSample>>(samples: &[F], params: &CsfParams) -> Result<CsfModel> {
    let (pca, cache) = fit_reduced(samples, params)?;
    let ids: Vec<&str> = cache.subjects().collect();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least two clients".into(),
        ));
    }
    let clients = ids
        .par_iter()
        .map(|&id| Ok((id.to_string(), build_client(&cache, id, params.ridge)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(CsfModel {
        pca,
        clients,
        thresholds: BTreeMap::new(),
    })
}

impl CsfModel {
    pub fn score(&self, claim: &str, probe: &FaceSample) -> Result<f64> {
        let client = self
            .clients
            .get(claim)
            .ok_or_else(|| Error::UnknownClient(claim.to_string()))?;
        Ok(client.score(&self.pca.project(&probe.grey)?))
    }

    /// EER thresholds from evaluation claims; impostor probes claim every
    /// client.
    pub fn calibrate(
        &mut self,
        genuine: &[(&str, &FaceSample)],
        impostors: &[&FaceSample],
        mode: ThresholdMode,
    ) -> Result<()> {
        let mut trials: Vec<(&str, bool, f64)> = genuine
            .par_iter()
            .map(|&(c, p)| Ok((c, true, self.score(c, p)?)))
            .collect::<Result<_>>()?;
        let reduced = impostors
            .par_iter()
            .map(|p| self.pca.project(&p.grey))
            .collect::<Result<Vec<_>>>()?;
        for z in &reduced {
            for (id, c) in &self.clients {
                trials.push((id, false, c.score(z)));
            }
        }
        let split = |keep: &dyn Fn(&str) -> bool| {
            let mut gen = vec![];
            let mut imp = vec![];
            for &(_, g, s) in trials.iter().filter(|t| keep(t.0)) {
                if g {
                    gen.push(s)
                } else {
                    imp.push(s)
                }
            }
            (gen, imp)
        };
        let (gen, imp) = split(&|_| true);
        let global = calibrate_eer(&gen, &imp)?.threshold;
        let mut thresholds = BTreeMap::new();
        for id in self.clients.keys() {
            let t = match mode {
                ThresholdMode::Global => global,
                ThresholdMode::PerClient => {
                    let (gen, imp) = split(&|c| c == id);
                    calibrate_eer(&gen, &imp)?.threshold
                }
            };
            thresholds.insert(id.clone(), t);
        }
        self.thresholds = thresholds;
        Ok(())
    }

    /// `(accept, score)` for one claim.
    pub fn verify(&self, claim: &str, probe: &FaceSample) -> Result<(bool, f64)> {
        let score = self.score(claim, probe)?;
        let t = self
            .thresholds
            .get(claim)
            .ok_or_else(|| Error::InvalidArgument("baseline model is not calibrated".into()))?;
        Ok((score > *t, score))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn one_dimensional_direction() {
        let s_w = SymMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let a = fisher_vector(
            &s_w,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, -1.0),
            0.0,
        )
        .unwrap();
        assert_eq!(a[0], 1.0);
        let c = CsfClient {
            client_id: "c".into(),
            m_c: a[0],
            m_i: -a[0],
            direction: a,
        };
        for y in [0.5, 1.0, 2.0] {
            assert!(c.score(&DVector::from_element(1, y)) > 0.0);
        }
    }

    fn face(v: &[f64], id: &str) -> FaceSample {
        let grey = DMatrix::from_row_slice(2, 2, v);
        let z = DMatrix::from_element(2, 2, 128.0);
        FaceSample::new(grey, z.clone(), z)
            .unwrap()
            .with_identity(id, 1)
    }

    #[test]
    fn identical_means_are_degenerate() {
        let samples = [
            face(&[1.0, 0.0, 0.0, 0.0], "c"),
            face(&[-1.0, 0.0, 0.0, 0.0], "c"),
            face(&[0.0, 1.0, 0.0, 0.0], "i"),
            face(&[0.0, -1.0, 0.0, 0.0], "i"),
        ];
        let err = csf_baseline(&samples, "c", &CsfParams::default()).unwrap_err();
        assert!(
            matches!(&err, Error::DegenerateClient(id) if id == "c"),
            "{err}"
        );
    }

    #[test]
    fn basis_is_orthonormal_and_separates_clients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut samples = vec![];
        for (k, id) in ["a", "b", "c"].into_iter().enumerate() {
            for _ in 0..5 {
                let v: Vec<f64> = (0..12)
                    .map(|i| if i % 3 == k { 1.0 } else { 0.0 } + noise.sample(&mut rng))
                    .collect();
                let grey = DMatrix::from_row_slice(3, 4, &v);
                let z = DMatrix::from_element(3, 4, 128.0);
                samples.push(
                    FaceSample::new(grey, z.clone(), z)
                        .unwrap()
                        .with_identity(id, 1),
                );
            }
        }
        let model = train_csf(&samples, &CsfParams::default()).unwrap();
        let gram = model.pca.basis.tr_mul(&model.pca.basis);
        assert!((gram - DMatrix::identity(model.pca.dim(), model.pca.dim())).norm() < 1e-10);
        for s in &samples {
            for id in model.clients.keys() {
                let score = model.score(id, s).unwrap();
                assert_eq!(score > 0.0, *id == s.subject_id, "{id} vs {}", s.subject_id);
            }
        }
        let single = csf_baseline(&samples, "b", &CsfParams::default()).unwrap();
        assert_eq!(single.clients["b"].direction, model.clients["b"].direction);
    }
}
