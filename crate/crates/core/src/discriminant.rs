//! Client-specific two-class discriminant on top of the PCA stage.
//!
//! For a claimed client, every other enrolled subject is pooled into a
//! single impostor class. Within-class scatters are normalised by the total
//! sample count `N`; between-class scatters are the plain outer products of
//! the mean difference, so they have rank at most one. The column and row
//! Fisher directions are then composed with the PCA projectors into one
//! `q×m` row projector and one `n×d` column projector per client.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::imaging::FaceSample;
use crate::subspace::{fix_sign, pca_project, top_eigvecs_sym, PcaStage, SymMatrix};

/// Relative eigenvalue floor used for numerical rank.
pub const RANK_TOL: f64 = 1e-10;

/// The four two-class scatters for one client, plus the class means in the
/// stage-projected space.
#[derive(Debug, Clone)]
pub struct ScatterSet {
    pub sc_w: SymMatrix,
    pub sc_b: SymMatrix,
    pub sr_w: SymMatrix,
    pub sr_b: SymMatrix,
    pub m_c: DMatrix<f64>,
    pub m_i: DMatrix<f64>,
    pub n_client: usize,
    pub n_total: usize,
    pub n_classes: usize,
}

fn check_projected<M: Borrow<DMatrix<f64>>, S: AsRef<str>>(
    projected: &[(M, S)],
) -> Result<(usize, usize)> {
    let first = projected
        .first()
        .ok_or(Error::EmptyInput("no projected samples"))?;
    let shape = first.0.borrow().shape();
    for (m, _) in projected {
        if m.borrow().shape() != shape {
            return Err(Error::shape(shape, m.borrow().shape()));
        }
    }
    Ok(shape)
}

/// Two-class scatters computed literally from the labelled projected samples.
pub fn client_scatters<M: Borrow<DMatrix<f64>>, S: AsRef<str>>(
    projected: &[(M, S)],
    client_id: &str,
) -> Result<ScatterSet> {
    let (h, g) = check_projected(projected)?;
    let (client, impostor): (Vec<_>, Vec<_>) = projected
        .iter()
        .partition(|(_, label)| label.as_ref() == client_id);
    if client.is_empty() {
        return Err(Error::NoClientSamples(client_id.to_string()));
    }
    if impostor.is_empty() {
        return Err(Error::NoImpostorSamples(client_id.to_string()));
    }
    let mean = |set: &[&(M, S)]| {
        let mut acc = DMatrix::zeros(h, g);
        for (m, _) in set {
            acc += m.borrow();
        }
        acc / set.len() as f64
    };
    let m_c = mean(&client);
    let m_i = mean(&impostor);

    let mut sc_w = DMatrix::zeros(g, g);
    let mut sr_w = DMatrix::zeros(h, h);
    for (set, centre) in [(&client, &m_c), (&impostor, &m_i)] {
        for (m, _) in set.iter() {
            let d = m.borrow() - centre;
            sc_w.gemm_tr(1.0, &d, &d, 1.0);
            sr_w.gemm(1.0, &d, &d.transpose(), 1.0);
        }
    }
    let n_total = projected.len();
    let classes: BTreeSet<&str> = projected.iter().map(|(_, l)| l.as_ref()).collect();
    let diff = &m_c - &m_i;
    Ok(ScatterSet {
        sc_w: SymMatrix::symmetrize(sc_w / n_total as f64)?,
        sc_b: SymMatrix::symmetrize(diff.transpose() * &diff)?,
        sr_w: SymMatrix::symmetrize(sr_w / n_total as f64)?,
        sr_b: SymMatrix::symmetrize(&diff * diff.transpose())?,
        n_client: client.len(),
        n_total,
        n_classes: classes.len(),
        m_c,
        m_i,
    })
}

#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    sum: DMatrix<f64>,
    col_gram: DMatrix<f64>,
    row_gram: DMatrix<f64>,
}

impl Moments {
    fn zeros(h: usize, g: usize) -> Self {
        Self {
            count: 0,
            sum: DMatrix::zeros(h, g),
            col_gram: DMatrix::zeros(g, g),
            row_gram: DMatrix::zeros(h, h),
        }
    }

    fn add(&mut self, d: &DMatrix<f64>) {
        self.count += 1;
        self.sum += d;
        self.col_gram.gemm_tr(1.0, d, d, 1.0);
        self.row_gram.gemm(1.0, d, &d.transpose(), 1.0);
    }
}

/// Per-subject first and second moments of the projected training set.
///
/// Building every client's [`ScatterSet`] from these moments costs
/// `O(g³ + h³)` per client instead of a pass over all `N` samples. Samples
/// are centred on the global mean first, which keeps the moment
/// subtraction well conditioned.
#[derive(Debug, Clone)]
pub struct ScatterCache {
    centre: DMatrix<f64>,
    total: Moments,
    subjects: BTreeMap<String, Moments>,
}

impl ScatterCache {
    pub fn new<M: Borrow<DMatrix<f64>>, S: AsRef<str>>(projected: &[(M, S)]) -> Result<Self> {
        let (h, g) = check_projected(projected)?;
        let mut centre = DMatrix::zeros(h, g);
        for (m, _) in projected {
            centre += m.borrow();
        }
        centre /= projected.len() as f64;
        let mut total = Moments::zeros(h, g);
        let mut subjects = BTreeMap::new();
        for (m, label) in projected {
            let d = m.borrow() - &centre;
            total.add(&d);
            subjects
                .entry(label.as_ref().to_string())
                .or_insert_with(|| Moments::zeros(h, g))
                .add(&d);
        }
        Ok(Self {
            centre,
            total,
            subjects,
        })
    }

    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.subjects.keys().map(String::as_str)
    }

    pub fn client_scatters(&self, client_id: &str) -> Result<ScatterSet> {
        let client = self
            .subjects
            .get(client_id)
            .ok_or_else(|| Error::NoClientSamples(client_id.to_string()))?;
        let n_total = self.total.count;
        let n_imp = n_total - client.count;
        if n_imp == 0 {
            return Err(Error::NoImpostorSamples(client_id.to_string()));
        }
        let nc = client.count as f64;
        let ni = n_imp as f64;
        let mc = &client.sum / nc;
        let mi = (&self.total.sum - &client.sum) / ni;

        let imp_col = &self.total.col_gram - &client.col_gram;
        let imp_row = &self.total.row_gram - &client.row_gram;
        let sc_w =
            &client.col_gram - mc.transpose() * &mc * nc + imp_col - mi.transpose() * &mi * ni;
        let sr_w =
            &client.row_gram - &mc * mc.transpose() * nc + imp_row - &mi * mi.transpose() * ni;
        let diff = &mc - &mi;
        Ok(ScatterSet {
            sc_w: SymMatrix::symmetrize(sc_w / n_total as f64)?,
            sc_b: SymMatrix::symmetrize(diff.transpose() * &diff)?,
            sr_w: SymMatrix::symmetrize(sr_w / n_total as f64)?,
            sr_b: SymMatrix::symmetrize(&diff * diff.transpose())?,
            n_client: client.count,
            n_total,
            n_classes: self.subjects.len(),
            m_c: mc + &self.centre,
            m_i: mi + &self.centre,
        })
    }
}

/// Sample-count and rank diagnostics for the within-class scatters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub n_total: usize,
    pub n_classes: usize,
    pub g: usize,
    pub h: usize,
    /// `N >= D + g / min(h, g)`.
    pub col_condition: bool,
    /// `N >= D + h / min(h, g)`.
    pub row_condition: bool,
    /// `(N - D) * min(h, g)`, saturating at zero.
    pub rank_bound: usize,
    /// `(N - 2) * min(h, g)`: the bound for the pooled two-class scatter.
    pub two_class_rank_bound: usize,
    pub rank_sc_w: usize,
    pub rank_sr_w: usize,
}

impl Diagnosis {
    pub fn col_full_rank(&self) -> bool {
        self.rank_sc_w == self.g
    }

    pub fn row_full_rank(&self) -> bool {
        self.rank_sr_w == self.h
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} D={} g={} h={} col_condition={} row_condition={} rank(SC_W)={}/{} rank(SR_W)={}/{} rank_bound={}",
            self.n_total,
            self.n_classes,
            self.g,
            self.h,
            self.col_condition,
            self.row_condition,
            self.rank_sc_w,
            self.g,
            self.rank_sr_w,
            self.h,
            self.rank_bound
        )
    }
}

/// Sample-count nonsingularity condition plus measured ranks.
pub fn nonsingularity_check(s: &ScatterSet) -> Diagnosis {
    let g = s.sc_w.order();
    let h = s.sr_w.order();
    let min_hg = g.min(h);
    let n = s.n_total as f64;
    let d = s.n_classes as f64;
    Diagnosis {
        n_total: s.n_total,
        n_classes: s.n_classes,
        g,
        h,
        col_condition: n >= d + g as f64 / min_hg as f64,
        row_condition: n >= d + h as f64 / min_hg as f64,
        rank_bound: s.n_total.saturating_sub(s.n_classes) * min_hg,
        two_class_rank_bound: s.n_total.saturating_sub(2) * min_hg,
        rank_sc_w: s.sc_w.numerical_rank(RANK_TOL),
        rank_sr_w: s.sr_w.numerical_rank(RANK_TOL),
    }
}

/// Generalised eigenvectors of `(s_b, s_w)`.
#[derive(Debug, Clone)]
pub struct FisherDirections {
    /// `order × k`, unit-norm columns.
    pub vectors: DMatrix<f64>,
    /// Descending generalised eigenvalues.
    pub values: Vec<f64>,
    /// Returned directions whose eigenvalue is numerically zero.
    pub padded: usize,
}

/// `s_w + ridge · trace(s_w)/order · I`.
pub fn regularize(s_w: &SymMatrix, ridge: f64) -> DMatrix<f64> {
    let n = s_w.order();
    let shift = ridge * s_w.trace() / n as f64;
    s_w.as_matrix() + DMatrix::identity(n, n) * shift
}

/// Leading `k` solutions of `s_b v = λ s_w v`, by whitening with the
/// Cholesky factor of the ridge-regularised `s_w`.
pub fn fisher_directions(
    s_w: &SymMatrix,
    s_b: &SymMatrix,
    k: usize,
    ridge: f64,
) -> Result<FisherDirections> {
    let n = s_w.order();
    if s_b.order() != n {
        return Err(Error::shape((n, n), (s_b.order(), s_b.order())));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} discriminant directions of order {n}"
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} is negative")));
    }
    let chol =
        Cholesky::new(regularize(s_w, ridge)).ok_or(Error::SingularScatter { diagnosis: None })?;
    let l = chol.l();
    let left = l
        .solve_lower_triangular(s_b.as_matrix())
        .ok_or(Error::SingularScatter { diagnosis: None })?;
    let whitened = l
        .solve_lower_triangular(&left.transpose())
        .ok_or(Error::SingularScatter { diagnosis: None })?;
    let eig = top_eigvecs_sym(&SymMatrix::symmetrize(whitened)?, k)?;
    let mut vectors = l
        .transpose()
        .solve_upper_triangular(&eig.vectors)
        .ok_or(Error::SingularScatter { diagnosis: None })?;
    for mut col in vectors.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        fix_sign(col.as_mut_slice());
    }
    let floor = RANK_TOL * (1.0 + eig.values[0].abs());
    let padded = eig.values.iter().filter(|v| **v <= floor).count();
    Ok(FisherDirections {
        vectors,
        values: eig.values,
        padded,
    })
}

/// A client's composed discriminant template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientTemplate {
    pub client_id: String,
    pub q: usize,
    pub d: usize,
    /// `q×m` = `z_f · z_p`.
    #[serde(with = "codec::matrix")]
    pub z: DMatrix<f64>,
    /// `n×d` = `x_p · x_f`.
    #[serde(with = "codec::matrix")]
    pub x: DMatrix<f64>,
    /// `q×h` row Fisher directions.
    #[serde(with = "codec::matrix")]
    pub z_f: DMatrix<f64>,
    /// `g×d` column Fisher directions.
    #[serde(with = "codec::matrix")]
    pub x_f: DMatrix<f64>,
    /// Projected client mean, `q×d`.
    #[serde(with = "codec::matrix")]
    pub m_c: DMatrix<f64>,
    /// Projected impostor mean, `q×d`.
    #[serde(with = "codec::matrix")]
    pub m_i: DMatrix<f64>,
    #[serde(with = "codec::vector")]
    pub col_eigvals: Vec<f64>,
    #[serde(with = "codec::vector")]
    pub row_eigvals: Vec<f64>,
}

impl ClientTemplate {
    /// `z · a · x`.
    pub fn project(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.shape() != (self.z.ncols(), self.x.nrows()) {
            return Err(Error::shape((self.z.ncols(), self.x.nrows()), a.shape()));
        }
        Ok(&self.z * a * &self.x)
    }

    /// Dimension checks against the shared stage.
    pub fn validate(&self, stage: &PcaStage) -> Result<()> {
        let expect = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::ModelFormat(format!(
                    "client {}: {what} is {got:?}, expected {want:?}",
                    self.client_id
                )))
            }
        };
        if self.q == 0 || self.q > stage.h || self.d == 0 || self.d > stage.g {
            return Err(Error::ModelFormat(format!(
                "client {}: q={} d={} exceed stage h={} g={}",
                self.client_id, self.q, self.d, stage.h, stage.g
            )));
        }
        expect("z", self.z.shape(), (self.q, stage.m))?;
        expect("x", self.x.shape(), (stage.n, self.d))?;
        expect("z_f", self.z_f.shape(), (self.q, stage.h))?;
        expect("x_f", self.x_f.shape(), (stage.g, self.d))?;
        expect("m_c", self.m_c.shape(), (self.q, self.d))?;
        expect("m_i", self.m_i.shape(), (self.q, self.d))?;
        if self.col_eigvals.len() != self.d || self.row_eigvals.len() != self.q {
            return Err(Error::ModelFormat(format!(
                "client {}: eigenvalue counts disagree with q, d",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Template dimensions and regularisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateParams {
    pub q: usize,
    pub d: usize,
    pub ridge: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            q: 1,
            d: 1,
            ridge: 1e-6,
        }
    }
}

/// Composes a template from already computed scatters.
pub fn template_from_scatters(
    stage: &PcaStage,
    scatters: &ScatterSet,
    client_id: &str,
    params: TemplateParams,
) -> Result<ClientTemplate> {
    let with_diagnosis = |e: Error| match e {
        Error::SingularScatter { .. } => Error::SingularScatter {
            diagnosis: Some(Box::new(nonsingularity_check(scatters))),
        },
        e => e,
    };
    let col = fisher_directions(&scatters.sc_w, &scatters.sc_b, params.d, params.ridge)
        .map_err(with_diagnosis)?;
    let row = fisher_directions(&scatters.sr_w, &scatters.sr_b, params.q, params.ridge)
        .map_err(with_diagnosis)?;
    if col.padded + row.padded > 0 {
        log::warn!(
            "client {client_id}: {} column and {} row directions carry near-zero discriminant power",
            col.padded,
            row.padded
        );
    }
    let x_f = col.vectors;
    let z_f = row.vectors.transpose();
    let m_c = &z_f * &scatters.m_c * &x_f;
    let m_i = &z_f * &scatters.m_i * &x_f;
    if (&m_c - &m_i).norm() <= 1e-12 {
        return Err(Error::DegenerateClient(client_id.to_string()));
    }
    Ok(ClientTemplate {
        client_id: client_id.to_string(),
        q: params.q,
        d: params.d,
        z: &z_f * &stage.z_p,
        x: &stage.x_p * &x_f,
        z_f,
        x_f,
        m_c,
        m_i,
        col_eigvals: col.values,
        row_eigvals: row.values,
    })
}

/// Builds one client's template from labelled training faces (label =
/// `subject_id`).
pub fn build_client_template<F: Borrow<FaceSample>>(
    stage: &PcaStage,
    samples: &[F],
    client_id: &str,
    params: TemplateParams,
) -> Result<ClientTemplate> {
    let projected = samples
        .iter()
        .map(|s| {
            let s = s.borrow();
            Ok((pca_project(stage, &s.grey)?, s.subject_id.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    let scatters = client_scatters(&projected, client_id)?;
    template_from_scatters(stage, &scatters, client_id, params)
}
