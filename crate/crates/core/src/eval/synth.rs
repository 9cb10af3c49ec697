//! Seeded synthetic face datasets.
//!
//! Each subject gets a grey prototype made of a few rank-1 terms with
//! geometrically decaying weight on top of a shared face template, and its
//! own skin chroma. Every image adds
//! illumination ramps, random rank-1 nuisance and pixel noise. Images are
//! written at the crop size with the eyes annotated on the canonical
//! targets, so alignment is the identity.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compare::LoadedPartition;
use super::manifest::{DatasetManifest, ManifestRecord, Role};
use super::partition::{partition, ProtocolConfig};
use crate::error::{Error, Result};
use crate::imaging::{align_and_crop, ycbcr_to_rgb, FaceSample, GeometryConfig, RawImage};

/// Samples per client role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleCounts {
    pub train: usize,
    pub eval: usize,
    pub test: usize,
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.train + self.eval + self.test
    }
}

impl Default for RoleCounts {
    fn default() -> Self {
        Self {
            train: 8,
            eval: 4,
            test: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub seed: u64,
    pub n_clients: usize,
    pub samples_per_client: RoleCounts,
    /// Impostor subjects; the first half (rounded up) are evaluation
    /// impostors, the rest test impostors.
    pub n_impostors: usize,
    pub samples_per_impostor: usize,
    pub geometry: GeometryConfig,
    /// Amplitude of the subject-specific grey structure (luma units, `[0,1]`).
    pub grey_separation: f64,
    /// Standard deviation of the per-subject Cr and Cb means (8-bit units).
    pub chroma_separation: f64,
    /// Amplitude of the per-image grey nuisance (luma units).
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clients: 20,
            samples_per_client: RoleCounts::default(),
            n_impostors: 10,
            samples_per_impostor: 4,
            geometry: GeometryConfig::default(),
            grey_separation: 0.05,
            chroma_separation: 10.0,
            noise: 0.04,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let c = &self.samples_per_client;
        if self.n_clients < 2 || c.train == 0 || c.eval == 0 || c.test == 0 {
            return Err(Error::Config(
                "synthetic data needs >= 2 clients and >= 1 sample per client role".into(),
            ));
        }
        if self.n_impostors < 2 || self.samples_per_impostor == 0 {
            return Err(Error::Config(
                "synthetic data needs >= 2 impostor subjects with >= 1 sample each".into(),
            ));
        }
        for (name, v) in [
            ("grey_separation", self.grey_separation),
            ("chroma_separation", self.chroma_separation),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Generated images with their manifest rows; paths are relative.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<RawImage>,
}

const HAIR_ROWS: f64 = 0.1;
const CR_MEAN: f64 = 152.0;
const CB_MEAN: f64 = 104.0;
const CHROMA_PIXEL_STD: f64 = 3.0;
const CHROMA_SESSION_STD: f64 = 1.5;
const IDENTITY_TERMS: usize = 3;
const DECAY: f64 = 0.35;
const NUISANCE_TERMS: usize = 2;
const PROFILE_FREQUENCIES: usize = 10;
/// Pixel noise standard deviation, relative to `noise`.
const PIXEL_NOISE: f64 = 2.0;

/// Random smooth profile of length `n`, scaled to unit maximum.
fn smooth_profile(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let terms: Vec<(f64, f64, f64)> = (1..=PROFILE_FREQUENCIES)
        .map(|f| {
            let a: f64 = rng.sample(StandardNormal);
            (f as f64, a / f as f64, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let t = |i: usize| i as f64 / (n - 1).max(1) as f64;
    let v = DVector::from_fn(n, |i, _| {
        terms
            .iter()
            .map(|(f, a, p)| a * (PI * f * t(i) + p).cos())
            .sum()
    });
    let max = v.amax();
    if max > 0.0 {
        v / max
    } else {
        v
    }
}

fn rank_one(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let u = smooth_profile(rng, rows);
    let v = smooth_profile(rng, cols);
    u * v.transpose()
}

/// Sum of `terms` rank-1 images with random signs and magnitudes bounded
/// away from zero, each term `DECAY` times weaker than the previous one.
fn decaying_terms(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    terms: usize,
    scale: f64,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    let mut weight = scale;
    for _ in 0..terms {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let w = sign * weight * rng.random_range(0.75..1.25);
        out += rank_one(rng, rows, cols) * w;
        weight *= DECAY;
    }
    out
}

/// Shared luma template: bright oval face, dark eyes, dark hair band.
fn base_face(geo: &GeometryConfig) -> (DMatrix<f64>, DMatrix<bool>) {
    let (rows, cols) = geo.shape();
    let ((ler, lec), (rer, rec)) = geo.eye_targets_px();
    let (cr, cc) = ((rows - 1) as f64 * 0.55, (cols - 1) as f64 * 0.5);
    let (sr, sc) = (rows as f64 * 0.45, cols as f64 * 0.42);
    let eye_r = (rec - lec).abs() * 0.18;
    let mut skin = DMatrix::from_element(rows, cols, true);
    let face = DMatrix::from_fn(rows, cols, |r, c| {
        let (rf, cf) = (r as f64, c as f64);
        if rf < HAIR_ROWS * rows as f64 {
            skin[(r, c)] = false;
            return 0.12;
        }
        let mut v = 0.45 + 0.25 * (-((rf - cr) / sr).powi(2) - ((cf - cc) / sc).powi(2)).exp();
        for (er, ec) in [(ler, lec), (rer, rec)] {
            let d2 = ((rf - er).powi(2) + (cf - ec).powi(2)) / (eye_r * eye_r);
            if d2 < 1.0 {
                skin[(r, c)] = false;
            }
            v -= 0.35 * (-d2).exp();
        }
        v
    });
    (face, skin)
}

struct Subject {
    id: String,
    prototype: DMatrix<f64>,
    cr: f64,
    cb: f64,
}

fn make_subject(params: &SynthParams, index: usize, id: String) -> (Subject, ChaCha8Rng) {
    let (rows, cols) = params.geometry.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64 + 1);
    let prototype = decaying_terms(&mut rng, rows, cols, IDENTITY_TERMS, params.grey_separation);
    let cr_off: f64 = rng.sample(StandardNormal);
    let cb_off: f64 = rng.sample(StandardNormal);
    let subject = Subject {
        id,
        prototype,
        cr: (CR_MEAN + params.chroma_separation * cr_off).clamp(140.0, 166.0),
        cb: (CB_MEAN + params.chroma_separation * cb_off).clamp(84.0, 120.0),
    };
    (subject, rng)
}

fn render(
    params: &SynthParams,
    base: &(DMatrix<f64>, DMatrix<bool>),
    subject: &Subject,
    rng: &mut ChaCha8Rng,
) -> RawImage {
    let (rows, cols) = params.geometry.shape();
    let (face, skin) = base;
    let ramp_r: f64 = rng.sample::<f64, _>(StandardNormal) * params.noise;
    let ramp_c: f64 = rng.sample::<f64, _>(StandardNormal) * params.noise;
    let nuisance = decaying_terms(rng, rows, cols, NUISANCE_TERMS, params.noise);
    let pixel = Normal::new(0.0, PIXEL_NOISE * params.noise).unwrap();
    let chroma_pixel = Normal::new(0.0, CHROMA_PIXEL_STD).unwrap();
    let cr_s = subject.cr + rng.sample::<f64, _>(StandardNormal) * CHROMA_SESSION_STD;
    let cb_s = subject.cb + rng.sample::<f64, _>(StandardNormal) * CHROMA_SESSION_STD;
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let tr = r as f64 / (rows - 1) as f64 - 0.5;
            let tc = c as f64 / (cols - 1) as f64 - 0.5;
            let luma = face[(r, c)]
                + subject.prototype[(r, c)]
                + nuisance[(r, c)]
                + ramp_r * tr
                + ramp_c * tc
                + pixel.sample(rng);
            let y = 255.0 * luma.clamp(0.02, 0.98);
            let (cr, cb) = if skin[(r, c)] {
                (
                    (cr_s + chroma_pixel.sample(rng)).clamp(134.0, 172.0),
                    (cb_s + chroma_pixel.sample(rng)).clamp(78.0, 126.0),
                )
            } else {
                (128.0, 128.0)
            };
            pixels.push(ycbcr_to_rgb(y, cr, cb));
        }
    }
    RawImage::new(cols, rows, pixels).expect("pixel count matches geometry")
}

/// Generates the dataset in memory. Identical parameters give identical
/// images and rows.
pub fn synth_generate(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    let base = base_face(&params.geometry);
    let ((ler, lec), (rer, rec)) = params.geometry.eye_targets_px();
    let n_eval_imp = params.n_impostors.div_ceil(2);

    let mut plan: Vec<(String, Vec<Role>)> = vec![];
    let c = params.samples_per_client;
    for k in 0..params.n_clients {
        let mut roles = vec![Role::ClientTrain; c.train];
        roles.extend(std::iter::repeat_n(Role::ClientEval, c.eval));
        roles.extend(std::iter::repeat_n(Role::ClientTest, c.test));
        plan.push((format!("c{k:03}"), roles));
    }
    for k in 0..params.n_impostors {
        let (id, role) = if k < n_eval_imp {
            (format!("ie{k:03}"), Role::ImpostorEval)
        } else {
            (format!("it{:03}", k - n_eval_imp), Role::ImpostorTest)
        };
        plan.push((id, vec![role; params.samples_per_impostor]));
    }

    let per_subject: Vec<Vec<(ManifestRecord, RawImage)>> = plan
        .into_par_iter()
        .enumerate()
        .map(|(index, (id, roles))| {
            let (subject, mut rng) = make_subject(params, index, id);
            roles
                .into_iter()
                .enumerate()
                .map(|(k, role)| {
                    let img = render(params, &base, &subject, &mut rng);
                    let session = k as u32 + 1;
                    let record = ManifestRecord {
                        path: PathBuf::from(format!("{}_{session:02}.ppm", subject.id)),
                        subject_id: subject.id.clone(),
                        session,
                        role,
                        lx: lec,
                        ly: ler,
                        rx: rec,
                        ry: rer,
                    };
                    (record, img)
                })
                .collect()
        })
        .collect();

    let (records, images) = per_subject.into_iter().flatten().unzip();
    Ok(SynthDataset { records, images })
}

impl SynthDataset {
    /// Writes every image and `manifest.csv` into `dir` and returns the
    /// manifest rooted there.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.records
            .par_iter()
            .zip(&self.images)
            .try_for_each(|(r, img)| img.save_ppm(dir.join(&r.path)))?;
        let manifest = DatasetManifest::new(dir, self.records.clone());
        manifest.write(dir.join("manifest.csv"))?;
        Ok(manifest)
    }

    /// Partitions and aligns the faces without touching the filesystem.
    /// Gives the same samples as [`write`](Self::write) followed by
    /// [`LoadedPartition::load`].
    pub fn load(
        &self,
        config: ProtocolConfig,
        geometry: &GeometryConfig,
    ) -> Result<LoadedPartition> {
        let manifest = DatasetManifest::new("", self.records.clone());
        let part = partition(&manifest, config)?;
        let load = |role| -> Result<Vec<FaceSample>> {
            part.rows(role)
                .par_iter()
                .map(|&i| {
                    let r = &self.records[i];
                    let (left, right) = r.eyes();
                    Ok(align_and_crop(&self.images[i], left, right, geometry)?
                        .sample
                        .with_identity(r.subject_id.clone(), r.session))
                })
                .collect()
        };
        Ok(LoadedPartition {
            train: load(Role::ClientTrain)?,
            client_eval: load(Role::ClientEval)?,
            client_test: load(Role::ClientTest)?,
            impostor_eval: load(Role::ImpostorEval)?,
            impostor_test: load(Role::ImpostorTest)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::partition::{partition, ProtocolConfig};
    use crate::imaging::skin_mask;

    fn small() -> SynthParams {
        SynthParams {
            n_clients: 3,
            samples_per_client: RoleCounts {
                train: 2,
                eval: 1,
                test: 1,
            },
            n_impostors: 2,
            samples_per_impostor: 1,
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.images, b.images);
        let c = synth_generate(&SynthParams { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn manifest_partitions_cleanly() {
        let data = synth_generate(&small()).unwrap();
        let m = DatasetManifest::new("", data.records.clone());
        let p = partition(&m, ProtocolConfig::I).unwrap();
        assert_eq!(p.clients().len(), 3);
        assert_eq!(p.count(crate::eval::Role::ClientTrain), 6);
        assert_eq!(p.impostor_eval.len(), 1);
        assert_eq!(p.impostor_test.len(), 1);
        assert_eq!(data.images[0].width(), 57);
        assert_eq!(data.images[0].height(), 61);
    }

    #[test]
    fn skin_mask_excludes_hair_and_eyes() {
        let data = synth_generate(&small()).unwrap();
        let planes = data.images[0].ycbcr_planes();
        let mask = skin_mask(&planes.cr, &planes.cb, &Default::default()).unwrap();
        let on = mask.iter().filter(|m| **m).count();
        assert!(
            on > mask.len() / 2 && on < mask.len(),
            "{on} of {}",
            mask.len()
        );
        assert!(!mask[(0, 28)]);
        assert!(mask[(45, 28)]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_generate(&SynthParams {
            noise: -1.0,
            ..small()
        })
        .is_err());
        assert!(synth_generate(&SynthParams {
            n_clients: 1,
            ..small()
        })
        .is_err());
    }
}
