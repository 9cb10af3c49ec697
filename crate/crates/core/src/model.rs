//! The persisted model: shared PCA stage, per-client templates, colour
//! references and decision policies, plus the training and calibration
//! passes that produce them.
//!
//! On disk a model is a JSON envelope. Metadata stays readable; every
//! matrix or vector is stored as base64 little-endian `f64` in row-major
//! order next to its declared dimensions.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorfeat::{
    color_feature, mean_histogram, ChromaHistogram, ColorParams, ColorReference, GaussianSummary,
};
use crate::decision::{
    calibrate_eer, fuse, score_claim, Calibration, DecisionPolicy, FusionMode, ScorePair,
    ScoreStats, ZStats,
};
use crate::discriminant::{
    nonsingularity_check, template_from_scatters, ClientTemplate, Diagnosis, ScatterCache,
    TemplateParams,
};
use crate::error::{Error, Result};
use crate::imaging::{FaceSample, GeometryConfig};
use crate::subspace::{fit_pca_stage, pca_project, Components, PcaStage};

pub const FORMAT_NAME: &str = "facever-model";
pub const FORMAT_VERSION: u32 = 1;

/// Global threshold for every client, or one threshold per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Global,
    PerClient,
}

/// Feature-extraction parameters recorded with the model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub g: Components,
    pub h: Components,
    pub template: TemplateParams,
    pub color: ColorParams,
}

/// Resolved parameters, for humans reading the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecord {
    pub g: usize,
    pub h: usize,
    pub q: usize,
    pub d: usize,
    pub ridge: f64,
    pub bins: usize,
    pub fusion_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 over the training rows that built the model.
    pub training_digest: String,
    pub seed: u64,
    /// Only recorded on request; absent keeps model files reproducible.
    pub created: Option<String>,
}

/// Per-client diagnostics recorded at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDiagnostics {
    pub nonsingularity: Diagnosis,
    pub training_samples: usize,
    /// Training faces whose skin mask came back empty.
    pub color_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub format_version: u32,
    pub geometry: GeometryConfig,
    pub params: ModelParams,
    pub record: ParameterRecord,
    pub provenance: Provenance,
    pub pca_stage: PcaStage,
    pub client_templates: BTreeMap<String, ClientTemplate>,
    pub color_references: BTreeMap<String, ColorReference>,
    pub policies: BTreeMap<String, DecisionPolicy>,
    pub global_policy: DecisionPolicy,
    pub threshold_mode: ThresholdMode,
    pub score_stats: ScoreStats,
    pub calibrated: bool,
    pub diagnostics: BTreeMap<String, ClientDiagnostics>,
}

fn uncalibrated_policy() -> DecisionPolicy {
    DecisionPolicy {
        threshold: 0.0,
        fusion_weight: 0.5,
        mode: FusionMode::Fused,
    }
}

/// SHA-256 over `(subject, session, grey bytes)` of each sample, in order.
pub fn training_digest<F: Borrow<FaceSample>>(samples: &[F]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for s in samples {
        let s = s.borrow();
        hasher.update(s.subject_id.as_bytes());
        hasher.update([0]);
        hasher.update(s.session.to_le_bytes());
        for plane in [&s.grey, &s.cr, &s.cb] {
            for v in plane.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(hasher.finalize())
}

pub(crate) fn canonical_order<F: Borrow<FaceSample>>(samples: &[F]) -> Vec<&FaceSample> {
    let mut sorted: Vec<&FaceSample> = samples.iter().map(Borrow::borrow).collect();
    sorted.sort_by(|a, b| {
        a.subject_id
            .cmp(&b.subject_id)
            .then(a.session.cmp(&b.session))
            .then_with(|| {
                a.grey
                    .iter()
                    .zip(b.grey.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    sorted
}

/// Pools per-image `(pixel count, summary)` pairs into one summary.
fn pooled_gaussian(parts: impl Iterator<Item = (f64, GaussianSummary)> + Clone) -> GaussianSummary {
    let total: f64 = parts.clone().map(|(n, _)| n).sum();
    let mean = parts.clone().map(|(n, g)| n * g.mean).sum::<f64>() / total;
    let var = parts
        .map(|(n, g)| n * (g.std * g.std + (g.mean - mean) * (g.mean - mean)))
        .sum::<f64>()
        / total;
    GaussianSummary {
        mean,
        std: var.sqrt(),
    }
}

/// Fits the PCA stage, every client template and the colour references
/// from client training faces. Each distinct `subject_id` is a client.
///
/// The result does not depend on the order of `samples`.
pub fn train<F: Borrow<FaceSample> + Sync>(
    samples: &[F],
    geometry: &GeometryConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<ModelFile> {
    geometry.validate()?;
    params.color.validate()?;
    let samples = canonical_order(samples);
    for s in &samples {
        s.check(geometry)?;
    }
    let greys: Vec<_> = samples.iter().map(|s| &s.grey).collect();
    let stage = fit_pca_stage(&greys, params.g, params.h)?;

    let projected = samples
        .par_iter()
        .map(|s| Ok((pca_project(&stage, &s.grey)?, s.subject_id.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let cache = ScatterCache::new(&projected)?;
    let clients: Vec<&str> = cache.subjects().collect();
    if clients.len() < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least two clients".into(),
        ));
    }

    let built = clients
        .par_iter()
        .map(|&id| {
            let scatters = cache.client_scatters(id)?;
            let diagnosis = nonsingularity_check(&scatters);
            let template = template_from_scatters(&stage, &scatters, id, params.template)?;
            Ok((template, diagnosis))
        })
        .collect::<Vec<Result<_>>>();

    let features = samples
        .par_iter()
        .map(|s| color_feature(s, &params.color))
        .collect::<Result<Vec<_>>>()?;
    let mut by_client: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_client.entry(s.subject_id.as_str()).or_default().push(i);
    }

    let mut model = ModelFile {
        format: FORMAT_NAME.to_string(),
        format_version: FORMAT_VERSION,
        geometry: *geometry,
        params: *params,
        record: ParameterRecord {
            g: stage.g,
            h: stage.h,
            q: params.template.q,
            d: params.template.d,
            ridge: params.template.ridge,
            bins: params.color.bins,
            fusion_weight: uncalibrated_policy().fusion_weight,
        },
        provenance: Provenance {
            training_digest: training_digest(&samples),
            seed,
            created: None,
        },
        pca_stage: stage,
        client_templates: BTreeMap::new(),
        color_references: BTreeMap::new(),
        policies: BTreeMap::new(),
        global_policy: uncalibrated_policy(),
        threshold_mode: ThresholdMode::Global,
        score_stats: ScoreStats::default(),
        calibrated: false,
        diagnostics: BTreeMap::new(),
    };

    for (id, result) in clients.iter().zip(built) {
        let (template, diagnosis) = result?;
        log::info!("client {id}: {diagnosis}");
        let own = &by_client[id];
        let client_hists: Vec<&ChromaHistogram> =
            own.iter().map(|&i| &features[i].histogram).collect();
        let impostor_hists: Vec<&ChromaHistogram> = features
            .iter()
            .enumerate()
            .filter(|(i, _)| samples[*i].subject_id != *id)
            .map(|(_, f)| &f.histogram)
            .collect();
        let gaussian = pooled_gaussian(own.iter().map(|&i| {
            let f = &features[i];
            (f.histogram.pixel_count as f64, f.gaussian)
        }));
        model.color_references.insert(
            id.to_string(),
            ColorReference {
                client: mean_histogram(&client_hists)?,
                impostor: mean_histogram(&impostor_hists)?,
                gaussian,
            },
        );
        model.diagnostics.insert(
            id.to_string(),
            ClientDiagnostics {
                nonsingularity: diagnosis,
                training_samples: own.len(),
                color_fallbacks: own.iter().filter(|&&i| features[i].fallback).count(),
            },
        );
        model.client_templates.insert(id.to_string(), template);
        model.policies.insert(id.to_string(), uncalibrated_policy());
    }
    Ok(model)
}

/// Calibration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub mode: FusionMode,
    pub threshold_mode: ThresholdMode,
    /// Spacing of the fusion-weight grid over `[0, 1]`.
    pub weight_step: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            mode: FusionMode::Fused,
            threshold_mode: ThresholdMode::Global,
            weight_step: 0.05,
        }
    }
}

impl CalibrationOptions {
    pub fn weight_grid(&self) -> Result<Vec<f64>> {
        if !(self.weight_step > 0.0 && self.weight_step <= 1.0) {
            return Err(Error::Config(format!(
                "fusion weight step {} outside (0, 1]",
                self.weight_step
            )));
        }
        let n = (1.0 / self.weight_step).round().max(1.0) as usize;
        Ok((0..=n).map(|i| i as f64 / n as f64).collect())
    }
}

/// Evaluation-set operating point chosen by [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub fusion_weight: f64,
    pub global: Calibration,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
}

/// A scored claim.
#[derive(Debug, Clone, Copy)]
pub struct ScoredTrial<'a> {
    pub claim: &'a str,
    pub genuine: bool,
    pub pair: ScorePair,
}

/// Scores genuine claims `(client, probe)` and every impostor probe against
/// every client of the model.
pub fn score_trials<'a>(
    model: &'a ModelFile,
    genuine: &[(&'a str, &FaceSample)],
    impostors: &[&FaceSample],
) -> Result<Vec<ScoredTrial<'a>>> {
    let mut claims: Vec<(&'a str, &FaceSample, bool)> =
        genuine.iter().map(|&(c, p)| (c, p, true)).collect();
    for &p in impostors {
        for c in model.client_templates.keys() {
            claims.push((c.as_str(), p, false));
        }
    }
    claims
        .par_iter()
        .map(|&(claim, probe, genuine)| {
            let claim = model
                .client_templates
                .get_key_value(claim)
                .map(|(k, _)| k.as_str())
                .ok_or_else(|| Error::UnknownClient(claim.to_string()))?;
            Ok(ScoredTrial {
                claim,
                genuine,
                pair: score_claim(model, claim, probe)?,
            })
        })
        .collect()
}

fn split_fused(
    trials: &[ScoredTrial<'_>],
    stats: &ScoreStats,
    policy: &DecisionPolicy,
) -> (Vec<f64>, Vec<f64>) {
    let mut gen = vec![];
    let mut imp = vec![];
    for t in trials {
        let s = fuse(stats.normalize(t.pair), policy);
        if t.genuine {
            gen.push(s);
        } else {
            imp.push(s);
        }
    }
    (gen, imp)
}

/// Sets score normalisation, fusion weight and thresholds from evaluation
/// claims. Impostor probes claim every client in turn.
pub fn calibrate(
    model: &mut ModelFile,
    genuine: &[(&str, &FaceSample)],
    impostors: &[&FaceSample],
    opts: &CalibrationOptions,
) -> Result<CalibrationSummary> {
    if genuine.is_empty() {
        return Err(Error::MissingRole {
            role: "client_eval",
            context: "calibration needs genuine evaluation claims".into(),
        });
    }
    if impostors.is_empty() {
        return Err(Error::MissingRole {
            role: "impostor_eval",
            context: "calibration needs impostor evaluation claims".into(),
        });
    }
    let trials = score_trials(model, genuine, impostors)?;
    let greys: Vec<f64> = trials.iter().map(|t| t.pair.grey).collect();
    let colors: Vec<f64> = trials.iter().map(|t| t.pair.color).collect();
    let stats = ScoreStats {
        grey: ZStats::estimate(&greys)?,
        color: ZStats::estimate(&colors)?,
    };

    let weights = match opts.mode {
        FusionMode::Fused => opts.weight_grid()?,
        FusionMode::GreyOnly => vec![1.0],
        FusionMode::ColorOnly => vec![0.0],
    };
    let mut best: Option<(DecisionPolicy, Calibration)> = None;
    for w in weights {
        let policy = DecisionPolicy {
            threshold: 0.0,
            fusion_weight: w,
            mode: opts.mode,
        };
        let (gen, imp) = split_fused(&trials, &stats, &policy);
        let cal = calibrate_eer(&gen, &imp)?;
        if best.as_ref().is_none_or(|(_, b)| cal.eer() < b.eer()) {
            best = Some((policy, cal));
        }
    }
    let (mut global, cal) = best.unwrap();
    global.threshold = cal.threshold;

    let mut policies = BTreeMap::new();
    for client in model.client_templates.keys() {
        let policy = match opts.threshold_mode {
            ThresholdMode::Global => global,
            ThresholdMode::PerClient => {
                let own: Vec<ScoredTrial<'_>> = trials
                    .iter()
                    .filter(|t| t.claim == client)
                    .copied()
                    .collect();
                let (gen, imp) = split_fused(&own, &stats, &global);
                if gen.is_empty() {
                    return Err(Error::MissingRole {
                        role: "client_eval",
                        context: format!("client {client} has no evaluation samples"),
                    });
                }
                DecisionPolicy {
                    threshold: calibrate_eer(&gen, &imp)?.threshold,
                    ..global
                }
            }
        };
        policies.insert(client.clone(), policy);
    }

    let genuine_trials = trials.iter().filter(|t| t.genuine).count();
    let impostor_trials = trials.len() - genuine_trials;
    drop(trials);
    model.score_stats = stats;
    model.global_policy = global;
    model.policies = policies;
    model.threshold_mode = opts.threshold_mode;
    model.record.fusion_weight = global.fusion_weight;
    model.calibrated = true;
    Ok(CalibrationSummary {
        fusion_weight: global.fusion_weight,
        global: cal,
        genuine_trials,
        impostor_trials,
    })
}

impl ModelFile {
    pub fn policy_for(&self, client: &str) -> Result<&DecisionPolicy> {
        self.policies
            .get(client)
            .ok_or_else(|| Error::UnknownClient(client.to_string()))
    }

    pub fn clients(&self) -> impl Iterator<Item = &str> {
        self.client_templates.keys().map(String::as_str)
    }

    /// Structural checks: format tag, dimensions against geometry and
    /// stage, and that every client appears in all maps.
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(Error::ModelFormat(format!(
                "unknown format tag {:?}",
                self.format
            )));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.geometry.validate()?;
        self.params.color.validate()?;
        self.pca_stage.validate()?;
        let stage = &self.pca_stage;
        if (stage.m, stage.n) != self.geometry.shape() {
            return Err(Error::ModelFormat(format!(
                "stage is {}x{} but geometry is {}x{}",
                stage.m, stage.n, self.geometry.rows, self.geometry.cols
            )));
        }
        let ids: Vec<&String> = self.client_templates.keys().collect();
        if !self.color_references.keys().eq(ids.iter().copied())
            || !self.policies.keys().eq(ids.iter().copied())
            || !self.diagnostics.keys().eq(ids.iter().copied())
        {
            return Err(Error::ModelFormat(
                "client ids differ between templates, colour references, policies and diagnostics"
                    .into(),
            ));
        }
        for (id, t) in &self.client_templates {
            if &t.client_id != id {
                return Err(Error::ModelFormat(format!(
                    "template keyed {id} names {}",
                    t.client_id
                )));
            }
            t.validate(stage)?;
        }
        let bins = self.params.color.bins;
        for (id, r) in &self.color_references {
            for h in [&r.client, &r.impostor] {
                h.validate()?;
                if h.bins != bins {
                    return Err(Error::ModelFormat(format!(
                        "client {id}: histogram has {} bins, parameters say {bins}",
                        h.bins
                    )));
                }
            }
        }
        for (id, p) in self.policies.iter().chain(std::iter::once((
            &"<global>".to_string(),
            &self.global_policy,
        ))) {
            p.validate()
                .map_err(|e| Error::ModelFormat(format!("policy for {id}: {e}")))?;
        }
        Ok(())
    }

    /// A model holding only one client (for single-template deployment).
    pub fn single_client(&self, id: &str) -> Result<ModelFile> {
        if !self.client_templates.contains_key(id) {
            return Err(Error::UnknownClient(id.to_string()));
        }
        let mut out = self.clone();
        out.client_templates.retain(|k, _| k == id);
        out.color_references.retain(|k, _| k == id);
        out.policies.retain(|k, _| k == id);
        out.diagnostics.retain(|k, _| k == id);
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes through a temporary file in the same directory and renames it
    /// into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let file_name = path.file_name().ok_or_else(|| {
            Error::InvalidArgument(format!("{} is not a file path", path.display()))
        })?;
        let tmp = dir.join(format!(
            ".{}.tmp{}",
            file_name.to_string_lossy(),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_json().as_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }
}
