//! Scores, fusion, EER calibration and verdicts.
//!
//! Both experts produce a score oriented so that larger means more
//! client-like, and a claim is accepted iff the fused score is strictly
//! greater than the threshold `T` (a score equal to `T` is rejected).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::colorfeat::{color_feature, histogram_distance, ChromaHistogram};
use crate::error::{Error, Result};
use crate::imaging::FaceSample;
use crate::model::ModelFile;

/// Raw (or normalised) grey and colour expert scores for one claim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub grey: f64,
    pub color: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    GreyOnly,
    ColorOnly,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionPolicy {
    pub threshold: f64,
    /// Weight on the grey score in fused mode.
    pub fusion_weight: f64,
    pub mode: FusionMode,
}

impl DecisionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::InvalidArgument(format!(
                "fusion weight {} outside [0, 1]",
                self.fusion_weight
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn accepts(&self, fused: f64) -> bool {
        fused > self.threshold
    }
}

/// `‖y - m_i‖_F - ‖y - m_c‖_F`.
pub fn grey_score(y: &DMatrix<f64>, m_c: &DMatrix<f64>, m_i: &DMatrix<f64>) -> Result<f64> {
    for m in [m_c, m_i] {
        if m.shape() != y.shape() {
            return Err(Error::shape(y.shape(), m.shape()));
        }
    }
    Ok((y - m_i).norm() - (y - m_c).norm())
}

/// `dist(probe, impostor ref) - dist(probe, client ref)`.
pub fn color_score(
    probe: &ChromaHistogram,
    ref_client: &ChromaHistogram,
    ref_impostor: &ChromaHistogram,
) -> Result<f64> {
    Ok(histogram_distance(probe, ref_impostor)? - histogram_distance(probe, ref_client)?)
}

/// Location and scale used for z-normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for ZStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl ZStats {
    /// Mean and population standard deviation.
    pub fn estimate(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("no scores to estimate statistics"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn apply(&self, score: f64) -> f64 {
        if self.std > 0.0 {
            (score - self.mean) / self.std
        } else {
            score
        }
    }
}

/// z-normalises scores; a non-positive `std` passes them through.
pub fn normalize_scores(scores: &[f64], stats: ZStats) -> Vec<f64> {
    if !(stats.std > 0.0) {
        log::warn!("score std is {}; scores left unnormalised", stats.std);
    }
    scores.iter().map(|&s| stats.apply(s)).collect()
}

/// Per-channel normalisation estimated on the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreStats {
    pub grey: ZStats,
    pub color: ZStats,
}

impl ScoreStats {
    pub fn normalize(&self, pair: ScorePair) -> ScorePair {
        ScorePair {
            grey: self.grey.apply(pair.grey),
            color: self.color.apply(pair.color),
        }
    }
}

pub fn fuse(pair: ScorePair, policy: &DecisionPolicy) -> f64 {
    match policy.mode {
        FusionMode::GreyOnly => pair.grey,
        FusionMode::ColorOnly => pair.color,
        FusionMode::Fused => {
            policy.fusion_weight * pair.grey + (1.0 - policy.fusion_weight) * pair.color
        }
    }
}

/// Calibrated operating point; rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

impl Calibration {
    /// `(FAR + FRR) / 2` at the threshold.
    pub fn eer(&self) -> f64 {
        0.5 * (self.far + self.frr)
    }
}

/// FAR and FRR (fractions) at threshold `t`.
pub fn error_rates(genuine: &[f64], impostor: &[f64], t: f64) -> (f64, f64) {
    let fa = impostor.iter().filter(|&&s| s > t).count();
    let fr = genuine.iter().filter(|&&s| s <= t).count();
    (
        fa as f64 / impostor.len() as f64,
        fr as f64 / genuine.len() as f64,
    )
}

/// Threshold where FAR and FRR are closest.
///
/// Candidates are the midpoints between consecutive distinct scores plus
/// the largest score (reject everything). Ties on `|FAR - FRR|` go to the
/// smaller `FAR + FRR`, then to the smaller threshold. The comparisons are
/// done on integer counts so equal rates compare equal.
pub fn calibrate_eer(genuine: &[f64], impostor: &[f64]) -> Result<Calibration> {
    if genuine.is_empty() {
        return Err(Error::EmptyInput("no genuine scores"));
    }
    if impostor.is_empty() {
        return Err(Error::EmptyInput("no impostor scores"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut gen = genuine.to_vec();
    let mut imp = impostor.to_vec();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();

    let ng = gen.len() as u128;
    let ni = imp.len() as u128;
    let candidates = all
        .windows(2)
        .map(|w| w[0] + 0.5 * (w[1] - w[0]))
        .chain(std::iter::once(*all.last().unwrap()));

    let mut best: Option<((u128, u128), f64, usize, usize)> = None;
    for t in candidates {
        let rejected_gen = gen.partition_point(|&s| s <= t);
        let accepted_imp = imp.len() - imp.partition_point(|&s| s <= t);
        // FAR = a/ni, FRR = b/ng, scaled by ni*ng
        let (a, b) = (accepted_imp as u128, rejected_gen as u128);
        let key = ((a * ng).abs_diff(b * ni), a * ng + b * ni);
        let better = match &best {
            None => true,
            Some((k, bt, _, _)) => key < *k || (key == *k && t < *bt),
        };
        if better {
            best = Some((key, t, accepted_imp, rejected_gen));
        }
    }
    let (_, threshold, fa, fr) = best.unwrap();
    Ok(Calibration {
        threshold,
        far: fa as f64 / ni as f64,
        frr: fr as f64 / ng as f64,
    })
}

/// Outcome of one identity claim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub accept: bool,
    pub fused: f64,
    /// Raw expert scores before normalisation.
    pub pair: ScorePair,
    pub threshold: f64,
}

/// Raw grey and colour scores of `probe` against the claimed client.
pub fn score_claim(model: &ModelFile, claim: &str, probe: &FaceSample) -> Result<ScorePair> {
    let template = model
        .client_templates
        .get(claim)
        .ok_or_else(|| Error::UnknownClient(claim.to_string()))?;
    let refs = model
        .color_references
        .get(claim)
        .ok_or_else(|| Error::UnknownClient(claim.to_string()))?;
    probe.check(&model.geometry)?;
    let y = template.project(&probe.grey)?;
    let grey = grey_score(&y, &template.m_c, &template.m_i)?;
    let feature = color_feature(probe, &model.params.color)?;
    let color = color_score(&feature.histogram, &refs.client, &refs.impostor)?;
    Ok(ScorePair { grey, color })
}

/// Scores, normalises, fuses and thresholds one claim. `policy` overrides
/// the model's policy for the claimed client.
pub fn verify(
    claim: &str,
    probe: &FaceSample,
    model: &ModelFile,
    policy: Option<&DecisionPolicy>,
) -> Result<Verdict> {
    let policy = match policy {
        Some(p) => p,
        None => model.policy_for(claim)?,
    };
    let pair = score_claim(model, claim, probe)?;
    let fused = fuse(model.score_stats.normalize(pair), policy);
    Ok(Verdict {
        accept: policy.accepts(fused),
        fused,
        pair,
        threshold: policy.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn grey_score_examples() {
        let (mc, mi) = (m(&[1.0, 2.0]), m(&[-1.0, 0.0]));
        let gap = (&mc - &mi).norm();
        assert_eq!(grey_score(&mc, &mc, &mi).unwrap(), gap);
        assert_eq!(grey_score(&mi, &mc, &mi).unwrap(), -gap);
        assert_eq!(grey_score(&m(&[0.0, 1.0]), &mc, &mi).unwrap(), 0.0);
        assert!(grey_score(&m(&[0.0]), &mc, &mi).is_err());
    }

    fn hist(w: Vec<f64>) -> ChromaHistogram {
        ChromaHistogram {
            bins: w.len(),
            lo: 0.0,
            hi: 1.0,
            weights: w,
            pixel_count: 1,
        }
    }

    #[test]
    fn color_score_examples() {
        let c = hist(vec![0.7, 0.3, 0.0]);
        let i = hist(vec![0.1, 0.3, 0.6]);
        let d = histogram_distance(&c, &i).unwrap();
        assert_eq!(color_score(&c, &c, &i).unwrap(), d);
        assert_eq!(color_score(&i, &c, &i).unwrap(), -d);
        assert_eq!(
            color_score(&hist(vec![0.2, 0.2, 0.6]), &c, &c).unwrap(),
            0.0
        );
    }

    #[test]
    fn normalisation_examples() {
        let stats = ZStats {
            mean: 2.0,
            std: 1.0,
        };
        assert_eq!(
            normalize_scores(&[1.0, 2.0, 3.0], stats),
            vec![-1.0, 0.0, 1.0]
        );
        assert_eq!(normalize_scores(&[2.0, 2.0], stats), vec![0.0, 0.0]);
        let s = ZStats {
            mean: 5.0,
            std: 2.0,
        };
        assert_eq!(normalize_scores(&[7.0], s), vec![1.0]);
        assert_eq!(
            normalize_scores(
                &[7.0],
                ZStats {
                    mean: 1.0,
                    std: 0.0
                }
            ),
            vec![7.0]
        );
    }

    #[test]
    fn fusion_examples() {
        let pair = ScorePair {
            grey: 2.0,
            color: -1.0,
        };
        let p = |w, mode| DecisionPolicy {
            threshold: 0.0,
            fusion_weight: w,
            mode,
        };
        assert_eq!(fuse(pair, &p(1.0, FusionMode::Fused)), 2.0);
        assert_eq!(fuse(pair, &p(0.0, FusionMode::Fused)), -1.0);
        assert_eq!(fuse(pair, &p(0.5, FusionMode::Fused)), 0.5);
        assert_eq!(fuse(pair, &p(0.5, FusionMode::GreyOnly)), 2.0);
        assert_eq!(fuse(pair, &p(0.5, FusionMode::ColorOnly)), -1.0);
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_eer(&[1.0, 1.0, 1.0], &[-1.0, -1.0]).unwrap();
        assert_eq!((c.threshold, c.far, c.frr), (0.0, 0.0, 0.0));

        let same = [0.1, 0.4, 0.7, 0.9];
        let c = calibrate_eer(&same, &same).unwrap();
        assert_eq!(c.far, c.frr);
        assert_eq!(c.far, 0.5);

        let c = calibrate_eer(&[3.0], &[3.0]).unwrap();
        assert_eq!((c.threshold, c.far, c.frr), (3.0, 0.0, 1.0));

        assert!(calibrate_eer(&[], &[1.0]).is_err());
        assert!(calibrate_eer(&[1.0], &[]).is_err());
    }

    #[test]
    fn calibration_against_brute_force() {
        let gen = [0.9, 0.8, 0.4];
        let imp = [0.5, 0.3, 0.1];
        let c = calibrate_eer(&gen, &imp).unwrap();
        // thresholds in [0.4, 0.5) give FAR = FRR = 1/3; midpoint is 0.45
        assert!((c.threshold - 0.45).abs() < 1e-15);
        assert_eq!((c.far, c.frr), (1.0 / 3.0, 1.0 / 3.0));
        let mut best = f64::INFINITY;
        for i in 0..=2000 {
            let t = -0.5 + i as f64 * 0.001;
            let (far, frr) = error_rates(&gen, &imp, t);
            best = best.min((far - frr).abs());
        }
        assert!((c.far - c.frr).abs() <= best);
    }

    #[test]
    fn infinite_thresholds_bound_verdicts() {
        let reject_all = DecisionPolicy {
            threshold: f64::INFINITY,
            fusion_weight: 0.5,
            mode: FusionMode::Fused,
        };
        let accept_all = DecisionPolicy {
            threshold: f64::NEG_INFINITY,
            ..reject_all
        };
        for s in [-1e300, 0.0, 1e300] {
            assert!(!reject_all.accepts(s));
            assert!(accept_all.accepts(s));
        }
        assert!(reject_all.validate().is_err());
    }

    proptest! {
        #[test]
        fn grey_score_antisymmetric(y in prop::collection::vec(-5.0f64..5.0, 3), a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3)) {
            let (y, a, b) = (m(&y), m(&a), m(&b));
            prop_assert_eq!(grey_score(&y, &a, &b).unwrap(), -grey_score(&y, &b, &a).unwrap());
        }

        #[test]
        fn verdict_monotone_in_threshold(s in -10.0f64..10.0, t in -10.0f64..10.0, dt in 0.0f64..5.0) {
            let p = DecisionPolicy { threshold: t, fusion_weight: 1.0, mode: FusionMode::GreyOnly };
            let lower = DecisionPolicy { threshold: t - dt, ..p };
            prop_assert!(!p.accepts(s) || lower.accepts(s));
        }

        #[test]
        fn calibration_scale_invariant(gen in prop::collection::vec(-3.0f64..3.0, 1..15), imp in prop::collection::vec(-3.0f64..3.0, 1..15), k in 0.01f64..100.0) {
            let c = calibrate_eer(&gen, &imp).unwrap();
            let sg: Vec<f64> = gen.iter().map(|s| s * k).collect();
            let si: Vec<f64> = imp.iter().map(|s| s * k).collect();
            let cs = calibrate_eer(&sg, &si).unwrap();
            for (s, ss) in gen.iter().chain(&imp).zip(sg.iter().chain(&si)) {
                prop_assert_eq!(*s > c.threshold, *ss > cs.threshold);
            }
        }
    }
}
