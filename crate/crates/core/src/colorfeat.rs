//! Skin-colour feature: histogram of the opponent chroma plane `Cr - Cb`
//! over skin pixels.

use std::borrow::Borrow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::imaging::{skin_mask, FaceSample, SkinBounds};

/// Normalised histogram over `bins` equal-width bins spanning `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChromaHistogram {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    #[serde(with = "codec::vector")]
    pub weights: Vec<f64>,
    pub pixel_count: usize,
}

impl ChromaHistogram {
    pub fn bin_centers(&self) -> impl Iterator<Item = f64> + '_ {
        let width = (self.hi - self.lo) / self.bins as f64;
        (0..self.bins).map(move |k| self.lo + (k as f64 + 0.5) * width)
    }

    fn same_binning(&self, other: &Self) -> bool {
        self.bins == other.bins && self.lo == other.lo && self.hi == other.hi
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.lo < self.hi) || self.weights.len() != self.bins {
            return Err(Error::ModelFormat(format!(
                "histogram with {} bins over [{}, {}] holds {} weights",
                self.bins,
                self.lo,
                self.hi,
                self.weights.len()
            )));
        }
        Ok(())
    }

    /// `bin_center,weight` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,weight\n");
        for (c, w) in self.bin_centers().zip(&self.weights) {
            out.push_str(&format!("{c},{w}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: f64,
    pub std: f64,
}

/// Histogram and mask settings for the colour feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorParams {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub skin: SkinBounds,
}

impl Default for ColorParams {
    fn default() -> Self {
        Self {
            bins: 64,
            lo: -128.0,
            hi: 128.0,
            skin: SkinBounds::default(),
        }
    }
}

impl ColorParams {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "histogram needs >= 2 bins and lo < hi (got {} over [{}, {}])",
                self.bins, self.lo, self.hi
            )));
        }
        self.skin.validate()
    }
}

/// Elementwise `cr - cb`.
pub fn opponent_chroma(sample: &FaceSample) -> DMatrix<f64> {
    &sample.cr - &sample.cb
}

fn check_mask(plane: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<usize> {
    if plane.shape() != mask.shape() {
        return Err(Error::shape(plane.shape(), mask.shape()));
    }
    match mask.iter().filter(|m| **m).count() {
        0 => Err(Error::EmptyFeature),
        n => Ok(n),
    }
}

/// Bins the masked pixels of `plane`; out-of-range values land in the end bins.
pub fn chroma_histogram(
    plane: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    bins: usize,
    lo: f64,
    hi: f64,
) -> Result<ChromaHistogram> {
    if bins < 2 || !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "histogram needs >= 2 bins and lo < hi (got {bins} over [{lo}, {hi}])"
        )));
    }
    let count = check_mask(plane, mask)?;
    let mut weights = vec![0.0; bins];
    let scale = bins as f64 / (hi - lo);
    for (v, _) in plane.iter().zip(mask.iter()).filter(|(_, m)| **m) {
        let k = ((v - lo) * scale).floor().clamp(0.0, (bins - 1) as f64) as usize;
        weights[k] += 1.0;
    }
    weights.iter_mut().for_each(|w| *w /= count as f64);
    Ok(ChromaHistogram {
        bins,
        lo,
        hi,
        weights,
        pixel_count: count,
    })
}

/// Mean and population standard deviation of the masked pixels.
pub fn fit_gaussian(plane: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<GaussianSummary> {
    let count = check_mask(plane, mask)? as f64;
    let selected = || {
        plane
            .iter()
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
    };
    let mean = selected().sum::<f64>() / count;
    let var = selected().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    Ok(GaussianSummary {
        mean,
        std: var.sqrt(),
    })
}

/// Bhattacharyya distance `1 - Σ sqrt(a_k b_k)`, clamped to `[0, 1]`.
pub fn histogram_distance(a: &ChromaHistogram, b: &ChromaHistogram) -> Result<f64> {
    if !a.same_binning(b) {
        return Err(Error::BinningMismatch);
    }
    let bc: f64 = a
        .weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x * y).sqrt())
        .sum();
    Ok((1.0 - bc).clamp(0.0, 1.0))
}

/// Bin-wise mean of histograms with identical binning, renormalised.
pub fn mean_histogram<H: Borrow<ChromaHistogram>>(hists: &[H]) -> Result<ChromaHistogram> {
    let first = hists
        .first()
        .ok_or(Error::EmptyInput("no histograms"))?
        .borrow();
    let mut weights = vec![0.0; first.bins];
    let mut pixel_count = 0;
    for h in hists {
        let h = h.borrow();
        if !h.same_binning(first) {
            return Err(Error::BinningMismatch);
        }
        weights
            .iter_mut()
            .zip(&h.weights)
            .for_each(|(w, x)| *w += x);
        pixel_count += h.pixel_count;
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(ChromaHistogram {
        bins: first.bins,
        lo: first.lo,
        hi: first.hi,
        weights,
        pixel_count,
    })
}

/// Colour feature of one face.
#[derive(Debug, Clone)]
pub struct ColorFeature {
    pub histogram: ChromaHistogram,
    pub gaussian: GaussianSummary,
    /// The skin mask was empty and the whole crop was used.
    pub fallback: bool,
}

/// Opponent-chroma histogram over the skin mask, or over the whole crop
/// when no pixel passes the mask.
pub fn color_feature(sample: &FaceSample, params: &ColorParams) -> Result<ColorFeature> {
    let plane = opponent_chroma(sample);
    let mut mask = skin_mask(&sample.cr, &sample.cb, &params.skin)?;
    let mut fallback = false;
    if !mask.iter().any(|m| *m) {
        log::warn!(
            "empty skin mask for subject {:?}; using the full crop",
            sample.subject_id
        );
        mask.fill(true);
        fallback = true;
    }
    Ok(ColorFeature {
        histogram: chroma_histogram(&plane, &mask, params.bins, params.lo, params.hi)?,
        gaussian: fit_gaussian(&plane, &mask)?,
        fallback,
    })
}

/// Colour references for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorReference {
    pub client: ChromaHistogram,
    pub impostor: ChromaHistogram,
    /// Opponent-chroma statistics of the client's skin pixels.
    pub gaussian: GaussianSummary,
}
