//! Image ingestion, colour conversion, eye-based alignment and skin masks.
//!
//! Every face enters the pipeline as a [`FaceSample`]: three planes of the
//! canonical geometry (luma scaled to `[0,1]`, plus the raw Cr and Cb chroma
//! planes in `[0,255]`).

use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::ImageEncoder;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image has zero extent".into()));
        }
        if width * height != pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    /// Loads a PNG or binary PPM file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.pixels().map(|p| p.0).collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// Writes the image as binary PPM (P6).
    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(
                &bytes,
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|source| match source {
                image::ImageError::IoError(e) => Error::io(path, e),
                source => Error::Image {
                    path: path.to_path_buf(),
                    source,
                },
            })?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Luma, Cr and Cb planes (all in `[0,255]`).
    pub fn ycbcr_planes(&self) -> Planes {
        let mut y = DMatrix::zeros(self.height, self.width);
        let mut cr = DMatrix::zeros(self.height, self.width);
        let mut cb = DMatrix::zeros(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let [pr, pg, pb] = self.pixel(r, c);
                let (vy, vcr, vcb) = rgb_to_ycbcr(pr, pg, pb);
                y[(r, c)] = vy;
                cr[(r, c)] = vcr;
                cb[(r, c)] = vcb;
            }
        }
        Planes { y, cr, cb }
    }
}

/// Full-resolution Y/Cr/Cb planes of a source image.
#[derive(Debug, Clone)]
pub struct Planes {
    pub y: DMatrix<f64>,
    pub cr: DMatrix<f64>,
    pub cb: DMatrix<f64>,
}

/// Full-range BT.601 conversion. Returns `(y, cr, cb)`, each clamped to `[0,255]`.
pub fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    (
        y.clamp(0.0, 255.0),
        cr.clamp(0.0, 255.0),
        cb.clamp(0.0, 255.0),
    )
}

/// Inverse of [`rgb_to_ycbcr`], rounded and clamped to 8 bits.
pub fn ycbcr_to_rgb(y: f64, cr: f64, cb: f64) -> [u8; 3] {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    [r, g, b].map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Canonical crop geometry. Eye targets are `(row, col)` fractions of the
/// crop, measured between the first and last pixel centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub rows: usize,
    pub cols: usize,
    pub left_eye_target: (f64, f64),
    pub right_eye_target: (f64, f64),
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            rows: 61,
            cols: 57,
            left_eye_target: (0.38, 0.30),
            right_eye_target: (0.38, 0.70),
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Config(format!(
                "geometry {}x{} is smaller than 2x2",
                self.rows, self.cols
            )));
        }
        let inside = |(r, c): (f64, f64)| (0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&c);
        if !inside(self.left_eye_target) || !inside(self.right_eye_target) {
            return Err(Error::Config(
                "eye targets must lie in the unit square".into(),
            ));
        }
        if self.left_eye_target.1 >= self.right_eye_target.1 {
            return Err(Error::Config(
                "left eye target must be left of the right eye target".into(),
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Eye targets in crop pixel coordinates `(row, col)`.
    pub fn eye_targets_px(&self) -> ((f64, f64), (f64, f64)) {
        let to_px = |(r, c): (f64, f64)| (r * (self.rows - 1) as f64, c * (self.cols - 1) as f64);
        (to_px(self.left_eye_target), to_px(self.right_eye_target))
    }
}

/// One aligned face: luma in `[0,1]`, chroma planes in `[0,255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub grey: DMatrix<f64>,
    pub cr: DMatrix<f64>,
    pub cb: DMatrix<f64>,
    pub subject_id: String,
    pub session: u32,
}

impl FaceSample {
    pub fn new(grey: DMatrix<f64>, cr: DMatrix<f64>, cb: DMatrix<f64>) -> Result<Self> {
        let shape = grey.shape();
        for plane in [&cr, &cb] {
            if plane.shape() != shape {
                return Err(Error::shape(shape, plane.shape()));
            }
        }
        Ok(Self {
            grey,
            cr,
            cb,
            subject_id: String::new(),
            session: 0,
        })
    }

    pub fn with_identity(mut self, subject_id: impl Into<String>, session: u32) -> Self {
        self.subject_id = subject_id.into();
        self.session = session;
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grey.shape()
    }

    /// Checks the plane shapes against a geometry and the value ranges.
    pub fn check(&self, geo: &GeometryConfig) -> Result<()> {
        let expected = geo.shape();
        for plane in [&self.grey, &self.cr, &self.cb] {
            if plane.shape() != expected {
                return Err(Error::GeometryMismatch {
                    expected,
                    found: plane.shape(),
                });
            }
        }
        if self.grey.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("grey plane outside [0,1]".into()));
        }
        if self
            .cr
            .iter()
            .chain(self.cb.iter())
            .any(|v| !(0.0..=255.0).contains(v))
        {
            return Err(Error::InvalidArgument(
                "chroma plane outside [0,255]".into(),
            ));
        }
        Ok(())
    }
}

/// Result of [`align_and_crop`].
#[derive(Debug, Clone)]
pub struct Aligned {
    pub sample: FaceSample,
    /// Crop pixels whose source position fell outside the image; they hold
    /// the plane mean.
    pub out_of_bounds: usize,
}

/// Maps the annotated eyes (source `(row, col)` pixels) onto the geometry's
/// eye targets with a similarity transform and resamples all three planes
/// bilinearly.
pub fn align_and_crop(
    img: &RawImage,
    left_eye: (f64, f64),
    right_eye: (f64, f64),
    geo: &GeometryConfig,
) -> Result<Aligned> {
    geo.validate()?;
    let (h, w) = (img.height() as f64, img.width() as f64);
    for eye in [left_eye, right_eye] {
        if !(eye.0 >= 0.0 && eye.0 <= h - 1.0 && eye.1 >= 0.0 && eye.1 <= w - 1.0) {
            return Err(Error::EyeOutsideImage(eye));
        }
    }
    // complex plane: re = col, im = row
    let src_l = Complex::new(left_eye.1, left_eye.0);
    let src_r = Complex::new(right_eye.1, right_eye.0);
    let (tl, tr) = geo.eye_targets_px();
    let dst_l = Complex::new(tl.1, tl.0);
    let dst_r = Complex::new(tr.1, tr.0);
    let src_d = src_r - src_l;
    if src_d.norm() < 1e-9 {
        return Err(Error::DegenerateAlignment);
    }
    // crop -> source: s = a * p + b
    let a = src_d / (dst_r - dst_l);
    let b = src_l - a * dst_l;

    let planes = img.ycbcr_planes();
    let means = [planes.y.mean(), planes.cr.mean(), planes.cb.mean()];
    let mut out = [
        DMatrix::zeros(geo.rows, geo.cols),
        DMatrix::zeros(geo.rows, geo.cols),
        DMatrix::zeros(geo.rows, geo.cols),
    ];
    let mut out_of_bounds = 0;
    for r in 0..geo.rows {
        for c in 0..geo.cols {
            let s = a * Complex::new(c as f64, r as f64) + b;
            let (sx, sy) = (s.re, s.im);
            const EPS: f64 = 1e-9;
            if sx < -EPS || sy < -EPS || sx > w - 1.0 + EPS || sy > h - 1.0 + EPS {
                out_of_bounds += 1;
                for (plane, &mean) in out.iter_mut().zip(&means) {
                    plane[(r, c)] = mean;
                }
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, w - 1.0), sy.clamp(0.0, h - 1.0));
            for (plane, src) in out.iter_mut().zip([&planes.y, &planes.cr, &planes.cb]) {
                plane[(r, c)] = bilinear(src, sy, sx);
            }
        }
    }
    if out_of_bounds > 0 {
        log::warn!("alignment sampled {out_of_bounds} pixels outside the source image");
    }
    let [y, cr, cb] = out;
    let grey = y.map(|v| (v / 255.0).clamp(0.0, 1.0));
    Ok(Aligned {
        sample: FaceSample::new(grey, cr, cb)?,
        out_of_bounds,
    })
}

fn bilinear(src: &DMatrix<f64>, row: f64, col: f64) -> f64 {
    let (h, w) = src.shape();
    let r0 = (row.floor() as usize).min(h - 1);
    let c0 = (col.floor() as usize).min(w - 1);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    let top = src[(r0, c0)] * (1.0 - fc) + src[(r0, c1)] * fc;
    let bottom = src[(r1, c0)] * (1.0 - fc) + src[(r1, c1)] * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Rectangular Cr/Cb skin box (inclusive bounds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkinBounds {
    pub cr_lo: f64,
    pub cr_hi: f64,
    pub cb_lo: f64,
    pub cb_hi: f64,
}

impl Default for SkinBounds {
    fn default() -> Self {
        Self {
            cr_lo: 133.0,
            cr_hi: 173.0,
            cb_lo: 77.0,
            cb_hi: 127.0,
        }
    }
}

impl SkinBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.cr_lo <= self.cr_hi) || !(self.cb_lo <= self.cb_hi) {
            return Err(Error::Config(format!("empty skin bounds {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, cr: f64, cb: f64) -> bool {
        (self.cr_lo..=self.cr_hi).contains(&cr) && (self.cb_lo..=self.cb_hi).contains(&cb)
    }
}

/// Pointwise skin classification of chroma planes.
pub fn skin_mask(
    cr: &DMatrix<f64>,
    cb: &DMatrix<f64>,
    bounds: &SkinBounds,
) -> Result<DMatrix<bool>> {
    if cr.shape() != cb.shape() {
        return Err(Error::shape(cr.shape(), cb.shape()));
    }
    Ok(cr.zip_map(cb, |r, b| bounds.contains(r, b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ycbcr_reference_points() {
        assert_eq!(rgb_to_ycbcr(0, 0, 0), (0.0, 128.0, 128.0));
        let (y, cr, cb) = rgb_to_ycbcr(255, 255, 255);
        assert_abs_diff_eq!(y, 255.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cr, 128.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cb, 128.0, epsilon = 1e-9);
        // 0.299*255, clamp(128+127.5), 128-0.168736*255
        let (y, cr, cb) = rgb_to_ycbcr(255, 0, 0);
        assert_abs_diff_eq!(y, 76.245, epsilon = 1e-9);
        assert_eq!(cr, 255.0);
        assert_abs_diff_eq!(cb, 84.97232, epsilon = 1e-9);
    }

    #[test]
    fn grey_inputs_have_neutral_chroma() {
        for v in 0..=255u8 {
            let (_, cr, cb) = rgb_to_ycbcr(v, v, v);
            assert_abs_diff_eq!(cr, 128.0, epsilon = 1e-12);
            assert_abs_diff_eq!(cb, 128.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_conversion_roundtrips_within_quantisation() {
        for &(r, g, b) in &[(10u8, 200u8, 30u8), (250, 180, 160), (128, 64, 32)] {
            let (y, cr, cb) = rgb_to_ycbcr(r, g, b);
            let back = ycbcr_to_rgb(y, cr, cb);
            for (x, y) in back.iter().zip([r, g, b]) {
                assert!((i32::from(*x) - i32::from(y)).abs() <= 1);
            }
        }
    }

    fn test_image(w: usize, h: usize) -> RawImage {
        RawImage::from_fn(w, h, |r, c| {
            [
                (r * 7 % 256) as u8,
                (c * 13 % 256) as u8,
                ((r + c) * 5 % 256) as u8,
            ]
        })
    }

    #[test]
    fn identity_alignment_reproduces_input() {
        let geo = GeometryConfig::default();
        let img = test_image(geo.cols, geo.rows);
        let (tl, tr) = geo.eye_targets_px();
        let out = align_and_crop(&img, tl, tr, &geo).unwrap();
        assert_eq!(out.out_of_bounds, 0);
        let planes = img.ycbcr_planes();
        for r in 0..geo.rows {
            for c in 0..geo.cols {
                assert_abs_diff_eq!(
                    out.sample.grey[(r, c)],
                    planes.y[(r, c)] / 255.0,
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(out.sample.cr[(r, c)], planes.cr[(r, c)], epsilon = 1e-12);
                assert_abs_diff_eq!(out.sample.cb[(r, c)], planes.cb[(r, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn swapped_eyes_rotate_by_half_turn_and_involute() {
        let geo = GeometryConfig {
            rows: 11,
            cols: 11,
            left_eye_target: (0.5, 0.2),
            right_eye_target: (0.5, 0.8),
        };
        let img = test_image(11, 11);
        let (tl, tr) = geo.eye_targets_px();
        let once = align_and_crop(&img, tr, tl, &geo).unwrap();
        assert_eq!(once.out_of_bounds, 0);
        let planes = img.ycbcr_planes();
        for r in 0..11 {
            for c in 0..11 {
                assert_abs_diff_eq!(
                    once.sample.cr[(r, c)],
                    planes.cr[(10 - r, 10 - c)],
                    epsilon = 1e-9
                );
            }
        }
        // back to RGB and flip again
        let rotated = RawImage::from_fn(11, 11, |r, c| {
            let s = &once.sample;
            ycbcr_to_rgb(s.grey[(r, c)] * 255.0, s.cr[(r, c)], s.cb[(r, c)])
        });
        let twice = align_and_crop(&rotated, tr, tl, &geo).unwrap();
        let expected = align_and_crop(
            &RawImage::from_fn(11, 11, |r, c| {
                let p = img.pixel(r, c);
                let (y, cr, cb) = rgb_to_ycbcr(p[0], p[1], p[2]);
                ycbcr_to_rgb(y, cr, cb)
            }),
            tl,
            tr,
            &geo,
        )
        .unwrap();
        for (a, b) in twice.sample.grey.iter().zip(expected.sample.grey.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn marker_lands_on_left_eye_target() {
        let geo = GeometryConfig::default();
        let (w, h) = (160usize, 140usize);
        let left = (52.0, 48.0);
        let right = (61.0, 101.0);
        let img = RawImage::from_fn(w, h, |r, c| {
            if (r as f64 - left.0).abs() <= 1.0 && (c as f64 - left.1).abs() <= 1.0 {
                [255, 255, 255]
            } else {
                [20, 20, 20]
            }
        });
        let out = align_and_crop(&img, left, right, &geo).unwrap();
        let (idx, _) = out
            .sample
            .grey
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let (r, c) = (idx % geo.rows, idx / geo.rows);
        let (tl, _) = geo.eye_targets_px();
        assert!((r as f64 - tl.0).abs() <= 1.0, "row {r} vs {}", tl.0);
        assert!((c as f64 - tl.1).abs() <= 1.0, "col {c} vs {}", tl.1);
    }

    #[test]
    fn output_shape_is_geometry_and_oob_filled() {
        let geo = GeometryConfig::default();
        let img = test_image(20, 15);
        let out = align_and_crop(&img, (7.0, 5.0), (7.0, 12.0), &geo).unwrap();
        assert_eq!(out.sample.shape(), (61, 57));
        assert!(out.out_of_bounds > 0);
        out.sample.check(&geo).unwrap();
    }

    #[test]
    fn coincident_eyes_are_rejected() {
        let img = test_image(30, 30);
        let err = align_and_crop(&img, (10.0, 10.0), (10.0, 10.0), &GeometryConfig::default());
        assert!(matches!(err, Err(Error::DegenerateAlignment)));
    }

    #[test]
    fn skin_mask_defaults() {
        let b = SkinBounds::default();
        let neutral = DMatrix::from_element(3, 4, 128.0);
        assert!(skin_mask(&neutral, &neutral, &b)
            .unwrap()
            .iter()
            .all(|v| !v));
        let cr = DMatrix::from_element(3, 4, 150.0);
        let cb = DMatrix::from_element(3, 4, 100.0);
        let m = skin_mask(&cr, &cb, &b).unwrap();
        assert!(m.iter().all(|v| *v));
        assert_eq!(m, skin_mask(&cr, &cb, &b).unwrap());
    }

    #[test]
    fn empty_skin_bounds_rejected() {
        let b = SkinBounds {
            cr_lo: 180.0,
            ..SkinBounds::default()
        };
        assert!(matches!(b.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn geometry_validation() {
        GeometryConfig::default().validate().unwrap();
        let bad = GeometryConfig {
            left_eye_target: (0.4, 0.8),
            right_eye_target: (0.4, 0.2),
            ..GeometryConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = test_image(9, 5);
        img.save_ppm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..2], b"P6");
        assert_eq!(RawImage::load(&p).unwrap(), img);
    }
}
