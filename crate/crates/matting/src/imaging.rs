//! Raster containers plus color conversion and the 6-D coding feature.
//!
//! All pixel data lives in f64. Images decode to RGB in [0,1] regardless of
//! source bit depth; mattes are single-channel in [0,1]. Pixels are indexed
//! row-major, `idx = y * width + x`.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// RGB image with channels in [0,1].
#[derive(Debug, Clone)]
pub struct RasterImage {
    width: u32,
    height: u32,
    rgb: Vec<[f64; 3]>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, rgb: Vec<[f64; 3]>) -> Self {
        assert_eq!(rgb.len(), width as usize * height as usize);
        Self { width, height, rgb }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                rgb.push(f(x, y));
            }
        }
        Self { width, height, rgb }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.rgb.len()
    }

    #[inline]
    pub fn rgb(&self, x: u32, y: u32) -> [f64; 3] {
        self.rgb[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn rgb_at(&self, idx: usize) -> [f64; 3] {
        self.rgb[idx]
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.rgb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimapLabel {
    Foreground,
    Background,
    Unknown,
}

/// Per-pixel F/B/Unknown labeling. Immutable; the known-region expansion pass
/// produces a fresh map rather than editing in place.
#[derive(Debug, Clone)]
pub struct Trimap {
    width: u32,
    height: u32,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    /// Requires at least one F and one B pixel.
    pub fn new(width: u32, height: u32, labels: Vec<TrimapLabel>) -> Result<Self> {
        assert_eq!(labels.len(), width as usize * height as usize);
        if !labels.iter().any(|&l| l == TrimapLabel::Foreground) {
            return Err(Error::MissingLabel("foreground"));
        }
        if !labels.iter().any(|&l| l == TrimapLabel::Background) {
            return Err(Error::MissingLabel("background"));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn label(&self, x: u32, y: u32) -> TrimapLabel {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn label_at(&self, idx: usize) -> TrimapLabel {
        self.labels[idx]
    }

    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }

    pub fn unknown_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l == TrimapLabel::Unknown)
            .count()
    }

    pub fn unknown_mask(&self) -> PixelMask {
        PixelMask {
            width: self.width,
            height: self.height,
            bits: self
                .labels
                .iter()
                .map(|&l| l == TrimapLabel::Unknown)
                .collect(),
        }
    }
}

/// Boolean pixel set over a fixed raster.
#[derive(Debug, Clone)]
pub struct PixelMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn get_at(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of set pixels in row-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Alpha matte with values in [0,1].
#[derive(Debug, Clone)]
pub struct Matte {
    width: u32,
    height: u32,
    alpha: Vec<f64>,
}

impl Matte {
    pub fn new(width: u32, height: u32, alpha: Vec<f64>) -> Self {
        assert_eq!(alpha.len(), width as usize * height as usize);
        Self {
            width,
            height,
            alpha,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn alpha(&self, x: u32, y: u32) -> f64 {
        self.alpha[y as usize * self.width as usize + x as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }
}

/// Unit-length (or zero) stack of RGB and scaled CIELAB channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVec6(pub [f64; 6]);

impl FeatureVec6 {
    pub fn zero() -> Self {
        FeatureVec6([0.0; 6])
    }

    /// Normalizes the raw stack to unit length; the all-zero stack stays zero.
    pub fn from_raw(raw: [f64; 6]) -> Self {
        let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            FeatureVec6(raw)
        } else {
            FeatureVec6(raw.map(|c| c / norm))
        }
    }

    pub fn components(&self) -> [f64; 6] {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// sRGB (D65) to CIELAB, unscaled: L in [0,100], a/b in roughly [-128, 127].
///
/// Gamma decoding happens here; callers pass the stored (nonlinear) channel
/// values. The reference white is the row sum of the RGB->XYZ matrix, so pure
/// white lands exactly on L=100, a=b=0.
pub(crate) fn rgb_to_lab_unscaled(rgb: [f64; 3]) -> [f64; 3] {
    #[inline]
    fn linearize(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }

    const M: [[f64; 3]; 3] = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];

    let r = linearize(rgb[0]);
    let g = linearize(rgb[1]);
    let b = linearize(rgb[2]);

    let x = M[0][0] * r + M[0][1] * g + M[0][2] * b;
    let y = M[1][0] * r + M[1][1] * g + M[1][2] * b;
    let z = M[2][0] * r + M[2][1] * g + M[2][2] * b;

    let xn = M[0][0] + M[0][1] + M[0][2];
    let yn = M[1][0] + M[1][1] + M[1][2];
    let zn = M[2][0] + M[2][1] + M[2][2];

    #[inline]
    fn f(t: f64) -> f64 {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }

    let fx = f(x / xn);
    let fy = f(y / yn);
    let fz = f(z / zn);

    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB to CIELAB rescaled to the unit range used by features:
/// `[L/100, (a+128)/255, (b+128)/255]`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lab = rgb_to_lab_unscaled(rgb);
    [lab[0] / 100.0, (lab[1] + 128.0) / 255.0, (lab[2] + 128.0) / 255.0]
}

/// 6-D coding feature of a pixel: RGB and scaled Lab stacked, then normalized
/// to unit length. The all-zero (black) color maps to the zero vector.
pub fn feature_at(image: &RasterImage, x: u32, y: u32) -> Result<FeatureVec6> {
    if x >= image.width() || y >= image.height() {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(feature_of(image.rgb(x, y)))
}

/// Same feature construction from a bare color; used for superpixel means.
pub fn feature_of(rgb: [f64; 3]) -> FeatureVec6 {
    if rgb == [0.0, 0.0, 0.0] {
        return FeatureVec6::zero();
    }
    let lab = rgb_to_lab(rgb);
    FeatureVec6::from_raw([rgb[0], rgb[1], rgb[2], lab[0], lab[1], lab[2]])
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let img = reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "zero-sized image".into(),
        });
    }
    Ok(img)
}

/// Loads an 8- or 16-bit PNG or PNM image as RGB in [0,1].
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    let (w, h) = (img.width(), img.height());
    let rgb: Vec<[f64; 3]> = match img {
        DynamicImage::ImageLuma8(buf) => buf
            .pixels()
            .map(|p| {
                let v = p.0[0] as f64 / 255.0;
                [v, v, v]
            })
            .collect(),
        DynamicImage::ImageLumaA8(buf) => buf
            .pixels()
            .map(|p| {
                let v = p.0[0] as f64 / 255.0;
                [v, v, v]
            })
            .collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .pixels()
            .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
            .collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .pixels()
            .map(|p| {
                let v = p.0[0] as f64 / 65535.0;
                [v, v, v]
            })
            .collect(),
        DynamicImage::ImageLumaA16(buf) => buf
            .pixels()
            .map(|p| {
                let v = p.0[0] as f64 / 65535.0;
                [v, v, v]
            })
            .collect(),
        DynamicImage::ImageRgb16(buf) => buf
            .pixels()
            .map(|p| {
                [
                    p.0[0] as f64 / 65535.0,
                    p.0[1] as f64 / 65535.0,
                    p.0[2] as f64 / 65535.0,
                ]
            })
            .collect(),
        DynamicImage::ImageRgba16(buf) => buf
            .pixels()
            .map(|p| {
                [
                    p.0[0] as f64 / 65535.0,
                    p.0[1] as f64 / 65535.0,
                    p.0[2] as f64 / 65535.0,
                ]
            })
            .collect(),
        _ => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: "only 8- and 16-bit integer images are supported".into(),
            })
        }
    };
    Ok(RasterImage::new(w, h, rgb))
}

/// Per-pixel gray levels on the 8-bit scale, from any supported grayscale
/// image. RGB inputs are accepted only when all channels agree.
fn gray_levels(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let img = open_dynamic(path)?;
    let (w, h) = (img.width(), img.height());
    let reject_color = || Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason: "expected a grayscale image (or RGB with equal channels)".into(),
    };
    let levels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] as f64).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.pixels().map(|p| p.0[0] as f64 / 257.0).collect()
        }
        DynamicImage::ImageLumaA16(buf) => {
            buf.pixels().map(|p| p.0[0] as f64 / 257.0).collect()
        }
        DynamicImage::ImageRgb8(buf) => {
            let mut out = Vec::with_capacity(w as usize * h as usize);
            for p in buf.pixels() {
                if p.0[0] != p.0[1] || p.0[1] != p.0[2] {
                    return Err(reject_color());
                }
                out.push(p.0[0] as f64);
            }
            out
        }
        DynamicImage::ImageRgba8(buf) => {
            let mut out = Vec::with_capacity(w as usize * h as usize);
            for p in buf.pixels() {
                if p.0[0] != p.0[1] || p.0[1] != p.0[2] {
                    return Err(reject_color());
                }
                out.push(p.0[0] as f64);
            }
            out
        }
        DynamicImage::ImageRgb16(buf) => {
            let mut out = Vec::with_capacity(w as usize * h as usize);
            for p in buf.pixels() {
                if p.0[0] != p.0[1] || p.0[1] != p.0[2] {
                    return Err(reject_color());
                }
                out.push(p.0[0] as f64 / 257.0);
            }
            out
        }
        _ => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: "only 8- and 16-bit integer images are supported".into(),
            })
        }
    };
    Ok((w, h, levels))
}

/// Loads a trimap from a grayscale image: level < 85 reads Background,
/// level > 170 reads Foreground, anything between reads Unknown. The
/// slack around the canonical 0/128/255 levels tolerates antialiased or
/// hand-painted maps. Dimensions must match `expected` when given.
pub fn load_trimap(path: impl AsRef<Path>, expected: Option<(u32, u32)>) -> Result<Trimap> {
    let path = path.as_ref();
    let (w, h, levels) = gray_levels(path)?;
    if let Some((ew, eh)) = expected {
        if (w, h) != (ew, eh) {
            return Err(Error::DimensionMismatch {
                expected_w: ew,
                expected_h: eh,
                got_w: w,
                got_h: h,
            });
        }
    }
    let labels = levels
        .iter()
        .map(|&g| {
            if g < 85.0 {
                TrimapLabel::Background
            } else if g > 170.0 {
                TrimapLabel::Foreground
            } else {
                TrimapLabel::Unknown
            }
        })
        .collect();
    Trimap::new(w, h, labels)
}

/// Loads a grayscale image as a matte in [0,1].
pub fn load_matte(path: impl AsRef<Path>) -> Result<Matte> {
    let path = path.as_ref();
    let (w, h, levels) = gray_levels(path)?;
    Ok(Matte::new(w, h, levels.iter().map(|&g| g / 255.0).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Writes a matte as a grayscale PNG, rounding to the nearest level.
pub fn save_matte(matte: &Matte, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let encode_err = |source| Error::Encode {
        path: path.to_path_buf(),
        source,
    };
    match depth {
        BitDepth::Eight => {
            let buf = image::GrayImage::from_fn(matte.width(), matte.height(), |x, y| {
                image::Luma([(matte.alpha(x, y).clamp(0.0, 1.0) * 255.0).round() as u8])
            });
            buf.save_with_format(path, ImageFormat::Png).map_err(encode_err)
        }
        BitDepth::Sixteen => {
            let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
                matte.width(),
                matte.height(),
                |x, y| image::Luma([(matte.alpha(x, y).clamp(0.0, 1.0) * 65535.0).round() as u16]),
            );
            buf.save_with_format(path, ImageFormat::Png).map_err(encode_err)
        }
    }
}

/// Writes an RGB image as an 8- or 16-bit PNG.
pub fn save_image(img: &RasterImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let encode_err = |source| Error::Encode {
        path: path.to_path_buf(),
        source,
    };
    match depth {
        BitDepth::Eight => {
            let buf = image::RgbImage::from_fn(img.width(), img.height(), |x, y| {
                let c = img.rgb(x, y);
                image::Rgb([
                    (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ])
            });
            buf.save_with_format(path, ImageFormat::Png).map_err(encode_err)
        }
        BitDepth::Sixteen => {
            let buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_fn(
                img.width(),
                img.height(),
                |x, y| {
                    let c = img.rgb(x, y);
                    image::Rgb([
                        (c[0].clamp(0.0, 1.0) * 65535.0).round() as u16,
                        (c[1].clamp(0.0, 1.0) * 65535.0).round() as u16,
                        (c[2].clamp(0.0, 1.0) * 65535.0).round() as u16,
                    ])
                },
            );
            buf.save_with_format(path, ImageFormat::Png).map_err(encode_err)
        }
    }
}

/// Writes a trimap as an 8-bit grayscale PNG using the canonical levels
/// 255 (F), 0 (B), 128 (Unknown).
pub fn save_trimap(trimap: &Trimap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_fn(trimap.width(), trimap.height(), |x, y| {
        image::Luma([match trimap.label(x, y) {
            TrimapLabel::Foreground => 255u8,
            TrimapLabel::Background => 0,
            TrimapLabel::Unknown => 128,
        }])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Encode {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference Lab values (unscaled) for spot colors, frozen from an
    // independent colorimetry implementation.
    const LAB_REFERENCE: &[([f64; 3], [f64; 3])] = &[
        ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ([1.0, 1.0, 1.0], [100.0, 0.0, 0.0]),
        ([1.0, 0.0, 0.0], [53.2405879437, 80.0923082257, 67.2027510444]),
        ([0.0, 1.0, 0.0], [87.7350994883, -86.1830297444, 83.1797031754]),
        ([0.0, 0.0, 1.0], [32.2956725650, 79.1855909118, -107.8573002067]),
        ([0.5, 0.5, 0.5], [53.3889647411, 0.0, 0.0]),
        ([0.25, 0.5, 0.75], [52.0180115823, 0.0906311925, -39.3593697186]),
        ([0.9, 0.1, 0.3], [49.4855859282, 73.2156120261, 27.0911888276]),
        ([0.123, 0.456, 0.789], [48.3559723582, 6.5885421222, -50.9257674231]),
        ([0.01, 0.02, 0.03], [1.3000539221, -0.3123502773, -1.1997649952]),
        ([0.7, 0.7, 0.2], [70.7360380136, -15.1598210298, 61.3037304000]),
        ([0.33, 0.66, 0.99], [67.3226089370, 0.4642654072, -49.2662657927]),
    ];

    #[test]
    fn lab_matches_reference_colors() {
        // Scaled-channel tolerance 1e-3; the unscaled equivalents are 0.1 in L
        // and 0.255 in a/b, far above the white-point rounding differences
        // between reference implementations.
        for &(rgb, lab_ref) in LAB_REFERENCE {
            let got = rgb_to_lab(rgb);
            let want = [
                lab_ref[0] / 100.0,
                (lab_ref[1] + 128.0) / 255.0,
                (lab_ref[2] + 128.0) / 255.0,
            ];
            for c in 0..3 {
                assert!(
                    (got[c] - want[c]).abs() < 1e-3,
                    "channel {c} of {rgb:?}: got {}, want {}",
                    got[c],
                    want[c]
                );
            }
        }
    }

    #[test]
    fn lab_white_is_exact() {
        let lab = rgb_to_lab_unscaled([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-9);
        assert!(lab[1].abs() < 1e-9);
        assert!(lab[2].abs() < 1e-9);
    }

    #[test]
    fn black_feature_is_zero_vector() {
        let img = RasterImage::new(1, 1, vec![[0.0, 0.0, 0.0]]);
        let f = feature_at(&img, 0, 0).unwrap();
        assert_eq!(f.components(), [0.0; 6]);
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn white_feature_direction() {
        let img = RasterImage::new(1, 1, vec![[1.0, 1.0, 1.0]]);
        let f = feature_at(&img, 0, 0).unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-9);
        // Proportional to [1,1,1,1,128/255,128/255].
        let raw = [1.0, 1.0, 1.0, 1.0, 128.0 / 255.0, 128.0 / 255.0];
        let n = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
        for c in 0..6 {
            assert!((f.components()[c] - raw[c] / n).abs() < 1e-9);
        }
    }

    #[test]
    fn features_are_unit_or_zero() {
        for rgb in [
            [0.2, 0.4, 0.6],
            [1.0, 0.0, 0.0],
            [0.001, 0.0, 0.0],
            [0.5, 0.5, 0.5],
        ] {
            let f = feature_of(rgb);
            assert!((f.norm() - 1.0).abs() < 1e-9, "{rgb:?}");
        }
    }

    #[test]
    fn feature_out_of_bounds_errors() {
        let img = RasterImage::new(2, 2, vec![[0.5; 3]; 4]);
        assert!(matches!(
            feature_at(&img, 2, 0),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn ppm_decodes_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.ppm");
        // 2x2 P6, maxval 255, all pixels (128, 64, 32).
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[128, 64, 32]);
        }
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        for y in 0..2 {
            for x in 0..2 {
                let c = img.rgb(x, y);
                assert_eq!(c, [128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0]);
            }
        }
    }

    #[test]
    fn png_gray_roundtrip_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        let vals = vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1];
        let matte = Matte::new(3, 2, vals.clone());

        let p8 = dir.path().join("m8.png");
        save_matte(&matte, &p8, BitDepth::Eight).unwrap();
        let back8 = load_matte(&p8).unwrap();
        for (a, b) in back8.values().iter().zip(&vals) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let p16 = dir.path().join("m16.png");
        save_matte(&matte, &p16, BitDepth::Sixteen).unwrap();
        let back16 = load_matte(&p16).unwrap();
        for (a, b) in back16.values().iter().zip(&vals) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn save_matte_rounds_to_nearest_level() {
        let dir = tempfile::tempdir().unwrap();
        let matte = Matte::new(1, 1, vec![0.5]);

        let p8 = dir.path().join("half8.png");
        save_matte(&matte, &p8, BitDepth::Eight).unwrap();
        let img8 = image::open(&p8).unwrap().into_luma8();
        assert_eq!(img8.get_pixel(0, 0).0[0], 128);

        let p16 = dir.path().join("half16.png");
        save_matte(&matte, &p16, BitDepth::Sixteen).unwrap();
        let img16 = image::open(&p16).unwrap().into_luma16();
        assert_eq!(img16.get_pixel(0, 0).0[0], 32768);
    }

    #[test]
    fn trimap_levels_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.png");
        let buf = image::GrayImage::from_raw(3, 1, vec![0, 128, 255]).unwrap();
        buf.save(&path).unwrap();
        let tri = load_trimap(&path, Some((3, 1))).unwrap();
        assert_eq!(tri.label(0, 0), TrimapLabel::Background);
        assert_eq!(tri.label(1, 0), TrimapLabel::Unknown);
        assert_eq!(tri.label(2, 0), TrimapLabel::Foreground);

        // Threshold edges: 84 -> B, 85 -> Unknown, 170 -> Unknown, 171 -> F.
        let p2 = dir.path().join("tri2.png");
        let buf = image::GrayImage::from_raw(4, 1, vec![84, 85, 170, 171]).unwrap();
        buf.save(&p2).unwrap();
        let tri = load_trimap(&p2, None).unwrap();
        assert_eq!(tri.label(0, 0), TrimapLabel::Background);
        assert_eq!(tri.label(1, 0), TrimapLabel::Unknown);
        assert_eq!(tri.label(2, 0), TrimapLabel::Unknown);
        assert_eq!(tri.label(3, 0), TrimapLabel::Foreground);
    }

    #[test]
    fn trimap_missing_label_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("allf.png");
        let buf = image::GrayImage::from_raw(2, 1, vec![255, 255]).unwrap();
        buf.save(&path).unwrap();
        assert!(matches!(
            load_trimap(&path, None),
            Err(Error::MissingLabel("background"))
        ));
    }

    #[test]
    fn trimap_dimension_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let buf = image::GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        buf.save(&path).unwrap();
        assert!(matches!(
            load_trimap(&path, Some((3, 3))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn trimap_roundtrip_via_save() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![
            TrimapLabel::Foreground,
            TrimapLabel::Background,
            TrimapLabel::Unknown,
            TrimapLabel::Foreground,
        ];
        let tri = Trimap::new(2, 2, labels.clone()).unwrap();
        let path = dir.path().join("rt.png");
        save_trimap(&tri, &path).unwrap();
        let back = load_trimap(&path, Some((2, 2))).unwrap();
        assert_eq!(back.labels(), &labels[..]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/i.png"),
            Err(Error::Io { .. })
        ));
    }
}
