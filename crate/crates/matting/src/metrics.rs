//! Matte comparison metrics and the compositing helper used to build
//! synthetic ground truth.

use crate::error::{Error, Result};
use crate::imaging::{Matte, PixelMask, RasterImage};

fn check_dims(pred: &Matte, gt: &Matte, region: &PixelMask) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::DimensionMismatch {
            expected_w: pred.width(),
            expected_h: pred.height(),
            got_w: gt.width(),
            got_h: gt.height(),
        });
    }
    if region.width() != pred.width() || region.height() != pred.height() {
        return Err(Error::DimensionMismatch {
            expected_w: pred.width(),
            expected_h: pred.height(),
            got_w: region.width(),
            got_h: region.height(),
        });
    }
    Ok(())
}

/// Sum of absolute differences over the region.
pub fn sad(pred: &Matte, gt: &Matte, region: &PixelMask) -> Result<f64> {
    check_dims(pred, gt, region)?;
    Ok(region
        .indices()
        .into_iter()
        .map(|i| (pred.values()[i] - gt.values()[i]).abs())
        .sum())
}

/// Mean squared difference over the region.
pub fn mse(pred: &Matte, gt: &Matte, region: &PixelMask) -> Result<f64> {
    check_dims(pred, gt, region)?;
    let count = region.count();
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    let total: f64 = region
        .indices()
        .into_iter()
        .map(|i| {
            let d = pred.values()[i] - gt.values()[i];
            d * d
        })
        .sum();
    Ok(total / count as f64)
}

/// Sampled Gaussian (normalized to unit sum) and its derivative, radius 4σ.
fn gaussian_pair(sigma: f64) -> (Vec<f64>, Vec<f64>, usize) {
    let r = (4.0 * sigma).ceil() as usize;
    let mut g: Vec<f64> = (-(r as isize)..=r as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= sum;
    }
    let dg: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(t, &gv)| {
            let i = t as isize - r as isize;
            -(i as f64) / (sigma * sigma) * gv
        })
        .collect();
    (g, dg, r)
}

/// 1-D convolution along rows (horizontal = true) or columns, with the image
/// border replicated.
fn convolve_axis(
    data: &[f64],
    width: usize,
    height: usize,
    kernel: &[f64],
    radius: usize,
    horizontal: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let off = t as isize - radius as isize;
                let (sx, sy) = if horizontal {
                    ((x as isize - off).clamp(0, width as isize - 1), y as isize)
                } else {
                    (x as isize, (y as isize - off).clamp(0, height as isize - 1))
                };
                acc += kv * data[sy as usize * width + sx as usize];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Smoothed-gradient field of a matte: x-derivative and y-derivative planes
/// from separable Gaussian-derivative filtering.
pub(crate) fn smoothed_gradient(m: &Matte, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let (g, dg, r) = gaussian_pair(sigma);
    let w = m.width() as usize;
    let h = m.height() as usize;
    let gx = convolve_axis(
        &convolve_axis(m.values(), w, h, &dg, r, true),
        w,
        h,
        &g,
        r,
        false,
    );
    let gy = convolve_axis(
        &convolve_axis(m.values(), w, h, &g, r, true),
        w,
        h,
        &dg,
        r,
        false,
    );
    (gx, gy)
}

/// Sum over the region of the squared difference between the two mattes'
/// Gaussian-derivative gradients (reported as a sum, not a mean).
pub fn gradient_error(pred: &Matte, gt: &Matte, region: &PixelMask, sigma: f64) -> Result<f64> {
    check_dims(pred, gt, region)?;
    let (px, py) = smoothed_gradient(pred, sigma);
    let (gx, gy) = smoothed_gradient(gt, sigma);
    Ok(region
        .indices()
        .into_iter()
        .map(|i| {
            let dx = px[i] - gx[i];
            let dy = py[i] - gy[i];
            dx * dx + dy * dy
        })
        .sum())
}

/// Temporal coherence error: mean over frames t ≥ 1 and all pixels of the
/// squared difference between predicted and true temporal derivatives.
pub fn tce(pred_seq: &[Matte], gt_seq: &[Matte]) -> Result<f64> {
    if pred_seq.len() != gt_seq.len() {
        return Err(Error::SequenceMismatch {
            left: pred_seq.len(),
            right: gt_seq.len(),
        });
    }
    if pred_seq.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "temporal coherence needs at least 2 frames, got {}",
            pred_seq.len()
        )));
    }
    let w = pred_seq[0].width();
    let h = pred_seq[0].height();
    for m in pred_seq.iter().chain(gt_seq) {
        if m.width() != w || m.height() != h {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: m.width(),
                got_h: m.height(),
            });
        }
    }
    let n = (w as usize) * (h as usize);
    let mut total = 0.0;
    for t in 1..pred_seq.len() {
        for i in 0..n {
            let dp = pred_seq[t].values()[i] - pred_seq[t - 1].values()[i];
            let dg = gt_seq[t].values()[i] - gt_seq[t - 1].values()[i];
            let d = dp - dg;
            total += d * d;
        }
    }
    Ok(total / ((pred_seq.len() - 1) * n) as f64)
}

/// Per-pixel composite I = αF + (1-α)B.
pub fn synth_composite(fg: &RasterImage, bg: &RasterImage, alpha: &Matte) -> Result<RasterImage> {
    if fg.width() != bg.width()
        || fg.height() != bg.height()
        || fg.width() != alpha.width()
        || fg.height() != alpha.height()
    {
        return Err(Error::DimensionMismatch {
            expected_w: fg.width(),
            expected_h: fg.height(),
            got_w: bg.width().max(alpha.width()),
            got_h: bg.height().max(alpha.height()),
        });
    }
    let n = fg.pixel_count();
    let mut rgb = Vec::with_capacity(n);
    for i in 0..n {
        let a = alpha.values()[i];
        let f = fg.rgb_at(i);
        let b = bg.rgb_at(i);
        rgb.push([
            a * f[0] + (1.0 - a) * b[0],
            a * f[1] + (1.0 - a) * b[1],
            a * f[2] + (1.0 - a) * b[2],
        ]);
    }
    Ok(RasterImage::new(fg.width(), fg.height(), rgb))
}
