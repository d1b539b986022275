//! Foreground probability from sample color affinity, and the low/high
//! certainty split that decides each pixel's dictionary.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{PixelMask, RasterImage};
use crate::preprocess::{select_closest, Sample, SampleLabel};

/// Foreground probability, defined on the unknown pixels only.
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
    defined: Vec<bool>,
}

impl ProbabilityMap {
    /// A map with no defined pixels; the degenerate result when an image has
    /// nothing to estimate.
    pub fn undefined(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        ProbabilityMap {
            width,
            height,
            values: vec![0.0; n],
            defined: vec![false; n],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let idx = y as usize * self.width as usize + x as usize;
        self.defined[idx].then(|| self.values[idx])
    }

    pub fn get_at(&self, idx: usize) -> Option<f64> {
        self.defined[idx].then(|| self.values[idx])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certainty {
    Low,
    High,
}

/// Low/high certainty flags, defined on the unknown pixels only.
#[derive(Debug, Clone)]
pub struct CertaintyMask {
    width: u32,
    height: u32,
    low: Vec<bool>,
    defined: Vec<bool>,
}

impl CertaintyMask {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> Option<Certainty> {
        let idx = y as usize * self.width as usize + x as usize;
        self.defined[idx]
            .then(|| if self.low[idx] { Certainty::Low } else { Certainty::High })
    }

    pub fn get_at(&self, idx: usize) -> Option<Certainty> {
        self.defined[idx]
            .then(|| if self.low[idx] { Certainty::Low } else { Certainty::High })
    }

    pub fn low_count(&self) -> usize {
        self.low.iter().filter(|&&b| b).count()
    }
}

/// exp(-Σ‖c - c_k‖² / (m·δ)) over the passed sample colors, m = their count.
/// The caller is responsible for passing the spatially closest samples.
pub fn color_affinity(pixel_rgb: [f64; 3], sample_colors: &[[f64; 3]], delta: f64) -> Result<f64> {
    if sample_colors.is_empty() {
        return Err(Error::EmptySelection);
    }
    let m = sample_colors.len() as f64;
    let sum: f64 = sample_colors
        .iter()
        .map(|c| {
            (0..3)
                .map(|k| {
                    let d = pixel_rgb[k] - c[k];
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok((-sum / (m * delta)).exp())
}

/// p = p_f / (p_f + p_b) from the m spatially closest samples of each label;
/// both affinities underflowing to zero falls back to p = 1/2.
pub fn foreground_probability(
    image: &RasterImage,
    samples: &[Sample],
    unknowns: &PixelMask,
    m: usize,
    delta: f64,
) -> Result<ProbabilityMap> {
    if m == 0 {
        return Err(Error::InvalidParameter("m must be positive".into()));
    }
    if !samples.iter().any(|s| s.label == SampleLabel::Foreground) {
        return Err(Error::EmptyBank("foreground"));
    }
    if !samples.iter().any(|s| s.label == SampleLabel::Background) {
        return Err(Error::EmptyBank("background"));
    }
    let w = unknowns.width();
    let h = unknowns.height();
    let n = w as usize * h as usize;

    let cells: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            if !unknowns.get_at(idx) {
                return (0.0, false);
            }
            let x = (idx % w as usize) as u32;
            let y = (idx / w as usize) as u32;
            let point = (x as f64, y as f64);
            let rgb = image.rgb(x, y);
            let gather = |label| {
                let ids = select_closest(samples, Some(label), point, m);
                let colors: Vec<[f64; 3]> = ids.iter().map(|&i| samples[i].mean_rgb).collect();
                color_affinity(rgb, &colors, delta).expect("nonempty selection")
            };
            let pf = gather(SampleLabel::Foreground);
            let pb = gather(SampleLabel::Background);
            let p = if pf + pb == 0.0 { 0.5 } else { pf / (pf + pb) };
            (p, true)
        })
        .collect();

    let mut values = Vec::with_capacity(n);
    let mut defined = Vec::with_capacity(n);
    for (v, d) in cells {
        values.push(v);
        defined.push(d);
    }
    Ok(ProbabilityMap {
        width: w,
        height: h,
        values,
        defined,
    })
}

/// Low certainty iff strictly more than `count_thr` pixels of the
/// window×window neighborhood (intersected with the unknown set) carry a
/// probability inside `band`. The window is centered and inclusive.
pub fn classify_certainty(
    pmap: &ProbabilityMap,
    window: u32,
    band: (f64, f64),
    count_thr: usize,
) -> CertaintyMask {
    let w = pmap.width;
    let h = pmap.height;
    let r = (window / 2) as i64;
    let n = w as usize * h as usize;
    let cells: Vec<(bool, bool)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            if !pmap.defined[idx] {
                return (false, false);
            }
            let x = (idx % w as usize) as i64;
            let y = (idx / w as usize) as i64;
            let mut count = 0usize;
            for dy in -r..=r {
                let ny = y + dy;
                if ny < 0 || ny >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let nx = x + dx;
                    if nx < 0 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w as usize + nx as usize;
                    if !pmap.defined[nidx] {
                        continue;
                    }
                    let p = pmap.values[nidx];
                    if p >= band.0 && p <= band.1 {
                        count += 1;
                    }
                }
            }
            (count > count_thr, true)
        })
        .collect();

    let mut low = Vec::with_capacity(n);
    let mut defined = Vec::with_capacity(n);
    for (l, d) in cells {
        low.push(l);
        defined.push(d);
    }
    CertaintyMask {
        width: w,
        height: h,
        low,
        defined,
    }
}
