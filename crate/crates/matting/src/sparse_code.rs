//! Per-pixel dictionaries, the constrained sparse-coding solve, and the
//! alpha/confidence extraction that turns codes into graph data terms.

use rayon::prelude::*;

use crate::certainty::{Certainty, CertaintyMask, ProbabilityMap};
use crate::error::{Error, Result};
use crate::imaging::{feature_at, FeatureVec6, RasterImage, Trimap, TrimapLabel};
use crate::preprocess::{select_closest, SampleBank, SampleLabel};

/// Per-pixel atom set: F-block first, then B-block.
#[derive(Debug, Clone)]
pub struct Dictionary {
    atoms: Vec<FeatureVec6>,
    colors: Vec<[f64; 3]>,
    f_count: usize,
    b_count: usize,
    source_indices: Vec<usize>,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn f_count(&self) -> usize {
        self.f_count
    }

    pub fn b_count(&self) -> usize {
        self.b_count
    }

    pub fn atoms(&self) -> &[FeatureVec6] {
        &self.atoms
    }

    /// Mean RGB of each atom's source sample, same order as `atoms`.
    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Index of each atom in the bank it was drawn from.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }
}

/// Solver output. `residual` is ‖v − Dβ‖₂ of the raw optimizer iterate and is
/// deliberately not recomputed by `normalize_code`: the confidence wants the
/// actual least-squares reconstruction error.
#[derive(Debug, Clone)]
pub struct SparseCode {
    pub beta: Vec<f64>,
    pub residual: f64,
    pub converged: bool,
    /// Set by `normalize_code` when the code sums to zero and cannot be
    /// normalized; the pixel then takes its alpha from the probability map.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PixelEstimate {
    pub alpha_hat: f64,
    pub gamma: f64,
    pub gamma_sprec: f64,
    pub gamma_colrec: f64,
}

/// Selection sizes and solver knobs for `estimate_all`.
#[derive(Debug, Clone)]
pub struct CodeOptions {
    /// High-certainty selection size (per label unless `n_high_total`).
    pub n_high: usize,
    /// Read `n_high` as a total across labels instead of per label.
    pub n_high_total: bool,
    /// Low-certainty dictionary size as a fraction of the bank.
    pub low_fraction: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CodeOptions {
    fn default() -> Self {
        CodeOptions {
            n_high: 40,
            n_high_total: false,
            low_fraction: 1.0 / 3.0,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateStats {
    pub unknown_pixels: usize,
    /// Codes whose pre-normalization mass differed from 1 by more than 1e-6.
    pub renormalized: usize,
    /// Zero-code pixels resolved through the probability-map fallback.
    pub fallbacks: usize,
    /// Pixels whose solve hit the iteration cap before reaching tol.
    pub nonconverged: usize,
}

/// Gamma floor assigned to zero-code fallback pixels.
pub const FALLBACK_GAMMA: f64 = 1e-3;

fn rebalance(
    mut selected: Vec<usize>,
    bank: &SampleBank,
    pixel: (f64, f64),
) -> Vec<usize> {
    let has = |label: SampleLabel, sel: &[usize]| {
        sel.iter().any(|&i| bank.samples()[i].label == label)
    };
    for missing in [SampleLabel::Foreground, SampleLabel::Background] {
        if !has(missing, &selected) {
            // Selection is sorted nearest-first, so the tail is the farthest
            // over-represented atom; drop it to keep the size, unless that
            // would empty the selection.
            if selected.len() > 1 {
                selected.pop();
            }
            let add = select_closest(bank.samples(), Some(missing), pixel, 1);
            selected.extend(add);
        }
    }
    selected
}

/// Picks the atom set for one pixel. High certainty draws the spatially
/// closest samples of each label; low certainty draws a fraction of the whole
/// bank regardless of label, rebalanced so both labels stay represented.
pub fn build_dictionary(
    pixel: (f64, f64),
    certainty: Certainty,
    bank: &SampleBank,
    n_high: usize,
    n_high_total: bool,
    low_fraction: f64,
) -> Result<Dictionary> {
    if bank.count_of(SampleLabel::Foreground) == 0 {
        return Err(Error::EmptyBank("foreground"));
    }
    if bank.count_of(SampleLabel::Background) == 0 {
        return Err(Error::EmptyBank("background"));
    }
    let selected: Vec<usize> = match certainty {
        Certainty::High if !n_high_total => {
            let mut f = select_closest(bank.samples(), Some(SampleLabel::Foreground), pixel, n_high);
            let b = select_closest(bank.samples(), Some(SampleLabel::Background), pixel, n_high);
            f.extend(b);
            f
        }
        Certainty::High => rebalance(
            select_closest(bank.samples(), None, pixel, n_high),
            bank,
            pixel,
        ),
        Certainty::Low => {
            let k = ((low_fraction * bank.len() as f64).ceil() as usize).max(1);
            rebalance(select_closest(bank.samples(), None, pixel, k), bank, pixel)
        }
    };

    let mut f_idx: Vec<usize> = Vec::new();
    let mut b_idx: Vec<usize> = Vec::new();
    for i in selected {
        match bank.samples()[i].label {
            SampleLabel::Foreground => f_idx.push(i),
            SampleLabel::Background => b_idx.push(i),
        }
    }
    let f_count = f_idx.len();
    let b_count = b_idx.len();
    let ordered: Vec<usize> = f_idx.into_iter().chain(b_idx).collect();
    Ok(Dictionary {
        atoms: ordered.iter().map(|&i| bank.samples()[i].feature).collect(),
        colors: ordered.iter().map(|&i| bank.samples()[i].mean_rgb).collect(),
        f_count,
        b_count,
        source_indices: ordered,
    })
}

/// Euclidean projection onto {β ≥ 0, Σβ ≤ 1}. If clipping negatives already
/// satisfies the cap, that is the projection; otherwise project onto the
/// Σβ = 1 simplex by the sorted-threshold rule.
fn project_capped_simplex(y: &mut [f64]) {
    let clipped_sum: f64 = y.iter().map(|v| v.max(0.0)).sum();
    if clipped_sum <= 1.0 {
        for v in y.iter_mut() {
            *v = v.max(0.0);
        }
        return;
    }
    let mut u: Vec<f64> = y.to_vec();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    for v in y.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

fn apply_dict(atoms: &[FeatureVec6], beta: &[f64]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (a, &w) in atoms.iter().zip(beta) {
        if w != 0.0 {
            let c = a.components();
            for k in 0..6 {
                out[k] += w * c[k];
            }
        }
    }
    out
}

fn dict_transpose_apply(atoms: &[FeatureVec6], r: &[f64; 6], out: &mut [f64]) {
    for (i, a) in atoms.iter().enumerate() {
        let c = a.components();
        let mut acc = 0.0;
        for k in 0..6 {
            acc += c[k] * r[k];
        }
        out[i] = acc;
    }
}

/// Largest eigenvalue of D Dᵀ (6×6), i.e. the squared spectral norm of D.
fn spectral_norm_sq(atoms: &[FeatureVec6]) -> f64 {
    let mut g = [[0.0f64; 6]; 6];
    for a in atoms {
        let c = a.components();
        for i in 0..6 {
            for j in 0..6 {
                g[i][j] += c[i] * c[j];
            }
        }
    }
    let mut x = [1.0f64 / 6.0f64.sqrt(); 6];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut y = [0.0f64; 6];
        for i in 0..6 {
            for j in 0..6 {
                y[i] += g[i][j] * x[j];
            }
        }
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        for i in 0..6 {
            x[i] = y[i] / n;
        }
        lambda = n;
    }
    lambda
}

/// Minimizes ‖v − Dβ‖² over the nonnegative capped simplex with accelerated
/// projected gradient (restart on objective increase). Convergence is
/// certified by the Frank-Wolfe duality gap g·β − min(0, min_i g_i), an upper
/// bound on the objective suboptimality over the feasible set; iteration
/// stops once the gap falls under `tol`. Deterministic given inputs.
pub fn solve_code(v: &FeatureVec6, dict: &Dictionary, tol: f64, max_iter: usize) -> SparseCode {
    let atoms = dict.atoms();
    let n = atoms.len();
    assert!(n > 0, "empty dictionary");
    let vc = v.components();

    let lip = 2.0 * spectral_norm_sq(atoms);
    if lip == 0.0 {
        // All-zero atoms: every feasible point has the same objective.
        return SparseCode {
            beta: vec![0.0; n],
            residual: v.norm(),
            converged: true,
            fallback: false,
        };
    }
    let step = 1.0 / (lip * (1.0 + 1e-12));

    let obj_of = |beta: &[f64]| -> f64 {
        let d = apply_dict(atoms, beta);
        (0..6).map(|k| (d[k] - vc[k]) * (d[k] - vc[k])).sum()
    };

    let mut beta = vec![0.0; n];
    let mut obj_beta = obj_of(&beta);
    let mut y = beta.clone();
    let mut t = 1.0f64;

    let mut best = beta.clone();
    let mut best_obj = obj_beta;
    let mut converged = false;

    let mut grad = vec![0.0; n];
    for _ in 0..max_iter {
        // Forward-backward step from y.
        let dy = apply_dict(atoms, &y);
        let mut ry = [0.0f64; 6];
        for k in 0..6 {
            ry[k] = 2.0 * (dy[k] - vc[k]);
        }
        dict_transpose_apply(atoms, &ry, &mut grad);
        let mut cand: Vec<f64> = y
            .iter()
            .zip(&grad)
            .map(|(yi, gi)| yi - step * gi)
            .collect();
        project_capped_simplex(&mut cand);

        let dc = apply_dict(atoms, &cand);
        let mut rc = [0.0f64; 6];
        for k in 0..6 {
            rc[k] = 2.0 * (dc[k] - vc[k]);
        }
        let obj_cand: f64 = (0..6).map(|k| (dc[k] - vc[k]) * (dc[k] - vc[k])).sum();
        dict_transpose_apply(atoms, &rc, &mut grad);
        let gap = crate::sparse::dot(&grad, &cand)
            - grad.iter().copied().fold(0.0f64, f64::min);

        if obj_cand < best_obj {
            best_obj = obj_cand;
            best.copy_from_slice(&cand);
        }
        if gap <= tol {
            beta = cand;
            converged = true;
            break;
        }
        if obj_cand > obj_beta {
            // Momentum overshot; restart the acceleration from the last
            // monotone iterate.
            y.copy_from_slice(&beta);
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let coef = (t - 1.0) / t_next;
        for i in 0..n {
            y[i] = cand[i] + coef * (cand[i] - beta[i]);
        }
        beta = cand;
        obj_beta = obj_cand;
        t = t_next;
    }

    if !converged {
        beta = best;
    }
    debug_assert!(beta.iter().all(|&b| b >= 0.0));
    debug_assert!(beta.iter().sum::<f64>() <= 1.0 + 1e-9);
    SparseCode {
        residual: obj_of(&beta).sqrt(),
        beta,
        converged,
        fallback: false,
    }
}

/// Scales the code to unit mass; a zero code is left alone and flagged so the
/// caller can fall back to the probability map.
pub fn normalize_code(code: &SparseCode) -> SparseCode {
    let sum: f64 = code.beta.iter().sum();
    if sum > 0.0 {
        SparseCode {
            beta: code.beta.iter().map(|b| b / sum).collect(),
            residual: code.residual,
            converged: code.converged,
            fallback: false,
        }
    } else {
        SparseCode {
            beta: code.beta.clone(),
            residual: code.residual,
            converged: code.converged,
            fallback: true,
        }
    }
}

/// Alpha from a normalized code: the mass landing on the F-block.
pub fn alpha_from_code(code: &SparseCode, dict: &Dictionary) -> f64 {
    let sum: f64 = code.beta[..dict.f_count()].iter().sum();
    sum.clamp(0.0, 1.0)
}

/// Confidence of one estimate: spectral reconstruction (`exp(-‖v - Dβ‖²)`
/// using the raw optimizer residual carried by `code`) times chromatic
/// reconstruction (`exp(-‖I - ĉ‖²)` with ĉ the code-weighted sample colors
/// composited by alpha). Σ_F β·c equals α̂·F̂ and Σ_B β·c equals (1-α̂)·B̂, so
/// summing both blocks composites the estimate and drops the undefined side
/// automatically when α̂ hits 0 or 1.
pub fn confidence(
    pixel_rgb: [f64; 3],
    code: &SparseCode,
    dict: &Dictionary,
) -> (f64, f64, f64) {
    let gamma_sprec = (-(code.residual * code.residual)).exp();
    let mut composite = [0.0f64; 3];
    for (i, &b) in code.beta.iter().enumerate() {
        if b != 0.0 {
            let c = dict.colors()[i];
            for k in 0..3 {
                composite[k] += b * c[k];
            }
        }
    }
    let chroma_err: f64 = (0..3)
        .map(|k| {
            let d = pixel_rgb[k] - composite[k];
            d * d
        })
        .sum();
    let gamma_colrec = (-chroma_err).exp();
    (gamma_sprec * gamma_colrec, gamma_sprec, gamma_colrec)
}

/// Closed-form alpha of a pixel given exact F and B colors: the projection of
/// I - B onto F - B. Baseline used by tests, not by the pipeline.
pub fn pairwise_alpha(i: [f64; 3], f: [f64; 3], b: [f64; 3]) -> Result<f64> {
    if f == b {
        return Err(Error::DegeneratePair);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..3 {
        let fb = f[k] - b[k];
        num += (i[k] - b[k]) * fb;
        den += fb * fb;
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Full estimation sweep: known pixels take their trimap value at confidence
/// one; every unknown pixel gets dictionary → solve → normalize → alpha +
/// confidence, with the zero-code fallback thresholding the probability map.
pub fn estimate_all(
    image: &RasterImage,
    trimap: &Trimap,
    bank: &SampleBank,
    mask: &CertaintyMask,
    pmap: &ProbabilityMap,
    opts: &CodeOptions,
) -> Result<(Vec<PixelEstimate>, EstimateStats)> {
    let w = image.width();
    let n = image.pixel_count();

    let cells: Vec<Result<(PixelEstimate, u8, bool)>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let x = (idx % w as usize) as u32;
            let y = (idx / w as usize) as u32;
            match trimap.label_at(idx) {
                TrimapLabel::Foreground => Ok((
                    PixelEstimate {
                        alpha_hat: 1.0,
                        gamma: 1.0,
                        gamma_sprec: 1.0,
                        gamma_colrec: 1.0,
                    },
                    0,
                    false,
                )),
                TrimapLabel::Background => Ok((
                    PixelEstimate {
                        alpha_hat: 0.0,
                        gamma: 1.0,
                        gamma_sprec: 1.0,
                        gamma_colrec: 1.0,
                    },
                    0,
                    false,
                )),
                TrimapLabel::Unknown => {
                    let certainty = mask.get_at(idx).unwrap_or(Certainty::High);
                    let dict = build_dictionary(
                        (x as f64, y as f64),
                        certainty,
                        bank,
                        opts.n_high,
                        opts.n_high_total,
                        opts.low_fraction,
                    )?;
                    let v = feature_at(image, x, y)?;
                    let raw = solve_code(&v, &dict, opts.tol, opts.max_iter);
                    let raw_sum: f64 = raw.beta.iter().sum();
                    let code = normalize_code(&raw);
                    let rgb = image.rgb_at(idx);
                    let (est, flags) = if code.fallback {
                        let p = pmap.get_at(idx).unwrap_or(0.5);
                        (
                            PixelEstimate {
                                alpha_hat: if p >= 0.5 { 1.0 } else { 0.0 },
                                gamma: FALLBACK_GAMMA,
                                gamma_sprec: FALLBACK_GAMMA,
                                gamma_colrec: 1.0,
                            },
                            2u8,
                        )
                    } else {
                        let alpha_hat = alpha_from_code(&code, &dict);
                        let (gamma, gamma_sprec, gamma_colrec) = confidence(rgb, &code, &dict);
                        let renorm = (raw_sum - 1.0).abs() > 1e-6;
                        (
                            PixelEstimate {
                                alpha_hat,
                                gamma,
                                gamma_sprec,
                                gamma_colrec,
                            },
                            if renorm { 1 } else { 0 },
                        )
                    };
                    Ok((est, flags, !raw.converged))
                }
            }
        })
        .collect();

    let mut estimates = Vec::with_capacity(n);
    let mut stats = EstimateStats::default();
    for (idx, cell) in cells.into_iter().enumerate() {
        let (est, flag, nonconv) = cell?;
        if trimap.label_at(idx) == TrimapLabel::Unknown {
            stats.unknown_pixels += 1;
            match flag {
                1 => stats.renormalized += 1,
                2 => stats.fallbacks += 1,
                _ => {}
            }
            if nonconv {
                stats.nonconverged += 1;
            }
        }
        estimates.push(est);
    }
    Ok((estimates, stats))
}
