//! End-to-end orchestration for single images, shared stage-for-stage with
//! the multi-frame solver so a one-frame block and the image path produce the
//! same numbers.

use crate::certainty::{classify_certainty, foreground_probability, CertaintyMask, ProbabilityMap};
use crate::error::{Error, Result};
use crate::graph::{
    block_knn_weights, energy, laplacian_weights, solve_system, AffinityMatrix, DataTerm,
};
use crate::imaging::{Matte, PixelMask, RasterImage, Trimap, TrimapLabel};
use crate::preprocess::{
    build_sample_bank, expand_known_regions, extract_band, slic_superpixels, Sample, SampleBank,
};
use crate::sparse::PcgOutcome;
use crate::sparse_code::{estimate_all, CodeOptions, EstimateStats, PixelEstimate};

/// Every tunable of the pipeline with its stock value.
#[derive(Debug, Clone)]
pub struct Params {
    /// Known-region expansion spatial threshold (pixels).
    pub e_thr: f64,
    /// Known-region expansion color threshold (255-scaled RGB distance).
    pub c_thr: f64,
    /// Sampling band width around the unknown region (pixels).
    pub band_width: u32,
    /// Superpixel grid spacing.
    pub region_size: u32,
    /// Superpixel compactness weight.
    pub compactness: f64,
    /// Superpixel refinement iterations.
    pub slic_iters: u32,
    /// Closest-sample count in the probability estimate.
    pub prob_m: usize,
    /// Probability kernel bandwidth.
    pub prob_delta: f64,
    /// Certainty window edge length (pixels).
    pub cert_window: u32,
    /// Ambiguous-probability interval.
    pub cert_band: (f64, f64),
    /// Ambiguity count threshold (Low certainty above this).
    pub cert_count_thr: usize,
    /// Dictionary and solver knobs for the per-pixel coding stage.
    pub code: CodeOptions,
    /// Neighbor count of the feature-space affinity graph.
    pub k: usize,
    /// Window-statistics regularizer.
    pub eps: f64,
    /// Data-term weight on trimap-known pixels.
    pub lambda: f64,
    /// Relative-residual target of the linear solve.
    pub solve_tol: f64,
    /// Iteration cap of the linear solve.
    pub solve_max_iter: usize,
    /// Drop the window-statistics affinities (feature graph only).
    pub skip_laplacian: bool,
    /// Use the literal printed right-hand side instead of the stationarity
    /// one; diagnostic.
    pub rhs_as_printed: bool,
    /// Per-label sample quota for the target frame of a multi-frame block;
    /// halves with each frame of temporal distance.
    pub quota_base: usize,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            e_thr: 12.0,
            c_thr: 4.0,
            band_width: 40,
            region_size: 10,
            compactness: 10.0,
            slic_iters: 10,
            prob_m: 10,
            prob_delta: 0.1,
            cert_window: 7,
            cert_band: (0.3, 0.7),
            cert_count_thr: 35,
            code: CodeOptions::default(),
            k: 12,
            eps: 1e-7,
            lambda: 100.0,
            solve_tol: 1e-7,
            solve_max_iter: 2000,
            skip_laplacian: false,
            rhs_as_printed: false,
            quota_base: 40,
        }
    }
}

/// One frame taken through expansion and sampling, ready for estimation.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub expanded: Trimap,
    pub unknowns: PixelMask,
    /// Band samples; empty only in lenient mode (multi-frame blocks).
    pub samples: Vec<Sample>,
}

/// Expansion, banding, and superpixel sampling for one frame. With `lenient`
/// set, a frame whose band is empty (no unknowns, or no known pixels within
/// reach) yields zero samples instead of an error; block assembly unions
/// samples across frames so such a frame can still be solved.
pub fn prepare_frame(
    image: &RasterImage,
    trimap: &Trimap,
    params: &Params,
    lenient: bool,
) -> Result<PreparedFrame> {
    if trimap.width() != image.width() || trimap.height() != image.height() {
        return Err(Error::DimensionMismatch {
            expected_w: image.width(),
            expected_h: image.height(),
            got_w: trimap.width(),
            got_h: trimap.height(),
        });
    }
    let expanded = expand_known_regions(image, trimap, params.e_thr, params.c_thr);
    let unknowns = expanded.unknown_mask();
    if unknowns.count() == 0 {
        // Nothing to sample for; callers shortcut the solve.
        return Ok(PreparedFrame {
            expanded,
            unknowns,
            samples: Vec::new(),
        });
    }
    let samples = match extract_band(&expanded, params.band_width) {
        Ok((band_f, band_b)) => {
            let f_clusters = slic_superpixels(
                image,
                &band_f,
                params.region_size,
                params.compactness,
                params.slic_iters,
            );
            let b_clusters = slic_superpixels(
                image,
                &band_b,
                params.region_size,
                params.compactness,
                params.slic_iters,
            );
            build_sample_bank(image, &f_clusters, &b_clusters)?
                .samples()
                .to_vec()
        }
        Err(Error::EmptyBand(_)) if lenient => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(PreparedFrame {
        expanded,
        unknowns,
        samples,
    })
}

/// Probability, certainty, and per-pixel coding for one frame against a
/// (possibly cross-frame) sample bank.
pub(crate) fn estimate_frame(
    image: &RasterImage,
    prepared: &PreparedFrame,
    bank: &SampleBank,
    params: &Params,
) -> Result<(Vec<PixelEstimate>, ProbabilityMap, CertaintyMask, EstimateStats)> {
    let pmap = foreground_probability(
        image,
        bank.samples(),
        &prepared.unknowns,
        params.prob_m,
        params.prob_delta,
    )?;
    let cmask = classify_certainty(
        &pmap,
        params.cert_window,
        params.cert_band,
        params.cert_count_thr,
    );
    let (estimates, stats) = estimate_all(
        image,
        &prepared.expanded,
        bank,
        &cmask,
        &pmap,
        &params.code,
    )?;
    Ok((estimates, pmap, cmask, stats))
}

/// Affinity graph and data term over the concatenated pixels of all frames:
/// feature-space KNN across everything plus (optionally) per-frame window
/// statistics. Exposed so the system can be dumped for external checks.
pub fn assemble_frames(
    images: &[&RasterImage],
    prepared: &[PreparedFrame],
    estimates: &[Vec<PixelEstimate>],
    params: &Params,
    include_laplacian: bool,
) -> Result<(AffinityMatrix, DataTerm)> {
    let m = images.len();
    let n = images[0].pixel_count();
    let total = m * n;

    let mut edges = block_knn_weights(images, params.k)?;
    if include_laplacian {
        for (f, img) in images.iter().enumerate() {
            let local = laplacian_weights(img, Some(&prepared[f].unknowns), params.eps);
            let base = f * n;
            edges.extend(local.into_iter().map(|(i, j, w)| (base + i, base + j, w)));
        }
    }
    // Memory guard: KNN contributes at most (K + tie room) per node and the
    // window term at most 24 neighbors per pixel.
    assert!(
        edges.len() <= total * (params.k + 2) + total * 64,
        "affinity graph larger than the node budget allows"
    );
    let affinity = AffinityMatrix::new(total, edges);

    let mut labels: Vec<TrimapLabel> = Vec::with_capacity(total);
    let mut flat_estimates: Vec<PixelEstimate> = Vec::with_capacity(total);
    for f in 0..m {
        labels.extend_from_slice(prepared[f].expanded.labels());
        flat_estimates.extend_from_slice(&estimates[f]);
    }
    let data = DataTerm::from_estimates(&labels, &flat_estimates, params.lambda);
    Ok((affinity, data))
}

/// Graph assembly and solve shared by the image and block paths.
pub(crate) fn solve_frames(
    images: &[&RasterImage],
    prepared: &[PreparedFrame],
    estimates: &[Vec<PixelEstimate>],
    params: &Params,
    include_laplacian: bool,
) -> Result<(Vec<Matte>, PcgOutcome, f64, f64)> {
    let m = images.len();
    let n = images[0].pixel_count();
    let (affinity, data) = assemble_frames(images, prepared, estimates, params, include_laplacian)?;

    let initial: Vec<f64> = estimates
        .iter()
        .flat_map(|frame| frame.iter().map(|e| e.alpha_hat))
        .collect();
    let energy_initial = energy(&affinity, &data, &initial);

    let (mut x, outcome) = solve_system(
        &affinity,
        &data,
        params.solve_tol,
        params.solve_max_iter,
        params.rhs_as_printed,
    );
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(0.0, 1.0);
        if data.known[i] {
            *v = data.h[i];
        }
    }
    let energy_final = energy(&affinity, &data, &x);

    let w = images[0].width();
    let h = images[0].height();
    let mattes = (0..m)
        .map(|f| Matte::new(w, h, x[f * n..(f + 1) * n].to_vec()))
        .collect();
    Ok((mattes, outcome, energy_initial, energy_final))
}

/// Everything the image pipeline produces besides the matte itself.
#[derive(Debug, Clone)]
pub struct ImageArtifacts {
    pub matte: Matte,
    /// Per-pixel coding estimates before the graph solve.
    pub initial: Matte,
    /// The full estimates backing `initial`, with confidences.
    pub estimates: Vec<PixelEstimate>,
    pub probability: ProbabilityMap,
    pub certainty: CertaintyMask,
    pub expanded: Trimap,
    pub stats: EstimateStats,
    pub solve: PcgOutcome,
    /// Quadratic energy at the initial estimate and at the returned matte;
    /// both zero when the solve was skipped (no unknown pixels).
    pub energy_initial: f64,
    pub energy_final: f64,
}

/// Exact estimates for a frame with no unknown pixels, mirroring what the
/// coding stage assigns to known pixels.
fn trivial_estimates(trimap: &Trimap) -> Vec<PixelEstimate> {
    trimap
        .labels()
        .iter()
        .map(|l| PixelEstimate {
            alpha_hat: if *l == TrimapLabel::Foreground { 1.0 } else { 0.0 },
            gamma: 1.0,
            gamma_sprec: 1.0,
            gamma_colrec: 1.0,
        })
        .collect()
}

pub(crate) fn labels_as_matte(trimap: &Trimap) -> Matte {
    let values = trimap
        .labels()
        .iter()
        .map(|l| match l {
            TrimapLabel::Foreground => 1.0,
            _ => 0.0,
        })
        .collect();
    Matte::new(trimap.width(), trimap.height(), values)
}

/// Full single-image pipeline: expand, sample, estimate, solve.
pub fn matte_image(image: &RasterImage, trimap: &Trimap, params: &Params) -> Result<ImageArtifacts> {
    let prepared = prepare_frame(image, trimap, params, false)?;
    if prepared.expanded.unknown_count() == 0 {
        // Nothing to estimate; the matte is the trimap itself.
        let matte = labels_as_matte(&prepared.expanded);
        let empty = ProbabilityMap::undefined(image.width(), image.height());
        let certainty = classify_certainty(
            &empty,
            params.cert_window,
            params.cert_band,
            params.cert_count_thr,
        );
        return Ok(ImageArtifacts {
            initial: matte.clone(),
            estimates: trivial_estimates(&prepared.expanded),
            probability: empty,
            certainty,
            expanded: prepared.expanded,
            stats: EstimateStats::default(),
            solve: PcgOutcome {
                converged: true,
                iterations: 0,
                rel_residual: 0.0,
            },
            energy_initial: 0.0,
            energy_final: 0.0,
            matte,
        });
    }

    let bank = SampleBank::new(prepared.samples.clone())?;
    let (estimates, pmap, cmask, stats) = estimate_frame(image, &prepared, &bank, params)?;
    let initial = Matte::new(
        image.width(),
        image.height(),
        estimates.iter().map(|e| e.alpha_hat).collect(),
    );

    let (mattes, outcome, e0, e1) = solve_frames(
        &[image],
        std::slice::from_ref(&prepared),
        std::slice::from_ref(&estimates),
        params,
        !params.skip_laplacian,
    )?;
    let matte = mattes.into_iter().next().expect("one frame in, one out");

    Ok(ImageArtifacts {
        matte,
        initial,
        estimates,
        probability: pmap,
        certainty: cmask,
        expanded: prepared.expanded,
        stats,
        solve: outcome,
        energy_initial: e0,
        energy_final: e1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{mse, synth_composite};

    fn two_color_fixture(w: u32, h: u32, band: (u32, u32)) -> (RasterImage, Trimap, Matte) {
        let fg = RasterImage::new(w, h, vec![[0.9, 0.2, 0.1]; (w * h) as usize]);
        let bg = RasterImage::new(w, h, vec![[0.1, 0.3, 0.8]; (w * h) as usize]);
        let alpha = Matte::new(
            w,
            h,
            (0..w * h)
                .map(|i| {
                    let x = i % w;
                    if x < band.0 {
                        0.0
                    } else if x >= band.1 {
                        1.0
                    } else {
                        (x - band.0) as f64 / (band.1 - band.0) as f64
                    }
                })
                .collect(),
        );
        let img = synth_composite(&fg, &bg, &alpha).unwrap();
        let labels = (0..w * h)
            .map(|i| {
                let x = i % w;
                if x < band.0 {
                    TrimapLabel::Background
                } else if x >= band.1 {
                    TrimapLabel::Foreground
                } else {
                    TrimapLabel::Unknown
                }
            })
            .collect();
        let tri = Trimap::new(w, h, labels).unwrap();
        (img, tri, alpha)
    }

    #[test]
    fn zero_unknown_shortcut_returns_trimap() {
        let img = RasterImage::new(4, 4, vec![[0.5, 0.5, 0.5]; 16]);
        let labels = (0..16)
            .map(|i| {
                if i % 4 < 2 {
                    TrimapLabel::Foreground
                } else {
                    TrimapLabel::Background
                }
            })
            .collect();
        let tri = Trimap::new(4, 4, labels).unwrap();
        let mut params = Params::default();
        // Expansion cannot relabel anything here (no unknowns).
        params.e_thr = 0.0;
        let art = matte_image(&img, &tri, &params).unwrap();
        for (i, l) in tri.labels().iter().enumerate() {
            let want = if *l == TrimapLabel::Foreground { 1.0 } else { 0.0 };
            assert_eq!(art.matte.values()[i], want);
        }
        assert!(art.solve.converged);
        assert_eq!(art.stats.unknown_pixels, 0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let img = RasterImage::new(4, 4, vec![[0.5; 3]; 16]);
        let labels = vec![TrimapLabel::Foreground, TrimapLabel::Background];
        let tri = Trimap::new(2, 1, labels).unwrap();
        assert!(matches!(
            matte_image(&img, &tri, &Params::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_color_ramp_recovers_alpha() {
        // Small version of the synthetic acceptance fixture: constant F and B
        // colors with a linear blend band.
        let (img, tri, gt) = two_color_fixture(48, 32, (18, 30));
        let mut params = Params::default();
        params.e_thr = 0.0; // keep the blend band unknown
        params.band_width = 12;
        let art = matte_image(&img, &tri, &params).unwrap();
        assert!(art.solve.converged);
        let region = tri.unknown_mask();
        let err_init = mse(&art.initial, &gt, &region).unwrap();
        let err = mse(&art.matte, &gt, &region).unwrap();
        assert!(err < 1e-2, "mse {err}");
        // On this fixture the solve should refine, not degrade, the coding
        // estimate.
        assert!(err <= err_init, "solve degraded mse {err_init} -> {err}");
        // The graph solve may not worsen the coding estimate's energy.
        assert!(art.energy_final <= art.energy_initial + 1e-9);
    }
}
