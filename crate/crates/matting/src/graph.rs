//! Pairwise affinities (local window statistics + feature-space KNN), the
//! per-node data term, and the quadratic solve that turns estimates into a
//! matte.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{Matte, PixelMask, RasterImage, Trimap, TrimapLabel};
use crate::kdtree::KdTree;
use crate::sparse::{pcg, CsrMatrix, PcgOutcome};
use crate::sparse_code::PixelEstimate;

/// Symmetric nonnegative pairwise weights over `n` nodes, each unordered pair
/// stored once with i < j. The graph's two virtual terminals live outside
/// this structure; see `DataTerm`.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl AffinityMatrix {
    /// Normalizes pair order, sums duplicate pairs, drops self-edges.
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Self {
        let mut norm: Vec<(usize, usize, f64)> = edges
            .into_iter()
            .filter(|&(i, j, _)| i != j)
            .map(|(i, j, w)| {
                debug_assert!(i < n && j < n);
                debug_assert!(w >= 0.0, "negative affinity {w}");
                if i < j {
                    (i, j, w)
                } else {
                    (j, i, w)
                }
            })
            .collect();
        norm.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(norm.len());
        for (i, j, w) in norm {
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += w,
                _ => merged.push((i, j, w)),
            }
        }
        AffinityMatrix { n, edges: merged }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Stored weight of the pair, 0 if absent.
    pub fn weight_between(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let key = (i.min(j), i.max(j));
        match self
            .edges
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
        {
            Ok(pos) => self.edges[pos].2,
            Err(_) => 0.0,
        }
    }
}

/// Per-node attachment to the virtual terminals plus the clamp set. `w_f` and
/// `w_b` are the estimate-weighted terminal edges; `known` marks trimap-known
/// pixels whose value `h` the quadratic's data term pins with weight
/// `lambda`.
#[derive(Debug, Clone)]
pub struct DataTerm {
    pub w_f: Vec<f64>,
    pub w_b: Vec<f64>,
    pub h: Vec<f64>,
    pub known: Vec<bool>,
    pub lambda: f64,
}

impl DataTerm {
    pub fn from_estimates(
        labels: &[TrimapLabel],
        estimates: &[PixelEstimate],
        lambda: f64,
    ) -> Self {
        assert_eq!(labels.len(), estimates.len());
        let n = labels.len();
        let mut w_f = Vec::with_capacity(n);
        let mut w_b = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        let mut known = Vec::with_capacity(n);
        for (label, est) in labels.iter().zip(estimates) {
            w_f.push(est.gamma * est.alpha_hat);
            w_b.push(est.gamma * (1.0 - est.alpha_hat));
            match label {
                TrimapLabel::Foreground => {
                    h.push(1.0);
                    known.push(true);
                }
                TrimapLabel::Background => {
                    h.push(0.0);
                    known.push(true);
                }
                TrimapLabel::Unknown => {
                    h.push(0.0);
                    known.push(false);
                }
            }
        }
        DataTerm {
            w_f,
            w_b,
            h,
            known,
            lambda,
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    out
}

/// Local-statistics pairwise weights: every fully-in-bounds 3×3 window
/// contributes -(1/9)(1 + (I_i-μ)ᵀ(Σ + (ε/9)I)⁻¹(I_j-μ)) per pixel pair,
/// accumulated across windows, negated into affinity form and clamped at 0.
/// When `active` is given, only windows containing at least one active pixel
/// (in practice: unknown pixels) contribute, which confines the smoothness
/// stencil to the band the solve actually needs.
pub fn laplacian_weights(
    image: &RasterImage,
    active: Option<&PixelMask>,
    eps: f64,
) -> Vec<(usize, usize, f64)> {
    let w = image.width() as usize;
    let h = image.height() as usize;
    if w < 3 || h < 3 {
        return Vec::new();
    }

    let rows: Vec<Vec<(usize, usize, f64)>> = (1..h - 1)
        .into_par_iter()
        .map(|cy| {
            let mut out = Vec::new();
            let mut idx = [0usize; 9];
            let mut d = [[0.0f64; 3]; 9];
            for cx in 1..w - 1 {
                let mut any_active = active.is_none();
                let mut mean = [0.0f64; 3];
                let mut t = 0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let p = (cy + dy - 1) * w + (cx + dx - 1);
                        idx[t] = p;
                        let rgb = image.rgb_at(p);
                        for k in 0..3 {
                            mean[k] += rgb[k];
                        }
                        if let Some(mask) = active {
                            any_active |= mask.get_at(p);
                        }
                        t += 1;
                    }
                }
                if !any_active {
                    continue;
                }
                for k in 0..3 {
                    mean[k] /= 9.0;
                }
                let mut cov = [[0.0f64; 3]; 3];
                for (t, &p) in idx.iter().enumerate() {
                    let rgb = image.rgb_at(p);
                    for k in 0..3 {
                        d[t][k] = rgb[k] - mean[k];
                    }
                    for a in 0..3 {
                        for b in 0..3 {
                            cov[a][b] += d[t][a] * d[t][b];
                        }
                    }
                }
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] /= 9.0;
                    }
                    cov[a][a] += eps / 9.0;
                }
                let inv = invert3(cov);
                // e_t = (Σ + εI/9)⁻¹ d_t, so each pair costs a dot product.
                let mut e = [[0.0f64; 3]; 9];
                for t in 0..9 {
                    for a in 0..3 {
                        e[t][a] = inv[a][0] * d[t][0] + inv[a][1] * d[t][1] + inv[a][2] * d[t][2];
                    }
                }
                for s in 0..9 {
                    for t in (s + 1)..9 {
                        let quad = d[s][0] * e[t][0] + d[s][1] * e[t][1] + d[s][2] * e[t][2];
                        let contrib = -(1.0 + quad) / 9.0;
                        let (i, j) = if idx[s] < idx[t] {
                            (idx[s], idx[t])
                        } else {
                            (idx[t], idx[s])
                        };
                        out.push((i, j, contrib));
                    }
                }
            }
            out
        })
        .collect();

    let mut acc: Vec<(usize, usize, f64)> = rows.into_iter().flatten().collect();
    acc.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(acc.len());
    for (i, j, v) in acc {
        match merged.last_mut() {
            Some(last) if last.0 == i && last.1 == j => last.2 += v,
            _ => merged.push((i, j, v)),
        }
    }
    // Negate into affinities; windows with strong structure can push a pair
    // positive, which clamps to no edge.
    merged
        .into_iter()
        .filter_map(|(i, j, v)| {
            let w = -v;
            if w > 0.0 {
                Some((i, j, w))
            } else {
                None
            }
        })
        .collect()
}

/// KNN weights over arbitrary 5-vector features. Neighbor lists are exact and
/// include ties with the k-th distance; σ is the global maximum selected
/// distance so weights 1 - d/σ land in [0,1]; symmetrization keeps the max of
/// the two directions. `ids` maps tree positions back to caller node ids.
pub(crate) fn knn_edges_from_features(
    features: &[[f64; 5]],
    ids: &[usize],
    k: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    let n = features.len();
    if n < k + 1 {
        return Err(Error::TooFewNodes { k, got: n });
    }
    let tree = KdTree::build(features.to_vec());
    let neighbor_lists: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| tree.k_nearest_with_ties(&features[i], k, Some(i)))
        .collect();

    let mut sigma_sq = 0.0f64;
    for list in &neighbor_lists {
        for &(d2, _) in list {
            if d2 > sigma_sq {
                sigma_sq = d2;
            }
        }
    }
    let sigma = sigma_sq.sqrt();

    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for (i, list) in neighbor_lists.iter().enumerate() {
        for &(d2, j) in list {
            let w = if sigma == 0.0 {
                1.0
            } else {
                1.0 - d2.sqrt() / sigma
            };
            let (a, b) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
            edges.push((a, b, w.max(0.0)));
        }
    }
    // max-symmetrize: both directions of a selected pair carry the same
    // distance, so keeping the larger weight also deduplicates.
    edges.sort_unstable_by(|a, b| {
        (a.0, a.1)
            .cmp(&(b.0, b.1))
            .then(b.2.partial_cmp(&a.2).unwrap())
    });
    edges.dedup_by(|next, kept| kept.0 == next.0 && kept.1 == next.1);
    Ok(edges)
}

/// Feature vector for graph neighborhoods: RGB plus unit-scaled coordinates.
pub(crate) fn knn_feature(image: &RasterImage, idx: usize) -> [f64; 5] {
    let w = image.width() as usize;
    let rgb = image.rgb_at(idx);
    [
        rgb[0],
        rgb[1],
        rgb[2],
        (idx % w) as f64 / image.width() as f64,
        (idx / w) as f64 / image.height() as f64,
    ]
}

/// Exact K-nearest-neighbor affinities between the given pixel nodes in
/// (R,G,B,x/width,y/height) space.
pub fn knn_weights(
    image: &RasterImage,
    nodes: &[usize],
    k: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    let features: Vec<[f64; 5]> = nodes.iter().map(|&i| knn_feature(image, i)).collect();
    knn_edges_from_features(&features, nodes, k)
}

/// KNN affinities over the concatenated pixels of several same-sized frames.
/// Candidates span all frames; the feature carries no temporal coordinate, so
/// look-alike pixels link across time exactly as they would within a frame.
/// Node ids are frame-major: frame f pixel p is node f·n + p. With a single
/// frame this is `knn_weights` over all pixels.
pub fn block_knn_weights(
    images: &[&RasterImage],
    k: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    assert!(!images.is_empty());
    let n = images[0].pixel_count();
    let mut features: Vec<[f64; 5]> = Vec::with_capacity(images.len() * n);
    for img in images {
        assert_eq!(img.pixel_count(), n, "frames must share dimensions");
        for idx in 0..n {
            features.push(knn_feature(img, idx));
        }
    }
    let ids: Vec<usize> = (0..features.len()).collect();
    knn_edges_from_features(&features, &ids, k)
}

/// Builds the full system for one image: KNN affinities over all pixels plus
/// window affinities around the unknown band, and terminal/data weights from
/// the per-pixel estimates.
pub fn assemble(
    image: &RasterImage,
    trimap: &Trimap,
    estimates: &[PixelEstimate],
    k: usize,
    eps: f64,
    lambda: f64,
) -> Result<(AffinityMatrix, DataTerm)> {
    let n = image.pixel_count();
    assert_eq!(estimates.len(), n, "estimates must cover all pixels");
    let nodes: Vec<usize> = (0..n).collect();
    let mut edges = knn_weights(image, &nodes, k)?;
    let unknown = trimap.unknown_mask();
    edges.extend(laplacian_weights(image, Some(&unknown), eps));
    let affinity = AffinityMatrix::new(n, edges);
    let data = DataTerm::from_estimates(trimap.labels(), estimates, lambda);
    Ok((affinity, data))
}

/// Reduced graph Laplacian over the n pixel nodes with the two virtual
/// terminals substituted away: off-diagonals -W, diagonal = row sums of W
/// including the terminal weights. Row i of L·α - w_f is then the full
/// graph's row residual at [α; 1; 0].
pub(crate) fn build_l(a: &AffinityMatrix, d: &DataTerm) -> CsrMatrix {
    let n = a.node_count();
    assert_eq!(d.len(), n);
    let mut triplets: Vec<(usize, usize, f64)> =
        Vec::with_capacity(2 * a.edges().len() + n);
    let mut degree = vec![0.0f64; n];
    for &(i, j, w) in a.edges() {
        if w == 0.0 {
            continue;
        }
        triplets.push((i, j, -w));
        triplets.push((j, i, -w));
        degree[i] += w;
        degree[j] += w;
    }
    for (i, &deg) in degree.iter().enumerate() {
        triplets.push((i, i, deg + d.w_f[i] + d.w_b[i]));
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Quadratic energy of a candidate matte: the squared pixel-row residuals of
/// the graph Laplacian at [α;1;0], i.e. ‖Lα - w_f‖² with the reduced L, plus
/// the clamp term λΣ_{known}(α_i - h_i)².
pub fn energy(a: &AffinityMatrix, d: &DataTerm, alpha: &[f64]) -> f64 {
    let n = a.node_count();
    assert_eq!(alpha.len(), n);
    let l = build_l(a, d);
    let mut lz = vec![0.0; n];
    l.matvec(alpha, &mut lz);
    let smooth: f64 = (0..n).map(|i| {
        let r = lz[i] - d.w_f[i];
        r * r
    }).sum();
    let data: f64 = (0..n)
        .filter(|&i| d.known[i])
        .map(|i| (alpha[i] - d.h[i]) * (alpha[i] - d.h[i]))
        .sum();
    smooth + d.lambda * data
}

/// Minimizes the quadratic by its normal equations (LᵀL + λΓ)x = Lᵀw_f + λΓh
/// without materializing LᵀL: each operator application is two CSR matvecs.
/// The Lᵀw_f term is the substituted terminal value (virtual F clamped at 1)
/// moved to the right-hand side. Starts from the initial estimates recovered
/// from the data weights. `rhs_as_printed` swaps the data side of the
/// right-hand vector for plain h (a diagnostic variant; the stationarity
/// calculus wants λΓh).
pub fn solve_system(
    a: &AffinityMatrix,
    d: &DataTerm,
    tol: f64,
    max_iter: usize,
    rhs_as_printed: bool,
) -> (Vec<f64>, PcgOutcome) {
    let n = a.node_count();
    let l = build_l(a, d);

    // Virtual-elimination shift: the clamped terminal values enter the RHS.
    let mut ltwf = vec![0.0; n];
    l.matvec(&d.w_f, &mut ltwf);

    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let data = if d.known[i] {
            if rhs_as_printed {
                d.h[i]
            } else {
                d.lambda * d.h[i]
            }
        } else {
            0.0
        };
        rhs[i] = data + ltwf[i];
    }

    let mut diag = l.row_sq_norms();
    for i in 0..n {
        if d.known[i] {
            diag[i] += d.lambda;
        }
    }

    let mut lz = vec![0.0; n];
    let apply = move |x: &[f64], y: &mut [f64]| {
        l.matvec(x, &mut lz);
        l.matvec(&lz, y);
        for i in 0..x.len() {
            if d.known[i] {
                y[i] += d.lambda * x[i];
            }
        }
    };

    // Warm start from the estimates the data weights encode; CG's monotone
    // objective descent then guarantees the solve never worsens the energy.
    let x0: Vec<f64> = (0..n)
        .map(|i| {
            if d.known[i] {
                d.h[i]
            } else {
                let g = d.w_f[i] + d.w_b[i];
                if g > 0.0 {
                    d.w_f[i] / g
                } else {
                    0.5
                }
            }
        })
        .collect();

    pcg(apply, &diag, &rhs, Some(&x0), tol, max_iter)
}

/// Full solve for one frame: linear system, clamp to [0,1], then overwrite
/// trimap-known pixels with their exact values.
pub fn solve_matte(
    width: u32,
    height: u32,
    a: &AffinityMatrix,
    d: &DataTerm,
    tol: f64,
    max_iter: usize,
    rhs_as_printed: bool,
) -> (Matte, PcgOutcome) {
    let (mut x, outcome) = solve_system(a, d, tol, max_iter, rhs_as_printed);
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(0.0, 1.0);
        if d.known[i] {
            *v = d.h[i];
        }
    }
    (Matte::new(width, height, x), outcome)
}

/// Plain-text triplet dump of the reduced Laplacian for external checks: one
/// `row col value` line per stored entry. The diagonal already carries the
/// terminal weights; the companion data-term dump holds w_f, w_b, h.
pub fn write_l_triplets<W: Write>(a: &AffinityMatrix, d: &DataTerm, out: &mut W) -> io::Result<()> {
    let l = build_l(a, d);
    writeln!(out, "# laplacian {} x {} (diagonal includes terminal weights)", l.n_rows(), l.n_cols())?;
    for r in 0..l.n_rows() {
        for (c, v) in l.row(r) {
            writeln!(out, "{} {} {:.17e}", r, c, v)?;
        }
    }
    Ok(())
}

/// Companion dump of the per-node data term: `i w_f w_b h known` per node.
pub fn write_data_term<W: Write>(d: &DataTerm, out: &mut W) -> io::Result<()> {
    writeln!(out, "# lambda = {}", d.lambda)?;
    for i in 0..d.len() {
        writeln!(
            out,
            "{} {:.17e} {:.17e} {} {}",
            i,
            d.w_f[i],
            d.w_b[i],
            d.h[i],
            if d.known[i] { 1 } else { 0 }
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_estimates(n: usize, alpha: f64, gamma: f64) -> Vec<PixelEstimate> {
        vec![
            PixelEstimate {
                alpha_hat: alpha,
                gamma,
                gamma_sprec: gamma,
                gamma_colrec: 1.0,
            };
            n
        ]
    }

    #[test]
    fn constant_window_affinity_is_one_ninth() {
        let img = RasterImage::new(3, 3, vec![[0.4, 0.5, 0.6]; 9]);
        let edges = laplacian_weights(&img, None, 1e-7);
        // One window, all 36 pairs share it.
        assert_eq!(edges.len(), 36);
        for &(_, _, w) in &edges {
            assert!((w - 1.0 / 9.0).abs() < 1e-9, "weight {w}");
        }
    }

    #[test]
    fn window_counts_accumulate() {
        // 5×3 constant image has three windows; horizontally adjacent pixels
        // near the center share two of them.
        let img = RasterImage::new(5, 3, vec![[0.2, 0.2, 0.2]; 15]);
        let a = AffinityMatrix::new(15, laplacian_weights(&img, None, 1e-7));
        // Pixels (0,0) and (1,0): only the window at center x=1.
        assert!((a.weight_between(0, 1) - 1.0 / 9.0).abs() < 1e-9);
        // Pixels (1,0) and (2,0): windows centered x=1 and x=2.
        assert!((a.weight_between(1, 2) - 2.0 / 9.0).abs() < 1e-9);
        // Pixels (0,0) and (4,0) never share a window.
        assert_eq!(a.weight_between(0, 4), 0.0);
        // (0,0) and (3,0) are 3 apart: no shared 3×3 window either.
        assert_eq!(a.weight_between(0, 3), 0.0);
    }

    #[test]
    fn laplacian_respects_active_mask() {
        let img = RasterImage::new(5, 3, vec![[0.2, 0.2, 0.2]; 15]);
        let mut mask = PixelMask::empty(5, 3);
        mask.set(0, 0, true); // corner pixel: only the window centered at x=1
        let a = AffinityMatrix::new(15, laplacian_weights(&img, Some(&mask), 1e-7));
        // Pair (1,2) shares two windows but only one is active.
        assert!((a.weight_between(1, 2) - 1.0 / 9.0).abs() < 1e-9);
        // The window centered at x=3 is inactive, so its exclusive pair drops.
        assert_eq!(a.weight_between(3, 4), 0.0);
        let none = PixelMask::empty(5, 3);
        assert!(laplacian_weights(&img, Some(&none), 1e-7).is_empty());
    }

    #[test]
    fn knn_identical_features_weigh_one() {
        // Two identical colors at identical relative positions are distance 0.
        let feats = vec![
            [0.1, 0.2, 0.3, 0.0, 0.0],
            [0.1, 0.2, 0.3, 0.0, 0.0],
            [0.9, 0.9, 0.9, 1.0, 1.0],
            [0.0, 1.0, 0.0, 0.5, 0.5],
        ];
        let ids = vec![0, 1, 2, 3];
        let edges = knn_edges_from_features(&feats, &ids, 2).unwrap();
        let a = AffinityMatrix::new(4, edges);
        assert_eq!(a.weight_between(0, 1), 1.0);
        // The globally farthest selected pair has weight exactly 0.
        let min = a
            .edges()
            .iter()
            .map(|e| e.2)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
    }

    #[test]
    fn knn_rejects_small_node_sets() {
        let feats = vec![[0.0; 5]; 5];
        let ids = vec![0, 1, 2, 3, 4];
        assert!(matches!(
            knn_edges_from_features(&feats, &ids, 12),
            Err(Error::TooFewNodes { k: 12, got: 5 })
        ));
    }

    #[test]
    fn knn_matches_bruteforce_oracle() {
        // 30 deterministic pseudo-random nodes in feature space.
        let mut feats = Vec::new();
        let mut s = 0.37f64;
        for _ in 0..30 {
            let mut f = [0.0; 5];
            for c in f.iter_mut() {
                s = (s * 997.13 + 71.17).fract();
                *c = s;
            }
            feats.push(f);
        }
        let ids: Vec<usize> = (0..30).collect();
        let k = 5;
        let edges = knn_edges_from_features(&feats, &ids, k).unwrap();
        let got = AffinityMatrix::new(30, edges);

        // Oracle: all-pairs distances, per-node k smallest with ties.
        let d2 = |a: &[f64; 5], b: &[f64; 5]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let mut selected: Vec<(usize, usize, f64)> = Vec::new();
        let mut sigma_sq = 0.0f64;
        for i in 0..30 {
            let mut ds: Vec<(f64, usize)> = (0..30)
                .filter(|&j| j != i)
                .map(|j| (d2(&feats[i], &feats[j]), j))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cutoff = ds[k - 1].0;
            for &(d, j) in ds.iter().take_while(|&&(d, _)| d <= cutoff) {
                selected.push((i, j, d));
                sigma_sq = sigma_sq.max(d);
            }
        }
        let sigma = sigma_sq.sqrt();
        for (i, j, d) in selected {
            let want = 1.0 - d.sqrt() / sigma;
            let gotw = got.weight_between(i, j);
            assert!(
                (gotw - want).abs() < 1e-12,
                "pair ({i},{j}): got {gotw}, want {want}"
            );
        }
    }

    #[test]
    fn assemble_sums_disjoint_sources() {
        let img = RasterImage::from_fn(5, 5, |x, y| {
            [x as f64 / 4.0, y as f64 / 4.0, 0.5]
        });
        let labels = vec![TrimapLabel::Unknown; 25];
        let tri = {
            let mut l = labels;
            l[0] = TrimapLabel::Foreground;
            l[24] = TrimapLabel::Background;
            Trimap::new(5, 5, l).unwrap()
        };
        let ests = flat_estimates(25, 0.5, 0.8);
        let (a, d) = assemble(&img, &tri, &ests, 3, 1e-7, 100.0).unwrap();
        // Data term reflects labels.
        assert!(d.known[0] && d.known[24]);
        assert_eq!(d.h[0], 1.0);
        assert_eq!(d.h[24], 0.0);
        assert!(!d.known[12]);
        assert!((d.w_f[12] - 0.4).abs() < 1e-15);
        // Every pair weight is the sum of its two sources; spot-check one
        // against independently computed parts.
        let lap = AffinityMatrix::new(25, laplacian_weights(&img, Some(&tri.unknown_mask()), 1e-7));
        let nodes: Vec<usize> = (0..25).collect();
        let knn = AffinityMatrix::new(25, knn_weights(&img, &nodes, 3).unwrap());
        for &(i, j, w) in a.edges().iter().take(40) {
            let want = lap.weight_between(i, j) + knn.weight_between(i, j);
            assert!((w - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_detaches_data_edges() {
        let labels = vec![TrimapLabel::Unknown; 4];
        let ests = flat_estimates(4, 0.7, 0.0);
        let d = DataTerm::from_estimates(&labels, &ests, 100.0);
        assert!(d.w_f.iter().all(|&v| v == 0.0));
        assert!(d.w_b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solve_all_known_returns_labels() {
        let labels = vec![
            TrimapLabel::Foreground,
            TrimapLabel::Background,
            TrimapLabel::Foreground,
            TrimapLabel::Background,
        ];
        let ests = vec![
            PixelEstimate { alpha_hat: 1.0, gamma: 1.0, gamma_sprec: 1.0, gamma_colrec: 1.0 },
            PixelEstimate { alpha_hat: 0.0, gamma: 1.0, gamma_sprec: 1.0, gamma_colrec: 1.0 },
            PixelEstimate { alpha_hat: 1.0, gamma: 1.0, gamma_sprec: 1.0, gamma_colrec: 1.0 },
            PixelEstimate { alpha_hat: 0.0, gamma: 1.0, gamma_sprec: 1.0, gamma_colrec: 1.0 },
        ];
        let d = DataTerm::from_estimates(&labels, &ests, 100.0);
        let a = AffinityMatrix::new(4, vec![(0, 1, 0.5), (2, 3, 0.25)]);
        let (m, out) = solve_matte(4, 1, &a, &d, 1e-10, 500, false);
        assert!(out.converged);
        assert_eq!(m.values(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn solve_single_terminal_edge() {
        // One unknown pixel tied only to the virtual F terminal: alpha = 1.
        let labels = vec![TrimapLabel::Unknown];
        let ests = vec![PixelEstimate {
            alpha_hat: 1.0,
            gamma: 1.0,
            gamma_sprec: 1.0,
            gamma_colrec: 1.0,
        }];
        let d = DataTerm::from_estimates(&labels, &ests, 100.0);
        let a = AffinityMatrix::new(1, Vec::new());
        let (x, out) = solve_system(&a, &d, 1e-12, 100, false);
        assert!(out.converged);
        assert!((x[0] - 1.0).abs() < 1e-9, "alpha {}", x[0]);
    }

    #[test]
    fn solve_never_worsens_energy() {
        // A blend pixel pulled by both terminals plus smoothness to knowns.
        let labels = vec![
            TrimapLabel::Foreground,
            TrimapLabel::Unknown,
            TrimapLabel::Background,
        ];
        let ests = vec![
            PixelEstimate { alpha_hat: 1.0, gamma: 1.0, gamma_sprec: 1.0, gamma_colrec: 1.0 },
            PixelEstimate { alpha_hat: 0.9, gamma: 0.4, gamma_sprec: 0.5, gamma_colrec: 0.8 },
            PixelEstimate { alpha_hat: 0.0, gamma: 1.0, gamma_sprec: 1.0, gamma_colrec: 1.0 },
        ];
        let d = DataTerm::from_estimates(&labels, &ests, 100.0);
        let a = AffinityMatrix::new(3, vec![(0, 1, 0.7), (1, 2, 0.7)]);
        let initial = vec![1.0, 0.9, 0.0];
        let (x, out) = solve_system(&a, &d, 1e-10, 500, false);
        assert!(out.converged);
        assert!(energy(&a, &d, &x) <= energy(&a, &d, &initial) + 1e-9);
        // And the solution beats a few arbitrary candidates.
        for cand in [vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.5, 0.5, 0.5]] {
            assert!(energy(&a, &d, &x) <= energy(&a, &d, &cand) + 1e-9);
        }
    }

    #[test]
    fn dump_roundtrip_carries_terminal_weights() {
        let labels = vec![TrimapLabel::Unknown, TrimapLabel::Foreground];
        let ests = flat_estimates(2, 0.5, 0.5);
        let d = DataTerm::from_estimates(&labels, &ests, 100.0);
        let a = AffinityMatrix::new(2, vec![(0, 1, 0.3)]);
        let mut buf = Vec::new();
        write_l_triplets(&a, &d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# laplacian 2 x 2"));
        // Diagonal of node 0: affinity row sum 0.3 plus terminal gamma 0.5.
        let diag: f64 = text
            .lines()
            .find(|l| l.starts_with("0 0 "))
            .unwrap()
            .split_whitespace()
            .nth(2)
            .unwrap()
            .parse()
            .unwrap();
        assert!((diag - 0.8).abs() < 1e-15);
        let mut buf2 = Vec::new();
        write_data_term(&d, &mut buf2).unwrap();
        let dt = String::from_utf8(buf2).unwrap();
        assert!(dt.starts_with("# lambda = 100"));
        assert_eq!(dt.lines().count(), 3);
    }
}
