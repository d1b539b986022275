//! Trimap expansion, sampling bands, masked superpixels, and the sample bank.

use rayon::prelude::*;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imaging::{
    feature_at, rgb_to_lab_unscaled, FeatureVec6, PixelMask, RasterImage, Trimap, TrimapLabel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLabel {
    Foreground,
    Background,
}

/// Mean signature of one superpixel cluster.
#[derive(Debug, Clone)]
pub struct Sample {
    pub label: SampleLabel,
    /// Mean pixel position (x, y).
    pub centroid: (f64, f64),
    /// Mean member feature, renormalized to unit length (or zero).
    pub feature: FeatureVec6,
    /// Mean member color in [0,1].
    pub mean_rgb: [f64; 3],
    /// Source frame index; 0 for single images.
    pub frame: usize,
}

/// Universal sample set: every F and B superpixel in the sampling bands.
#[derive(Debug, Clone)]
pub struct SampleBank {
    samples: Vec<Sample>,
}

impl SampleBank {
    /// Requires at least one sample of each label.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if !samples.iter().any(|s| s.label == SampleLabel::Foreground) {
            return Err(Error::EmptyBank("foreground"));
        }
        if !samples.iter().any(|s| s.label == SampleLabel::Background) {
            return Err(Error::EmptyBank("background"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_of(&self, label: SampleLabel) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

/// Indices of the up-to-m samples closest to `point`, optionally restricted to
/// one label. Ordering (and tie-breaking) uses the content key
/// (distance², centroid, frame, index) so the result does not depend on how
/// the bank happens to be ordered; duplicate-payload samples still resolve
/// deterministically via the index.
pub fn select_closest(
    samples: &[Sample],
    label: Option<SampleLabel>,
    point: (f64, f64),
    m: usize,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, f64, f64, usize, usize)> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| label.map_or(true, |l| s.label == l))
        .map(|(i, s)| {
            let dx = s.centroid.0 - point.0;
            let dy = s.centroid.1 - point.1;
            (dx * dx + dy * dy, s.centroid.0, s.centroid.1, s.frame, i)
        })
        .collect();
    let cmp = |a: &(f64, f64, f64, usize, usize), b: &(f64, f64, f64, usize, usize)| {
        a.partial_cmp(b).unwrap()
    };
    if keyed.len() > m {
        keyed.select_nth_unstable_by(m - 1, cmp);
        keyed.truncate(m);
    }
    keyed.sort_unstable_by(cmp);
    keyed.into_iter().map(|k| k.4).collect()
}

/// Grows the known regions: an Unknown pixel close enough to a known pixel in
/// both position and color (the color budget shrinking with distance) takes
/// that pixel's label. Evaluated in a single pass over the original labels;
/// a pixel matching both labels stays Unknown.
pub fn expand_known_regions(
    image: &RasterImage,
    trimap: &Trimap,
    e_thr: f64,
    c_thr: f64,
) -> Trimap {
    let w = trimap.width();
    let h = trimap.height();
    // The color budget c_thr - D is nonnegative only for D <= c_thr, and the
    // spatial test needs D < e_thr, so this radius covers every candidate.
    let radius = e_thr.min(c_thr).max(0.0).floor() as i64;

    let labels: Vec<TrimapLabel> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|idx| {
            let x = (idx % w as usize) as i64;
            let y = (idx / w as usize) as i64;
            let old = trimap.label_at(idx);
            if old != TrimapLabel::Unknown {
                return old;
            }
            let ci = image.rgb_at(idx);
            let mut f_hit = false;
            let mut b_hit = false;
            for dy in -radius..=radius {
                let ny = y + dy;
                if ny < 0 || ny >= h as i64 {
                    continue;
                }
                for dx in -radius..=radius {
                    let nx = x + dx;
                    if nx < 0 || nx >= w as i64 {
                        continue;
                    }
                    let nl = trimap.label(nx as u32, ny as u32);
                    if nl == TrimapLabel::Unknown {
                        continue;
                    }
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    if d >= e_thr {
                        continue;
                    }
                    let cj = image.rgb(nx as u32, ny as u32);
                    let dc = (0..3)
                        .map(|c| {
                            let diff = (ci[c] - cj[c]) * 255.0;
                            diff * diff
                        })
                        .sum::<f64>()
                        .sqrt();
                    if dc <= c_thr - d {
                        match nl {
                            TrimapLabel::Foreground => f_hit = true,
                            TrimapLabel::Background => b_hit = true,
                            TrimapLabel::Unknown => unreachable!(),
                        }
                    }
                }
                if f_hit && b_hit {
                    break;
                }
            }
            match (f_hit, b_hit) {
                (true, false) => TrimapLabel::Foreground,
                (false, true) => TrimapLabel::Background,
                _ => TrimapLabel::Unknown,
            }
        })
        .collect();

    Trimap::new(w, h, labels).expect("expansion never removes known labels")
}

/// Chebyshev distance from every pixel to the nearest set pixel of `mask`,
/// u32::MAX when the mask is empty. Multi-source BFS over the 8-neighborhood
/// grows exactly one Chebyshev ring per layer.
pub(crate) fn distance_to_mask(mask: &PixelMask) -> Vec<u32> {
    let w = mask.width() as usize;
    let h = mask.height() as usize;
    let mut dist = vec![u32::MAX; w * h];
    let mut queue = VecDeque::new();
    for idx in 0..w * h {
        if mask.get_at(idx) {
            dist[idx] = 0;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let x = (idx % w) as i64;
        let y = (idx / w) as i64;
        let d = dist[idx];
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = x + dx;
                let ny = y + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let nidx = ny as usize * w + nx as usize;
                if dist[nidx] == u32::MAX {
                    dist[nidx] = d + 1;
                    queue.push_back(nidx);
                }
            }
        }
    }
    dist
}

/// Masks of F and B pixels within `width` (Chebyshev) of the unknown region.
pub fn extract_band(trimap: &Trimap, width: u32) -> Result<(PixelMask, PixelMask)> {
    let unknown = trimap.unknown_mask();
    if unknown.count() == 0 {
        return Err(Error::EmptyBand("unknown"));
    }
    let dist = distance_to_mask(&unknown);
    let w = trimap.width();
    let h = trimap.height();
    let mut f_band = PixelMask::empty(w, h);
    let mut b_band = PixelMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let idx = y as usize * w as usize + x as usize;
            if dist[idx] > width {
                continue;
            }
            match trimap.label_at(idx) {
                TrimapLabel::Foreground => f_band.set(x, y, true),
                TrimapLabel::Background => b_band.set(x, y, true),
                TrimapLabel::Unknown => {}
            }
        }
    }
    if f_band.count() == 0 {
        return Err(Error::EmptyBand("foreground"));
    }
    if b_band.count() == 0 {
        return Err(Error::EmptyBand("background"));
    }
    Ok((f_band, b_band))
}

struct SlicCenter {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Masked SLIC: k-means over [L, a, b, s·x, s·y] with s = compactness /
/// region_size, seeds on a region_size grid snapped to the nearest masked
/// pixel, followed by a connectivity pass. Pixels outside the mask are never
/// touched. Returns clusters as row-major pixel-index lists.
pub fn slic_superpixels(
    image: &RasterImage,
    mask: &PixelMask,
    region_size: u32,
    compactness: f64,
    iters: u32,
) -> Vec<Vec<usize>> {
    let w = image.width() as usize;
    let h = image.height() as usize;
    let rs = region_size.max(1) as usize;
    let s = compactness / region_size.max(1) as f64;

    let lab: Vec<[f64; 3]> = image
        .pixels()
        .iter()
        .map(|&rgb| rgb_to_lab_unscaled(rgb))
        .collect();

    // One seed per grid cell: the masked pixel nearest the cell's geometric
    // center, ties resolved row-major.
    let mut centers: Vec<SlicCenter> = Vec::new();
    let cells_x = w.div_ceil(rs);
    let cells_y = h.div_ceil(rs);
    for gy in 0..cells_y {
        for gx in 0..cells_x {
            let x0 = gx * rs;
            let y0 = gy * rs;
            let x1 = ((gx + 1) * rs).min(w);
            let y1 = ((gy + 1) * rs).min(h);
            let cx = (x0 + x1 - 1) as f64 / 2.0;
            let cy = (y0 + y1 - 1) as f64 / 2.0;
            let mut best: Option<(f64, usize)> = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    let idx = y * w + x;
                    if !mask.get_at(idx) {
                        continue;
                    }
                    let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, idx));
                    }
                }
            }
            if let Some((_, idx)) = best {
                centers.push(SlicCenter {
                    lab: lab[idx],
                    x: (idx % w) as f64,
                    y: (idx / w) as f64,
                });
            }
        }
    }
    if centers.is_empty() {
        return Vec::new();
    }

    let masked: Vec<usize> = mask.indices();
    let mut assignment: Vec<u32> = vec![u32::MAX; w * h];

    for _ in 0..iters {
        let mut best_d = vec![f64::INFINITY; w * h];
        for slot in assignment.iter_mut() {
            *slot = u32::MAX;
        }
        // Each center scans a 2S window; earlier centers win ties because
        // later ones only steal on strict improvement.
        for (ci, c) in centers.iter().enumerate() {
            let x_lo = (c.x.round() as i64 - 2 * rs as i64).max(0) as usize;
            let x_hi = ((c.x.round() as i64 + 2 * rs as i64) as usize).min(w - 1);
            let y_lo = (c.y.round() as i64 - 2 * rs as i64).max(0) as usize;
            let y_hi = ((c.y.round() as i64 + 2 * rs as i64) as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let idx = y * w + x;
                    if !mask.get_at(idx) {
                        continue;
                    }
                    let dl = lab[idx][0] - c.lab[0];
                    let da = lab[idx][1] - c.lab[1];
                    let db = lab[idx][2] - c.lab[2];
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = dl * dl + da * da + db * db + s * s * (dx * dx + dy * dy);
                    if d < best_d[idx] {
                        best_d[idx] = d;
                        assignment[idx] = ci as u32;
                    }
                }
            }
        }
        // Masked pixels outside every window fall back to a global scan.
        for &idx in &masked {
            if assignment[idx] != u32::MAX {
                continue;
            }
            let x = (idx % w) as f64;
            let y = (idx / w) as f64;
            let mut best = (f64::INFINITY, u32::MAX);
            for (ci, c) in centers.iter().enumerate() {
                let dl = lab[idx][0] - c.lab[0];
                let da = lab[idx][1] - c.lab[1];
                let db = lab[idx][2] - c.lab[2];
                let dx = x - c.x;
                let dy = y - c.y;
                let d = dl * dl + da * da + db * db + s * s * (dx * dx + dy * dy);
                if d < best.0 {
                    best = (d, ci as u32);
                }
            }
            assignment[idx] = best.1;
        }
        // Recenter; empty clusters keep their previous center.
        let mut acc = vec![([0.0f64; 3], 0.0f64, 0.0f64, 0usize); centers.len()];
        for &idx in &masked {
            let ci = assignment[idx] as usize;
            let a = &mut acc[ci];
            for c in 0..3 {
                a.0[c] += lab[idx][c];
            }
            a.1 += (idx % w) as f64;
            a.2 += (idx / w) as f64;
            a.3 += 1;
        }
        for (ci, a) in acc.iter().enumerate() {
            if a.3 > 0 {
                let n = a.3 as f64;
                centers[ci] = SlicCenter {
                    lab: [a.0[0] / n, a.0[1] / n, a.0[2] / n],
                    x: a.1 / n,
                    y: a.2 / n,
                };
            }
        }
    }

    enforce_connectivity(w, h, mask, &assignment)
}

/// Splits the assignment into 4-connected components, keeps the largest
/// component of each cluster, and merges every other fragment into an
/// adjacent cluster (most shared border, ties to the smaller cluster id).
/// Fragments with no masked neighbor stay clusters of their own. Component
/// merges are resolved through union-find, so chained merges still produce
/// connected output clusters.
fn enforce_connectivity(
    w: usize,
    h: usize,
    mask: &PixelMask,
    assignment: &[u32],
) -> Vec<Vec<usize>> {
    let mut comp_of = vec![usize::MAX; w * h];
    // (cluster label, size, first pixel)
    let mut comps: Vec<(u32, usize, usize)> = Vec::new();
    for start in 0..w * h {
        if !mask.get_at(start) || comp_of[start] != usize::MAX {
            continue;
        }
        let label = assignment[start];
        let comp_id = comps.len();
        let mut size = 0usize;
        let mut queue = VecDeque::from([start]);
        comp_of[start] = comp_id;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let x = idx % w;
            let y = idx / w;
            let mut push = |nidx: usize| {
                if mask.get_at(nidx) && comp_of[nidx] == usize::MAX && assignment[nidx] == label {
                    comp_of[nidx] = comp_id;
                    queue.push_back(nidx);
                }
            };
            if x > 0 {
                push(idx - 1);
            }
            if x + 1 < w {
                push(idx + 1);
            }
            if y > 0 {
                push(idx - w);
            }
            if y + 1 < h {
                push(idx + w);
            }
        }
        comps.push((label, size, start));
    }

    // Primary component per cluster: largest, ties to the earliest.
    let mut primary: Vec<Option<usize>> = Vec::new();
    for (ci, &(label, size, first)) in comps.iter().enumerate() {
        let l = label as usize;
        if primary.len() <= l {
            primary.resize(l + 1, None);
        }
        match primary[l] {
            None => primary[l] = Some(ci),
            Some(p) => {
                let (_, psize, pfirst) = comps[p];
                if size > psize || (size == psize && first < pfirst) {
                    primary[l] = Some(ci);
                }
            }
        }
    }

    let mut parent: Vec<usize> = (0..comps.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = i;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }

    let mut orphans: Vec<usize> = (0..comps.len())
        .filter(|&ci| primary[comps[ci].0 as usize] != Some(ci))
        .collect();
    orphans.sort_unstable_by_key(|&ci| comps[ci].2);
    for &ci in &orphans {
        // Count adjacent pixels per neighboring component.
        let mut counts: Vec<(usize, usize)> = Vec::new(); // (component, shared border)
        for idx in 0..w * h {
            if comp_of[idx] != ci {
                continue;
            }
            let x = idx % w;
            let y = idx / w;
            let mut touch = |nidx: usize| {
                if mask.get_at(nidx) && comp_of[nidx] != ci {
                    let nc = comp_of[nidx];
                    match counts.iter_mut().find(|(c, _)| *c == nc) {
                        Some(e) => e.1 += 1,
                        None => counts.push((nc, 1)),
                    }
                }
            };
            if x > 0 {
                touch(idx - 1);
            }
            if x + 1 < w {
                touch(idx + 1);
            }
            if y > 0 {
                touch(idx - w);
            }
            if y + 1 < h {
                touch(idx + w);
            }
        }
        if counts.is_empty() {
            continue; // isolated fragment keeps its own cluster
        }
        counts.sort_unstable_by(|a, b| {
            b.1.cmp(&a.1)
                .then(comps[a.0].0.cmp(&comps[b.0].0))
                .then(a.0.cmp(&b.0))
        });
        let target = counts[0].0;
        let ra = find(&mut parent, ci);
        let rb = find(&mut parent, target);
        if ra != rb {
            // Keep the non-orphan (or earlier) root as representative.
            let keep = if primary[comps[rb].0 as usize] == Some(rb) || comps[rb].2 < comps[ra].2 {
                rb
            } else {
                ra
            };
            let drop = if keep == rb { ra } else { rb };
            parent[drop] = keep;
        }
    }

    // Group pixels by final root, ordered by first pixel index.
    let mut root_order: Vec<usize> = Vec::new();
    let mut cluster_of_root: Vec<usize> = vec![usize::MAX; comps.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for idx in 0..w * h {
        if !mask.get_at(idx) {
            continue;
        }
        let root = find(&mut parent, comp_of[idx]);
        if cluster_of_root[root] == usize::MAX {
            cluster_of_root[root] = root_order.len();
            root_order.push(root);
            clusters.push(Vec::new());
        }
        clusters[cluster_of_root[root]].push(idx);
    }
    clusters
}

/// One Sample per cluster; frame tag 0.
pub fn build_sample_bank(
    image: &RasterImage,
    f_clusters: &[Vec<usize>],
    b_clusters: &[Vec<usize>],
) -> Result<SampleBank> {
    if f_clusters.is_empty() {
        return Err(Error::EmptyBank("foreground"));
    }
    if b_clusters.is_empty() {
        return Err(Error::EmptyBank("background"));
    }
    let mut samples = Vec::with_capacity(f_clusters.len() + b_clusters.len());
    for (clusters, label) in [
        (f_clusters, SampleLabel::Foreground),
        (b_clusters, SampleLabel::Background),
    ] {
        for members in clusters {
            assert!(!members.is_empty(), "empty superpixel cluster");
            samples.push(cluster_sample(image, members, label));
        }
    }
    SampleBank::new(samples)
}

fn cluster_sample(image: &RasterImage, members: &[usize], label: SampleLabel) -> Sample {
    let w = image.width() as usize;
    let n = members.len() as f64;
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut rgb = [0.0f64; 3];
    let mut feat = [0.0f64; 6];
    for &idx in members {
        let x = (idx % w) as u32;
        let y = (idx / w) as u32;
        cx += x as f64;
        cy += y as f64;
        let c = image.rgb_at(idx);
        for k in 0..3 {
            rgb[k] += c[k];
        }
        let f = feature_at(image, x, y).expect("member in bounds").components();
        for k in 0..6 {
            feat[k] += f[k];
        }
    }
    Sample {
        label,
        centroid: (cx / n, cy / n),
        feature: FeatureVec6::from_raw(feat.map(|v| v / n)),
        mean_rgb: rgb.map(|v| v / n),
        frame: 0,
    }
}
