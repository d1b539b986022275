//! Multi-frame matting: per-target sample banks pooled across a block of
//! frames with temporally decaying quotas, one feature-space smoothness graph
//! linking every pixel of every frame, and a single simultaneous solve.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{
    load_image, load_trimap, save_matte, BitDepth, Matte, PixelMask, RasterImage, Trimap,
};
use crate::pipeline::{
    estimate_frame, labels_as_matte, prepare_frame, solve_frames, Params, PreparedFrame,
};
use crate::preprocess::{distance_to_mask, Sample, SampleBank, SampleLabel};
use crate::sparse::PcgOutcome;
use crate::sparse_code::EstimateStats;

/// Hard cap on frames per block; the graph holds M·n nodes and the halving
/// quota reaches zero beyond this distance anyway.
pub const MAX_BLOCK: usize = 16;

/// A run of consecutive frames solved together.
#[derive(Debug, Clone)]
pub struct FrameBlock {
    frames: Vec<(RasterImage, Trimap)>,
    first_index: usize,
}

impl FrameBlock {
    /// Validates the frame count and that every image and trimap shares the
    /// first frame's dimensions.
    pub fn new(frames: Vec<(RasterImage, Trimap)>, first_index: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        if frames.len() > MAX_BLOCK {
            return Err(Error::InvalidParameter(format!(
                "block of {} frames exceeds the cap of {MAX_BLOCK}",
                frames.len()
            )));
        }
        let w = frames[0].0.width();
        let h = frames[0].0.height();
        for (img, tri) in &frames {
            for (gw, gh) in [(img.width(), img.height()), (tri.width(), tri.height())] {
                if (gw, gh) != (w, h) {
                    return Err(Error::DimensionMismatch {
                        expected_w: w,
                        expected_h: h,
                        got_w: gw,
                        got_h: gh,
                    });
                }
            }
        }
        Ok(FrameBlock {
            frames,
            first_index,
        })
    }

    pub fn frames(&self) -> &[(RasterImage, Trimap)] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of the block's first frame in the source sequence.
    pub fn first_index(&self) -> usize {
        self.first_index
    }
}

/// Dedup key: everything that identifies a sample's content plus its position
/// in the per-frame bank, but not its frame tag. Identical frames produce
/// identical banks, so the same position holding the same payload across
/// frames is one sample, while distinct clusters that happen to share a
/// payload within one frame stay separate.
type ContentKey = (usize, bool, [u64; 2], [u64; 6], [u64; 3]);

fn content_key(position: usize, s: &Sample) -> ContentKey {
    (
        position,
        s.label == SampleLabel::Foreground,
        [s.centroid.0.to_bits(), s.centroid.1.to_bits()],
        s.feature.components().map(f64::to_bits),
        s.mean_rgb.map(f64::to_bits),
    )
}

/// Pools the per-frame banks into one bank for `target`. Each source frame
/// contributes up to `base >> Δt` samples per label (Δt = frame distance to
/// the target), picking those spatially closest to the target's unknown
/// region; a single-frame block passes its bank through untouched so the
/// block path stays interchangeable with the image path.
pub fn block_sample_bank(
    banks: &[Vec<Sample>],
    target: usize,
    target_unknowns: &PixelMask,
    base: usize,
) -> Result<SampleBank> {
    assert!(target < banks.len(), "target frame outside the block");
    if banks.len() == 1 {
        return SampleBank::new(banks[0].clone());
    }

    let dist = distance_to_mask(target_unknowns);
    let w = target_unknowns.width() as usize;
    let h = target_unknowns.height() as usize;
    let mut union: Vec<Sample> = Vec::new();
    let mut seen: HashSet<ContentKey> = HashSet::new();
    for (f, bank) in banks.iter().enumerate() {
        let dt = target.abs_diff(f);
        let quota = if dt < usize::BITS as usize {
            base >> dt
        } else {
            0
        };
        if quota == 0 || bank.is_empty() {
            continue;
        }
        let mut picked: Vec<usize> = Vec::new();
        for label in [SampleLabel::Foreground, SampleLabel::Background] {
            let mut keyed: Vec<(u32, usize)> = bank
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == label)
                .map(|(i, s)| {
                    let x = (s.centroid.0.round().clamp(0.0, (w - 1) as f64)) as usize;
                    let y = (s.centroid.1.round().clamp(0.0, (h - 1) as f64)) as usize;
                    (dist[y * w + x], i)
                })
                .collect();
            keyed.sort_unstable();
            keyed.truncate(quota);
            picked.extend(keyed.into_iter().map(|(_, i)| i));
        }
        // Restore the frame bank's own ordering within its contribution.
        picked.sort_unstable();
        for i in picked {
            if seen.insert(content_key(i, &bank[i])) {
                union.push(bank[i].clone());
            }
        }
    }
    if union.is_empty() {
        return Err(Error::EmptyBank("cross-frame"));
    }
    SampleBank::new(union)
}

/// Output of one block solve.
#[derive(Debug, Clone)]
pub struct BlockArtifacts {
    pub mattes: Vec<Matte>,
    /// Per-frame coding statistics, frame order.
    pub stats: Vec<EstimateStats>,
    pub solve: PcgOutcome,
    pub energy_initial: f64,
    pub energy_final: f64,
}

/// Solves all frames of the block at once: cross-frame banks feed each
/// frame's per-pixel coding, then one feature-space affinity graph over the
/// concatenated pixels (no window-statistics term) smooths everything in a
/// single system.
pub fn solve_block(block: &FrameBlock, params: &Params) -> Result<BlockArtifacts> {
    let m = block.len();
    let mut prepared: Vec<PreparedFrame> = Vec::with_capacity(m);
    for (img, tri) in block.frames() {
        prepared.push(prepare_frame(img, tri, params, true)?);
    }
    let banks: Vec<Vec<Sample>> = prepared
        .iter()
        .enumerate()
        .map(|(f, p)| {
            p.samples
                .iter()
                .cloned()
                .map(|mut s| {
                    s.frame = f;
                    s
                })
                .collect()
        })
        .collect();

    if prepared.iter().all(|p| p.unknowns.count() == 0) {
        // Every pixel of every frame is known; no system to solve.
        let mattes = prepared.iter().map(|p| labels_as_matte(&p.expanded)).collect();
        return Ok(BlockArtifacts {
            mattes,
            stats: vec![EstimateStats::default(); m],
            solve: PcgOutcome {
                converged: true,
                iterations: 0,
                rel_residual: 0.0,
            },
            energy_initial: 0.0,
            energy_final: 0.0,
        });
    }

    let mut estimates = Vec::with_capacity(m);
    let mut stats = Vec::with_capacity(m);
    for t in 0..m {
        let bank = block_sample_bank(&banks, t, &prepared[t].unknowns, params.quota_base)?;
        let (est, _, _, st) = estimate_frame(&block.frames()[t].0, &prepared[t], &bank, params)?;
        estimates.push(est);
        stats.push(st);
    }

    let images: Vec<&RasterImage> = block.frames().iter().map(|(i, _)| i).collect();
    let (mattes, solve, energy_initial, energy_final) =
        solve_frames(&images, &prepared, &estimates, params, false)?;
    Ok(BlockArtifacts {
        mattes,
        stats,
        solve,
        energy_initial,
        energy_final,
    })
}

/// Outcome summary of a processed sequence.
#[derive(Debug, Clone)]
pub struct SequenceReport {
    pub frame_count: usize,
    pub blocks: usize,
    /// Written matte paths, frame order.
    pub outputs: Vec<PathBuf>,
    pub nonconverged_blocks: usize,
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = entry.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Pairs the files of the two directories lexicographically, solves
/// consecutive non-overlapping blocks of `block_size` frames (the final block
/// may be shorter), and writes one 8-bit matte per frame under `out_dir`,
/// named after the frame file.
pub fn run_sequence(
    frames_dir: &Path,
    trimaps_dir: &Path,
    out_dir: &Path,
    block_size: usize,
    params: &Params,
) -> Result<SequenceReport> {
    if block_size == 0 || block_size > MAX_BLOCK {
        return Err(Error::InvalidParameter(format!(
            "block size must be in 1..={MAX_BLOCK}, got {block_size}"
        )));
    }
    let frame_paths = list_files(frames_dir)?;
    let trimap_paths = list_files(trimaps_dir)?;
    if frame_paths.is_empty() {
        return Err(Error::EmptySequence);
    }
    if frame_paths.len() != trimap_paths.len() {
        return Err(Error::SequenceMismatch {
            left: frame_paths.len(),
            right: trimap_paths.len(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut outputs = Vec::new();
    let mut blocks = 0;
    let mut nonconverged_blocks = 0;
    let mut start = 0;
    while start < frame_paths.len() {
        let end = (start + block_size).min(frame_paths.len());
        let mut frames = Vec::with_capacity(end - start);
        for i in start..end {
            let img = load_image(&frame_paths[i])?;
            let tri = load_trimap(&trimap_paths[i], Some((img.width(), img.height())))?;
            frames.push((img, tri));
        }
        let block = FrameBlock::new(frames, start)?;
        let art = solve_block(&block, params)?;
        if !art.solve.converged {
            nonconverged_blocks += 1;
        }
        for (offset, matte) in art.mattes.iter().enumerate() {
            let name = frame_paths[start + offset]
                .file_name()
                .expect("read_dir yields named files");
            let mut out = out_dir.join(name);
            out.set_extension("png");
            save_matte(matte, &out, BitDepth::Eight)?;
            outputs.push(out);
        }
        blocks += 1;
        start = end;
    }
    Ok(SequenceReport {
        frame_count: frame_paths.len(),
        blocks,
        outputs,
        nonconverged_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{FeatureVec6, TrimapLabel};
    use crate::metrics::synth_composite;
    use crate::pipeline::matte_image;

    fn sample(label: SampleLabel, x: f64, y: f64, shade: f64) -> Sample {
        Sample {
            label,
            centroid: (x, y),
            feature: FeatureVec6::from_raw([shade, shade, shade, 0.1, 0.2, 0.3]),
            mean_rgb: [shade; 3],
            frame: 0,
        }
    }

    /// Bank of `nf` foreground then `nb` background samples along a row,
    /// content disambiguated by `tag`.
    fn bank(nf: usize, nb: usize, tag: f64) -> Vec<Sample> {
        let mut v = Vec::new();
        for i in 0..nf {
            v.push(sample(
                SampleLabel::Foreground,
                10.0 + i as f64,
                1.0,
                0.3 + tag,
            ));
        }
        for i in 0..nb {
            v.push(sample(
                SampleLabel::Background,
                10.0 + i as f64,
                5.0,
                0.6 + tag,
            ));
        }
        v
    }

    /// Unknown region at the left edge so lower x sorts closer.
    fn left_edge_mask() -> PixelMask {
        let mut m = PixelMask::empty(40, 8);
        for y in 0..8 {
            m.set(0, y, true);
        }
        m
    }

    #[test]
    fn quota_halves_with_temporal_distance() {
        let banks: Vec<Vec<Sample>> = (0..4)
            .map(|f| {
                let mut b = bank(10, 10, f as f64 * 0.01);
                for s in &mut b {
                    s.frame = f;
                }
                b
            })
            .collect();
        let mask = left_edge_mask();
        let pooled = block_sample_bank(&banks, 0, &mask, 8).unwrap();
        // Quotas 8,4,2,1 per label; banks hold 10 per label.
        let per_frame = |f: usize, l: SampleLabel| {
            pooled
                .samples()
                .iter()
                .filter(|s| s.frame == f && s.label == l)
                .count()
        };
        for (f, want) in [(0usize, 8usize), (1, 4), (2, 2), (3, 1)] {
            assert_eq!(per_frame(f, SampleLabel::Foreground), want, "frame {f}");
            assert_eq!(per_frame(f, SampleLabel::Background), want, "frame {f}");
        }
        // Selection favors spatial closeness to the unknown region: frame 3's
        // single foreground pick is its leftmost sample.
        let f3 = pooled
            .samples()
            .iter()
            .find(|s| s.frame == 3 && s.label == SampleLabel::Foreground)
            .unwrap();
        assert_eq!(f3.centroid.0, 10.0);
    }

    #[test]
    fn single_frame_block_passes_bank_through() {
        let b = bank(3, 2, 0.0);
        let mask = left_edge_mask();
        let pooled = block_sample_bank(std::slice::from_ref(&b), 0, &mask, 1).unwrap();
        assert_eq!(pooled.len(), 5);
        for (got, want) in pooled.samples().iter().zip(&b) {
            assert_eq!(got.centroid, want.centroid);
            assert_eq!(got.label, want.label);
            assert_eq!(got.mean_rgb, want.mean_rgb);
        }
    }

    #[test]
    fn identical_frames_collapse_to_one_contribution() {
        // Same content in both frames (only the frame tag differs); nested quota
        // selections dedup to the larger one.
        let mut b0 = bank(6, 6, 0.0);
        for s in &mut b0 {
            s.frame = 0;
        }
        let mut b1 = bank(6, 6, 0.0);
        for s in &mut b1 {
            s.frame = 1;
        }
        let mask = left_edge_mask();
        let pooled = block_sample_bank(&[b0, b1], 0, &mask, 4).unwrap();
        // 4 per label from frame 0; frame 1's 2 per label are duplicates.
        assert_eq!(pooled.len(), 8);
        assert!(pooled.samples().iter().all(|s| s.frame == 0));
    }

    #[test]
    fn all_empty_banks_rejected() {
        let mask = left_edge_mask();
        assert!(matches!(
            block_sample_bank(&[Vec::new(), Vec::new()], 0, &mask, 4),
            Err(Error::EmptyBank(_))
        ));
    }

    #[test]
    fn empty_frame_contributes_nothing() {
        let b0 = bank(4, 4, 0.0);
        let mask = left_edge_mask();
        let pooled = block_sample_bank(&[b0, Vec::new()], 0, &mask, 4).unwrap();
        assert_eq!(pooled.len(), 8);
    }

    fn ramp_frame(w: u32, h: u32, band: (u32, u32)) -> (RasterImage, Trimap) {
        let fg = RasterImage::new(w, h, vec![[0.9, 0.2, 0.1]; (w * h) as usize]);
        let bg = RasterImage::new(w, h, vec![[0.1, 0.3, 0.8]; (w * h) as usize]);
        let alpha = Matte::new(
            w,
            h,
            (0..w * h)
                .map(|i| {
                    let x = i % w;
                    ((x as f64 - band.0 as f64) / (band.1 - band.0) as f64).clamp(0.0, 1.0)
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
        (img, Trimap::new(w, h, labels).unwrap())
    }

    fn small_params() -> Params {
        let mut p = Params::default();
        p.e_thr = 0.0;
        p.band_width = 8;
        p
    }

    #[test]
    fn block_rejects_bad_shapes() {
        assert!(matches!(
            FrameBlock::new(Vec::new(), 0),
            Err(Error::EmptySequence)
        ));
        let (img, tri) = ramp_frame(12, 8, (5, 8));
        let (img2, _) = ramp_frame(10, 8, (4, 7));
        assert!(matches!(
            FrameBlock::new(vec![(img.clone(), tri.clone()), (img2, tri.clone())], 0),
            Err(Error::DimensionMismatch { .. })
        ));
        let many = vec![(img, tri); MAX_BLOCK + 1];
        assert!(matches!(
            FrameBlock::new(many, 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn static_block_mattes_agree() {
        let (img, tri) = ramp_frame(24, 16, (9, 15));
        let block =
            FrameBlock::new(vec![(img.clone(), tri.clone()); 3], 0).unwrap();
        let art = solve_block(&block, &small_params()).unwrap();
        assert!(art.solve.converged);
        assert_eq!(art.mattes.len(), 3);
        let first = art.mattes[0].values();
        for m in &art.mattes[1..] {
            for (a, b) in first.iter().zip(m.values()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_frame_block_matches_image_path() {
        let (img, tri) = ramp_frame(24, 16, (9, 15));
        let mut params = small_params();
        params.skip_laplacian = true;
        let image_art = matte_image(&img, &tri, &params).unwrap();
        let block = FrameBlock::new(vec![(img, tri)], 0).unwrap();
        let block_art = solve_block(&block, &params).unwrap();
        assert_eq!(
            image_art.matte.values(),
            block_art.mattes[0].values(),
            "one-frame block must reproduce the image path exactly"
        );
    }

    #[test]
    fn sequence_chunks_and_mirrors_names() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        let trimaps = dir.path().join("trimaps");
        let out = dir.path().join("out");
        fs::create_dir_all(&frames).unwrap();
        fs::create_dir_all(&trimaps).unwrap();
        let (img, tri) = ramp_frame(16, 10, (6, 10));
        for i in 0..5 {
            crate::imaging::save_image(
                &img,
                frames.join(format!("f{i:03}.png")),
                BitDepth::Eight,
            )
            .unwrap();
            crate::imaging::save_trimap(&tri, trimaps.join(format!("f{i:03}.png"))).unwrap();
        }
        let report = run_sequence(&frames, &trimaps, &out, 2, &small_params()).unwrap();
        assert_eq!(report.frame_count, 5);
        assert_eq!(report.blocks, 3);
        assert_eq!(report.outputs.len(), 5);
        for i in 0..5 {
            assert!(out.join(format!("f{i:03}.png")).is_file());
        }
    }

    #[test]
    fn sequence_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        let trimaps = dir.path().join("trimaps");
        fs::create_dir_all(&frames).unwrap();
        fs::create_dir_all(&trimaps).unwrap();
        let (img, tri) = ramp_frame(16, 10, (6, 10));
        crate::imaging::save_image(&img, frames.join("a.png"), BitDepth::Eight).unwrap();
        crate::imaging::save_image(&img, frames.join("b.png"), BitDepth::Eight).unwrap();
        crate::imaging::save_trimap(&tri, trimaps.join("a.png")).unwrap();
        let err = run_sequence(
            &frames,
            &trimaps,
            &dir.path().join("out"),
            4,
            &small_params(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SequenceMismatch { left: 2, right: 1 }));
        let empty = dir.path().join("none");
        fs::create_dir_all(&empty).unwrap();
        assert!(matches!(
            run_sequence(&empty, &trimaps, &dir.path().join("out"), 4, &small_params()),
            Err(Error::EmptySequence)
        ));
    }
}
