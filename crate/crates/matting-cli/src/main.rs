//! Command-line front end: single-image matting, block-solved sequences,
//! trimap expansion, compositing, and matte evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or input-data error,
//! 3 numerical non-convergence (best iterate still written).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use matting::certainty::ProbabilityMap;
use matting::graph::{write_data_term, write_l_triplets};
use matting::imaging::{
    load_image, load_matte, load_trimap, save_image, save_matte, save_trimap, BitDepth, Matte,
    PixelMask,
};
use matting::metrics::{gradient_error, mse, sad, synth_composite, tce};
use matting::pipeline::{assemble_frames, matte_image, Params, PreparedFrame};
use matting::preprocess::expand_known_regions;
use matting::video::run_sequence;
use matting::Error;

#[derive(Parser)]
#[command(
    name = "matting",
    version,
    about = "Alpha matting via sparse coding over sample banks and a graph-energy solve"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the alpha matte of one image
    Image(ImageCmd),
    /// Matte a frame sequence in simultaneously solved blocks
    Video(VideoCmd),
    /// Compare a matte against ground truth
    Eval(EvalCmd),
    /// Compare two matte sequences frame by frame
    EvalSeq(EvalSeqCmd),
    /// Grow the known regions of a trimap
    ExpandTrimap(ExpandCmd),
    /// Composite foreground over background through an alpha matte
    Synth(SynthCmd),
}

/// Pipeline tunables shared by the matting subcommands. Every flag falls back
/// to the config file (when given), then to the built-in default.
#[derive(Args)]
struct ParamFlags {
    /// key=value parameter file with # comments; explicit flags win
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Known-region expansion spatial threshold (pixels)
    #[arg(long)]
    e_thr: Option<f64>,
    /// Known-region expansion color threshold (255-scaled)
    #[arg(long)]
    c_thr: Option<f64>,
    /// Sampling band width around the unknown region (pixels)
    #[arg(long)]
    band_width: Option<u32>,
    /// Superpixel grid spacing
    #[arg(long)]
    region_size: Option<u32>,
    /// Superpixel compactness weight
    #[arg(long)]
    compactness: Option<f64>,
    /// Superpixel refinement iterations
    #[arg(long)]
    slic_iters: Option<u32>,
    /// Closest-sample count in the probability estimate
    #[arg(long)]
    prob_m: Option<usize>,
    /// Probability kernel bandwidth
    #[arg(long)]
    prob_delta: Option<f64>,
    /// Certainty window edge length (pixels)
    #[arg(long)]
    cert_window: Option<u32>,
    /// Lower edge of the ambiguous-probability interval
    #[arg(long)]
    cert_low: Option<f64>,
    /// Upper edge of the ambiguous-probability interval
    #[arg(long)]
    cert_high: Option<f64>,
    /// Ambiguity count above which a pixel codes against a mixed dictionary
    #[arg(long)]
    cert_count_thr: Option<usize>,
    /// High-certainty dictionary size (per label)
    #[arg(long)]
    n_high: Option<usize>,
    /// Read --n-high as a total across labels instead of per label
    #[arg(long)]
    n_high_total: bool,
    /// Mixed-dictionary size as a fraction of the bank
    #[arg(long)]
    low_fraction: Option<f64>,
    /// Per-pixel coding duality-gap tolerance
    #[arg(long)]
    code_tol: Option<f64>,
    /// Per-pixel coding iteration cap
    #[arg(long)]
    code_max_iter: Option<usize>,
    /// Neighbor count of the feature-space affinity graph
    #[arg(long)]
    k: Option<usize>,
    /// Window-statistics regularizer
    #[arg(long)]
    eps: Option<f64>,
    /// Data-term weight on trimap-known pixels
    #[arg(long)]
    lambda: Option<f64>,
    /// Relative-residual target of the linear solve
    #[arg(long)]
    solve_tol: Option<f64>,
    /// Iteration cap of the linear solve
    #[arg(long)]
    solve_max_iter: Option<usize>,
    /// Drop the window-statistics affinities (feature graph only)
    #[arg(long)]
    skip_laplacian: bool,
    /// Use the literal printed right-hand side (diagnostic)
    #[arg(long)]
    rhs_as_printed: bool,
    /// Per-label sample quota for a block's target frame
    #[arg(long)]
    quota_base: Option<usize>,
}

#[derive(Args)]
struct ImageCmd {
    /// Input image (PNG or PNM)
    #[arg(long)]
    input: PathBuf,
    /// Trimap: white F, black B, gray unknown
    #[arg(long)]
    trimap: PathBuf,
    /// Output matte (8-bit grayscale PNG)
    #[arg(long)]
    output: PathBuf,
    /// Also write the foreground-probability map (<output>.prob.png)
    #[arg(long)]
    dump_prob: bool,
    /// Also write the pre-solve estimate (<output>.initial.png)
    #[arg(long)]
    dump_initial: bool,
    /// Write the assembled linear system as triplet text (plus a .data sidecar)
    #[arg(long, value_name = "PATH")]
    dump_system: Option<PathBuf>,
    #[command(flatten)]
    params: ParamFlags,
}

#[derive(Args)]
struct VideoCmd {
    /// Directory of frame images
    #[arg(long)]
    frames: PathBuf,
    /// Directory of per-frame trimaps (paired with frames by sorted name)
    #[arg(long)]
    trimaps: PathBuf,
    /// Output directory for per-frame mattes
    #[arg(long)]
    out: PathBuf,
    /// Frames solved together per block
    #[arg(long, default_value_t = 4)]
    block: usize,
    #[command(flatten)]
    params: ParamFlags,
}

#[derive(Args)]
struct EvalCmd {
    /// Predicted matte
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth matte
    #[arg(long)]
    gt: PathBuf,
    /// Evaluation trimap; restricts metrics to its unknown pixels
    #[arg(long)]
    trimap: Option<PathBuf>,
    /// Evaluate over the full frame even when a trimap is given
    #[arg(long)]
    full_frame: bool,
    /// Comma-separated metric list (sad, mse, grad)
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<MetricKind>>,
    /// Print one comma-separated line instead of the table
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct EvalSeqCmd {
    /// Directory of predicted mattes
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth mattes (paired by sorted name)
    #[arg(long)]
    gt_dir: PathBuf,
    /// Comma-separated metric list (sad, mse, grad, tce)
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<MetricKind>>,
    /// Print one comma-separated line of aggregates instead of the table
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ExpandCmd {
    /// Input image
    #[arg(long)]
    input: PathBuf,
    /// Trimap to expand
    #[arg(long)]
    trimap: PathBuf,
    /// Output trimap
    #[arg(long)]
    output: PathBuf,
    /// Spatial threshold (pixels)
    #[arg(long, default_value_t = 12.0)]
    e_thr: f64,
    /// Color threshold (255-scaled RGB distance)
    #[arg(long, default_value_t = 4.0)]
    c_thr: f64,
}

#[derive(Args)]
struct SynthCmd {
    /// Foreground image
    #[arg(long)]
    fg: PathBuf,
    /// Background image
    #[arg(long)]
    bg: PathBuf,
    /// Alpha matte
    #[arg(long)]
    alpha: PathBuf,
    /// Output composite (8-bit PNG)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    Sad,
    Mse,
    Grad,
    Tce,
}

impl MetricKind {
    fn name(self) -> &'static str {
        match self {
            MetricKind::Sad => "sad",
            MetricKind::Mse => "mse",
            MetricKind::Grad => "grad",
            MetricKind::Tce => "tce",
        }
    }
}

/// A failed run: what to print and what to exit with.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Image(c) => cmd_image(c),
        Command::Video(c) => cmd_video(c),
        Command::Eval(c) => cmd_eval(c),
        Command::EvalSeq(c) => cmd_eval_seq(c),
        Command::ExpandTrimap(c) => cmd_expand(c),
        Command::Synth(c) => cmd_synth(c),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn parse_config_bool(val: &str) -> Result<bool, String> {
    match val {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("expected true/false, got {other:?}")),
    }
}

fn set_param(p: &mut Params, key: &str, val: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(val: &str, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        val.parse()
            .map_err(|e| format!("bad value for {key}: {e}"))
    }
    match key {
        "e_thr" => p.e_thr = num(val, key)?,
        "c_thr" => p.c_thr = num(val, key)?,
        "band_width" => p.band_width = num(val, key)?,
        "region_size" => p.region_size = num(val, key)?,
        "compactness" => p.compactness = num(val, key)?,
        "slic_iters" => p.slic_iters = num(val, key)?,
        "prob_m" => p.prob_m = num(val, key)?,
        "prob_delta" => p.prob_delta = num(val, key)?,
        "cert_window" => p.cert_window = num(val, key)?,
        "cert_low" => p.cert_band.0 = num(val, key)?,
        "cert_high" => p.cert_band.1 = num(val, key)?,
        "cert_count_thr" => p.cert_count_thr = num(val, key)?,
        "n_high" => p.code.n_high = num(val, key)?,
        "n_high_total" => p.code.n_high_total = parse_config_bool(val)?,
        "low_fraction" => p.code.low_fraction = num(val, key)?,
        "code_tol" => p.code.tol = num(val, key)?,
        "code_max_iter" => p.code.max_iter = num(val, key)?,
        "k" => p.k = num(val, key)?,
        "eps" => p.eps = num(val, key)?,
        "lambda" => p.lambda = num(val, key)?,
        "solve_tol" => p.solve_tol = num(val, key)?,
        "solve_max_iter" => p.solve_max_iter = num(val, key)?,
        "skip_laplacian" => p.skip_laplacian = parse_config_bool(val)?,
        "rhs_as_printed" => p.rhs_as_printed = parse_config_bool(val)?,
        "quota_base" => p.quota_base = num(val, key)?,
        other => return Err(format!("unknown parameter {other:?}")),
    }
    Ok(())
}

fn apply_config(p: &mut Params, path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::usage(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        let key = k.trim().replace('-', "_");
        set_param(p, &key, v.trim()).map_err(|msg| {
            Failure::usage(format!("{}:{}: {msg}", path.display(), lineno + 1))
        })?;
    }
    Ok(())
}

/// Defaults, then the config file, then explicit flags.
fn build_params(flags: &ParamFlags) -> Result<Params, Failure> {
    let mut p = Params::default();
    if let Some(path) = &flags.config {
        apply_config(&mut p, path)?;
    }
    macro_rules! take {
        ($($field:ident => $slot:expr),* $(,)?) => {
            $(if let Some(v) = flags.$field { $slot = v; })*
        };
    }
    take! {
        e_thr => p.e_thr,
        c_thr => p.c_thr,
        band_width => p.band_width,
        region_size => p.region_size,
        compactness => p.compactness,
        slic_iters => p.slic_iters,
        prob_m => p.prob_m,
        prob_delta => p.prob_delta,
        cert_window => p.cert_window,
        cert_low => p.cert_band.0,
        cert_high => p.cert_band.1,
        cert_count_thr => p.cert_count_thr,
        n_high => p.code.n_high,
        low_fraction => p.code.low_fraction,
        code_tol => p.code.tol,
        code_max_iter => p.code.max_iter,
        k => p.k,
        eps => p.eps,
        lambda => p.lambda,
        solve_tol => p.solve_tol,
        solve_max_iter => p.solve_max_iter,
        quota_base => p.quota_base,
    }
    if flags.n_high_total {
        p.code.n_high_total = true;
    }
    if flags.skip_laplacian {
        p.skip_laplacian = true;
    }
    if flags.rhs_as_printed {
        p.rhs_as_printed = true;
    }
    Ok(p)
}

/// out.png -> out.<tag>.png
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let ext = path
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "png".into());
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn prob_as_matte(p: &ProbabilityMap) -> Matte {
    let n = p.width() as usize * p.height() as usize;
    Matte::new(
        p.width(),
        p.height(),
        (0..n).map(|i| p.get_at(i).unwrap_or(0.0)).collect(),
    )
}

fn cmd_image(c: ImageCmd) -> Result<i32, Failure> {
    let params = build_params(&c.params)?;
    let image = load_image(&c.input)?;
    let trimap = load_trimap(&c.trimap, Some((image.width(), image.height())))?;
    let art = matte_image(&image, &trimap, &params)?;
    save_matte(&art.matte, &c.output, BitDepth::Eight)?;
    println!("wrote {}", c.output.display());

    if c.dump_prob {
        let path = sibling(&c.output, "prob");
        save_matte(&prob_as_matte(&art.probability), &path, BitDepth::Eight)?;
        println!("wrote {}", path.display());
    }
    if c.dump_initial {
        let path = sibling(&c.output, "initial");
        save_matte(&art.initial, &path, BitDepth::Eight)?;
        println!("wrote {}", path.display());
    }
    if let Some(sys_path) = &c.dump_system {
        let prepared = PreparedFrame {
            unknowns: art.expanded.unknown_mask(),
            expanded: art.expanded.clone(),
            samples: Vec::new(),
        };
        let (aff, data) = assemble_frames(
            &[&image],
            std::slice::from_ref(&prepared),
            std::slice::from_ref(&art.estimates),
            &params,
            !params.skip_laplacian,
        )?;
        let write = |path: &Path, f: &dyn Fn(&mut fs::File) -> std::io::Result<()>| {
            let mut file = fs::File::create(path)
                .map_err(|e| Failure::io(format!("cannot create {}: {e}", path.display())))?;
            f(&mut file)
                .and_then(|()| file.flush())
                .map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
        };
        write(sys_path, &|file| write_l_triplets(&aff, &data, file))?;
        let data_path = PathBuf::from(format!("{}.data", sys_path.display()));
        write(&data_path, &|file| write_data_term(&data, file))?;
        println!("wrote {} and {}", sys_path.display(), data_path.display());
    }

    println!(
        "unknown pixels {}, low-certainty {}, fallbacks {}, renormalized {}, coding cap hits {}",
        art.stats.unknown_pixels,
        art.certainty.low_count(),
        art.stats.fallbacks,
        art.stats.renormalized,
        art.stats.nonconverged
    );
    println!(
        "solve: {} after {} iterations (relative residual {:.3e})",
        if art.solve.converged {
            "converged"
        } else {
            "stopped at the iteration cap"
        },
        art.solve.iterations,
        art.solve.rel_residual
    );
    println!(
        "energy: {:.6} -> {:.6}",
        art.energy_initial, art.energy_final
    );
    if !art.solve.converged {
        eprintln!("warning: linear solve missed tolerance; the matte is the best iterate");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_video(c: VideoCmd) -> Result<i32, Failure> {
    let params = build_params(&c.params)?;
    let report = run_sequence(&c.frames, &c.trimaps, &c.out, c.block, &params)?;
    println!(
        "{} frames in {} blocks -> {}",
        report.frame_count,
        report.blocks,
        c.out.display()
    );
    if report.nonconverged_blocks > 0 {
        eprintln!(
            "warning: {} block(s) missed the solve tolerance",
            report.nonconverged_blocks
        );
        return Ok(3);
    }
    Ok(0)
}

fn eval_region(
    trimap: &Option<PathBuf>,
    full_frame: bool,
    dims: (u32, u32),
) -> Result<PixelMask, Failure> {
    match trimap {
        Some(path) if !full_frame => Ok(load_trimap(path, Some(dims))?.unknown_mask()),
        _ => Ok(PixelMask::full(dims.0, dims.1)),
    }
}

fn print_report(rows: &[(&'static str, f64)], csv: bool) {
    if csv {
        let line: Vec<String> = rows.iter().map(|(_, v)| format!("{v}")).collect();
        println!("{}", line.join(","));
        return;
    }
    if rows.iter().any(|(n, _)| *n == "grad") {
        println!("# gradient error is a sum over the region, not a mean");
    }
    for (name, v) in rows {
        println!("{name:<5} {v:.6e}");
    }
}

fn cmd_eval(c: EvalCmd) -> Result<i32, Failure> {
    let metrics = c
        .metrics
        .clone()
        .unwrap_or_else(|| vec![MetricKind::Sad, MetricKind::Mse, MetricKind::Grad]);
    if metrics.contains(&MetricKind::Tce) {
        return Err(Failure::usage(
            "tce is a sequence metric; use eval-seq",
        ));
    }
    let pred = load_matte(&c.pred)?;
    let gt = load_matte(&c.gt)?;
    let region = eval_region(&c.trimap, c.full_frame, (pred.width(), pred.height()))?;
    let mut rows = Vec::new();
    for m in &metrics {
        let v = match m {
            MetricKind::Sad => sad(&pred, &gt, &region)?,
            MetricKind::Mse => mse(&pred, &gt, &region)?,
            MetricKind::Grad => gradient_error(&pred, &gt, &region, 1.4)?,
            MetricKind::Tce => unreachable!("rejected above"),
        };
        rows.push((m.name(), v));
    }
    print_report(&rows, c.csv);
    Ok(0)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry =
            entry.map_err(|e| Failure::io(format!("cannot read {}: {e}", dir.display())))?;
        if entry.path().is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort();
    Ok(paths)
}

fn cmd_eval_seq(c: EvalSeqCmd) -> Result<i32, Failure> {
    let metrics = c
        .metrics
        .clone()
        .unwrap_or_else(|| vec![MetricKind::Mse, MetricKind::Tce]);
    let pred_paths = sorted_files(&c.pred_dir)?;
    let gt_paths = sorted_files(&c.gt_dir)?;
    if pred_paths.is_empty() {
        return Err(Error::EmptySequence.into());
    }
    if pred_paths.len() != gt_paths.len() {
        return Err(Error::SequenceMismatch {
            left: pred_paths.len(),
            right: gt_paths.len(),
        }
        .into());
    }
    let mut preds = Vec::with_capacity(pred_paths.len());
    let mut gts = Vec::with_capacity(gt_paths.len());
    for (p, g) in pred_paths.iter().zip(&gt_paths) {
        preds.push(load_matte(p)?);
        gts.push(load_matte(g)?);
    }

    let per_frame: Vec<MetricKind> = metrics
        .iter()
        .copied()
        .filter(|m| *m != MetricKind::Tce)
        .collect();
    let mut aggregates: Vec<(&'static str, f64)> = Vec::new();
    let mut frame_rows: Vec<(usize, Vec<(&'static str, f64)>)> = Vec::new();
    for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
        let region = PixelMask::full(p.width(), p.height());
        let mut rows = Vec::new();
        for m in &per_frame {
            let v = match m {
                MetricKind::Sad => sad(p, g, &region)?,
                MetricKind::Mse => mse(p, g, &region)?,
                MetricKind::Grad => gradient_error(p, g, &region, 1.4)?,
                MetricKind::Tce => unreachable!("filtered out"),
            };
            rows.push((m.name(), v));
        }
        frame_rows.push((i, rows));
    }
    for (slot, m) in per_frame.iter().enumerate() {
        let mean = frame_rows
            .iter()
            .map(|(_, rows)| rows[slot].1)
            .sum::<f64>()
            / frame_rows.len() as f64;
        aggregates.push((m.name(), mean));
    }
    if metrics.contains(&MetricKind::Tce) {
        aggregates.push(("tce", tce(&preds, &gts)?));
    }

    if c.csv {
        let line: Vec<String> = aggregates.iter().map(|(_, v)| format!("{v}")).collect();
        println!("{}", line.join(","));
        return Ok(0);
    }
    if per_frame.iter().any(|m| *m == MetricKind::Grad) {
        println!("# gradient error is a sum over the region, not a mean");
    }
    for (i, rows) in &frame_rows {
        let cells: Vec<String> = rows
            .iter()
            .map(|(n, v)| format!("{n} {v:.6e}"))
            .collect();
        println!(
            "frame {:>4} ({})  {}",
            i,
            pred_paths[*i].file_name().unwrap_or_default().to_string_lossy(),
            cells.join("  ")
        );
    }
    for (name, v) in &aggregates {
        let label = if *name == "tce" {
            "tce".to_string()
        } else {
            format!("mean {name}")
        };
        println!("{label:<9} {v:.6e}");
    }
    Ok(0)
}

fn cmd_expand(c: ExpandCmd) -> Result<i32, Failure> {
    let image = load_image(&c.input)?;
    let trimap = load_trimap(&c.trimap, Some((image.width(), image.height())))?;
    let out = expand_known_regions(&image, &trimap, c.e_thr, c.c_thr);
    save_trimap(&out, &c.output)?;
    println!(
        "wrote {} ({} unknown pixels, was {})",
        c.output.display(),
        out.unknown_count(),
        trimap.unknown_count()
    );
    Ok(0)
}

fn cmd_synth(c: SynthCmd) -> Result<i32, Failure> {
    let fg = load_image(&c.fg)?;
    let bg = load_image(&c.bg)?;
    let alpha = load_matte(&c.alpha)?;
    let img = synth_composite(&fg, &bg, &alpha)?;
    save_image(&img, &c.out, BitDepth::Eight)?;
    println!("wrote {}", c.out.display());
    Ok(0)
}
