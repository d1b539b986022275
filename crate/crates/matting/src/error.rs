use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("{path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        got_w: u32,
        got_h: u32,
    },

    #[error("coordinate ({x}, {y}) out of bounds for {width}x{height}")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("trimap has no {0} pixels")]
    MissingLabel(&'static str),

    #[error("empty sample band on the {0} side")]
    EmptyBand(&'static str),

    #[error("sample bank has no {0} samples")]
    EmptyBank(&'static str),

    #[error("empty sample selection")]
    EmptySelection,

    #[error("foreground and background colors are identical; pairwise alpha undefined")]
    DegeneratePair,

    #[error("{k}-nearest-neighbor graph needs more than {k} nodes, got {got}")]
    TooFewNodes { k: usize, got: usize },

    #[error("empty pixel region for metric")]
    EmptyRegion,

    #[error("sequence length mismatch: {left} vs {right}")]
    SequenceMismatch { left: usize, right: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
