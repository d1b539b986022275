//! Alpha matting from a trimap, for single images and short clips.
//!
//! The estimation stage writes each unknown pixel as a constrained sparse
//! combination of foreground and background superpixel samples; the code
//! directly yields an alpha estimate and a confidence. The refinement stage
//! spreads those estimates over a pixel graph (color-line windows plus
//! feature-space nearest neighbors, anchored by two virtual terminals) and
//! solves the resulting normal equations with preconditioned CG.
//!
//! Clips reuse the same machinery: frames are coupled through the
//! nearest-neighbor graph only, with per-frame sample quotas that decay with
//! temporal distance from the target frame.

pub mod certainty;
pub mod error;
pub mod graph;
pub mod imaging;
pub mod kdtree;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod sparse;
pub mod sparse_code;
pub mod video;

pub use error::{Error, Result};
