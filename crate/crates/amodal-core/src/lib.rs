//! Weakly supervised amodal completion: synthesize occlusions on top of
//! modal-only annotations, train a two-head segmenter (mask probability plus
//! per-pixel uncertainty), and evaluate completion quality, pairwise
//! occlusion ordering, and pseudo-ground-truth export.

pub mod dataset;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod model;
pub mod rle;
pub mod synth;
pub mod train;
