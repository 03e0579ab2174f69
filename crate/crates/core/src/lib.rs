//! Dense quadrangle text detection.
//!
//! A single fully-convolutional pass predicts, for every output cell, a text
//! score and the geometry of the enclosing region (a rotated box or a free
//! quadrangle). Detections are thresholded and merged with locality-aware
//! non-maximum suppression.

pub mod augment;
pub mod bench;
pub mod decode;
pub mod formats;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod labelgen;
pub mod losses;
pub mod nms;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tinynet;

pub use geometry::{Detection, Point, Quad};
pub use grid::{Grid, ScoreMap};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/labels.md")]
    mod labels {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
