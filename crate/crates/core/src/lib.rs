//! Head and tail localization for single-worm micrographs.
//!
//! The pipeline is: classical preprocessing ([`imaging`]) crops the worm to a
//! fixed 150×150 box, a small fully-convolutional network ([`nn`]) emits one
//! heatmap per keypoint, and [`dsnt`] turns each heatmap into numerical
//! coordinates with a differentiable soft-argmax. [`train`] fits the network
//! with Adam, [`eval`] scores it with PCK, and [`baseline`] implements the
//! classical contour-angle proposer for comparison.

pub mod baseline;
pub mod dataset;
pub mod dsnt;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod render;
pub mod synthgen;
pub mod train;

pub use dsnt::NormCoord;
pub use imaging::{GrayImage, PixelPoint};

/// Side length of the preprocessed crop every network input uses.
pub const CROP_SIZE: usize = 150;

/// Head and tail coordinates in one coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointPair<P> {
    pub head: P,
    pub tail: P,
}

impl<P> KeypointPair<P> {
    pub fn new(head: P, tail: P) -> Self {
        Self { head, tail }
    }

    pub fn map<Q>(self, mut f: impl FnMut(P) -> Q) -> KeypointPair<Q> {
        KeypointPair {
            head: f(self.head),
            tail: f(self.tail),
        }
    }
}
