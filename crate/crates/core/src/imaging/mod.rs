//! Page ingestion, binarization, connected components and patch-size
//! estimation shared by every stage.

mod binarize;
mod components;
mod geometry;
pub mod io;

pub(crate) use binarize::otsu_from_histogram;
pub use binarize::{binarize, otsu_threshold, BinarizeConfig, BinarizeMethod};
pub use components::{label_components, neighbours, BBox, Component, ComponentSet, Connectivity};
pub use geometry::{
    character_height, estimate_corpus_geometry, estimate_patch_geometry, geometry_for_char_height, GeometryConfig, PatchGeometry,
    DEFAULT_INNER,
};

use ndarray::Array2;

/// A grayscale page with its foreground (ink) mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedPage {
    pub gray: Array2<u8>,
    pub fg_mask: Array2<bool>,
    pub source_id: String,
}

impl BinarizedPage {
    /// Build a page from a mask alone, rendering ink as 0 and paper as 255.
    pub fn from_mask(fg_mask: Array2<bool>, source_id: &str) -> Self {
        Self {
            gray: fg_mask.mapv(|v| if v { 0 } else { 255 }),
            fg_mask,
            source_id: source_id.to_string(),
        }
    }

    /// (h_d, w_d)
    pub fn dims(&self) -> (usize, usize) {
        self.gray.dim()
    }

    pub fn fg_count(&self) -> usize {
        self.fg_mask.iter().filter(|&&v| v).count()
    }

    pub fn components(&self, connectivity: Connectivity) -> ComponentSet {
        label_components(&self.fg_mask, connectivity)
    }
}

/// Summed-area table with a zero row and column prepended.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    table: Array2<f64>,
}

impl IntegralImage {
    pub fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut table = Array2::zeros((h + 1, w + 1));
        for r in 0..h {
            let mut row_sum = 0.0;
            for c in 0..w {
                row_sum += value(r, c);
                table[[r + 1, c + 1]] = table[[r, c + 1]] + row_sum;
            }
        }
        Self { table }
    }

    pub fn from_mask(mask: &Array2<bool>) -> Self {
        Self::new(mask.nrows(), mask.ncols(), |r, c| if mask[[r, c]] { 1.0 } else { 0.0 })
    }

    /// Sum over rows `r0..r1` and columns `c0..c1`.
    pub fn sum(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        self.table[[r1, c1]] - self.table[[r0, c1]] - self.table[[r1, c0]] + self.table[[r0, c0]]
    }
}
