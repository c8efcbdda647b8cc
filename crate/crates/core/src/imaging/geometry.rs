use serde::{Deserialize, Serialize};

use super::components::{label_components, Connectivity};
use super::BinarizedPage;
use crate::error::{Error, Result};

pub const DEFAULT_INNER: usize = 10;

/// Sliding-window patch size and the central inner window that receives the
/// patch embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub h_p: usize,
    pub w_p: usize,
    pub h_i: usize,
    pub w_i: usize,
}

impl PatchGeometry {
    pub fn new(h_p: usize, w_p: usize, h_i: usize, w_i: usize) -> Result<Self> {
        let g = Self { h_p, w_p, h_i, w_i };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_p == 0 || self.w_p == 0 || self.h_i == 0 || self.w_i == 0 {
            return Err(Error::InvalidGeometry(format!("all sizes must be positive: {self:?}")));
        }
        if self.h_i > self.h_p || self.w_i > self.w_p {
            return Err(Error::InvalidGeometry(format!("inner window exceeds patch: {self:?}")));
        }
        if (self.h_p - self.h_i) % 2 != 0 || (self.w_p - self.w_i) % 2 != 0 {
            return Err(Error::InvalidGeometry(format!(
                "patch and inner window must differ by an even amount: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.h_p, self.w_p)
    }

    /// White border added on each side so the inner windows tile the page.
    pub fn side_padding(&self) -> (usize, usize) {
        ((self.h_p - self.h_i) / 2, (self.w_p - self.w_i) / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub h_p_override: Option<usize>,
    pub w_p_override: Option<usize>,
    pub h_i: usize,
    pub w_i: usize,
    /// Patch height in character heights when not overridden.
    pub patch_multiplier: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            h_p_override: None,
            w_p_override: None,
            patch_multiplier: 3.0,
            h_i: DEFAULT_INNER,
            w_i: DEFAULT_INNER,
        }
    }
}

/// Robust character height: median bounding-box height of the components
/// whose area lies within the [10th, 95th] percentile band.
pub fn character_height(page: &BinarizedPage) -> Result<f64> {
    let comps = label_components(&page.fg_mask, Connectivity::Eight);
    if comps.is_empty() {
        return Err(Error::CannotEstimateCharHeight);
    }
    let mut areas: Vec<usize> = comps.iter().map(|c| c.area()).collect();
    areas.sort_unstable();
    let lo = nearest_rank(&areas, 10.0);
    let hi = nearest_rank(&areas, 95.0);
    let mut heights: Vec<usize> = comps
        .iter()
        .filter(|c| (lo..=hi).contains(&c.area()))
        .map(|c| c.bbox.height)
        .collect();
    heights.sort_unstable();
    Ok(median(&heights))
}

pub fn estimate_patch_geometry(page: &BinarizedPage, cfg: &GeometryConfig) -> Result<PatchGeometry> {
    geometry_for_char_height(character_height(page)?, cfg)
}

/// One geometry for a set of pages, from the median of their character
/// heights.
pub fn estimate_corpus_geometry(pages: &[BinarizedPage], cfg: &GeometryConfig) -> Result<PatchGeometry> {
    let mut heights = pages.iter().map(character_height).collect::<Result<Vec<f64>>>()?;
    if heights.is_empty() {
        return Err(Error::CannotEstimateCharHeight);
    }
    heights.sort_by(f64::total_cmp);
    let n = heights.len();
    let char_h = if n % 2 == 1 {
        heights[n / 2]
    } else {
        (heights[n / 2 - 1] + heights[n / 2]) / 2.0
    };
    geometry_for_char_height(char_h, cfg)
}

pub fn geometry_for_char_height(char_h: f64, cfg: &GeometryConfig) -> Result<PatchGeometry> {
    if !(cfg.patch_multiplier > 0.0) {
        return Err(Error::InvalidConfig("patch_multiplier must be positive".into()));
    }
    let h_p = cfg
        .h_p_override
        .unwrap_or_else(|| (cfg.patch_multiplier * char_h).round() as usize);
    let w_p = cfg.w_p_override.unwrap_or(h_p);
    PatchGeometry::new(
        fit_to_inner(h_p, cfg.h_i),
        fit_to_inner(w_p, cfg.w_i),
        cfg.h_i,
        cfg.w_i,
    )
}

/// Raise `size` to at least `inner`, then by one more if the difference is odd.
fn fit_to_inner(size: usize, inner: usize) -> usize {
    let size = size.max(inner);
    size + (size - inner) % 2
}

fn nearest_rank(sorted: &[usize], pct: f64) -> usize {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn page_with_boxes(boxes: &[(usize, usize, usize, usize)], h: usize, w: usize) -> BinarizedPage {
        let mut mask = Array2::from_elem((h, w), false);
        for &(top, left, bh, bw) in boxes {
            for r in top..top + bh {
                for c in left..left + bw {
                    mask[[r, c]] = true;
                }
            }
        }
        BinarizedPage::from_mask(mask, "boxes")
    }

    #[test]
    fn uniform_height_twenty_gives_sixty() {
        let boxes: Vec<_> = (0..6).map(|i| (10, 10 + i * 30, 20, 12)).collect();
        let page = page_with_boxes(&boxes, 60, 220);
        let g = estimate_patch_geometry(&page, &GeometryConfig::default()).unwrap();
        assert_eq!((g.h_p, g.w_p, g.h_i, g.w_i), (60, 60, 10, 10));

        let cfg = GeometryConfig {
            w_p_override: Some(40),
            ..Default::default()
        };
        let g = estimate_patch_geometry(&page, &cfg).unwrap();
        assert_eq!((g.h_p, g.w_p), (60, 40));
    }

    #[test]
    fn outlier_heights_do_not_move_the_estimate() {
        // Square components of side 4, 20, 20, 20, 200.
        let page = page_with_boxes(
            &[(0, 0, 4, 4), (0, 10, 20, 20), (0, 40, 20, 20), (0, 70, 20, 20), (0, 100, 200, 200)],
            210,
            310,
        );
        // Brute force: areas 16, 400, 400, 400, 40000; nearest-rank P10 = 16,
        // P95 = 40000; kept heights {4, 20, 20, 20, 200}; median 20.
        let heights = [4usize, 20, 20, 20, 200];
        let mut sorted = heights.to_vec();
        sorted.sort();
        assert_eq!(sorted[sorted.len() / 2], 20);
        let g = estimate_patch_geometry(&page, &GeometryConfig::default()).unwrap();
        assert_eq!(g.h_p, 60);
    }

    #[test]
    fn parity_fixup_makes_padding_symmetric() {
        let boxes: Vec<_> = (0..4).map(|i| (5, 5 + i * 20, 7, 5)).collect();
        let page = page_with_boxes(&boxes, 30, 100);
        let g = estimate_patch_geometry(&page, &GeometryConfig::default()).unwrap();
        // 3 * 7 = 21 -> 22 so that 22 - 10 is even.
        assert_eq!(g.h_p, 22);
        assert_eq!(g.side_padding(), (6, 6));
    }

    #[test]
    fn blank_page_cannot_be_estimated() {
        let page = BinarizedPage::from_mask(Array2::from_elem((10, 10), false), "blank");
        let err = estimate_patch_geometry(&page, &GeometryConfig::default()).unwrap_err();
        assert!(err.to_string().contains("cannot estimate character height"));
    }

    #[test]
    fn translation_does_not_change_geometry() {
        let boxes: Vec<_> = (0..5).map(|i| (8, 4 + i * 18, 9 + i % 3, 6)).collect();
        let a = estimate_patch_geometry(&page_with_boxes(&boxes, 40, 200), &GeometryConfig::default()).unwrap();
        let shifted: Vec<_> = boxes.iter().map(|&(t, l, h, w)| (t, l + 37, h, w)).collect();
        let b = estimate_patch_geometry(&page_with_boxes(&shifted, 40, 200), &GeometryConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(PatchGeometry::new(9, 20, 10, 10).is_err());
        assert!(PatchGeometry::new(21, 20, 10, 10).is_err());
        assert!(PatchGeometry::new(30, 30, 10, 10).is_ok());
    }
}
