//! Blob-line detection: embed every inner-window cell of a page with the
//! trained branch, project the embeddings onto their top three principal
//! components as a pseudo-RGB image, and threshold the first component into
//! blobs that strike through the text lines.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::otsu_from_histogram;
use crate::imaging::{label_components, BinarizedPage, Component, Connectivity, PatchGeometry};
use crate::siamese::Checkpoint;

/// One embedding per inner-window cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    /// (n_rows, n_cols, dim)
    pub vectors: Array3<f32>,
    /// (h_i, w_i)
    pub cell: (usize, usize),
    /// (h_d, w_d)
    pub page_dims: (usize, usize),
}

impl EmbeddingGrid {
    pub fn n_rows(&self) -> usize {
        self.vectors.dim().0
    }

    pub fn n_cols(&self) -> usize {
        self.vectors.dim().1
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim().2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Blobs smaller than this are dropped; `None` means two inner windows.
    pub min_blob_area: Option<usize>,
    /// Patches embedded per forward pass.
    pub batch_size: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            min_blob_area: None,
            batch_size: 256,
        }
    }
}

impl DetectConfig {
    pub fn min_blob_area(&self, geom: &PatchGeometry) -> usize {
        self.min_blob_area.unwrap_or(2 * geom.h_i * geom.w_i)
    }
}

/// Pad the page with white so that the patch centred on every inner-window
/// cell exists: right/bottom up to a whole number of cells, plus half the
/// patch/inner difference on all four sides.
pub fn pad_page(gray: &Array2<u8>, geom: &PatchGeometry) -> Array2<u8> {
    let (h, w) = gray.dim();
    let rows = h.div_ceil(geom.h_i);
    let cols = w.div_ceil(geom.w_i);
    let (ph, pw) = geom.side_padding();
    let mut padded = Array2::from_elem((rows * geom.h_i + 2 * ph, cols * geom.w_i + 2 * pw), 255u8);
    padded.slice_mut(s![ph..ph + h, pw..pw + w]).assign(gray);
    padded
}

pub fn embed_page(checkpoint: &Checkpoint, page: &BinarizedPage, geom: &PatchGeometry) -> Result<EmbeddingGrid> {
    embed_page_batched(checkpoint, page, geom, DetectConfig::default().batch_size)
}

pub fn embed_page_batched(
    checkpoint: &Checkpoint,
    page: &BinarizedPage,
    geom: &PatchGeometry,
    batch_size: usize,
) -> Result<EmbeddingGrid> {
    geom.validate()?;
    if checkpoint.patch_size() != geom.patch_size() {
        return Err(Error::SizeMismatch {
            expected: checkpoint.patch_size(),
            actual: geom.patch_size(),
            index: None,
        });
    }
    let (h, w) = page.dims();
    let rows = h.div_ceil(geom.h_i);
    let cols = w.div_ceil(geom.w_i);
    let padded = pad_page(&page.gray, geom);
    let dim = checkpoint.net.embedding_dim();
    let mut vectors = Array3::zeros((rows, cols, dim));

    let cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    for chunk in cells.chunks(batch_size.max(1)) {
        let patches: Vec<Array2<u8>> = chunk
            .iter()
            .map(|&(r, c)| {
                let (top, left) = (r * geom.h_i, c * geom.w_i);
                padded.slice(s![top..top + geom.h_p, left..left + geom.w_p]).to_owned()
            })
            .collect();
        let refs: Vec<&Array2<u8>> = patches.iter().collect();
        for (&(r, c), v) in chunk.iter().zip(checkpoint.embed_batch(&refs)?) {
            vectors.slice_mut(s![r, c, ..]).assign(&ndarray::ArrayView1::from(&v));
        }
    }
    Ok(EmbeddingGrid {
        vectors,
        cell: (geom.h_i, geom.w_i),
        page_dims: (h, w),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRgb {
    /// (h_d, w_d, 3)
    pub image: Array3<u8>,
    /// Fraction of total variance carried by each channel; zero for channels
    /// beyond the rank of the data (those are filled with 128).
    pub explained_variance: [f64; 3],
    /// Unit principal directions, one row per channel.
    pub components: Vec<Vec<f64>>,
    /// Raw principal-component scores per cell, (n_rows, n_cols, 3).
    pub scores: Array3<f64>,
}

/// Principal directions of row vectors: mean, eigenvalues (descending) and
/// the matching unit eigenvectors of the sample covariance.
pub fn principal_components(data: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64) {
    let (n, d) = data.shape();
    let mean: Vec<f64> = (0..d).map(|j| data.column(j).sum() / n as f64).collect();
    let mut centred = data.clone();
    for j in 0..d {
        centred.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = (centred.transpose() * &centred) / denom;
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        values.push(eig.eigenvalues[i].max(0.0));
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.push(v);
    }
    (mean, values, vectors, total)
}

/// Project the grid onto its top-3 principal components (fit on this page
/// only) and paint each cell's rescaled scores over its inner-window block.
pub fn pca_pseudo_rgb(grid: &EmbeddingGrid) -> PseudoRgb {
    let (rows, cols, dim) = grid.vectors.dim();
    let n = rows * cols;
    let data = DMatrix::from_fn(n, dim, |i, j| grid.vectors[[i / cols, i % cols, j]] as f64);
    let (mean, values, vectors, total) = principal_components(&data, 3.min(dim));

    let tol = 1e-10 * total.abs().max(f64::MIN_POSITIVE);
    let rank = values.iter().filter(|&&v| v > tol).count();
    let mut explained_variance = [0.0; 3];
    for k in 0..rank {
        explained_variance[k] = values[k] / total;
    }

    let mut scores = Array3::zeros((rows, cols, 3));
    for i in 0..n {
        for (k, v) in vectors.iter().enumerate().take(rank) {
            let s: f64 = (0..dim).map(|j| (data[(i, j)] - mean[j]) * v[j]).sum();
            scores[[i / cols, i % cols, k]] = s;
        }
    }

    let mut cell_colour = Array3::from_elem((rows, cols, 3), 128u8);
    for k in 0..rank {
        let channel = scores.slice(s![.., .., k]);
        let lo = channel.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for r in 0..rows {
                for c in 0..cols {
                    let v = (scores[[r, c, k]] - lo) / (hi - lo) * 255.0;
                    cell_colour[[r, c, k]] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    let (h, w) = grid.page_dims;
    let (ch, cw) = grid.cell;
    let image = Array3::from_shape_fn((h, w, 3), |(r, c, k)| cell_colour[[r / ch, c / cw, k]]);
    PseudoRgb {
        image,
        explained_variance,
        components: vectors.into_iter().take(rank).collect(),
        scores,
    }
}

/// Binary blob-line image with its connected blobs, ordered top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobLineMap {
    pub mask: Array2<bool>,
    /// Ids are dense from 0 in order of increasing centroid row.
    pub blobs: Vec<Component>,
}

impl BlobLineMap {
    /// Label the connected blobs of `mask` (8-connected).
    pub fn from_mask(mask: Array2<bool>) -> Self {
        let mut blobs = label_components(&mask, Connectivity::Eight).components;
        blobs.sort_by(|a, b| {
            a.centroid
                .0
                .partial_cmp(&b.centroid.0)
                .unwrap()
                .then(a.centroid.1.partial_cmp(&b.centroid.1).unwrap())
        });
        for (i, b) in blobs.iter_mut().enumerate() {
            b.id = i;
        }
        Self { mask, blobs }
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

fn ink_density(page: &BinarizedPage, region: impl Fn(usize, usize) -> bool) -> f64 {
    let (mut ink, mut total) = (0usize, 0usize);
    for ((r, c), &fg) in page.fg_mask.indexed_iter() {
        if region(r, c) {
            total += 1;
            ink += fg as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        ink as f64 / total as f64
    }
}

/// Otsu on the first principal-component channel; the side with the higher
/// ink density becomes the blob lines.
pub fn threshold_blob_lines(prgb: &PseudoRgb, page: &BinarizedPage) -> Result<BlobLineMap> {
    let (h, w, _) = prgb.image.dim();
    if (h, w) != page.dims() {
        return Err(Error::SizeMismatch {
            expected: page.dims(),
            actual: (h, w),
            index: None,
        });
    }
    let channel = prgb.image.slice(s![.., .., 0]);
    let mut hist = [0u64; 256];
    for &v in channel.iter() {
        hist[v as usize] += 1;
    }
    let t = otsu_from_histogram(&hist).map_err(|_| Error::NoBlobLines)?;
    let high = ink_density(page, |r, c| channel[[r, c]] > t);
    let low = ink_density(page, |r, c| channel[[r, c]] <= t);
    let mask = if high >= low {
        channel.mapv(|v| v > t)
    } else {
        channel.mapv(|v| v <= t)
    };
    if !mask.iter().any(|&v| v) {
        return Err(Error::NoBlobLines);
    }
    Ok(BlobLineMap::from_mask(mask))
}

/// Drop blobs smaller than `min_blob_area` pixels and renumber the rest.
pub fn morphological_cleanup(map: &BlobLineMap, min_blob_area: usize) -> BlobLineMap {
    let mut mask = Array2::from_elem(map.mask.dim(), false);
    let mut blobs: Vec<Component> = map
        .blobs
        .iter()
        .filter(|b| b.area() >= min_blob_area)
        .cloned()
        .collect();
    for (i, b) in blobs.iter_mut().enumerate() {
        b.id = i;
        for &p in &b.pixels {
            mask[p] = true;
        }
    }
    BlobLineMap { mask, blobs }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub pseudo_rgb: PseudoRgb,
    /// Thresholded map before cleanup.
    pub raw: BlobLineMap,
    pub blobs: BlobLineMap,
}

/// The full detection chain for one page.
pub fn detect_page(
    checkpoint: &Checkpoint,
    page: &BinarizedPage,
    geom: &PatchGeometry,
    cfg: &DetectConfig,
) -> Result<Detection> {
    let grid = embed_page_batched(checkpoint, page, geom, cfg.batch_size)?;
    let pseudo_rgb = pca_pseudo_rgb(&grid);
    let raw = threshold_blob_lines(&pseudo_rgb, page)?;
    let blobs = morphological_cleanup(&raw, cfg.min_blob_area(geom));
    if blobs.is_empty() {
        return Err(Error::NoBlobLines);
    }
    Ok(Detection { pseudo_rgb, raw, blobs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siamese::{ModelSpec, SiameseNet, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn untrained(patch: (usize, usize)) -> Checkpoint {
        Checkpoint {
            net: SiameseNet::new(&ModelSpec::with_filters([4, 4, 8, 8, 8], 8), patch).unwrap(),
            train_config: TrainConfig::default(),
            history: Vec::new(),
            best_epoch: 0,
            manifest_digest: String::new(),
        }
    }

    fn grid_from(vectors: Vec<Vec<f32>>, rows: usize, cols: usize) -> EmbeddingGrid {
        let dim = vectors[0].len();
        let flat: Vec<f32> = vectors.into_iter().flatten().collect();
        EmbeddingGrid {
            vectors: Array3::from_shape_vec((rows, cols, dim), flat).unwrap(),
            cell: (2, 2),
            page_dims: (rows * 2, cols * 2),
        }
    }

    #[test]
    fn grid_dimensions_follow_ceiling_rule() {
        let ckpt = untrained((16, 16));
        let geom = PatchGeometry::new(16, 16, 10, 10).unwrap();
        let page = BinarizedPage::from_mask(Array2::from_elem((105, 80), false), "p");
        let grid = embed_page(&ckpt, &page, &geom).unwrap();
        assert_eq!(grid.vectors.dim(), (11, 8, 512));
        assert!(grid.vectors.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn white_page_embeds_to_identical_vectors() {
        let ckpt = untrained((16, 16));
        let geom = PatchGeometry::new(16, 16, 10, 10).unwrap();
        let page = BinarizedPage::from_mask(Array2::from_elem((47, 33), false), "w");
        let grid = embed_page_batched(&ckpt, &page, &geom, 7).unwrap();
        let first = grid.vectors.slice(s![0, 0, ..]).to_owned();
        for r in 0..grid.n_rows() {
            for c in 0..grid.n_cols() {
                assert_eq!(grid.vectors.slice(s![r, c, ..]), first);
            }
        }
    }

    #[test]
    fn checkpoint_geometry_mismatch_is_an_error() {
        let ckpt = untrained((16, 16));
        let geom = PatchGeometry::new(20, 20, 10, 10).unwrap();
        let page = BinarizedPage::from_mask(Array2::from_elem((40, 40), false), "p");
        assert!(matches!(embed_page(&ckpt, &page, &geom), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn translation_by_one_cell_shifts_grid_rows() {
        let ckpt = untrained((16, 16));
        let geom = PatchGeometry::new(16, 16, 10, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = Array2::from_shape_fn((80, 60), |(r, _)| (20..60).contains(&r) && rng.random_bool(0.3));
        let mut shifted = Array2::from_elem((80, 60), false);
        shifted.slice_mut(s![10..80, ..]).assign(&mask.slice(s![0..70, ..]));
        let a = embed_page(&ckpt, &BinarizedPage::from_mask(mask, "a"), &geom).unwrap();
        let b = embed_page(&ckpt, &BinarizedPage::from_mask(shifted, "b"), &geom).unwrap();
        for r in 1..6 {
            for c in 1..5 {
                assert_eq!(a.vectors.slice(s![r, c, ..]), b.vectors.slice(s![r + 1, c, ..]));
            }
        }
    }

    #[test]
    fn identical_vectors_are_rank_zero() {
        let grid = grid_from(vec![vec![0.5; 8]; 12], 3, 4);
        let p = pca_pseudo_rgb(&grid);
        assert_eq!(p.explained_variance, [0.0; 3]);
        assert!(p.image.iter().all(|&v| v == 128));
    }

    #[test]
    fn exact_rank_three_data_is_fully_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis: Vec<Vec<f32>> = (0..3).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let offset: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vectors: Vec<Vec<f32>> = (0..40)
            .map(|_| {
                let coef: Vec<f32> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                (0..64)
                    .map(|j| offset[j] + (0..3).map(|k| coef[k] * basis[k][j]).sum::<f32>())
                    .collect()
            })
            .collect();
        let p = pca_pseudo_rgb(&grid_from(vectors, 5, 8));
        let total: f64 = p.explained_variance.iter().sum();
        assert!((total - 1.0).abs() < 1e-5, "{:?}", p.explained_variance);
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!(p.explained_variance[1] >= p.explained_variance[2]);
    }

    #[test]
    fn polarity_picks_the_inked_region() {
        // Channel 0 is two constant regions; ink lives under the dark one.
        let mut image = Array3::from_elem((20, 20, 3), 0u8);
        image.slice_mut(s![10.., .., 0]).fill(200);
        let mask = Array2::from_shape_fn((20, 20), |(r, c)| r < 10 && c % 2 == 0);
        let page = BinarizedPage::from_mask(mask, "p");
        let prgb = PseudoRgb {
            image,
            explained_variance: [1.0, 0.0, 0.0],
            components: Vec::new(),
            scores: Array3::zeros((2, 2, 3)),
        };
        let map = threshold_blob_lines(&prgb, &page).unwrap();
        assert_eq!(map.mask, Array2::from_shape_fn((20, 20), |(r, _)| r < 10));
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn uniform_pseudo_rgb_has_no_blob_lines() {
        let page = BinarizedPage::from_mask(Array2::from_elem((10, 10), false), "w");
        let prgb = PseudoRgb {
            image: Array3::from_elem((10, 10, 3), 128),
            explained_variance: [0.0; 3],
            components: Vec::new(),
            scores: Array3::zeros((1, 1, 3)),
        };
        assert!(matches!(threshold_blob_lines(&prgb, &page), Err(Error::NoBlobLines)));
    }

    #[test]
    fn cleanup_drops_small_blobs_only() {
        let mut mask = Array2::from_elem((30, 30), false);
        mask.slice_mut(s![2..4, 2..5]).fill(true);
        mask.slice_mut(s![10..20, 0..30]).fill(true);
        let map = BlobLineMap::from_mask(mask.clone());
        assert_eq!(morphological_cleanup(&map, 0), map);
        let cleaned = morphological_cleanup(&map, 10);
        assert_eq!(cleaned.len(), 1);
        assert_eq!(cleaned.blobs[0].id, 0);
        assert_eq!(cleaned.blobs[0].area(), 300);
    }

    #[test]
    fn blobs_are_ordered_by_centroid_row() {
        let mut mask = Array2::from_elem((40, 40), false);
        mask.slice_mut(s![30..34, 0..10]).fill(true);
        mask.slice_mut(s![2..6, 20..40]).fill(true);
        mask.slice_mut(s![15..18, 5..25]).fill(true);
        let map = BlobLineMap::from_mask(mask);
        let rows: Vec<f64> = map.blobs.iter().map(|b| b.centroid.0).collect();
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
    }
}
