use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BinarizedPage, IntegralImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeMethod {
    Otsu,
    Sauvola,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizeConfig {
    pub method: BinarizeMethod,
    /// Side of the square Sauvola window, in pixels (odd).
    pub sauvola_window: usize,
    pub sauvola_k: f64,
    /// Dynamic range of the standard deviation.
    pub sauvola_r: f64,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        Self {
            method: BinarizeMethod::Otsu,
            sauvola_window: 31,
            sauvola_k: 0.2,
            sauvola_r: 128.0,
        }
    }
}

impl BinarizeConfig {
    pub fn otsu() -> Self {
        Self::default()
    }

    pub fn sauvola(window: usize) -> Self {
        Self {
            method: BinarizeMethod::Sauvola,
            sauvola_window: window,
            ..Self::default()
        }
    }
}

/// Binarize a grayscale page. Ink is dark: pixels at or below the threshold
/// become foreground.
pub fn binarize(gray: Array2<u8>, cfg: &BinarizeConfig, source_id: &str) -> Result<BinarizedPage> {
    if gray.is_empty() {
        return Err(Error::DegenerateHistogram);
    }
    let fg_mask = match cfg.method {
        BinarizeMethod::Otsu => {
            let t = otsu_threshold(&gray)?;
            gray.mapv(|v| v <= t)
        }
        BinarizeMethod::Sauvola => sauvola_mask(&gray, cfg)?,
    };
    Ok(BinarizedPage {
        gray,
        fg_mask,
        source_id: source_id.to_string(),
    })
}

/// Otsu threshold: the intensity `t` maximizing the between-class variance of
/// the split `{<= t}` / `{> t}`. The lowest maximizer wins ties.
pub fn otsu_threshold(gray: &Array2<u8>) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &v in gray.iter() {
        hist[v as usize] += 1;
    }
    otsu_from_histogram(&hist)
}

pub(crate) fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if total == 0 || occupied < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let total_f = total as f64;

    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Ok(best.1)
}

fn sauvola_mask(gray: &Array2<u8>, cfg: &BinarizeConfig) -> Result<Array2<bool>> {
    if cfg.sauvola_window == 0 {
        return Err(Error::InvalidConfig("sauvola_window must be positive".into()));
    }
    let (h, w) = gray.dim();
    let half = cfg.sauvola_window / 2;
    let sums = IntegralImage::new(h, w, |r, c| gray[[r, c]] as f64);
    let squares = IntegralImage::new(h, w, |r, c| {
        let v = gray[[r, c]] as f64;
        v * v
    });
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let r0 = r.saturating_sub(half);
        let c0 = c.saturating_sub(half);
        let r1 = (r + half + 1).min(h);
        let c1 = (c + half + 1).min(w);
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        let mean = sums.sum(r0, c0, r1, c1) / n;
        let var = (squares.sum(r0, c0, r1, c1) / n - mean * mean).max(0.0);
        let t = mean * (1.0 + cfg.sauvola_k * (var.sqrt() / cfg.sauvola_r - 1.0));
        gray[[r, c]] as f64 <= t
    }))
}
