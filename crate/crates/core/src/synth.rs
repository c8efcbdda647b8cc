//! Synthetic handwriting-like pages with exact line ground truth.
//!
//! Each line is a run of "words"; a word is a run of filled glyph blobs that
//! may touch each other. Glyphs get random ascenders and descenders, small
//! diacritic dots float above or below the body, and every ink pixel is
//! tagged with the id of the line that drew it.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPageSpec {
    pub n_lines: usize,
    /// Height of a glyph body in pixels.
    pub line_height: usize,
    /// Blank rows between the bodies of consecutive lines.
    pub interline_gap: usize,
    /// Each line is tilted by an angle drawn from [-skew_deg, skew_deg].
    pub skew_deg: f64,
    /// Fraction of each line's span covered by words.
    pub word_density: f64,
    /// Relative jitter applied to glyph heights and line gaps.
    pub jitter: f64,
    /// Probability that a glyph carries a diacritic mark.
    pub diacritic_rate: f64,
    pub page_height: usize,
    pub page_width: usize,
    pub margin: usize,
    pub seed: u64,
}

impl Default for SyntheticPageSpec {
    fn default() -> Self {
        Self {
            n_lines: 10,
            line_height: 12,
            interline_gap: 50,
            skew_deg: 1.0,
            word_density: 0.8,
            jitter: 0.15,
            diacritic_rate: 0.1,
            page_height: 0,
            page_width: 480,
            margin: 24,
            seed: 0,
        }
    }
}

impl SyntheticPageSpec {
    pub fn pitch(&self) -> usize {
        self.line_height + self.interline_gap
    }

    /// Page height actually used: the configured one, or just enough for the
    /// lines plus margins when zero.
    pub fn resolved_height(&self) -> usize {
        if self.page_height > 0 {
            self.page_height
        } else {
            2 * self.margin + self.n_lines * self.pitch()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_lines == 0 || self.n_lines > u16::MAX as usize {
            return bad("n_lines must be in 1..=65535");
        }
        if self.line_height < 3 {
            return bad("line_height must be at least 3");
        }
        if self.page_width <= 2 * self.margin + 4 * self.line_height {
            return bad("page_width too small for margins");
        }
        if !(0.0..=1.0).contains(&self.word_density) || !(0.0..1.0).contains(&self.jitter) {
            return bad("word_density must be in [0,1] and jitter in [0,1)");
        }
        let needed = 2 * self.margin + self.n_lines * self.pitch();
        if self.resolved_height() < needed {
            return bad("page_height cannot hold the requested lines");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPage {
    pub gray: Array2<u8>,
    /// 0 = background, k = ink of line k (1-based).
    pub gt_labels: Array2<u16>,
    pub n_lines: usize,
}

struct Canvas {
    labels: Array2<u16>,
}

impl Canvas {
    fn paint(&mut self, r: isize, c: isize, line: u16) {
        let (h, w) = self.labels.dim();
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            self.labels[[r as usize, c as usize]] = line;
        }
    }

    /// Filled ellipse inside the box [top, top+height) x [left, left+width).
    fn ellipse(&mut self, top: f64, left: f64, height: f64, width: f64, line: u16) {
        let (cy, cx) = (top + height / 2.0, left + width / 2.0);
        let (ry, rx) = (height / 2.0, width / 2.0);
        for r in top.floor() as isize..=(top + height).ceil() as isize {
            for c in left.floor() as isize..=(left + width).ceil() as isize {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    self.paint(r, c, line);
                }
            }
        }
    }

    fn rect(&mut self, top: f64, left: f64, height: f64, width: f64, line: u16) {
        for r in top.round() as isize..(top + height).round() as isize {
            for c in left.round() as isize..(left + width).round() as isize {
                self.paint(r, c, line);
            }
        }
    }
}

/// Render one page. Deterministic in `spec` (including `spec.seed`).
pub fn generate_page(spec: &SyntheticPageSpec) -> Result<SyntheticPage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.resolved_height(), spec.page_width);
    let mut canvas = Canvas {
        labels: Array2::zeros((h, w)),
    };
    let lh = spec.line_height as f64;
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + spec.jitter * rng.random_range(-1.0..=1.0);

    let first_top = spec.margin as f64 + spec.interline_gap as f64 / 2.0;
    for line in 0..spec.n_lines {
        let id = (line + 1) as u16;
        let body_top = first_top + (line * spec.pitch()) as f64 + spec.interline_gap as f64 * 0.25 * spec.jitter * rng.random_range(-1.0..=1.0);
        let slope = (spec.skew_deg * rng.random_range(-1.0..=1.0)).to_radians().tan();
        let x_start = spec.margin as f64 + rng.random_range(0.0..2.0 * lh);
        let x_end = (w - spec.margin) as f64 - rng.random_range(0.0..3.0 * lh);
        let x_mid = (x_start + x_end) / 2.0;

        let mut x = x_start;
        while x < x_end - lh {
            // Word
            let glyphs = rng.random_range(2..=7);
            for _ in 0..glyphs {
                let gw = rng.random_range(0.35 * lh..0.75 * lh).max(2.0);
                if x + gw > x_end {
                    break;
                }
                let mut gh = lh * rng.random_range(0.7..=1.0) * jitter(&mut rng);
                let baseline = body_top + lh + (x - x_mid) * slope;
                let mut top = baseline - gh;
                match rng.random_range(0..10) {
                    0 | 1 => {
                        top -= 0.5 * lh;
                        gh += 0.5 * lh;
                    }
                    2 => gh += 0.4 * lh,
                    _ => {}
                }
                if rng.random_bool(0.5) {
                    canvas.ellipse(top, x, gh, gw, id);
                } else {
                    let stroke = (0.3 * gw).max(2.0);
                    canvas.rect(top, x, gh, stroke, id);
                    canvas.rect(baseline - stroke, x, stroke, gw, id);
                    canvas.rect(top, x + gw - stroke, gh, stroke, id);
                }
                if rng.random_bool(spec.diacritic_rate.clamp(0.0, 1.0)) {
                    let size = rng.random_range(2.0..=3.5);
                    let offset = rng.random_range(0.25 * lh..0.5 * lh);
                    let dy = if rng.random_bool(0.6) { top - offset - size } else { baseline + offset };
                    canvas.rect(dy, x + gw / 2.0 - size / 2.0, size, size, id);
                }
                x += gw + rng.random_range(0.0..=2.0_f64).floor();
            }
            // Gap after the word; density controls how much of the line stays blank.
            let gap_scale = (1.0 - spec.word_density).max(0.0) * 4.0 + 0.5;
            x += lh * gap_scale * rng.random_range(0.6..=1.4);
        }
    }

    let labels = canvas.labels;
    let gray = Array2::from_shape_fn((h, w), |(r, c)| {
        let noise: i32 = rng.random_range(-12..=12);
        let base = if labels[[r, c]] > 0 { 30 } else { 232 };
        (base + noise).clamp(0, 255) as u8
    });
    Ok(SyntheticPage {
        gray,
        gt_labels: labels,
        n_lines: spec.n_lines,
    })
}

/// A corpus of `n_pages` pages; page `i` uses seed `spec.seed + i`.
pub fn generate_corpus(spec: &SyntheticPageSpec, n_pages: usize) -> Result<Vec<SyntheticPage>> {
    (0..n_pages)
        .map(|i| {
            generate_page(&SyntheticPageSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            })
        })
        .collect()
}
