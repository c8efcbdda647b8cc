//! Self-labelled patch pairs.
//!
//! Two random crops are labelled by comparing their ink counts: pairs whose
//! count ratio is high are "similar", pairs whose ratio is low are
//! "different", and a third strategy pairs an almost blank crop with an inked
//! one. Each strategy rejection-samples crops until its condition holds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::io::{atomic_write, gray_png_bytes, read_gray};
use crate::imaging::{BinarizedPage, IntegralImage, PatchGeometry};

/// Ratio of the smaller to the larger ink count. Two empty patches score 1.
pub fn similarity_score(a1: u64, a2: u64) -> f64 {
    let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
    if hi == 0 {
        1.0
    } else {
        lo as f64 / hi as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SimilarByCount,
    DifferentByCount,
    DifferentByBackground,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::SimilarByCount,
        Strategy::DifferentByCount,
        Strategy::DifferentByBackground,
    ];

    pub fn label(self) -> PairLabel {
        match self {
            Strategy::SimilarByCount => PairLabel::Similar,
            _ => PairLabel::Different,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::SimilarByCount => "similar_by_count",
            Strategy::DifferentByCount => "different_by_count",
            Strategy::DifferentByBackground => "different_by_background",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Similar,
    Different,
}

impl PairLabel {
    /// Training target: 1 for similar, 0 for different.
    pub fn target(self) -> f32 {
        match self {
            PairLabel::Similar => 1.0,
            PairLabel::Different => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Array2<u8>,
    /// Top-left corner in the source page.
    pub origin: (usize, usize),
    pub fg_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub left: Patch,
    pub right: Patch,
    pub score: f64,
    pub label: PairLabel,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub t_sim: f64,
    pub t_diff: f64,
    pub bg_fraction: f64,
    pub n_pairs: usize,
    /// Proportions of (similar_by_count, different_by_count, different_by_background).
    pub strategy_mix: [f64; 3],
    pub rng_seed: u64,
    /// Rejection budget per pair.
    pub max_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t_sim: 0.7,
            t_diff: 0.4,
            bg_fraction: 0.01,
            n_pairs: 30_000,
            strategy_mix: [0.5, 0.25, 0.25],
            rng_seed: 0,
            max_attempts: 10_000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0 <= self.t_diff && self.t_diff < self.t_sim && self.t_sim <= 1.0) {
            return bad("sampler thresholds must satisfy 0 <= t_diff < t_sim <= 1");
        }
        if !(0.0..0.5).contains(&self.bg_fraction) {
            return bad("bg_fraction must lie in [0, 0.5)");
        }
        if self.strategy_mix.iter().any(|&m| !(m >= 0.0)) {
            return bad("strategy_mix entries must be non-negative");
        }
        let total: f64 = self.strategy_mix.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad("strategy_mix must sum to 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

/// Crops patches from one page with O(1) ink counting.
pub struct PatchSampler<'a> {
    page: &'a BinarizedPage,
    counts: IntegralImage,
    geom: PatchGeometry,
}

impl<'a> PatchSampler<'a> {
    pub fn new(page: &'a BinarizedPage, geom: PatchGeometry) -> Result<Self> {
        let (h, w) = page.dims();
        if h < geom.h_p || w < geom.w_p {
            return Err(Error::PageTooSmall {
                page_h: h,
                page_w: w,
                patch_h: geom.h_p,
                patch_w: geom.w_p,
            });
        }
        Ok(Self {
            page,
            counts: IntegralImage::from_mask(&page.fg_mask),
            geom,
        })
    }

    fn count_at(&self, (r, c): (usize, usize)) -> u64 {
        self.counts.sum(r, c, r + self.geom.h_p, c + self.geom.w_p).round() as u64
    }

    fn random_origin<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let (h, w) = self.page.dims();
        (
            rng.random_range(0..=h - self.geom.h_p),
            rng.random_range(0..=w - self.geom.w_p),
        )
    }

    fn crop(&self, origin: (usize, usize), fg_count: u64) -> Patch {
        let (r, c) = origin;
        Patch {
            pixels: self
                .page
                .gray
                .slice(s![r..r + self.geom.h_p, c..c + self.geom.w_p])
                .to_owned(),
            origin,
            fg_count,
        }
    }

    pub fn sample<R: Rng>(&self, strategy: Strategy, cfg: &SamplerConfig, rng: &mut R) -> Result<PatchPair> {
        let area = (self.geom.h_p * self.geom.w_p) as f64;
        let is_background = |count: u64| count as f64 / area <= cfg.bg_fraction;
        for _ in 0..cfg.max_attempts {
            let (oa, ob) = (self.random_origin(rng), self.random_origin(rng));
            let (a, b) = (self.count_at(oa), self.count_at(ob));
            let score = similarity_score(a, b);
            let accepted = match strategy {
                Strategy::SimilarByCount => score >= cfg.t_sim,
                Strategy::DifferentByCount => score <= cfg.t_diff,
                Strategy::DifferentByBackground => is_background(a) != is_background(b),
            };
            if accepted {
                return Ok(PatchPair {
                    left: self.crop(oa, a),
                    right: self.crop(ob, b),
                    score,
                    label: strategy.label(),
                    strategy,
                });
            }
        }
        Err(Error::StrategyUnsatisfiable {
            page: self.page.source_id.clone(),
            strategy: strategy.to_string(),
            attempts: cfg.max_attempts,
        })
    }
}

pub fn sample_pair<R: Rng>(
    page: &BinarizedPage,
    geom: &PatchGeometry,
    strategy: Strategy,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchPair> {
    PatchSampler::new(page, *geom)?.sample(strategy, cfg, rng)
}

/// One line of the pair manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub index: usize,
    pub left_file: String,
    pub right_file: String,
    pub score: f64,
    pub label: PairLabel,
    pub strategy: Strategy,
    pub left_origin: (usize, usize),
    pub right_origin: (usize, usize),
    pub left_fg: u64,
    pub right_fg: u64,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<PatchPair>,
    pub records: Vec<PairRecord>,
    pub patch_size: (usize, usize),
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn strategy_counts(&self) -> BTreeMap<Strategy, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.strategy).or_insert(0) += 1;
        }
        counts
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let similar = self.pairs.iter().filter(|p| p.label == PairLabel::Similar).count();
        (similar, self.pairs.len() - similar)
    }

    /// JSON-lines manifest, one record per pair.
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the manifest text; ties checkpoints to their data.
    pub fn digest(&self) -> String {
        hex_digest(self.manifest_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Split `n` by `mix` with largest-remainder rounding (ties to the lower index).
pub fn strategy_quotas(n: usize, mix: &[f64; 3]) -> [usize; 3] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|m| n as f64 * m / total).collect();
    let mut quotas = [0usize; 3];
    for (q, e) in quotas.iter_mut().zip(&exact) {
        *q = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - quotas.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if mix[i] > 0.0 {
            quotas[i] += 1;
            remaining -= 1;
        }
    }
    quotas
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Sample `cfg.n_pairs` pairs across `pages`. Pair `i` draws from its own
/// sub-stream of `cfg.rng_seed`, so the result does not depend on scheduling.
/// A strategy that cannot be satisfied on any page has its share moved to the
/// remaining strategies.
pub fn build_pair_dataset(pages: &[BinarizedPage], geom: &PatchGeometry, cfg: &SamplerConfig) -> Result<PairDataset> {
    cfg.validate()?;
    if pages.is_empty() {
        return Err(Error::InvalidConfig("pair dataset needs at least one page".into()));
    }
    let samplers = pages
        .iter()
        .map(|p| PatchSampler::new(p, *geom))
        .collect::<Result<Vec<_>>>()?;

    let mut mix = cfg.strategy_mix;
    let mut dead = vec![[false; 3]; pages.len()];
    'restart: loop {
        if mix.iter().all(|&m| m == 0.0) {
            return Err(Error::StrategyUnsatisfiable {
                page: "<all pages>".into(),
                strategy: "every strategy".into(),
                attempts: cfg.max_attempts,
            });
        }
        let quotas = strategy_quotas(cfg.n_pairs, &mix);
        let mut schedule: Vec<Strategy> = Strategy::ALL
            .iter()
            .zip(quotas)
            .flat_map(|(&s, q)| std::iter::repeat_n(s, q))
            .collect();
        schedule.shuffle(&mut pair_rng(cfg.rng_seed, usize::MAX - 1));

        let mut pairs = Vec::with_capacity(cfg.n_pairs);
        let mut records = Vec::with_capacity(cfg.n_pairs);
        for (index, &strategy) in schedule.iter().enumerate() {
            let si = strategy as usize;
            let mut rng = pair_rng(cfg.rng_seed, index);
            let first = rng.random_range(0..pages.len());
            let mut found = None;
            for offset in 0..pages.len() {
                let pi = (first + offset) % pages.len();
                if dead[pi][si] {
                    continue;
                }
                match samplers[pi].sample(strategy, cfg, &mut rng) {
                    Ok(pair) => {
                        found = Some((pi, pair));
                        break;
                    }
                    Err(Error::StrategyUnsatisfiable { .. }) => dead[pi][si] = true,
                    Err(e) => return Err(e),
                }
            }
            let Some((pi, pair)) = found else {
                log::warn!("strategy {strategy} unsatisfiable on every page; rebalancing");
                mix[si] = 0.0;
                let total: f64 = mix.iter().sum();
                if total > 0.0 {
                    mix.iter_mut().for_each(|m| *m /= total);
                }
                continue 'restart;
            };
            records.push(PairRecord {
                index,
                left_file: format!("{index:06}_a.png"),
                right_file: format!("{index:06}_b.png"),
                score: pair.score,
                label: pair.label,
                strategy,
                left_origin: pair.left.origin,
                right_origin: pair.right.origin,
                left_fg: pair.left.fg_count,
                right_fg: pair.right.fg_count,
                source_id: pages[pi].source_id.clone(),
            });
            pairs.push(pair);
        }
        return Ok(PairDataset {
            pairs,
            records,
            patch_size: geom.patch_size(),
        });
    }
}

const MANIFEST: &str = "manifest.jsonl";
const PATCH_DIR: &str = "patches";

/// Persist as `dir/manifest.jsonl` plus `dir/patches/<index>_{a,b}.png`.
pub fn write_pair_dataset(dir: &Path, dataset: &PairDataset) -> Result<()> {
    let patch_dir = dir.join(PATCH_DIR);
    for (pair, rec) in dataset.pairs.iter().zip(&dataset.records) {
        for (patch, name) in [(&pair.left, &rec.left_file), (&pair.right, &rec.right_file)] {
            let path = patch_dir.join(name);
            atomic_write(&path, &gray_png_bytes(&patch.pixels, &path)?)?;
        }
    }
    atomic_write(&dir.join(MANIFEST), dataset.manifest_text().as_bytes())
}

pub fn read_pair_dataset(dir: &Path) -> Result<PairDataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    let mut patch_size = None;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PairRecord =
            serde_json::from_str(line).map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", n + 1)))?;
        let load = |name: &str, origin, fg_count| -> Result<Patch> {
            Ok(Patch {
                pixels: read_gray(&dir.join(PATCH_DIR).join(name))?,
                origin,
                fg_count,
            })
        };
        let left = load(&rec.left_file, rec.left_origin, rec.left_fg)?;
        let right = load(&rec.right_file, rec.right_origin, rec.right_fg)?;
        for p in [&left, &right] {
            let dim = p.pixels.dim();
            match patch_size {
                None => patch_size = Some(dim),
                Some(expected) if expected != dim => {
                    return Err(Error::SizeMismatch {
                        expected,
                        actual: dim,
                        index: Some(rec.index),
                    })
                }
                _ => {}
            }
        }
        pairs.push(PatchPair {
            left,
            right,
            score: rec.score,
            label: rec.label,
            strategy: rec.strategy,
        });
        records.push(rec);
    }
    Ok(PairDataset {
        pairs,
        records,
        patch_size: patch_size.unwrap_or((0, 0)),
    })
}
