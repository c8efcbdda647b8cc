//! Region-based line segmentation metrics.
//!
//! Two protocols are implemented. The detection-rate protocol counts
//! one-to-one matches whose match score reaches a threshold. The
//! intersection-over-union protocol matches lines by IU and reports
//! pixel-level and line-level IU. In both, only foreground pixels of the
//! binarized page are counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    GroundTruth,
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: u32,
    /// Counted points, as sorted flat pixel indices.
    pub points: Vec<usize>,
}

impl Region {
    pub fn new(id: u32, points: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = points.into_iter().collect();
        Self {
            id,
            points: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub kind: RegionKind,
    pub regions: Vec<Region>,
}

impl RegionSet {
    pub fn new(kind: RegionKind, regions: Vec<Region>) -> Self {
        Self { kind, regions }
    }

    /// One region per non-zero label, holding the foreground pixels that
    /// carry it. Labels with no foreground pixel produce no region.
    pub fn from_labels(labels: &Array2<u16>, fg_mask: &Array2<bool>, kind: RegionKind) -> Result<Self> {
        if labels.dim() != fg_mask.dim() {
            return Err(Error::SizeMismatch {
                expected: fg_mask.dim(),
                actual: labels.dim(),
                index: None,
            });
        }
        let mut by_label: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, (&l, &fg)) in labels.iter().zip(fg_mask.iter()).enumerate() {
            if l > 0 && fg {
                by_label.entry(l).or_default().push(i);
            }
        }
        Ok(Self {
            kind,
            regions: by_label
                .into_iter()
                .map(|(id, points)| Region { id: id as u32, points })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// |G ∩ R| / |G ∪ R|; two empty regions score 0.
pub fn match_score(g: &Region, r: &Region) -> f64 {
    let inter = intersection(&g.points, &r.points);
    let union = g.len() + r.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection counts for every (gt, pred) pair, row per gt region.
fn intersections(gt: &RegionSet, pred: &RegionSet) -> Vec<Vec<usize>> {
    let mut owners: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, r) in pred.regions.iter().enumerate() {
        for &p in &r.points {
            owners.entry(p).or_default().push(j);
        }
    }
    gt.regions
        .iter()
        .map(|g| {
            let mut row = vec![0; pred.len()];
            for p in &g.points {
                for &j in owners.get(p).into_iter().flatten() {
                    row[j] += 1;
                }
            }
            row
        })
        .collect()
}

/// Greedy one-to-one matching by descending score among `candidates`
/// (gt index, pred index, score). Ties go to the lower (gt id, pred id).
fn greedy_match(gt: &RegionSet, pred: &RegionSet, mut candidates: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    candidates.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(gt.regions[a.0].id.cmp(&gt.regions[b.0].id))
            .then(pred.regions[a.1].id.cmp(&pred.regions[b.1].id))
    });
    let mut used_g = vec![false; gt.len()];
    let mut used_p = vec![false; pred.len()];
    let mut matches = Vec::new();
    for (g, p, s) in candidates {
        if !used_g[g] && !used_p[p] {
            used_g[g] = true;
            used_p[p] = true;
            matches.push((g, p, s));
        }
    }
    matches
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// (DR, RA, FM) from the match count and the two region counts.
pub fn detection_scores(m: usize, n1: usize, n2: usize) -> (f64, f64, f64) {
    let dr = ratio(m as f64, n1 as f64);
    let ra = ratio(m as f64, n2 as f64);
    let fm = ratio(2.0 * dr * ra, dr + ra);
    (dr, ra, fm)
}

pub fn pixel_iu(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(tp as f64, (tp + fp + fn_) as f64)
}

pub fn line_iu(cl: usize, ml: usize, el: usize) -> f64 {
    ratio(cl as f64, (cl + ml + el) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Icdar2013Report {
    /// Match scores, row per gt region, column per predicted region.
    pub match_matrix: Vec<Vec<f64>>,
    /// Matched (gt id, pred id) pairs.
    pub matches: Vec<(u32, u32)>,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub dr: f64,
    pub ra: f64,
    pub fm: f64,
    pub threshold: f64,
    /// Set when either side has no regions.
    pub degenerate: bool,
}

pub fn evaluate_icdar2013(gt: &RegionSet, pred: &RegionSet, threshold: f64) -> Icdar2013Report {
    let inter = intersections(gt, pred);
    let match_matrix: Vec<Vec<f64>> = gt
        .regions
        .iter()
        .zip(&inter)
        .map(|(g, row)| {
            pred.regions
                .iter()
                .zip(row)
                .map(|(r, &i)| ratio(i as f64, (g.len() + r.len() - i) as f64))
                .collect()
        })
        .collect();
    let mut candidates = Vec::new();
    for (g, row) in match_matrix.iter().enumerate() {
        for (p, &s) in row.iter().enumerate() {
            if s >= threshold && s > 0.0 {
                candidates.push((g, p, s));
            }
        }
    }
    let matched = greedy_match(gt, pred, candidates);
    let (n1, n2, m) = (gt.len(), pred.len(), matched.len());
    let (dr, ra, fm) = detection_scores(m, n1, n2);
    Icdar2013Report {
        match_matrix,
        matches: matched.iter().map(|&(g, p, _)| (gt.regions[g].id, pred.regions[p].id)).collect(),
        m,
        n1,
        n2,
        dr,
        ra,
        fm,
        threshold,
        degenerate: n1 == 0 || n2 == 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIu {
    pub gt: u32,
    pub pred: u32,
    pub iu: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Icdar2017Report {
    pub pair_ius: Vec<PairIu>,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub pixel_iu: f64,
    pub line_iu: f64,
    /// Correct, missed and extra lines.
    pub cl: usize,
    pub ml: usize,
    pub el: usize,
    pub threshold: f64,
    pub degenerate: bool,
}

/// Lines are matched one-to-one by descending IU. A matched pair is a correct
/// line when both its line recall and line precision reach `threshold`; it
/// is a missed line when recall falls short and an extra line when precision
/// falls short (possibly both). Unmatched gt lines are missed and their
/// pixels false negatives; unmatched predictions are extra and their pixels
/// false positives.
pub fn evaluate_icdar2017(gt: &RegionSet, pred: &RegionSet, threshold: f64) -> Icdar2017Report {
    let inter = intersections(gt, pred);
    let mut candidates = Vec::new();
    for (g, row) in inter.iter().enumerate() {
        for (p, &i) in row.iter().enumerate() {
            if i > 0 {
                let union = gt.regions[g].len() + pred.regions[p].len() - i;
                candidates.push((g, p, i as f64 / union as f64));
            }
        }
    }
    let matched = greedy_match(gt, pred, candidates);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let (mut cl, mut ml, mut el) = (0, 0, 0);
    let mut used_g = vec![false; gt.len()];
    let mut used_p = vec![false; pred.len()];
    let mut pair_ius = Vec::with_capacity(matched.len());
    for &(g, p, iu) in &matched {
        used_g[g] = true;
        used_p[p] = true;
        let i = inter[g][p] as u64;
        let (gl, pl) = (gt.regions[g].len() as u64, pred.regions[p].len() as u64);
        let pair = PairIu {
            gt: gt.regions[g].id,
            pred: pred.regions[p].id,
            iu,
            tp: i,
            fp: pl - i,
            fn_: gl - i,
        };
        tp += pair.tp;
        fp += pair.fp;
        fn_ += pair.fn_;
        let recall = ratio(i as f64, gl as f64);
        let precision = ratio(i as f64, pl as f64);
        if recall >= threshold && precision >= threshold {
            cl += 1;
        }
        if recall < threshold {
            ml += 1;
        }
        if precision < threshold {
            el += 1;
        }
        pair_ius.push(pair);
    }
    for (g, r) in gt.regions.iter().enumerate() {
        if !used_g[g] {
            ml += 1;
            fn_ += r.len() as u64;
        }
    }
    for (p, r) in pred.regions.iter().enumerate() {
        if !used_p[p] {
            el += 1;
            fp += r.len() as u64;
        }
    }
    Icdar2017Report {
        pair_ius,
        tp,
        fp,
        fn_,
        pixel_iu: pixel_iu(tp, fp, fn_),
        line_iu: line_iu(cl, ml, el),
        cl,
        ml,
        el,
        threshold,
        degenerate: gt.is_empty() || pred.is_empty(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Match-score threshold of the detection-rate protocol.
    pub icdar2013_threshold: f64,
    /// Line recall/precision threshold of the IU protocol.
    pub icdar2017_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            icdar2013_threshold: 0.90,
            icdar2017_threshold: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageReport {
    pub page: String,
    pub icdar2013: Icdar2013Report,
    pub icdar2017: Icdar2017Report,
}

pub fn evaluate_page(page: &str, gt: &Array2<u16>, pred: &Array2<u16>, fg_mask: &Array2<bool>, cfg: &EvalConfig) -> Result<PageReport> {
    let g = RegionSet::from_labels(gt, fg_mask, RegionKind::GroundTruth)?;
    let p = RegionSet::from_labels(pred, fg_mask, RegionKind::Prediction)?;
    Ok(PageReport {
        page: page.to_string(),
        icdar2013: evaluate_icdar2013(&g, &p, cfg.icdar2013_threshold),
        icdar2017: evaluate_icdar2017(&g, &p, cfg.icdar2017_threshold),
    })
}

/// Micro-averaged totals over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub pages: usize,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub dr: f64,
    pub ra: f64,
    pub fm: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub pixel_iu: f64,
    pub cl: usize,
    pub ml: usize,
    pub el: usize,
    pub line_iu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub pages: Vec<PageReport>,
    pub summary: CorpusSummary,
}

pub fn aggregate_reports(pages: Vec<PageReport>) -> CorpusReport {
    let mut s = CorpusSummary {
        pages: pages.len(),
        m: 0,
        n1: 0,
        n2: 0,
        dr: 0.0,
        ra: 0.0,
        fm: 0.0,
        tp: 0,
        fp: 0,
        fn_: 0,
        pixel_iu: 0.0,
        cl: 0,
        ml: 0,
        el: 0,
        line_iu: 0.0,
    };
    for p in &pages {
        s.m += p.icdar2013.m;
        s.n1 += p.icdar2013.n1;
        s.n2 += p.icdar2013.n2;
        s.tp += p.icdar2017.tp;
        s.fp += p.icdar2017.fp;
        s.fn_ += p.icdar2017.fn_;
        s.cl += p.icdar2017.cl;
        s.ml += p.icdar2017.ml;
        s.el += p.icdar2017.el;
    }
    (s.dr, s.ra, s.fm) = detection_scores(s.m, s.n1, s.n2);
    s.pixel_iu = pixel_iu(s.tp, s.fp, s.fn_);
    s.line_iu = line_iu(s.cl, s.ml, s.el);
    CorpusReport { pages, summary: s }
}

/// Plain-text table: one row per page, then the corpus totals.
pub fn render_report(report: &CorpusReport) -> String {
    let mut out = String::new();
    let (t13, t17) = report
        .pages
        .first()
        .map(|p| (p.icdar2013.threshold, p.icdar2017.threshold))
        .unwrap_or((f64::NAN, f64::NAN));
    let _ = writeln!(out, "# points counted: foreground pixels of the binarized page");
    let _ = writeln!(out, "# match threshold {t13:.2}, line threshold {t17:.2}");
    let _ = writeln!(
        out,
        "{:<24} {:>4} {:>4} {:>4} {:>7} {:>7} {:>7} {:>9} {:>8}",
        "page", "M", "N1", "N2", "DR", "RA", "FM", "pixel_IU", "line_IU"
    );
    let row = |out: &mut String, name: &str, m: usize, n1: usize, n2: usize, dr: f64, ra: f64, fm: f64, piu: f64, liu: f64| {
        let _ = writeln!(
            out,
            "{name:<24} {m:>4} {n1:>4} {n2:>4} {dr:>7.4} {ra:>7.4} {fm:>7.4} {piu:>9.4} {liu:>8.4}"
        );
    };
    for p in &report.pages {
        let (a, b) = (&p.icdar2013, &p.icdar2017);
        row(&mut out, &p.page, a.m, a.n1, a.n2, a.dr, a.ra, a.fm, b.pixel_iu, b.line_iu);
    }
    let s = &report.summary;
    row(&mut out, "TOTAL", s.m, s.n1, s.n2, s.dr, s.ra, s.fm, s.pixel_iu, s.line_iu);
    out
}
