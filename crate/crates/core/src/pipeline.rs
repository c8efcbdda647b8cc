//! Stage orchestration, both in memory and against a run directory.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/pairs/       manifest.jsonl, patches/, geometry.json, config.toml
//! <run>/checkpoint/  weights.bin, checkpoint.json, config.toml
//! <run>/detect/      <page>.rgb.png, <page>.blobs.png, blobs.json, config.toml
//! <run>/labels/      <page>.png (16-bit), labels.json, config.toml
//! <run>/report/      report.txt, report.json, config.toml
//! <run>/ablate/      table.txt, table.json, plot.png, config.toml
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::detector::{detect_page, BlobLineMap, Detection};
use crate::error::{Error, Result};
use crate::evaluator::{aggregate_reports, evaluate_page, render_report, CorpusReport, PageReport};
use crate::extractor::{extract_lines_with, LineLabeling};
use crate::imaging::io::{atomic_write, read_gray, read_labels_png, read_mask_png, write_gray_png, write_labels_png, write_mask_png, write_rgb_png};
use crate::imaging::{binarize, estimate_corpus_geometry, BinarizedPage, Connectivity, PatchGeometry};
use crate::sampler::{build_pair_dataset, read_pair_dataset, write_pair_dataset, PairDataset};
use crate::siamese::{train, Checkpoint, EpochRecord, SiameseNet};
use crate::synth::{generate_corpus, SyntheticPageSpec};

pub const PAIRS_DIR: &str = "pairs";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DETECT_DIR: &str = "detect";
pub const LABELS_DIR: &str = "labels";
pub const REPORT_DIR: &str = "report";
pub const ABLATE_DIR: &str = "ablate";
pub const CONFIG_FILE: &str = "config.toml";

/// A page image with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PageInput {
    pub id: String,
    pub gray: Array2<u8>,
    pub gt: Option<Array2<u16>>,
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} workers: {e}")))
}

/// Map `f` over `items` on `jobs` workers, keeping input order.
fn par_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    thread_pool(jobs)?.install(|| items.par_iter().map(f).collect())
}

pub fn page_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn binarize_pages(cfg: &PipelineConfig, inputs: &[PageInput]) -> Result<Vec<BinarizedPage>> {
    inputs
        .iter()
        .map(|p| binarize(p.gray.clone(), &cfg.binarize, &p.id))
        .collect()
}

pub fn build_pairs(cfg: &PipelineConfig, pages: &[BinarizedPage]) -> Result<(PatchGeometry, PairDataset)> {
    let geom = estimate_corpus_geometry(pages, &cfg.geometry)?;
    log::info!("patch geometry {geom:?}");
    let dataset = build_pair_dataset(pages, &geom, &cfg.sampler)?;
    Ok((geom, dataset))
}

pub fn train_checkpoint(cfg: &PipelineConfig, dataset: &PairDataset) -> Result<Checkpoint> {
    let net = SiameseNet::new(&cfg.model, dataset.patch_size)?;
    train(net, dataset, &cfg.train)
}

/// Geometry used at inference: the checkpoint's patch with the configured
/// inner window.
pub fn inference_geometry(cfg: &PipelineConfig, checkpoint: &Checkpoint) -> Result<PatchGeometry> {
    let (h_p, w_p) = checkpoint.patch_size();
    PatchGeometry::new(h_p, w_p, cfg.geometry.h_i, cfg.geometry.w_i)
}

pub fn extract_page(cfg: &PipelineConfig, page: &BinarizedPage, blobs: &BlobLineMap) -> Result<LineLabeling> {
    let comps = page.components(Connectivity::Eight);
    if comps.is_empty() {
        return Ok(LineLabeling {
            assignment: Vec::new(),
            energy: 0.0,
            pixel_labels: Array2::zeros(page.dims()),
        });
    }
    extract_lines_with(page, blobs, &comps, &cfg.extract)
}

/// Detection and extraction of one page.
#[derive(Debug, Clone)]
pub struct PageResult {
    pub id: String,
    pub detection: Option<Detection>,
    pub labels: Array2<u16>,
    /// Diagnostic of a page that could not be processed.
    pub error: Option<String>,
}

impl PageResult {
    pub fn blob_count(&self) -> usize {
        self.detection.as_ref().map_or(0, |d| d.blobs.len())
    }
}

/// Detect and extract every page. With `tolerate_failures`, a page whose
/// detection fails yields an empty labelling instead of aborting the run.
pub fn process_pages(
    cfg: &PipelineConfig,
    checkpoint: &Checkpoint,
    pages: &[BinarizedPage],
    jobs: usize,
    tolerate_failures: bool,
) -> Result<Vec<PageResult>> {
    let geom = inference_geometry(cfg, checkpoint)?;
    par_map(jobs, pages, |page| {
        let outcome = detect_page(checkpoint, page, &geom, &cfg.detect).and_then(|d| {
            let lab = extract_page(cfg, page, &d.blobs)?;
            Ok((d, lab))
        });
        match outcome {
            Ok((d, lab)) => Ok(PageResult {
                id: page.source_id.clone(),
                detection: Some(d),
                labels: lab.pixel_labels,
                error: None,
            }),
            Err(e) if tolerate_failures => {
                log::warn!("page {}: {e}", page.source_id);
                Ok(PageResult {
                    id: page.source_id.clone(),
                    detection: None,
                    labels: Array2::zeros(page.dims()),
                    error: Some(e.to_string()),
                })
            }
            Err(e) => Err(e),
        }
    })
}

pub fn evaluate_pages(cfg: &PipelineConfig, pages: &[BinarizedPage], gts: &[&Array2<u16>], preds: &[&Array2<u16>]) -> Result<CorpusReport> {
    let reports = pages
        .iter()
        .zip(gts.iter().zip(preds))
        .map(|(p, (g, r))| evaluate_page(&p.source_id, g, r, &p.fg_mask, &cfg.evaluate))
        .collect::<Result<Vec<PageReport>>>()?;
    Ok(aggregate_reports(reports))
}

/// Everything produced by one in-memory run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub geometry: PatchGeometry,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub pages: Vec<PageResult>,
    pub report: Option<CorpusReport>,
}

impl RunSummary {
    /// Pages whose blob count is within `tolerance` of their ground-truth
    /// line count.
    pub fn pages_with_blob_count_within(&self, inputs: &[PageInput], tolerance: usize) -> usize {
        self.pages
            .iter()
            .zip(inputs)
            .filter(|(r, p)| {
                p.gt.as_ref().is_some_and(|gt| {
                    let lines = count_labels(gt);
                    r.blob_count().abs_diff(lines) <= tolerance
                })
            })
            .count()
    }
}

pub fn count_labels(labels: &Array2<u16>) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for &l in labels.iter().filter(|&&l| l > 0) {
        seen.insert(l);
    }
    seen.len()
}

/// pairs → train → detect → extract → evaluate, without touching disk.
/// Training uses every page; evaluation covers the pages with ground truth.
pub fn run_in_memory(cfg: &PipelineConfig, inputs: &[PageInput], jobs: usize, tolerate_failures: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let pages = binarize_pages(cfg, inputs)?;
    let (geometry, dataset) = build_pairs(cfg, &pages)?;
    let checkpoint = train_checkpoint(cfg, &dataset)?;
    let results = process_pages(cfg, &checkpoint, &pages, jobs, tolerate_failures)?;
    let report = if inputs.iter().all(|p| p.gt.is_some()) {
        let gts: Vec<&Array2<u16>> = inputs.iter().filter_map(|p| p.gt.as_ref()).collect();
        let preds: Vec<&Array2<u16>> = results.iter().map(|r| &r.labels).collect();
        Some(evaluate_pages(cfg, &pages, &gts, &preds)?)
    } else {
        None
    };
    Ok(RunSummary {
        geometry,
        history: checkpoint.history.clone(),
        best_epoch: checkpoint.best_epoch,
        pages: results,
        report,
    })
}

/// Synthetic pages as pipeline inputs.
pub fn synthetic_inputs(spec: &SyntheticPageSpec, n_pages: usize) -> Result<Vec<PageInput>> {
    Ok(generate_corpus(spec, n_pages)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| PageInput {
            id: format!("page_{i:03}"),
            gray: p.gray,
            gt: Some(p.gt_labels),
        })
        .collect())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn stage_dir(cfg: &PipelineConfig, run: &Path, name: &str) -> Result<PathBuf> {
    let dir = run.join(name);
    ensure_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(dir)
}

pub fn load_pages(paths: &[PathBuf]) -> Result<Vec<PageInput>> {
    paths
        .iter()
        .map(|p| {
            Ok(PageInput {
                id: page_id(p),
                gray: read_gray(p)?,
                gt: None,
            })
        })
        .collect()
}

/// Write `n_pages` synthetic pages to `<out>/pages/` and their label maps to
/// `<out>/gt/`. Returns the page paths.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.synth.page.validate()?;
    let pages_dir = out.join("pages");
    let gt_dir = out.join("gt");
    ensure_dir(&pages_dir)?;
    ensure_dir(&gt_dir)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut paths = Vec::new();
    for input in synthetic_inputs(&cfg.synth.page, cfg.synth.n_pages)? {
        let path = pages_dir.join(format!("{}.png", input.id));
        write_gray_png(&path, &input.gray)?;
        write_labels_png(&gt_dir.join(format!("{}.png", input.id)), input.gt.as_ref().expect("synthetic pages carry labels"))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_pairs(cfg: &PipelineConfig, pages: &[PathBuf], run: &Path) -> Result<PairDataset> {
    cfg.validate()?;
    let inputs = load_pages(pages)?;
    let binarized = binarize_pages(cfg, &inputs)?;
    let (geom, dataset) = build_pairs(cfg, &binarized)?;
    let dir = stage_dir(cfg, run, PAIRS_DIR)?;
    write_pair_dataset(&dir, &dataset)?;
    write_json(&dir.join("geometry.json"), &geom)?;
    Ok(dataset)
}

pub fn cmd_train(cfg: &PipelineConfig, run: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let dataset = read_pair_dataset(&run.join(PAIRS_DIR))?;
    let checkpoint = train_checkpoint(cfg, &dataset)?;
    let dir = stage_dir(cfg, run, CHECKPOINT_DIR)?;
    checkpoint.save(&dir)?;
    Ok(checkpoint)
}

fn binarize_paths(cfg: &PipelineConfig, pages: &[PathBuf]) -> Result<Vec<BinarizedPage>> {
    binarize_pages(cfg, &load_pages(pages)?)
}

/// The geometry the run's pairs were cut with (the checkpoint's patch when
/// the run has no pairs), with any configured patch overrides applied. A
/// checkpoint that disagrees is rejected by the detector.
fn detect_geometry(cfg: &PipelineConfig, run: &Path, checkpoint: &Checkpoint) -> Result<PatchGeometry> {
    let recorded = run.join(PAIRS_DIR).join("geometry.json");
    let (mut h_p, mut w_p) = if recorded.exists() {
        let g: PatchGeometry = read_json(&recorded)?;
        (g.h_p, g.w_p)
    } else {
        checkpoint.patch_size()
    };
    if let Some(h) = cfg.geometry.h_p_override {
        h_p = h;
        w_p = cfg.geometry.w_p_override.unwrap_or(h);
    } else if let Some(w) = cfg.geometry.w_p_override {
        w_p = w;
    }
    PatchGeometry::new(h_p, w_p, cfg.geometry.h_i, cfg.geometry.w_i)
}

/// Blob-line count per page id.
pub fn cmd_detect(cfg: &PipelineConfig, run: &Path, pages: &[PathBuf], jobs: usize) -> Result<BTreeMap<String, usize>> {
    cfg.validate()?;
    let checkpoint = Checkpoint::load(&run.join(CHECKPOINT_DIR))?;
    let geom = detect_geometry(cfg, run, &checkpoint)?;
    let binarized = binarize_paths(cfg, pages)?;
    let dir = stage_dir(cfg, run, DETECT_DIR)?;
    let counts = par_map(jobs, &binarized, |page| {
        let d = detect_page(&checkpoint, page, &geom, &cfg.detect)?;
        write_rgb_png(&dir.join(format!("{}.rgb.png", page.source_id)), &d.pseudo_rgb.image)?;
        write_mask_png(&dir.join(format!("{}.blobs.png", page.source_id)), &d.blobs.mask)?;
        Ok((page.source_id.clone(), d.blobs.len()))
    })?;
    let counts: BTreeMap<String, usize> = counts.into_iter().collect();
    write_json(&dir.join("blobs.json"), &counts)?;
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub lines: usize,
    pub components: usize,
    pub energy: f64,
}

pub fn cmd_extract(cfg: &PipelineConfig, run: &Path, pages: &[PathBuf], jobs: usize) -> Result<BTreeMap<String, LabelSummary>> {
    cfg.validate()?;
    let binarized = binarize_paths(cfg, pages)?;
    let detect = run.join(DETECT_DIR);
    let dir = stage_dir(cfg, run, LABELS_DIR)?;
    let rows = par_map(jobs, &binarized, |page| {
        let mask = read_mask_png(&detect.join(format!("{}.blobs.png", page.source_id)))?;
        let blobs = BlobLineMap::from_mask(mask);
        let lab = extract_page(cfg, page, &blobs)?;
        write_labels_png(&dir.join(format!("{}.png", page.source_id)), &lab.pixel_labels)?;
        Ok((
            page.source_id.clone(),
            LabelSummary {
                lines: count_labels(&lab.pixel_labels),
                components: lab.assignment.len(),
                energy: lab.energy,
            },
        ))
    })?;
    let rows: BTreeMap<String, LabelSummary> = rows.into_iter().collect();
    write_json(&dir.join("labels.json"), &rows)?;
    Ok(rows)
}

/// Score `<run>/labels/<page>.png` against `<gt_dir>/<page>.png`.
pub fn cmd_evaluate(cfg: &PipelineConfig, run: &Path, pages: &[PathBuf], gt_dir: &Path, jobs: usize) -> Result<CorpusReport> {
    cfg.validate()?;
    let binarized = binarize_paths(cfg, pages)?;
    let labels = run.join(LABELS_DIR);
    let reports = par_map(jobs, &binarized, |page| {
        let gt = read_labels_png(&gt_dir.join(format!("{}.png", page.source_id)))?;
        let pred = read_labels_png(&labels.join(format!("{}.png", page.source_id)))?;
        evaluate_page(&page.source_id, &gt, &pred, &page.fg_mask, &cfg.evaluate)
    })?;
    let report = aggregate_reports(reports);
    let dir = stage_dir(cfg, run, REPORT_DIR)?;
    atomic_write(&dir.join("report.txt"), render_report(&report).as_bytes())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub patch_multiplier: f64,
    pub t_sim: f64,
    pub t_diff: f64,
    pub h_p: Option<usize>,
    pub w_p: Option<usize>,
    pub fm: f64,
    pub dr: f64,
    pub ra: f64,
    pub pixel_iu: f64,
    pub line_iu: f64,
    /// Pages whose blob count is within one of the true line count.
    pub blob_count_ok: usize,
    pub pages: usize,
    pub best_val_loss: Option<f64>,
    /// Diagnostic when the cell could not run at all.
    pub error: Option<String>,
}

/// One full run per combination of patch multiplier and sampler thresholds,
/// on pages with ground truth.
pub fn ablate(cfg: &PipelineConfig, inputs: &[PageInput], jobs: usize) -> Result<Vec<AblationCell>> {
    if inputs.iter().any(|p| p.gt.is_none()) {
        return Err(Error::InvalidConfig("ablation needs ground truth for every page".into()));
    }
    let mut cells = Vec::new();
    for &mult in &cfg.ablate.patch_multipliers {
        for &t_sim in &cfg.ablate.t_sim {
            for &t_diff in &cfg.ablate.t_diff {
                let mut cell_cfg = cfg.clone();
                cell_cfg.geometry.patch_multiplier = mult;
                cell_cfg.sampler.t_sim = t_sim;
                cell_cfg.sampler.t_diff = t_diff;
                log::info!("ablation cell: multiplier {mult}, t_sim {t_sim}, t_diff {t_diff}");
                let mut cell = AblationCell {
                    patch_multiplier: mult,
                    t_sim,
                    t_diff,
                    h_p: None,
                    w_p: None,
                    fm: 0.0,
                    dr: 0.0,
                    ra: 0.0,
                    pixel_iu: 0.0,
                    line_iu: 0.0,
                    blob_count_ok: 0,
                    pages: inputs.len(),
                    best_val_loss: None,
                    error: None,
                };
                match run_in_memory(&cell_cfg, inputs, jobs, true) {
                    Ok(run) => {
                        let s = &run.report.as_ref().expect("inputs carry ground truth").summary;
                        cell.h_p = Some(run.geometry.h_p);
                        cell.w_p = Some(run.geometry.w_p);
                        (cell.fm, cell.dr, cell.ra) = (s.fm, s.dr, s.ra);
                        (cell.pixel_iu, cell.line_iu) = (s.pixel_iu, s.line_iu);
                        cell.blob_count_ok = run.pages_with_blob_count_within(inputs, 1);
                        cell.best_val_loss = run.history.get(run.best_epoch).map(|r| r.val_loss);
                    }
                    Err(e) => {
                        log::warn!("ablation cell failed: {e}");
                        cell.error = Some(e.to_string());
                    }
                }
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

pub fn render_ablation(cells: &[AblationCell]) -> String {
    let mut out = format!(
        "{:>6} {:>5} {:>6} {:>5} {:>5} {:>7} {:>7} {:>7} {:>9} {:>8} {:>9}  {}\n",
        "mult", "h_p", "w_p", "t_sim", "t_dif", "FM", "DR", "RA", "pixel_IU", "line_IU", "blobs±1", "status"
    );
    let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
    for c in cells {
        out.push_str(&format!(
            "{:>6.2} {:>5} {:>6} {:>5.2} {:>5.2} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>8.4} {:>5}/{:<3}  {}\n",
            c.patch_multiplier,
            opt(c.h_p),
            opt(c.w_p),
            c.t_sim,
            c.t_diff,
            c.fm,
            c.dr,
            c.ra,
            c.pixel_iu,
            c.line_iu,
            c.blob_count_ok,
            c.pages,
            c.error.as_deref().unwrap_or("ok")
        ));
    }
    out
}

/// Bar chart of FM per cell: one bar per cell, full height = 1.0.
pub fn ablation_plot(cells: &[AblationCell]) -> Array3<u8> {
    let (bar, gap, height, margin) = (40usize, 16usize, 200usize, 10usize);
    let width = 2 * margin + cells.len().max(1) * (bar + gap);
    let total_h = height + 2 * margin;
    let mut img = Array3::from_elem((total_h, width, 3), 255u8);
    for c in 0..width {
        for k in 0..3 {
            img[[margin + height, c, k]] = 0;
        }
    }
    for (i, cell) in cells.iter().enumerate() {
        let h = (cell.fm.clamp(0.0, 1.0) * height as f64).round() as usize;
        let left = margin + i * (bar + gap) + gap / 2;
        let colour = if cell.error.is_some() { [200, 60, 60] } else { [60, 90, 200] };
        for r in margin + height - h..margin + height {
            for c in left..left + bar {
                for k in 0..3 {
                    img[[r, c, k]] = colour[k];
                }
            }
        }
    }
    img
}

/// Ablation over pages with ground truth in `gt_dir`; writes the table,
/// its JSON form and the plot under `<run>/ablate/`.
pub fn cmd_ablate(cfg: &PipelineConfig, run: &Path, pages: &[PathBuf], gt_dir: &Path, jobs: usize) -> Result<Vec<AblationCell>> {
    cfg.validate()?;
    let mut inputs = load_pages(pages)?;
    for p in &mut inputs {
        p.gt = Some(read_labels_png(&gt_dir.join(format!("{}.png", p.id)))?);
    }
    let cells = ablate(cfg, &inputs, jobs)?;
    let dir = stage_dir(cfg, run, ABLATE_DIR)?;
    atomic_write(&dir.join("table.txt"), render_ablation(&cells).as_bytes())?;
    write_json(&dir.join("table.json"), &cells)?;
    write_rgb_png(&dir.join("plot.png"), &ablation_plot(&cells))?;
    Ok(cells)
}
