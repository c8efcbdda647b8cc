//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if a gating criterion fails.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textline::config::PipelineConfig;
use textline::detector::{pca_pseudo_rgb, BlobLineMap, EmbeddingGrid};
use textline::evaluator::{evaluate_icdar2013, evaluate_icdar2017, match_score, Region, RegionKind, RegionSet};
use textline::extractor::{
    alpha_expansion, build_component_graph, data_cost_matrix, extract_lines_with, labelling_energy, ExtractConfig,
};
use textline::imaging::{binarize, label_components, otsu_threshold, BinarizeConfig, BinarizedPage, Connectivity, PatchGeometry};
use textline::pipeline::{ablate, binarize_pages, build_pairs, run_in_memory, synthetic_inputs, train_checkpoint};
use textline::sampler::{build_pair_dataset, similarity_score, PairLabel, SamplerConfig, Strategy};
use textline::siamese::ModelSpec;
use textline::synth::SyntheticPageSpec;

struct Outcome {
    pass: bool,
    skipped: bool,
    detail: String,
}

fn report(n: usize, name: &str, gating: bool, elapsed: Duration, outcome: &Outcome) {
    let status = match (outcome.skipped, outcome.pass) {
        (true, _) => "SKIP",
        (false, true) => "PASS",
        (false, false) => "FAIL",
    };
    let gate = if gating { "" } else { " (non-gating)" };
    let line = format!(
        "criterion {n} [{name}]{gate}: {status} in {:.1}s; {}\n",
        elapsed.as_secs_f64(),
        outcome.detail
    );
    let _ = std::io::stdout().write_all(line.as_bytes());
    let _ = std::io::stdout().flush();
}

// ---------------------------------------------------------------- 1

fn region(id: u32, range: std::ops::Range<usize>) -> Region {
    Region::new(id, range)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn metric_oracles() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Fixture 1: |G∩R| = 90, |G∪R| = 110.
    check("match score 90/110", close(match_score(&region(1, 0..100), &region(2, 10..110)), 90.0 / 110.0));

    // Fixture 2: ten 100-pixel lines; nine predicted exactly, the tenth split
    // in two halves. N1 = 10, N2 = 11, M = 9.
    let gt = RegionSet::new(RegionKind::GroundTruth, (0..10).map(|i| region(i + 1, i as usize * 100..(i as usize + 1) * 100)).collect());
    let mut pred_regions: Vec<Region> = (0..9).map(|i| region(i + 1, i as usize * 100..(i as usize + 1) * 100)).collect();
    pred_regions.push(region(10, 900..950));
    pred_regions.push(region(11, 950..1000));
    let pred = RegionSet::new(RegionKind::Prediction, pred_regions);
    let r = evaluate_icdar2013(&gt, &pred, 0.9);
    let fm = 2.0 * 0.9 * (9.0 / 11.0) / (0.9 + 9.0 / 11.0);
    check("DR/RA/FM 9 of 10/11", r.m == 9 && close(r.dr, 0.9) && close(r.ra, 9.0 / 11.0) && close(r.fm, fm));
    check("FM 0.857142857", close(r.fm, 0.8571428571428571));

    // Fixture 3: three lines, one split in two.
    let gt = RegionSet::new(RegionKind::GroundTruth, vec![region(1, 0..100), region(2, 100..200), region(3, 200..300)]);
    let pred = RegionSet::new(
        RegionKind::Prediction,
        vec![region(1, 0..100), region(2, 100..200), region(3, 200..250), region(4, 250..300)],
    );
    let r = evaluate_icdar2013(&gt, &pred, 0.9);
    check("split line", r.m == 2 && close(r.dr, 2.0 / 3.0) && close(r.ra, 0.5));

    // Fixture 4: one line of 110 pixels predicted with 90 of them plus 10
    // extra: TP 90, FP 10, FN 20.
    let gt = RegionSet::new(RegionKind::GroundTruth, vec![region(1, 0..110)]);
    let pred = RegionSet::new(RegionKind::Prediction, vec![region(1, 20..120)]);
    let r = evaluate_icdar2017(&gt, &pred, 0.75);
    check("pixel IU 0.75", (r.tp, r.fp, r.fn_) == (90, 10, 20) && close(r.pixel_iu, 0.75));

    // Fixture 5: nine gt lines, eight predicted exactly, one missed, one
    // extra prediction elsewhere: CL 8, ML 1, EL 1.
    let gt = RegionSet::new(RegionKind::GroundTruth, (0..9).map(|i| region(i + 1, i as usize * 50..(i as usize + 1) * 50)).collect());
    let mut preds: Vec<Region> = (0..8).map(|i| region(i + 1, i as usize * 50..(i as usize + 1) * 50)).collect();
    preds.push(region(9, 1000..1040));
    let r = evaluate_icdar2017(&gt, &RegionSet::new(RegionKind::Prediction, preds), 0.75);
    check("line IU 0.8", (r.cl, r.ml, r.el) == (8, 1, 1) && close(r.line_iu, 0.8));

    // Fixture 6: prediction identical to ground truth.
    let gt = RegionSet::new(RegionKind::GroundTruth, vec![region(1, 0..40), region(2, 40..90), region(3, 95..99)]);
    let pred = RegionSet { kind: RegionKind::Prediction, ..gt.clone() };
    let a = evaluate_icdar2013(&gt, &pred, 0.9);
    let b = evaluate_icdar2017(&gt, &pred, 0.75);
    check("identity", a.dr == 1.0 && a.ra == 1.0 && a.fm == 1.0 && b.pixel_iu == 1.0 && b.line_iu == 1.0);

    // Fixture 7: a pair with IU 0.5 is both a missed and an extra line.
    let gt = RegionSet::new(RegionKind::GroundTruth, vec![region(1, 0..30)]);
    let pred = RegionSet::new(RegionKind::Prediction, vec![region(1, 10..40)]);
    let r = evaluate_icdar2017(&gt, &pred, 0.75);
    check("half overlap", (r.cl, r.ml, r.el) == (0, 1, 1) && close(r.pixel_iu, 0.5) && close(r.line_iu, 0.0));

    Outcome {
        pass: failures.is_empty(),
        skipped: false,
        detail: if failures.is_empty() {
            "7 fixtures match hand-computed values to 1e-9".into()
        } else {
            format!("mismatched fixtures: {failures:?}")
        },
    }
}

// ---------------------------------------------------------------- 2

fn brute_force_minimum(unary: &[Vec<f64>], edges: &[(usize, usize, f64)], n_labels: usize) -> f64 {
    let n = unary.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    'outer: loop {
        let mut e = 0.0;
        for (c, &l) in labels.iter().enumerate() {
            e += unary[c][l];
        }
        for &(a, b, w) in edges {
            if labels[a] != labels[b] {
                e += w;
            }
        }
        best = best.min(e);
        for slot in labels.iter_mut() {
            *slot += 1;
            if *slot < n_labels {
                continue 'outer;
            }
            *slot = 0;
        }
        return best;
    }
}

/// Random page with up to three horizontal blob bands and up to ten small
/// components, some clustered between bands so the smoothness term matters.
fn random_instance(rng: &mut ChaCha8Rng) -> (BinarizedPage, BlobLineMap) {
    loop {
        let (h, w) = (48, 48);
        let n_bands = rng.random_range(1..=3);
        let mut blob_mask = Array2::from_elem((h, w), false);
        let mut centres = Vec::new();
        for i in 0..n_bands {
            let top = 3 + i * 15 + rng.random_range(0..4);
            let thick = rng.random_range(2..=4);
            centres.push(top + thick / 2);
            let left = rng.random_range(0..12);
            let right = rng.random_range(30..w);
            blob_mask.slice_mut(s![top..top + thick, left..right]).fill(true);
        }
        let mut fg = Array2::from_elem((h, w), false);
        let clustered = rng.random_bool(0.5);
        // Clusters straddle the midline between two bands when there are two.
        let cr = match centres.as_slice() {
            [a, b, ..] => (a + b) / 2 - 4 + rng.random_range(0..3),
            _ => rng.random_range(8..36),
        };
        let cc = rng.random_range(8..36);
        for _ in 0..rng.random_range(2..=10) {
            let size = rng.random_range(1..=2);
            let (r, c) = if clustered {
                (cr + rng.random_range(0..8), cc + rng.random_range(0..10))
            } else {
                (rng.random_range(0..h - 2), rng.random_range(0..w - 2))
            };
            fg.slice_mut(s![r..(r + size).min(h), c..(c + size).min(w)]).fill(true);
        }
        let comps = label_components(&fg, Connectivity::Eight);
        if (1..=10).contains(&comps.len()) {
            return (BinarizedPage::from_mask(fg, "instance"), BlobLineMap::from_mask(blob_mask));
        }
    }
}

fn energy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut exact, mut worst_ratio, mut nearest_ok, mut smooth_relevant) = (0, 1.0f64, 0, 0);
    let trials = 200;
    for _ in 0..trials {
        let (page, blobs) = random_instance(&mut rng);
        let comps = page.components(Connectivity::Eight);
        let cfg = ExtractConfig::default();
        let lab = extract_lines_with(&page, &blobs, &comps, &cfg).unwrap();
        let unary = data_cost_matrix(&comps, &blobs).unwrap();
        let edges = build_component_graph(&comps, cfg.k).unwrap().weighted_edges();
        let best = brute_force_minimum(&unary, &edges, blobs.len());
        let solved = labelling_energy(&unary, &edges, &lab.assignment);
        assert!((solved - lab.energy).abs() < 1e-9);
        if (solved - best).abs() <= 1e-9 * best.max(1.0) {
            exact += 1;
        }
        let ratio = if best > 0.0 { solved / best } else if solved == 0.0 { 1.0 } else { f64::INFINITY };
        worst_ratio = worst_ratio.max(ratio);

        // Oracle for the nearest assignment: first label of minimal cost.
        let nearest: Vec<usize> = unary
            .iter()
            .map(|row| {
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                row.iter().position(|&v| v == min).unwrap()
            })
            .collect();
        if labelling_energy(&unary, &edges, &nearest) > best + 1e-9 {
            smooth_relevant += 1;
        }
        let off = extract_lines_with(&page, &blobs, &comps, &ExtractConfig { beta: Some(0.0), ..cfg.clone() }).unwrap();
        if off.assignment == nearest {
            nearest_ok += 1;
        }
        // Direct solver call agrees with the page-level path.
        assert_eq!(alpha_expansion(&unary, &edges, blobs.len(), 10), lab.assignment);
    }
    let pass = exact * 100 >= 95 * trials && worst_ratio <= 1.02 && nearest_ok == trials;
    Outcome {
        pass,
        skipped: false,
        detail: format!(
            "{exact}/{trials} at the brute-force minimum, worst ratio {worst_ratio:.6}, beta=0 nearest {nearest_ok}/{trials}, {smooth_relevant} instances where smoothing changes the optimum"
        ),
    }
}

// ---------------------------------------------------------------- 3

fn score_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0usize;
    let n = 20_000;
    for _ in 0..n {
        let a: u64 = rng.random_range(0..5000);
        let b: u64 = rng.random_range(0..5000);
        let k: u64 = rng.random_range(1..1000);
        let s = similarity_score(a, b);
        let ok = s == similarity_score(b, a)
            && (0.0..=1.0).contains(&s)
            && (similarity_score(k * a, k * b) - s).abs() <= 1e-12
            && similarity_score(a, a) == 1.0
            && similarity_score(0, a + 1) == 0.0;
        failures += !ok as usize;
    }
    let boundaries = similarity_score(0, 0) == 1.0 && similarity_score(3, 6) == 0.5 && similarity_score(7, 0) == 0.0;

    // Every sampled pair re-verifies its strategy from its own pixels.
    let spec = SyntheticPageSpec { n_lines: 6, ..Default::default() };
    let inputs = synthetic_inputs(&spec, 3).unwrap();
    let pages: Vec<BinarizedPage> = inputs
        .iter()
        .map(|p| binarize(p.gray.clone(), &BinarizeConfig::otsu(), &p.id).unwrap())
        .collect();
    let thresholds: Vec<u8> = inputs.iter().map(|p| otsu_threshold(&p.gray).unwrap()).collect();
    let geom = PatchGeometry::new(36, 36, 10, 10).unwrap();
    let cfg = SamplerConfig { n_pairs: 1500, ..Default::default() };
    let ds = build_pair_dataset(&pages, &geom, &cfg).unwrap();
    let area = (geom.h_p * geom.w_p) as f64;
    let mut bad_pairs = 0usize;
    for (pair, rec) in ds.pairs.iter().zip(&ds.records) {
        let page = inputs.iter().position(|p| p.id == rec.source_id).unwrap();
        let t = thresholds[page];
        let ink = |px: &Array2<u8>| px.iter().filter(|&&v| v <= t).count() as u64;
        let (a, b) = (ink(&pair.left.pixels), ink(&pair.right.pixels));
        let score = similarity_score(a, b);
        let bg = |c: u64| c as f64 / area <= cfg.bg_fraction;
        let holds = match pair.strategy {
            Strategy::SimilarByCount => score >= cfg.t_sim && pair.label == PairLabel::Similar,
            Strategy::DifferentByCount => score <= cfg.t_diff && pair.label == PairLabel::Different,
            Strategy::DifferentByBackground => bg(a) != bg(b) && pair.label == PairLabel::Different,
        };
        let crop = |p: &textline::sampler::Patch| {
            let (r, c) = p.origin;
            inputs[page].gray.slice(s![r..r + geom.h_p, c..c + geom.w_p]) == p.pixels
        };
        let consistent = crop(&pair.left)
            && crop(&pair.right)
            && a == pair.left.fg_count && b == pair.right.fg_count && score == pair.score;
        bad_pairs += !(holds && consistent) as usize;
    }
    Outcome {
        pass: failures == 0 && boundaries && bad_pairs == 0,
        skipped: false,
        detail: format!(
            "{} random count pairs with {failures} violations; {} sampled pairs with {bad_pairs} failing re-verification",
            n,
            ds.len()
        ),
    }
}

// ---------------------------------------------------------------- 4

/// Cyclic Jacobi eigensolver for a symmetric matrix (row-major). Returns
/// eigenvalues and eigenvectors as columns of a row-major matrix.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Top-3 eigenvectors of the sample covariance via the Jacobi oracle.
fn oracle_top3(rows: &[Vec<f64>]) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let xi = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += xi * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|x| *x /= (n - 1) as f64);
    let (values, vectors) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let basis = DMatrix::from_fn(d, 3, |i, k| vectors[i * d + order[k]]);
    (basis, order.iter().take(3).map(|&i| values[i]).collect())
}

/// Sine of the largest principal angle between two orthonormal bases.
fn max_principal_angle_sin(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let residual = v - u * (u.transpose() * v);
    residual.singular_values().max()
}

fn grid_of(rows: &[Vec<f32>]) -> EmbeddingGrid {
    let d = rows[0].len();
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    EmbeddingGrid {
        vectors: Array3::from_shape_vec((rows.len(), 1, d), flat).unwrap(),
        cell: (1, 1),
        page_dims: (rows.len(), 1),
    }
}

fn pca_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut orthonormal = true;
    for (n, d) in [(300usize, 512usize), (80, 512), (400, 64)] {
        // Anisotropic cloud so the leading eigenvalues are well separated.
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|j| rng.random_range(-1.0f32..1.0) * (1.0 + 4.0 / (1.0 + j as f32 * 0.5))).collect())
            .collect();
        let prgb = pca_pseudo_rgb(&grid_of(&rows));
        let u = DMatrix::from_fn(d, 3, |i, k| prgb.components[k][i]);
        let gram = u.transpose() * &u;
        orthonormal &= (gram - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-9;
        let as_f64: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let (v, _) = oracle_top3(&as_f64);
        worst = worst.max(max_principal_angle_sin(&u, &v).asin());
    }

    // Exact rank-3 affine data.
    let basis: Vec<Vec<f32>> = (0..3).map(|_| (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let offset: Vec<f32> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<Vec<f32>> = (0..60)
        .map(|_| {
            let c: Vec<f32> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            (0..128).map(|j| offset[j] + c[0] * basis[0][j] + c[1] * basis[1][j] + c[2] * basis[2][j]).collect()
        })
        .collect();
    let ev = pca_pseudo_rgb(&grid_of(&rows)).explained_variance;
    let total: f64 = ev.iter().sum();
    let full = (total - 1.0).abs() < 1e-6 && ev[0] >= ev[1] && ev[1] >= ev[2];
    Outcome {
        pass: worst < 1e-6 && orthonormal && full,
        skipped: false,
        detail: format!("largest principal angle {worst:.3e} rad over 3 random sets; rank-3 data explains {:.9} of variance", total),
    }
}

// ---------------------------------------------------------------- 5

fn training_sanity() -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.sampler.n_pairs = 2000;
    cfg.model = ModelSpec::compact();
    cfg.train.max_epochs = 10;
    cfg.train.early_stop_patience = 10;
    let cfg = cfg.effective();
    let inputs = synthetic_inputs(&cfg.synth.page, 4).unwrap();
    let pages = binarize_pages(&cfg, &inputs).unwrap();
    let (geom, ds) = build_pairs(&cfg, &pages).unwrap();
    let ck = train_checkpoint(&cfg, &ds).unwrap();
    let v0 = ck.history[0].val_loss;
    let best = ck.history.iter().skip(1).map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best / v0;
    Outcome {
        pass: drop >= 0.30,
        skipped: false,
        detail: format!(
            "{} pairs of {}x{} patches, learning rate {:e}: validation loss {v0:.4} -> {best:.4} ({:.1}% drop) within {} epochs",
            ds.len(),
            geom.h_p,
            geom.w_p,
            cfg.train.learning_rate,
            100.0 * drop,
            ck.history.len() - 1
        ),
    }
}

// ---------------------------------------------------------------- 6

fn end_to_end() -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.sampler.n_pairs = 2000;
    cfg.model = ModelSpec::compact();
    cfg.train.learning_rate = 1e-3;
    cfg.train.max_epochs = 5;
    cfg.evaluate.icdar2013_threshold = 0.75;
    let cfg = cfg.effective();
    let inputs = synthetic_inputs(&cfg.synth.page, 20).unwrap();
    let run = run_in_memory(&cfg, &inputs, 1, true).unwrap();
    let s = &run.report.as_ref().unwrap().summary;
    let within = run.pages_with_blob_count_within(&inputs, 1);
    let counts: Vec<usize> = run.pages.iter().map(|p| p.blob_count()).collect();
    Outcome {
        pass: s.fm >= 0.85 && within * 10 >= 9 * inputs.len(),
        skipped: false,
        detail: format!(
            "FM {:.4} (DR {:.4}, RA {:.4}) at threshold 0.75; blob count within 1 of 10 lines on {within}/{} pages; blob counts {counts:?}",
            s.fm,
            s.dr,
            s.ra,
            inputs.len()
        ),
    }
}

// ---------------------------------------------------------------- 7

fn ablation_shape() -> Outcome {
    let mut cfg = PipelineConfig::default();
    // Taller glyphs so the 1x patch still fits the network's receptive stack.
    cfg.synth.page.line_height = 16;
    cfg.synth.page.interline_gap = 66;
    cfg.sampler.n_pairs = 2000;
    cfg.model = ModelSpec::compact();
    cfg.train.learning_rate = 1e-3;
    cfg.train.max_epochs = 5;
    cfg.evaluate.icdar2013_threshold = 0.75;
    cfg.ablate.patch_multipliers = vec![1.0, 3.0, 8.0];
    let cfg = cfg.effective();
    let inputs = synthetic_inputs(&cfg.synth.page, 6).unwrap();
    let cells = ablate(&cfg, &inputs, 1).unwrap();
    let fm: Vec<f64> = cells.iter().map(|c| c.fm).collect();
    let table: Vec<String> = cells
        .iter()
        .map(|c| {
            format!(
                "{}x (h_p {}): FM {:.4}, blobs within 1 on {}/{}{}",
                c.patch_multiplier,
                c.h_p.map_or("-".into(), |v| v.to_string()),
                c.fm,
                c.blob_count_ok,
                c.pages,
                c.error.as_ref().map(|e| format!(", error: {e}")).unwrap_or_default()
            )
        })
        .collect();
    Outcome {
        pass: fm[1] > fm[0] && fm[1] > fm[2],
        skipped: false,
        detail: table.join("; "),
    }
}

// ---------------------------------------------------------------- 8

fn real_dataset() -> Outcome {
    match std::env::var_os("TEXTLINE_VML_AHTE") {
        None => Outcome {
            pass: true,
            skipped: true,
            detail: "skipped: set TEXTLINE_VML_AHTE to a directory of pages/ and gt/ label maps to run".into(),
        },
        Some(dir) => {
            let dir = std::path::PathBuf::from(dir);
            let mut pages: Vec<_> = std::fs::read_dir(dir.join("pages"))
                .map(|it| it.filter_map(|e| e.ok().map(|e| e.path())).collect())
                .unwrap_or_default();
            pages.sort();
            let mut cfg = PipelineConfig::default();
            cfg.sampler.n_pairs = 30_000;
            let result = (|| -> textline::Result<_> {
                let mut inputs = textline::pipeline::load_pages(&pages)?;
                for p in &mut inputs {
                    p.gt = Some(textline::imaging::io::read_labels_png(&dir.join("gt").join(format!("{}.png", p.id)))?);
                }
                run_in_memory(&cfg, &inputs, 1, true)
            })();
            match result {
                Ok(run) => {
                    let s = &run.report.unwrap().summary;
                    Outcome {
                        pass: true,
                        skipped: false,
                        detail: format!("FM {:.4}, line IU {:.4}, pixel IU {:.4}", s.fm, s.line_iu, s.pixel_iu),
                    }
                }
                Err(e) => Outcome {
                    pass: false,
                    skipped: false,
                    detail: format!("run failed: {e}"),
                },
            }
        }
    }
}

fn main() {
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored.
    let filter: BTreeSet<usize> = std::env::var("TEXTLINE_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    type Criterion = (usize, &'static str, bool, Option<Duration>, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        (1, "metric oracles", true, None, metric_oracles),
        (2, "energy-minimisation oracle", true, Some(Duration::from_secs(120)), energy_oracle),
        (3, "score algebra", true, None, score_algebra),
        (4, "PCA correctness", true, None, pca_correctness),
        (5, "training sanity", true, Some(Duration::from_secs(15 * 60)), training_sanity),
        (6, "end-to-end synthetic gate", true, Some(Duration::from_secs(45 * 60)), end_to_end),
        (7, "ablation shape", true, None, ablation_shape),
        (8, "real-dataset reproduction", false, None, real_dataset),
    ];
    let mut failed = Vec::new();
    for (n, name, gating, budget, run) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = run();
        let elapsed = start.elapsed();
        if let Some(limit) = budget {
            if elapsed > limit {
                outcome.pass = false;
                outcome.detail.push_str(&format!("; exceeded the {}s budget", limit.as_secs()));
            }
        }
        report(n, name, gating, elapsed, &outcome);
        if gating && !outcome.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all gating criteria passed");
}
