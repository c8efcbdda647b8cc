//! Component-to-line assignment.
//!
//! Every connected component of the page gets the label of one blob line.
//! The labelling minimises
//!
//! ```text
//! E(f) = sum_c D(c, f_c) + sum_{(c,c') in N} exp(-beta * d(c,c')) * [f_c != f_c']
//! ```
//!
//! where `D` is the distance from a component's centroid to the nearest
//! pixel of a blob, `N` is a symmetrised k-nearest-neighbour graph over
//! centroids and `beta = 1 / (2 * mean d)`. The minimum is approximated by
//! alpha-expansion with s-t min cuts.

use std::collections::{BTreeSet, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::BlobLineMap;
use crate::error::{Error, Result};
use crate::imaging::{BinarizedPage, Component, ComponentSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Neighbours per component before symmetrisation.
    pub k: usize,
    /// Replaces the data-driven beta when set; zero switches smoothing off.
    pub beta: Option<f64>,
    pub max_sweeps: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            k: 4,
            beta: None,
            max_sweeps: 10,
        }
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Distance from the centroid of `c` to the closest pixel of `blob`; zero
/// when the rounded centroid is itself a blob pixel.
pub fn data_cost(c: &Component, blob: &Component) -> Result<f64> {
    if blob.pixels.is_empty() {
        return Err(Error::EmptyBlob(blob.id));
    }
    let rounded = (c.centroid.0.round(), c.centroid.1.round());
    let mut best = f64::INFINITY;
    for &(r, col) in &blob.pixels {
        let p = (r as f64, col as f64);
        if p == rounded {
            return Ok(0.0);
        }
        best = best.min(distance(c.centroid, p));
    }
    Ok(best)
}

/// Pairwise penalty for giving neighbours different labels.
pub fn smoothness_cost(d_c: f64, beta: f64) -> f64 {
    (-beta * d_c).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    /// Centroid distance.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGraph {
    pub components: ComponentSet,
    /// Unordered pairs with `a < b`, sorted.
    pub edges: Vec<Edge>,
    pub beta: f64,
}

impl ComponentGraph {
    /// Smoothness weight of an edge; zero everywhere when beta is zero.
    pub fn weight(&self, e: &Edge) -> f64 {
        if self.beta > 0.0 {
            smoothness_cost(e.distance, self.beta)
        } else {
            0.0
        }
    }

    pub fn weighted_edges(&self) -> Vec<(usize, usize, f64)> {
        self.edges.iter().map(|e| (e.a, e.b, self.weight(e))).collect()
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }
}

/// Symmetrised k-NN graph over component centroids. Distance ties are broken
/// by component id.
pub fn build_component_graph(comps: &ComponentSet, k: usize) -> Result<ComponentGraph> {
    let n = comps.len();
    if n == 0 {
        return Err(Error::InvalidGeometry("no components to label".into()));
    }
    let cents: Vec<(f64, f64)> = comps.iter().map(|c| c.centroid).collect();
    let mut pairs = BTreeSet::new();
    let k = k.min(n - 1);
    if k > 0 {
        for i in 0..n {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance(cents[i], cents[j]), j))
                .collect();
            let by = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
            if k < others.len() {
                others.select_nth_unstable_by(k - 1, by);
            }
            for &(_, j) in &others[..k] {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
    }
    let edges: Vec<Edge> = pairs
        .into_iter()
        .map(|(a, b)| Edge {
            a,
            b,
            distance: distance(cents[a], cents[b]),
        })
        .collect();
    let beta = if edges.is_empty() {
        0.0
    } else {
        let mean = edges.iter().map(|e| e.distance).sum::<f64>() / edges.len() as f64;
        if mean > 0.0 {
            1.0 / (2.0 * mean)
        } else {
            0.0
        }
    };
    Ok(ComponentGraph {
        components: comps.clone(),
        edges,
        beta,
    })
}

/// Pixels of a blob with at least one 4-neighbour outside it. The nearest
/// blob pixel to any point whose rounded position is off the blob is always
/// one of these.
fn boundary_pixels(blob: &Component, owner: &Array2<usize>) -> Vec<(usize, usize)> {
    let (h, w) = owner.dim();
    let outside = |r: usize, c: usize| owner[[r, c]] != blob.id;
    blob.pixels
        .iter()
        .copied()
        .filter(|&(r, c)| {
            r == 0 || c == 0 || r + 1 == h || c + 1 == w || outside(r - 1, c) || outside(r + 1, c) || outside(r, c - 1) || outside(r, c + 1)
        })
        .collect()
}

/// `D(c, l)` for every component and blob, row per component.
pub fn data_cost_matrix(comps: &ComponentSet, blobs: &BlobLineMap) -> Result<Vec<Vec<f64>>> {
    let (h, w) = blobs.mask.dim();
    let mut owner = Array2::from_elem((h, w), usize::MAX);
    for b in &blobs.blobs {
        if b.pixels.is_empty() {
            return Err(Error::EmptyBlob(b.id));
        }
        for &p in &b.pixels {
            owner[p] = b.id;
        }
    }
    let boundaries: Vec<Vec<(usize, usize)>> = blobs.blobs.iter().map(|b| boundary_pixels(b, &owner)).collect();
    Ok(comps
        .iter()
        .map(|c| {
            let rounded = (c.centroid.0.round(), c.centroid.1.round());
            let on = if rounded.0 >= 0.0 && rounded.1 >= 0.0 && (rounded.0 as usize) < h && (rounded.1 as usize) < w {
                owner[[rounded.0 as usize, rounded.1 as usize]]
            } else {
                usize::MAX
            };
            boundaries
                .iter()
                .enumerate()
                .map(|(l, bd)| {
                    if on == l {
                        0.0
                    } else {
                        bd.iter()
                            .map(|&(r, col)| distance(c.centroid, (r as f64, col as f64)))
                            .fold(f64::INFINITY, f64::min)
                    }
                })
                .collect()
        })
        .collect())
}

/// Energy of a labelling given precomputed unary costs and edge weights.
pub fn labelling_energy(unary: &[Vec<f64>], edges: &[(usize, usize, f64)], labels: &[usize]) -> f64 {
    let data: f64 = labels.iter().enumerate().map(|(c, &l)| unary[c][l]).sum();
    let smooth: f64 = edges
        .iter()
        .filter(|&&(a, b, _)| labels[a] != labels[b])
        .map(|&(_, _, w)| w)
        .sum();
    data + smooth
}

/// Recompute the energy of `assignment` from the geometry.
pub fn total_energy(graph: &ComponentGraph, blobs: &BlobLineMap, assignment: &[usize]) -> Result<f64> {
    let n = graph.components.len();
    if assignment.len() < n {
        return Err(Error::Unassigned(assignment.len()));
    }
    let mut energy = 0.0;
    for (c, &l) in graph.components.iter().zip(assignment) {
        let blob = blobs.blobs.get(l).ok_or(Error::Unassigned(c.id))?;
        energy += data_cost(c, blob)?;
    }
    for e in &graph.edges {
        if assignment[e.a] != assignment[e.b] {
            energy += graph.weight(e);
        }
    }
    Ok(energy)
}

/// Each component to its cheapest label; ties go to the lower label.
pub fn nearest_assignment(unary: &[Vec<f64>]) -> Vec<usize> {
    unary
        .iter()
        .map(|row| {
            let mut best = 0;
            for (l, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Dinic max-flow on real capacities.
struct FlowGraph {
    head: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
}

const FLOW_EPS: f64 = 1e-12;

impl FlowGraph {
    fn new(n: usize) -> Self {
        Self {
            head: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        self.head[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(cap);
        self.head[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(rev_cap);
    }

    fn levels(&self, s: usize) -> Vec<i64> {
        let mut level = vec![-1; self.head.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.head[u] {
                let v = self.to[e];
                if self.cap[e] > FLOW_EPS && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, t: usize, pushed: f64, level: &[i64], next: &mut [usize]) -> f64 {
        if u == t {
            return pushed;
        }
        while next[u] < self.head[u].len() {
            let e = self.head[u][next[u]];
            let v = self.to[e];
            if self.cap[e] > FLOW_EPS && level[v] == level[u] + 1 {
                let f = self.augment(v, t, pushed.min(self.cap[e]), level, next);
                if f > 0.0 {
                    self.cap[e] -= f;
                    self.cap[e ^ 1] += f;
                    return f;
                }
            }
            next[u] += 1;
        }
        0.0
    }

    /// Run max-flow and return, per node, whether it stays on the source side.
    fn min_cut(&mut self, s: usize, t: usize) -> Vec<bool> {
        loop {
            let level = self.levels(s);
            if level[t] < 0 {
                return level.iter().map(|&l| l >= 0).collect();
            }
            let mut next = vec![0; self.head.len()];
            while self.augment(s, t, f64::INFINITY, &level, &mut next) > 0.0 {}
        }
    }
}

/// Best labelling reachable from `labels` in one alpha-expansion move.
fn expansion_move(unary: &[Vec<f64>], edges: &[(usize, usize, f64)], labels: &[usize], alpha: usize) -> Vec<usize> {
    let n = labels.len();
    let (s, t) = (n, n + 1);
    // u0: cost of keeping the current label, u1: cost of switching to alpha.
    let mut u0: Vec<f64> = (0..n).map(|c| unary[c][labels[c]]).collect();
    let mut u1: Vec<f64> = (0..n).map(|c| unary[c][alpha]).collect();
    let mut graph = FlowGraph::new(n + 2);
    for &(p, q, w) in edges {
        let differ = |x: usize, y: usize| if x != y { w } else { 0.0 };
        let a = differ(labels[p], labels[q]);
        let b = differ(labels[p], alpha);
        let c = differ(alpha, labels[q]);
        // E(x_p, x_q) = A + (C-A) x_p + (D-C) x_q + (B+C-A-D)(1-x_p) x_q, D = 0
        u0[p] += a;
        u1[p] += c;
        u1[q] -= c;
        let coupling = b + c - a;
        if coupling > 0.0 {
            graph.add_edge(p, q, coupling, 0.0);
        }
    }
    for v in 0..n {
        let m = u0[v].min(u1[v]);
        let (c0, c1) = (u0[v] - m, u1[v] - m);
        if c1 > 0.0 {
            graph.add_edge(s, v, c1, 0.0);
        }
        if c0 > 0.0 {
            graph.add_edge(v, t, c0, 0.0);
        }
    }
    let source_side = graph.min_cut(s, t);
    (0..n)
        .map(|v| if source_side[v] { labels[v] } else { alpha })
        .collect()
}

/// Approximate minimiser of the labelling energy. Starts from the nearest
/// assignment and expands labels in order until a full sweep makes no
/// strict improvement. Two labels are solved exactly.
pub fn alpha_expansion(unary: &[Vec<f64>], edges: &[(usize, usize, f64)], n_labels: usize, max_sweeps: usize) -> Vec<usize> {
    let nearest = nearest_assignment(unary);
    if n_labels <= 1 || unary.is_empty() {
        return nearest;
    }
    let nearest_energy = labelling_energy(unary, edges, &nearest);
    if n_labels == 2 {
        let exact = expansion_move(unary, edges, &vec![0; unary.len()], 1);
        return if labelling_energy(unary, edges, &exact) < nearest_energy - 1e-12 * nearest_energy.abs().max(1.0) {
            exact
        } else {
            nearest
        };
    }
    let mut labels = nearest;
    let mut energy = nearest_energy;
    for _ in 0..max_sweeps.max(1) {
        let mut improved = false;
        for alpha in 0..n_labels {
            let candidate = expansion_move(unary, edges, &labels, alpha);
            let e = labelling_energy(unary, edges, &candidate);
            if e < energy - 1e-12 * energy.abs().max(1.0) {
                labels = candidate;
                energy = e;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineLabeling {
    /// Blob id per component id.
    pub assignment: Vec<usize>,
    pub energy: f64,
    /// 0 = background, k = blob k-1.
    pub pixel_labels: Array2<u16>,
}

pub fn extract_lines(page: &BinarizedPage, blobs: &BlobLineMap, comps: &ComponentSet, k: usize) -> Result<LineLabeling> {
    extract_lines_with(
        page,
        blobs,
        comps,
        &ExtractConfig {
            k,
            ..Default::default()
        },
    )
}

pub fn extract_lines_with(page: &BinarizedPage, blobs: &BlobLineMap, comps: &ComponentSet, cfg: &ExtractConfig) -> Result<LineLabeling> {
    if blobs.is_empty() {
        return Err(Error::NoLabels);
    }
    if blobs.blobs.len() > u16::MAX as usize {
        return Err(Error::InvalidGeometry(format!("{} blob lines exceed the label range", blobs.len())));
    }
    if blobs.mask.dim() != page.dims() {
        return Err(Error::SizeMismatch {
            expected: page.dims(),
            actual: blobs.mask.dim(),
            index: None,
        });
    }
    let mut graph = build_component_graph(comps, cfg.k)?;
    if let Some(beta) = cfg.beta {
        graph.beta = beta;
    }
    let unary = data_cost_matrix(comps, blobs)?;
    let edges = graph.weighted_edges();
    let assignment = alpha_expansion(&unary, &edges, blobs.len(), cfg.max_sweeps);

    let mut pixel_labels = Array2::zeros(page.dims());
    for (c, &l) in comps.iter().zip(&assignment) {
        for &p in &c.pixels {
            pixel_labels[p] = (l + 1) as u16;
        }
    }
    let energy = labelling_energy(&unary, &edges, &assignment);
    Ok(LineLabeling {
        assignment,
        energy,
        pixel_labels,
    })
}
