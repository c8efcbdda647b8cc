use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity::Eight
    }
}

/// Bounding box as (top, left, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub id: usize,
    /// (row, col) pairs in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// (row, col) mean of the pixel coordinates.
    pub centroid: (f64, f64),
    pub bbox: BBox,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentSet {
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Component> {
        self.components.iter()
    }
}

/// Label the foreground of `mask`. Components are sorted by the (top, left)
/// corner of their bounding box and numbered densely from 0.
pub fn label_components(mask: &Array2<bool>, connectivity: Connectivity) -> ComponentSet {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            seen[[r, c]] = true;
            stack.push((r, c));
            let mut pixels = Vec::new();
            while let Some((pr, pc)) = stack.pop() {
                pixels.push((pr, pc));
                for (nr, nc) in neighbours(pr, pc, h, w, connectivity) {
                    if mask[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            pixels.sort_unstable();
            components.push(build_component(pixels));
        }
    }

    components.sort_by_key(|c| (c.bbox.top, c.bbox.left, c.pixels[0]));
    for (i, comp) in components.iter_mut().enumerate() {
        comp.id = i;
    }
    ComponentSet { components }
}

fn build_component(pixels: Vec<(usize, usize)>) -> Component {
    let n = pixels.len() as f64;
    let (mut sr, mut sc) = (0.0, 0.0);
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for &(r, c) in &pixels {
        sr += r as f64;
        sc += c as f64;
        top = top.min(r);
        left = left.min(c);
        bottom = bottom.max(r);
        right = right.max(c);
    }
    Component {
        id: 0,
        centroid: (sr / n, sc / n),
        bbox: BBox {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        },
        pixels,
    }
}

pub fn neighbours(
    r: usize,
    c: usize,
    h: usize,
    w: usize,
    connectivity: Connectivity,
) -> impl Iterator<Item = (usize, usize)> {
    const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const EIGHT: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    let offsets: &'static [(isize, isize)] = match connectivity {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    };
    offsets.iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}
