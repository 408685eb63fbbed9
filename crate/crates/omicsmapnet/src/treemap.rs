//! Fixed-geometry treemap layout. Every gene leaf gets an equal-area
//! rectangle via the ordered pivot method (pivot-by-middle, longer-side
//! splits), category rectangles tile their parents exactly, and the whole
//! layout is a pure function of the tree, the sort key, and the side
//! length, so all samples share one geometry.

use crate::hierarchy::HierarchyTree;
use crate::util::atomic_write;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreemapError {
    #[error("weight {0} is not positive and finite")]
    NonPositiveWeight(f64),
    #[error("tree has no gene leaves")]
    EmptyTree,
    #[error("entry {0} has {1} path levels, expected 4")]
    PathDepth(String, usize),
    #[error("bad layout json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle, half-open on both axes: a point belongs to it
/// iff `x0 <= x < x1` and `y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    pub fn aspect(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        (w / h).max(h / w)
    }
}

/// One gene rectangle in the frozen layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub kegg_id: String,
    pub copy_index: u32,
    pub annotation_path: Vec<String>,
    pub rect: Rect,
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRect {
    pub path: Vec<String>,
    pub level: u8,
    pub rect: Rect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreemapLayout {
    pub side: f64,
    pub entries: Vec<LayoutEntry>,
    pub category_rects: Vec<CategoryRect>,
}

impl TreemapLayout {
    pub fn worst_aspect(&self) -> f64 {
        self.entries.iter().map(|e| e.rect.aspect()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, TreemapError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Split `rect` along its longer side into two parts sized `frac` and
/// `1 - frac`. The shared boundary is computed once so the parts tile the
/// rect exactly.
fn split_two(rect: Rect, frac: f64) -> (Rect, Rect) {
    if rect.width() >= rect.height() {
        let mid = rect.x0 + rect.width() * frac;
        (Rect { x1: mid, ..rect }, Rect { x0: mid, ..rect })
    } else {
        let mid = rect.y0 + rect.height() * frac;
        (Rect { y1: mid, ..rect }, Rect { y0: mid, ..rect })
    }
}

fn partition_into(weights: &[f64], rect: Rect, out: &mut [Rect]) {
    let n = weights.len();
    match n {
        0 => return,
        1 => {
            out[0] = rect;
            return;
        }
        2 => {
            let frac = weights[0] / (weights[0] + weights[1]);
            let (a, b) = split_two(rect, frac);
            out[0] = a;
            out[1] = b;
            return;
        }
        _ => {}
    }

    let total: f64 = weights.iter().sum();
    let pivot = n / 2;
    let w1: f64 = weights[..pivot].iter().sum();
    let wp = weights[pivot];

    // Split direction: slabs run across the longer side; the pivot sits at
    // the start of the middle slab along the perpendicular axis.
    let horizontal = rect.width() >= rect.height();
    let (main_len, cross_len) =
        if horizontal { (rect.width(), rect.height()) } else { (rect.height(), rect.width()) };

    // Choose how much of the tail joins the pivot's slab: the split that
    // makes the pivot rectangle most nearly square wins, ties to the
    // shorter tail.
    let mut best_k = pivot;
    let mut best_aspect = f64::INFINITY;
    let mut w2_running = 0.0;
    for k in pivot..n {
        if k > pivot {
            w2_running += weights[k];
        }
        let slab = main_len * (wp + w2_running) / total;
        let pivot_cross = cross_len * wp / (wp + w2_running);
        let aspect = (slab / pivot_cross).max(pivot_cross / slab);
        if aspect < best_aspect {
            best_aspect = aspect;
            best_k = k;
        }
    }
    let w2: f64 = weights[pivot + 1..=best_k].iter().sum();

    let (lo, hi) = if horizontal { (rect.x0, rect.x1) } else { (rect.y0, rect.y1) };
    let b1 = lo + main_len * (w1 / total);
    let b2 = if best_k == n - 1 { hi } else { lo + main_len * ((w1 + wp + w2) / total) };
    let (slab1, middle, slab3) = if horizontal {
        (
            Rect { x1: b1, ..rect },
            Rect { x0: b1, x1: b2, ..rect },
            Rect { x0: b2, ..rect },
        )
    } else {
        (
            Rect { y1: b1, ..rect },
            Rect { y0: b1, y1: b2, ..rect },
            Rect { y0: b2, ..rect },
        )
    };

    partition_into(&weights[..pivot], slab1, &mut out[..pivot]);
    if best_k == pivot {
        out[pivot] = middle;
    } else {
        // Perpendicular split of the middle slab: pivot first, then its tail.
        let frac = wp / (wp + w2);
        let (pivot_rect, tail_rect) = if horizontal {
            let mid = middle.y0 + middle.height() * frac;
            (Rect { y1: mid, ..middle }, Rect { y0: mid, ..middle })
        } else {
            let mid = middle.x0 + middle.width() * frac;
            (Rect { x1: mid, ..middle }, Rect { x0: mid, ..middle })
        };
        out[pivot] = pivot_rect;
        partition_into(&weights[pivot + 1..=best_k], tail_rect, &mut out[pivot + 1..=best_k]);
    }
    partition_into(&weights[best_k + 1..], slab3, &mut out[best_k + 1..]);
}

/// Ordered pivot partition: one rectangle per weight, in input order, each
/// with the weight's share of the rect's area.
pub fn pivot_partition(weights: &[f64], rect: Rect) -> Result<Vec<Rect>, TreemapError> {
    for &w in weights {
        if !(w > 0.0 && w.is_finite()) {
            return Err(TreemapError::NonPositiveWeight(w));
        }
    }
    let mut out = vec![rect; weights.len()];
    partition_into(weights, rect, &mut out);
    Ok(out)
}

/// Lay out the annotated tree: category weights are leaf-descendant
/// counts, every leaf weighs 1, and within each deepest category leaves
/// are ordered by `sort_key` descending with gene-id ties ascending.
pub fn build_layout<F: Fn(&str) -> f64>(
    tree: &HierarchyTree,
    sort_key: F,
    side: f64,
) -> Result<TreemapLayout, TreemapError> {
    if tree.leaf_count() == 0 {
        return Err(TreemapError::EmptyTree);
    }
    let root_rect = Rect { x0: 0.0, y0: 0.0, x1: side, y1: side };
    let mut layout =
        TreemapLayout { side, entries: Vec::new(), category_rects: Vec::new() };

    fn walk<F: Fn(&str) -> f64>(
        node: &crate::hierarchy::HierarchyNode,
        path: &mut Vec<String>,
        rect: Rect,
        sort_key: &F,
        layout: &mut TreemapLayout,
    ) -> Result<(), TreemapError> {
        path.push(node.label.clone());
        layout.category_rects.push(CategoryRect {
            path: path.clone(),
            level: node.level,
            rect,
        });

        // Units: child categories with at least one leaf below them, in
        // sibling order, then the node's own leaves in sort order.
        let children: Vec<&crate::hierarchy::HierarchyNode> =
            node.children.iter().filter(|c| c.leaf_count() > 0).collect();
        let mut leaves: Vec<&crate::hierarchy::GeneLeaf> = node.gene_leaves.iter().collect();
        leaves.sort_by(|a, b| {
            sort_key(&b.kegg_id)
                .total_cmp(&sort_key(&a.kegg_id))
                .then_with(|| a.kegg_id.cmp(&b.kegg_id))
        });

        let mut weights: Vec<f64> = children.iter().map(|c| c.leaf_count() as f64).collect();
        weights.extend(std::iter::repeat(1.0).take(leaves.len()));
        let rects = pivot_partition(&weights, rect)?;

        for (child, child_rect) in children.iter().zip(&rects) {
            walk(child, path, *child_rect, sort_key, layout)?;
        }
        for (leaf, leaf_rect) in leaves.iter().zip(&rects[children.len()..]) {
            layout.entries.push(LayoutEntry {
                kegg_id: leaf.kegg_id.clone(),
                copy_index: 0,
                annotation_path: path.clone(),
                rect: *leaf_rect,
                center: leaf_rect.center(),
            });
        }
        path.pop();
        Ok(())
    }

    walk(&tree.root, &mut Vec::new(), root_rect, &sort_key, &mut layout)?;

    // Copies of one gene are numbered in layout order.
    let mut counters: std::collections::HashMap<String, u32> = std::collections::HashMap::new();
    for entry in &mut layout.entries {
        let c = counters.entry(entry.kegg_id.clone()).or_insert(0);
        entry.copy_index = *c;
        *c += 1;
    }
    Ok(layout)
}

/// Structure table: one row per gene rectangle with its annotation path and
/// coordinates at 6 decimal places, in layout order.
pub fn export_structure(layout: &TreemapLayout, path: &Path) -> Result<(), TreemapError> {
    let mut out = String::from(
        "kegg_id\tcopy_index\tpath_level1\tpath_level2\tpath_level3\tpath_level4\tx0\ty0\tx1\ty1\n",
    );
    for entry in &layout.entries {
        if entry.annotation_path.len() != 4 {
            return Err(TreemapError::PathDepth(
                entry.kegg_id.clone(),
                entry.annotation_path.len(),
            ));
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            entry.kegg_id,
            entry.copy_index,
            entry.annotation_path[0],
            entry.annotation_path[1],
            entry.annotation_path[2],
            entry.annotation_path[3],
            entry.rect.x0,
            entry.rect.y0,
            entry.rect.x1,
            entry.rect.y1,
        ));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureRow {
    pub kegg_id: String,
    pub copy_index: u32,
    pub path: Vec<String>,
    pub rect: Rect,
}

pub fn read_structure(path: &Path) -> Result<Vec<StructureRow>, TreemapError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 10 {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        rows.push(StructureRow {
            kegg_id: cells[0].to_string(),
            copy_index: cells[1].parse().unwrap_or(0),
            path: cells[2..6].iter().map(|s| s.to_string()).collect(),
            rect: Rect {
                x0: parse(cells[6]),
                y0: parse(cells[7]),
                x1: parse(cells[8]),
                y1: parse(cells[9]),
            },
        });
    }
    Ok(rows)
}
