//! Back-projection from Pool3 feature maps to genes: pick each sample's
//! strongest map, take its top-fraction pixels, map every gene rectangle's
//! center to the pool pixel whose projected square contains it, and count
//! selections across samples.

use crate::cnn::Tensor;
use crate::treemap::TreemapLayout;
use crate::util::atomic_write;
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("pool side {pool} does not cover pixel ({row}, {col})")]
    InconsistentSides { pool: usize, row: usize, col: usize },
    #[error("report row {0}: {1}")]
    BadRow(usize, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One gene rectangle with its owning pool pixel and how often that pixel
/// was selected across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub kegg_id: String,
    pub copy_index: u32,
    pub annotation_path: Vec<String>,
    pub center: (f64, f64),
    pub pool_pixel: (usize, usize),
    pub selection_count: u32,
    pub n_samples: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    pub rows: Vec<ReportRow>,
}

/// Channel with the largest sum of pixel intensities; ties go to the
/// lowest channel index.
pub fn strongest_feature_map(maps: &Tensor) -> (usize, Vec<f64>) {
    let c = maps.c;
    let mut sums = vec![0.0; c];
    for pixel in maps.data.chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(pixel) {
            *s += v;
        }
    }
    // Strictly-greater scan keeps the lowest channel index on ties.
    let mut channel = 0;
    for (i, &s) in sums.iter().enumerate().skip(1) {
        if s > sums[channel] {
            channel = i;
        }
    }
    let map: Vec<f64> =
        maps.data.iter().skip(channel).step_by(c).copied().collect();
    (channel, map)
}

/// The `floor(frac * h * w)` highest pixels, ordered by intensity
/// descending with (row, col) ascending on ties. An identically zero map
/// selects nothing.
pub fn top_fraction_pixels(map: &[f64], h: usize, w: usize, frac: f64) -> Vec<(usize, usize)> {
    assert!(frac > 0.0 && frac <= 1.0, "fraction in (0, 1]");
    assert_eq!(map.len(), h * w);
    if map.iter().all(|&v| v == 0.0) {
        return Vec::new();
    }
    let k = ((h * w) as f64 * frac).floor() as usize;
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| (i / w, i % w)).collect()
}

/// Pool pixel (i, j) owns the half-open square
/// `[j*PR, (j+1)*PR) x [i*PR, (i+1)*PR)` in layout coordinates, with
/// `PR = side / pool_side`; rows map to y and columns to x. Every leaf
/// center falls in exactly one square; a leaf's selection count is the
/// number of samples whose selected-pixel set contains its owner.
pub fn project_to_genes(
    selected: &[Vec<(usize, usize)>],
    layout: &TreemapLayout,
    pool_side: usize,
) -> Result<AttributionReport, AttributionError> {
    if pool_side == 0 {
        return Err(AttributionError::InconsistentSides { pool: 0, row: 0, col: 0 });
    }
    for pixels in selected {
        for &(row, col) in pixels {
            if row >= pool_side || col >= pool_side {
                return Err(AttributionError::InconsistentSides { pool: pool_side, row, col });
            }
        }
    }
    let ratio = layout.side / pool_side as f64;
    let sets: Vec<HashSet<(usize, usize)>> =
        selected.iter().map(|pixels| pixels.iter().copied().collect()).collect();
    let rows = layout
        .entries
        .iter()
        .map(|entry| {
            let (cx, cy) = entry.center;
            let col = ((cx / ratio).floor() as usize).min(pool_side - 1);
            let row = ((cy / ratio).floor() as usize).min(pool_side - 1);
            let selection_count =
                sets.iter().filter(|set| set.contains(&(row, col))).count() as u32;
            ReportRow {
                kegg_id: entry.kegg_id.clone(),
                copy_index: entry.copy_index,
                annotation_path: entry.annotation_path.clone(),
                center: entry.center,
                pool_pixel: (row, col),
                selection_count,
                n_samples: selected.len() as u32,
            }
        })
        .collect();
    Ok(AttributionReport { rows })
}

/// Report TSV, sorted by selection count descending then gene id and copy
/// ascending. Coordinates at 6 decimals.
pub fn export_report(report: &AttributionReport, path: &Path) -> Result<(), AttributionError> {
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| {
        b.selection_count
            .cmp(&a.selection_count)
            .then_with(|| a.kegg_id.cmp(&b.kegg_id))
            .then_with(|| a.copy_index.cmp(&b.copy_index))
    });
    let mut out = String::from(
        "kegg_id\tcopy_index\tpath_level1\tpath_level2\tpath_level3\tpath_level4\t\
         center_x\tcenter_y\tpool_row\tpool_col\tselection_count\tn_samples\n",
    );
    for (i, row) in rows.iter().enumerate() {
        if row.annotation_path.len() != 4 {
            return Err(AttributionError::BadRow(
                i,
                format!("{} path levels, expected 4", row.annotation_path.len()),
            ));
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\n",
            row.kegg_id,
            row.copy_index,
            row.annotation_path[0],
            row.annotation_path[1],
            row.annotation_path[2],
            row.annotation_path[3],
            row.center.0,
            row.center.1,
            row.pool_pixel.0,
            row.pool_pixel.1,
            row.selection_count,
            row.n_samples,
        ));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<AttributionReport, AttributionError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 12 {
            return Err(AttributionError::BadRow(i, format!("{} columns", cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| AttributionError::BadRow(i, e.to_string()));
        let int =
            |s: &str| s.parse::<u32>().map_err(|e| AttributionError::BadRow(i, e.to_string()));
        rows.push(ReportRow {
            kegg_id: cells[0].to_string(),
            copy_index: int(cells[1])?,
            annotation_path: cells[2..6].iter().map(|s| s.to_string()).collect(),
            center: (num(cells[6])?, num(cells[7])?),
            pool_pixel: (int(cells[8])? as usize, int(cells[9])? as usize),
            selection_count: int(cells[10])?,
            n_samples: int(cells[11])?,
        });
    }
    Ok(AttributionReport { rows })
}
