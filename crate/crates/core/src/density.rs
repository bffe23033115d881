//! Gaussian kernel density over 2D layouts and isoline extraction.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::layout::ProjectionLayout;

pub const DEFAULT_GRID: usize = 128;
pub const DEFAULT_LEVEL_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
const MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Bounds {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Bounds {
    /// Bounding box of `points` padded by 5% of its extent on every side. A
    /// zero extent borrows the other axis' extent, or 1 if both are zero.
    pub fn around(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        let (mut sx, mut sy) = (xmax - xmin, ymax - ymin);
        let fallback = if sx > 0.0 { sx } else if sy > 0.0 { sy } else { 1.0 };
        if sx <= 0.0 {
            sx = fallback;
            xmin -= sx / 2.0;
            xmax += sx / 2.0;
        }
        if sy <= 0.0 {
            sy = fallback;
            ymin -= sy / 2.0;
            ymax += sy / 2.0;
        }
        Ok(Self {
            xmin: xmin - MARGIN * sx,
            ymin: ymin - MARGIN * sy,
            xmax: xmax + MARGIN * sx,
            ymax: ymax + MARGIN * sy,
        })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.xmin && p[0] <= self.xmax && p[1] >= self.ymin && p[1] <= self.ymax
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(self.xmin, self.xmax), p[1].clamp(self.ymin, self.ymax)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DensityField {
    pub width: usize,
    pub height: usize,
    /// Row-major, row `r` at `y = ymin + r * dy`.
    pub values: Vec<f64>,
    pub bounds: Bounds,
    pub bandwidth: f64,
    pub weighted: bool,
}

impl DensityField {
    pub fn value(&self, c: usize, r: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn cell(&self) -> (f64, f64) {
        (
            (self.bounds.xmax - self.bounds.xmin) / (self.width - 1) as f64,
            (self.bounds.ymax - self.bounds.ymin) / (self.height - 1) as f64,
        )
    }

    pub fn node(&self, c: f64, r: f64) -> [f64; 2] {
        let (dx, dy) = self.cell();
        [self.bounds.xmin + c * dx, self.bounds.ymin + r * dy]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct KdeOptions {
    pub width: usize,
    pub height: usize,
    /// Kernel standard deviation; Scott's rule when absent.
    pub bandwidth: Option<f64>,
    /// Grid extent; padded bounding box of the points when absent.
    pub bounds: Option<Bounds>,
}

impl Default for KdeOptions {
    fn default() -> Self {
        Self {
            width: DEFAULT_GRID,
            height: DEFAULT_GRID,
            bandwidth: None,
            bounds: None,
        }
    }
}

/// Scott's rule `n^(-1/6) * sigma`, with `sigma` the mean of the two
/// per-axis sample standard deviations. Zero for fewer than two distinct points.
pub fn scott_bandwidth(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let sd = |axis: usize| {
        let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
        (points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (n as f64).powf(-1.0 / 6.0) * (sd(0) + sd(1)) / 2.0
}

/// Isotropic Gaussian KDE sampled on a grid. With weights, each kernel is
/// scaled by its weight and the sum divided by the total weight. When the
/// points have no spread the bandwidth falls back to 5% of the larger grid side.
pub fn kde_density(points: &[[f64; 2]], weights: Option<&[f64]>, opts: &KdeOptions) -> Result<DensityField> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if opts.width < 2 || opts.height < 2 {
        return Err(Error::InvalidArgument("density grid needs at least 2x2 nodes".into()));
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: w.len(),
                context: "density weights".into(),
            });
        }
        if let Some(index) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight { index });
        }
        if w.iter().any(|&v| v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument("density weights must be non-negative with a positive sum".into()));
        }
    }
    let bounds = match opts.bounds {
        Some(b) if points.iter().all(|&p| b.contains(p)) && b.xmax > b.xmin && b.ymax > b.ymin => b,
        Some(_) => return Err(Error::InvalidArgument("density bounds must enclose every point".into())),
        None => Bounds::around(points)?,
    };
    let h = match opts.bandwidth {
        Some(h) if h.is_finite() && h > 0.0 => h,
        Some(h) => return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}"))),
        None => {
            let s = scott_bandwidth(points);
            if s > 0.0 {
                s
            } else {
                MARGIN * (bounds.xmax - bounds.xmin).max(bounds.ymax - bounds.ymin)
            }
        }
    };
    let total: f64 = weights.map_or(points.len() as f64, |w| w.iter().sum());
    let norm = 1.0 / (2.0 * PI * h * h * total);
    let inv2h2 = 1.0 / (2.0 * h * h);
    let mut field = DensityField {
        width: opts.width,
        height: opts.height,
        values: vec![0.0; opts.width * opts.height],
        bounds,
        bandwidth: h,
        weighted: weights.is_some(),
    };
    let (dx, dy) = field.cell();
    // Separable kernel: exp(-(x^2 + y^2)/2h^2) = exp(-x^2/2h^2) exp(-y^2/2h^2).
    let mut kx = vec![0.0; opts.width];
    let mut ky = vec![0.0; opts.height];
    for (i, p) in points.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        for (c, k) in kx.iter_mut().enumerate() {
            let x = bounds.xmin + c as f64 * dx - p[0];
            *k = (-x * x * inv2h2).exp();
        }
        for (r, k) in ky.iter_mut().enumerate() {
            let y = bounds.ymin + r as f64 * dy - p[1];
            *k = w * norm * (-y * y * inv2h2).exp();
        }
        for (r, &yk) in ky.iter().enumerate() {
            let row = &mut field.values[r * opts.width..(r + 1) * opts.width];
            for (v, &xk) in row.iter_mut().zip(&kx) {
                *v += yk * xk;
            }
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourLevel {
    pub level: f64,
    /// Closed polylines: the first vertex is repeated at the end.
    pub polylines: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContourSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_id: Option<String>,
    pub levels: Vec<ContourLevel>,
}

/// Isolines of `field` at each level. Every level must lie strictly inside
/// the field's value range.
pub fn extract_contours(field: &DensityField, levels: &[f64]) -> Result<ContourSet> {
    let (min, max) = (field.min(), field.max());
    if let Some(&level) = levels.iter().find(|&&l| !(l > min && l < max)) {
        return Err(Error::LevelOutOfRange { level, min, max });
    }
    Ok(contours_unchecked(field, levels))
}

/// As [`extract_contours`], but out-of-range levels yield no polylines.
pub fn extract_contours_relaxed(field: &DensityField, levels: &[f64]) -> ContourSet {
    contours_unchecked(field, levels)
}

fn contours_unchecked(field: &DensityField, levels: &[f64]) -> ContourSet {
    ContourSet {
        set_id: None,
        levels: levels
            .iter()
            .map(|&level| ContourLevel {
                level,
                polylines: isolines(field, level),
            })
            .collect(),
    }
}

/// Edge of the padded grid: `(c, r, vertical)`; horizontal edges join
/// `(c, r)`-`(c+1, r)`, vertical ones `(c, r)`-`(c, r+1)`.
type EdgeKey = (i64, i64, bool);

/// Marching squares over the field surrounded by a ring of zeros so that every
/// isoline closes; vertices outside the bounds are clamped back onto them.
fn isolines(field: &DensityField, level: f64) -> Vec<Vec<[f64; 2]>> {
    let (w, h) = (field.width as i64, field.height as i64);
    let val = |c: i64, r: i64| -> f64 {
        if c < 0 || r < 0 || c >= w || r >= h {
            0.0
        } else {
            field.value(c as usize, r as usize)
        }
    };
    let above = |v: f64| v > level;
    let crossing = |a: (i64, i64), b: (i64, i64)| -> [f64; 2] {
        let (va, vb) = (val(a.0, a.1), val(b.0, b.1));
        let t = if vb != va { (level - va) / (vb - va) } else { 0.5 };
        let c = a.0 as f64 + t * (b.0 - a.0) as f64;
        let r = a.1 as f64 + t * (b.1 - a.1) as f64;
        field.bounds.clamp(field.node(c, r))
    };

    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    let mut points: HashMap<EdgeKey, [f64; 2]> = HashMap::new();
    for r in -1..h {
        for c in -1..w {
            // Corners counter-clockwise from bottom-left.
            let corners = [(c, r), (c + 1, r), (c + 1, r + 1), (c, r + 1)];
            let states: Vec<bool> = corners.iter().map(|&(x, y)| above(val(x, y))).collect();
            // Edges: bottom, right, top, left.
            let edges: [(EdgeKey, usize, usize); 4] = [
                ((c, r, false), 0, 1),
                ((c + 1, r, true), 1, 2),
                ((c, r + 1, false), 3, 2),
                ((c, r, true), 0, 3),
            ];
            let crossed: Vec<usize> = (0..4).filter(|&e| states[edges[e].1] != states[edges[e].2]).collect();
            for &e in &crossed {
                let (key, a, b) = edges[e];
                points.entry(key).or_insert_with(|| crossing(corners[a], corners[b]));
            }
            match crossed.len() {
                2 => segments.push((edges[crossed[0]].0, edges[crossed[1]].0)),
                4 => {
                    let center = corners.iter().map(|&(x, y)| val(x, y)).sum::<f64>() / 4.0;
                    if above(center) == states[0] {
                        // Bottom-left and top-right joined through the center.
                        segments.push((edges[0].0, edges[1].0));
                        segments.push((edges[2].0, edges[3].0));
                    } else {
                        segments.push((edges[0].0, edges[3].0));
                        segments.push((edges[1].0, edges[2].0));
                    }
                }
                _ => {}
            }
        }
    }

    let mut by_edge: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        by_edge.entry(*a).or_default().push(i);
        by_edge.entry(*b).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (first, mut cur) = segments[start];
        let mut line = vec![points[&first], points[&cur]];
        while cur != first {
            let Some(&next) = by_edge[&cur].iter().find(|&&s| !used[s]) else {
                break;
            };
            used[next] = true;
            let (a, b) = segments[next];
            cur = if a == cur { b } else { a };
            line.push(points[&cur]);
        }
        if line.first() != line.last() {
            let f = line[0];
            line.push(f);
        }
        out.push(line);
    }
    out
}

/// Levels at the given fractions of the field maximum.
pub fn fraction_levels(field: &DensityField, fractions: &[f64]) -> Vec<f64> {
    let max = field.max();
    fractions.iter().map(|f| f * max).collect()
}

/// One contour set per set id, each from a KDE over that set's members only.
/// All sets share the grid extent of the whole layout; the bandwidth follows
/// `opts` (Scott's rule on the members by default).
pub fn set_contours(
    dataset: &EmbeddingDataset,
    layout: &ProjectionLayout,
    opts: &KdeOptions,
    fractions: &[f64],
) -> Result<Vec<ContourSet>> {
    let bounds = match opts.bounds {
        Some(b) => b,
        None => Bounds::around(&layout.coords)?,
    };
    let mut out = Vec::new();
    for set in dataset.set_ids() {
        let coords: Vec<[f64; 2]> = dataset
            .set_members(&set)
            .into_iter()
            .filter_map(|i| layout.get(&dataset.points()[i].id))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let field = kde_density(&coords, None, &KdeOptions { bounds: Some(bounds), ..opts.clone() })?;
        let mut contours = extract_contours_relaxed(&field, &fraction_levels(&field, fractions));
        contours.set_id = Some(set);
        out.push(contours);
    }
    Ok(out)
}

/// Even-odd point-in-polygon test on a closed polyline.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}
