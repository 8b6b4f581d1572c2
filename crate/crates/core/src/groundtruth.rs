//! Supervision targets rendered from dot annotations.
//!
//! Density maps place a normalized Gaussian (sigma 4, 15x15) on every head;
//! confidence masks paste a 15x15 ones template. Both are rendered at full
//! resolution and reduced to the network's output grid by block sum / block
//! max so the total mass and head coverage survive.

use log::warn;

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

pub const KERNEL_SIZE: usize = 15;
pub const KERNEL_SIGMA: f64 = 4.0;
pub const DEFAULT_GROUPS: usize = 5;

/// Head positions in full-resolution pixel coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DotAnnotation {
    /// `(x, y)` = (column, row).
    pub points: Vec<(f64, f64)>,
}

impl DotAnnotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Clamps every point into `[0, W) x [0, H)`; returns how many moved.
    pub fn clip_to(&mut self, h: usize, w: usize) -> usize {
        let max_x = (w as f64 - 1.0).max(0.0);
        let max_y = (h as f64 - 1.0).max(0.0);
        let mut clipped = 0;
        for (x, y) in &mut self.points {
            let (cx, cy) = (x.clamp(0.0, max_x), y.clamp(0.0, max_y));
            if cx != *x || cy != *y {
                clipped += 1;
                *x = cx;
                *y = cy;
            }
        }
        if clipped > 0 {
            warn!("clipped {clipped} annotation point(s) to the {w}x{h} image");
        }
        clipped
    }

    /// Integer pixel of each point, rounded and clamped into the raster.
    pub fn pixels(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.points.iter().map(move |&(x, y)| {
            let r = (y.round().max(0.0) as usize).min(h - 1);
            let c = (x.round().max(0.0) as usize).min(w - 1);
            (r, c)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    /// `[1, H', W']`.
    pub values: Tensor,
    pub resolution_divisor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    /// `[1, H', W']`, every value exactly 0 or 1.
    pub values: Tensor,
    pub resolution_divisor: usize,
}

impl DensityMap {
    pub fn count(&self) -> f64 {
        self.values.sum()
    }
}

impl ConfidenceMask {
    /// Fraction of ones.
    pub fn foreground_fraction(&self) -> f64 {
        self.values.sum() / self.values.len() as f64
    }
}

/// Equal-width crowd-count groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBins {
    pub edges: Vec<f64>,
}

impl GroupBins {
    pub fn groups(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin index of `count`; counts outside the range clamp to the end bins.
    pub fn quantize(&self, count: f64) -> usize {
        let k = self.groups();
        let lo = self.edges[0];
        let hi = self.edges[k];
        if count <= lo {
            return 0;
        }
        let width = (hi - lo) / k as f64;
        (((count - lo) / width).floor() as usize).min(k - 1)
    }
}

/// A `size x size` isotropic Gaussian sampled at integer offsets and scaled
/// to unit sum.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size.is_multiple_of(2) {
        return arg_err(format!("kernel size must be odd and positive, got {size}"));
    }
    if !(sigma > 0.0) {
        return arg_err(format!("sigma must be positive, got {sigma}"));
    }
    let half = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 - half, c as f64 - half);
            data.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(&[size, size], data)
}

/// Clipped kernel window for a point at `(r, c)`: image rows/cols covered and
/// the matching kernel offsets.
struct Footprint {
    rows: (usize, usize),
    cols: (usize, usize),
    k_row0: usize,
    k_col0: usize,
}

fn footprint(r: usize, c: usize, h: usize, w: usize, size: usize) -> Footprint {
    let half = size / 2;
    let r0 = r.saturating_sub(half);
    let c0 = c.saturating_sub(half);
    Footprint {
        rows: (r0, (r + half + 1).min(h)),
        cols: (c0, (c + half + 1).min(w)),
        k_row0: r0 + half - r,
        k_col0: c0 + half - c,
    }
}

/// Sum of unit-mass Gaussians, one per point. Kernels overhanging the border
/// are renormalized over their visible part, so the map sums to the count.
pub fn render_density(annotation: &DotAnnotation, h: usize, w: usize) -> Result<DensityMap> {
    if h == 0 || w == 0 {
        return arg_err("raster extents must be positive");
    }
    let kernel = gaussian_kernel(KERNEL_SIZE, KERNEL_SIGMA)?;
    let kd = kernel.data();
    let mut out = vec![0.0; h * w];
    for (r, c) in annotation.pixels(h, w) {
        let fp = footprint(r, c, h, w, KERNEL_SIZE);
        let mut visible = 0.0;
        for y in fp.rows.0..fp.rows.1 {
            for x in fp.cols.0..fp.cols.1 {
                visible += kd[(fp.k_row0 + y - fp.rows.0) * KERNEL_SIZE + fp.k_col0 + x - fp.cols.0];
            }
        }
        for y in fp.rows.0..fp.rows.1 {
            for x in fp.cols.0..fp.cols.1 {
                let kv = kd[(fp.k_row0 + y - fp.rows.0) * KERNEL_SIZE + fp.k_col0 + x - fp.cols.0];
                out[y * w + x] += kv / visible;
            }
        }
    }
    Ok(DensityMap {
        values: Tensor::new(&[1, h, w], out)?,
        resolution_divisor: 1,
    })
}

/// Binary map with a 15x15 ones square (clipped at borders) on every point.
pub fn render_mask(annotation: &DotAnnotation, h: usize, w: usize) -> Result<ConfidenceMask> {
    if h == 0 || w == 0 {
        return arg_err("raster extents must be positive");
    }
    let mut out = vec![0.0; h * w];
    for (r, c) in annotation.pixels(h, w) {
        let fp = footprint(r, c, h, w, KERNEL_SIZE);
        for y in fp.rows.0..fp.rows.1 {
            out[y * w + fp.cols.0..y * w + fp.cols.1].fill(1.0);
        }
    }
    Ok(ConfidenceMask {
        values: Tensor::new(&[1, h, w], out)?,
        resolution_divisor: 1,
    })
}

fn block_reduce(t: &Tensor, factor: usize, init: f64, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![init; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(ch * oh + y / factor) * ow + x / factor];
                *o = f(*o, t.data()[(ch * h + y) * w + x]);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Non-overlapping `factor x factor` block sums; partial edge blocks are
/// summed as they are.
pub fn downsample_density(d: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor < 1 {
        return arg_err("downsample factor must be at least 1");
    }
    Ok(DensityMap {
        values: block_reduce(&d.values, factor, 0.0, |a, b| a + b)?,
        resolution_divisor: d.resolution_divisor * factor,
    })
}

/// Non-overlapping block max: any covered pixel keeps its block at 1.
pub fn downsample_mask(m: &ConfidenceMask, factor: usize) -> Result<ConfidenceMask> {
    if factor < 1 {
        return arg_err("downsample factor must be at least 1");
    }
    Ok(ConfidenceMask {
        values: block_reduce(&m.values, factor, 0.0, f64::max)?,
        resolution_divisor: m.resolution_divisor * factor,
    })
}

/// `k` equal-width bins spanning `[min, max]` of the training counts.
pub fn compute_bins(train_counts: &[usize], k: usize) -> Result<GroupBins> {
    if k < 2 {
        return arg_err(format!("need at least 2 groups, got {k}"));
    }
    let (Some(&lo), Some(&hi)) = (train_counts.iter().min(), train_counts.iter().max()) else {
        return arg_err("no training counts");
    };
    if lo == hi {
        return Err(Error::DegenerateRange(lo as f64));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let width = (hi - lo) / k as f64;
    let mut edges: Vec<f64> = (0..k).map(|i| lo + i as f64 * width).collect();
    edges.push(hi);
    Ok(GroupBins { edges })
}

/// Like [`compute_bins`], but a degenerate range falls back to a single
/// group around the shared count.
pub fn compute_bins_or_single(train_counts: &[usize], k: usize) -> Result<GroupBins> {
    match compute_bins(train_counts, k) {
        Err(Error::DegenerateRange(c)) => {
            warn!("all training counts equal {c}; using a single count group");
            Ok(GroupBins {
                edges: vec![c - 0.5, c + 0.5],
            })
        }
        other => other,
    }
}

pub fn quantize_group(count: usize, bins: &GroupBins) -> usize {
    bins.quantize(count as f64)
}
