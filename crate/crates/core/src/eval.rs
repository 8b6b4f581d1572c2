//! Count metrics and prediction export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Raster, Scene};
use crate::error::{arg_err, Result};
use crate::groundtruth::{ConfidenceMask, DensityMap};
use crate::model::{CatCnn, Prediction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub gt_count: f64,
    pub est_count: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by scene id.
    pub rows: Vec<EvalRow>,
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
}

impl EvalReport {
    /// MAE and root-mean-square error over `(id, gt, est)` triples.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, f64, f64)>) -> Result<Self> {
        let mut rows: Vec<EvalRow> = counts
            .into_iter()
            .map(|(id, gt, est)| EvalRow {
                id,
                gt_count: gt,
                est_count: est,
                abs_error: (gt - est).abs(),
            })
            .collect();
        if rows.is_empty() {
            return arg_err("cannot evaluate an empty scene list");
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len() as f64;
        let mae = rows.iter().map(|r| r.abs_error).sum::<f64>() / n;
        let mse = (rows.iter().map(|r| r.abs_error * r.abs_error).sum::<f64>() / n).sqrt();
        Ok(Self { rows, mae, mse })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn summary_line(&self) -> String {
        format!("MAE={} MSE={}", self.mae, self.mse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,gt_count,est_count,abs_error\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.id, r.gt_count, r.est_count, r.abs_error).expect("string write");
        }
        s
    }
}

/// Counts every scene with `model` and aggregates the errors. The ground
/// truth is the number of annotated points.
pub fn evaluate(scenes: &[Scene], model: &CatCnn) -> Result<EvalReport> {
    if scenes.is_empty() {
        return arg_err("cannot evaluate an empty scene list");
    }
    let mut counts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let p = model.predict(&s.image)?;
        counts.push((s.id.clone(), s.count() as f64, p.count()));
    }
    EvalReport::from_counts(counts)
}

/// Fraction of the overlay taken by the colorized confidence.
pub const OVERLAY_ALPHA: f64 = 0.7;

/// Blue-to-red ramp for a value in `[0,1]`.
pub fn colorize(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// `0.3 * image + 0.7 * colorize(confidence)` as a `[3,H,W]` tensor. Gray
/// images are replicated across channels; the confidence is upsampled by
/// nearest neighbour to the image extent.
pub fn overlay(image: &Tensor, confidence: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let (_, ch, cw) = confidence.chw()?;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let cy = (y * ch / h).min(ch - 1);
            let cx = (x * cw / w).min(cw - 1);
            let color = colorize(confidence.at(0, cy, cx));
            for (k, col) in color.iter().enumerate() {
                let px = image.at(if c == 3 { k } else { 0 }, y, x);
                out[(k * h + y) * w + x] = (1.0 - OVERLAY_ALPHA) * px + OVERLAY_ALPHA * col;
            }
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Files written by [`export_prediction`].
#[derive(Debug, Clone)]
pub struct ExportedFiles {
    pub density_pgm: PathBuf,
    pub density_csv: PathBuf,
    pub confidence_pgm: Option<PathBuf>,
    pub overlay_ppm: Option<PathBuf>,
    /// Value mapped to 65535 in the density raster.
    pub density_scale: f64,
}

fn raster_csv(t: &Tensor) -> Result<String> {
    let (_, h, w) = t.chw()?;
    let mut s = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| t.at(0, y, x).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Parses a headerless CSV raster written by [`export_prediction`].
pub fn read_raster_csv(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect())
        .collect()
}

/// Writes `<stem>_density.pgm` (16-bit, scaled by the recorded max),
/// `<stem>_density.csv` (raw values) and `<stem>_density_scale.txt`.
/// Returns the two raster paths and the scale.
pub fn write_density(density: &Tensor, out_dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf, f64)> {
    fs::create_dir_all(out_dir)?;
    let scale = density.max().max(0.0);
    let scaled = if scale > 0.0 {
        density.map(|v| v / scale)
    } else {
        density.map(|_| 0.0)
    };
    let pgm = out_dir.join(format!("{stem}_density.pgm"));
    Raster::from_tensor(&scaled, u16::MAX)?.write(&pgm)?;
    let csv = out_dir.join(format!("{stem}_density.csv"));
    fs::write(&csv, raster_csv(density)?)?;
    fs::write(out_dir.join(format!("{stem}_density_scale.txt")), format!("max={scale}\n"))?;
    Ok((pgm, csv, scale))
}

/// Writes the target density (as [`write_density`]) and `<stem>_mask.pgm`
/// (8-bit, 0 or 255).
pub fn export_targets(density: &DensityMap, mask: &ConfidenceMask, out_dir: &Path, stem: &str) -> Result<PathBuf> {
    write_density(&density.values, out_dir, stem)?;
    let path = out_dir.join(format!("{stem}_mask.pgm"));
    Raster::from_tensor(&mask.values, u8::MAX as u16)?.write(&path)?;
    Ok(path)
}

/// Writes `<stem>_density.pgm` (16-bit, scaled by the recorded max),
/// `<stem>_density.csv` (raw values), `<stem>_density_scale.txt`, and when the
/// model has a confidence module `<stem>_confidence.pgm` (16-bit, `[0,1]`
/// linear) and `<stem>_overlay.ppm`.
pub fn export_prediction(image: &Tensor, p: &Prediction, out_dir: &Path, stem: &str) -> Result<ExportedFiles> {
    let (density_pgm, density_csv, scale) = write_density(&p.final_density, out_dir, stem)?;

    let (mut confidence_pgm, mut overlay_ppm) = (None, None);
    if let Some(conf) = &p.confidence {
        let path = out_dir.join(format!("{stem}_confidence.pgm"));
        Raster::from_tensor(conf, u16::MAX)?.write(&path)?;
        confidence_pgm = Some(path);
        let path = out_dir.join(format!("{stem}_overlay.ppm"));
        Raster::from_tensor(&overlay(image, conf)?, u8::MAX as u16)?.write(&path)?;
        overlay_ppm = Some(path);
    }
    Ok(ExportedFiles {
        density_pgm,
        density_csv,
        confidence_pgm,
        overlay_ppm,
        density_scale: scale,
    })
}
