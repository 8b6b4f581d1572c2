//! Synthetic crowd scenes: dark disk "heads" on a light background plus
//! unannotated speckled clutter blobs of similar size and darkness.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Scene;
use crate::error::{arg_err, Error, Result};
use crate::groundtruth::DotAnnotation;
use crate::tensor::Tensor;

/// Clutter blobs per 32x32 pixels of image area at `distractor_density = 1`.
pub const DISTRACTOR_AREA_UNIT: f64 = 1024.0;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Flat,
    Gradient,
    Clutter,
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Background::Flat => "flat",
            Background::Gradient => "gradient",
            Background::Clutter => "clutter",
        })
    }
}

impl FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Background::Flat),
            "gradient" => Ok(Background::Gradient),
            "clutter" => Ok(Background::Clutter),
            _ => arg_err(format!("background must be flat, gradient or clutter, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive range of heads per scene.
    pub count_range: (usize, usize),
    pub head_radius_range: (f64, f64),
    pub background: Background,
    /// Clutter blobs per [`DISTRACTOR_AREA_UNIT`] pixels.
    pub distractor_density: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            channels: 1,
            count_range: (5, 20),
            head_radius_range: (2.0, 3.5),
            background: Background::Flat,
            distractor_density: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return arg_err(format!("extents must be >= 32, got {}x{}", self.width, self.height));
        }
        if !matches!(self.channels, 1 | 3) {
            return arg_err("channels must be 1 or 3");
        }
        if self.count_range.0 > self.count_range.1 {
            return arg_err("count_range min exceeds max");
        }
        let (r0, r1) = self.head_radius_range;
        if !(r0 > 0.0 && r0 <= r1 && 2.0 * r1 < self.height.min(self.width) as f64) {
            return arg_err(format!("bad head_radius_range ({r0}, {r1})"));
        }
        if !(self.distractor_density >= 0.0) {
            return arg_err("distractor_density must be >= 0");
        }
        Ok(())
    }

    pub fn distractor_count(&self) -> usize {
        (self.distractor_density * (self.height * self.width) as f64 / DISTRACTOR_AREA_UNIT).round() as usize
    }
}

/// Seed of scene `index` in a dataset seeded with `seed` (SplitMix64 mix).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn paint_disk(img: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, r: f64, level: f64) {
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h - 1);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let cover = (r + 0.5 - d).clamp(0.0, 1.0);
            let p = &mut img[y * w + x];
            *p = *p * (1.0 - cover) + level * cover;
        }
    }
}

/// One scene drawn from `config` using `rng`.
pub fn generate_scene(config: &SynthConfig, rng: &mut impl Rng, id: impl Into<String>) -> Result<Scene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let (r_lo, r_hi) = config.head_radius_range;

    let base: f64 = rng.random_range(0.70..0.85);
    let mut img = vec![base; h * w];
    match config.background {
        Background::Flat => {}
        Background::Gradient => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (h.max(w)) as f64;
            for y in 0..h {
                for x in 0..w {
                    img[y * w + x] += 0.1 * ((x as f64 * dx + y as f64 * dy) / span);
                }
            }
        }
        Background::Clutter => {
            for p in &mut img {
                *p += rng.random_range(-0.05..0.05);
            }
        }
    }

    // clutter blobs first so annotated heads stay on top
    for _ in 0..config.distractor_count() {
        let r = rng.random_range(r_lo..=r_hi) * 1.5;
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let level: f64 = rng.random_range(0.1..0.3);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h - 1);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let inside = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
                if inside && rng.random_bool(0.5) {
                    img[y * w + x] = level;
                }
            }
        }
    }

    let n = rng.random_range(config.count_range.0..=config.count_range.1);
    let mut heads: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
    let mut relaxed = false;
    for _ in 0..n {
        let r = rng.random_range(r_lo..=r_hi);
        let mut candidate = (0.0, 0.0);
        for attempt in 0..=PLACEMENT_RETRIES {
            candidate = (
                rng.random_range(r..(w as f64 - 1.0 - r)),
                rng.random_range(r..(h as f64 - 1.0 - r)),
            );
            let clear = heads.iter().all(|&(x, y, rr)| {
                let d2 = (x - candidate.0).powi(2) + (y - candidate.1).powi(2);
                d2 >= (r + rr).powi(2)
            });
            if clear {
                break;
            }
            if attempt == PLACEMENT_RETRIES {
                relaxed = true;
            }
        }
        heads.push((candidate.0, candidate.1, r));
    }
    if relaxed {
        warn!("scene {}: could not keep heads apart, separation relaxed", config.seed);
    }
    for &(x, y, r) in &heads {
        let level: f64 = rng.random_range(0.1..0.2);
        paint_disk(&mut img, h, w, x, y, r, level);
    }

    img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    let data = if config.channels == 3 {
        // a faint per-channel tint keeps RGB scenes from being pure gray
        let tint = [1.0, 0.97, 0.94];
        tint.iter().flat_map(|t| img.iter().map(move |p| (p * t).clamp(0.0, 1.0))).collect()
    } else {
        img
    };
    Ok(Scene {
        image: Tensor::new(&[config.channels, h, w], data)?,
        annotation: DotAnnotation::new(heads.iter().map(|&(x, y, _)| (x, y)).collect()),
        id: id.into(),
    })
}

/// Per-scene record of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

/// Dataset summary in the usual benchmark-table form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub num: usize,
    pub min: usize,
    pub max: usize,
    pub average: f64,
    pub total: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Num={} Range=[{},{}] Average={:.1} Total={}",
            self.num, self.min, self.max, self.average, self.total
        )
    }
}

impl Manifest {
    pub fn stats(&self) -> DatasetStats {
        let counts = self.rows.iter().map(|r| r.count);
        let total: usize = counts.clone().sum();
        DatasetStats {
            num: self.rows.len(),
            min: counts.clone().min().unwrap_or(0),
            max: counts.max().unwrap_or(0),
            average: if self.rows.is_empty() {
                0.0
            } else {
                total as f64 / self.rows.len() as f64
            },
            total,
        }
    }

    /// Count histogram over `bins` equal-width buckets of the count range.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let s = self.stats();
        let mut out = vec![0; bins.max(1)];
        let width = ((s.max - s.min) as f64 / out.len() as f64).max(f64::MIN_POSITIVE);
        for r in &self.rows {
            let i = (((r.count - s.min) as f64 / width) as usize).min(out.len() - 1);
            out[i] += 1;
        }
        out
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// `n_scenes` scenes, scene `i` generated from `derive_seed(config.seed, i)`.
pub fn make_dataset(config: &SynthConfig, n_scenes: usize) -> Result<(Vec<Scene>, Manifest)> {
    if n_scenes == 0 {
        return arg_err("n_scenes must be at least 1");
    }
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut rows = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let seed = derive_seed(config.seed, i as u64);
        let scene = regenerate(config, seed, scene_id(i))?;
        rows.push(ManifestRow {
            id: scene.id.clone(),
            seed,
            count: scene.count(),
        });
        scenes.push(scene);
    }
    Ok((scenes, Manifest { rows }))
}

/// Rebuilds one scene from its manifest seed.
pub fn regenerate(config: &SynthConfig, scene_seed: u64, id: String) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    generate_scene(config, &mut rng, id)
}
