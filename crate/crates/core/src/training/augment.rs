//! Random quarter-area crops with flips and uniform noise.

use log::warn;
use rand::Rng;

use crate::data::Scene;
use crate::error::Result;
use crate::groundtruth::{self, ConfidenceMask, DensityMap, DotAnnotation, GroupBins};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_patches: usize,
    pub flip_p: f64,
    pub noise_p: f64,
    pub noise_amplitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_patches: 9,
            flip_p: 0.5,
            noise_p: 0.5,
            noise_amplitude: 0.04,
        }
    }
}

/// Crops of `(H/2) x (W/2)` at uniform random positions. Each crop is
/// mirrored left-right with probability `flip_p` and gets elementwise
/// uniform noise in `[-a, a]` with probability `noise_p`. Points are kept iff
/// their rounded position lies inside the crop.
///
/// Scenes smaller than 8x8 yield no patches.
pub fn augment(scene: &Scene, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<Scene>> {
    let (c, h, w) = scene.image.chw()?;
    if h < 8 || w < 8 {
        warn!("scene {} is {w}x{h}, too small to crop; skipped", scene.id);
        return Ok(Vec::new());
    }
    let (ph, pw) = (h / 2, w / 2);
    let src = scene.image.data();
    let mut out = Vec::with_capacity(cfg.crop_patches);
    for k in 0..cfg.crop_patches {
        let y0 = rng.random_range(0..=h - ph);
        let x0 = rng.random_range(0..=w - pw);
        let flip = rng.random_bool(cfg.flip_p);
        let noisy = rng.random_bool(cfg.noise_p);

        let mut data = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let sx = if flip { pw - 1 - x } else { x };
                    data.push(src[(ch * h + y0 + y) * w + x0 + sx]);
                }
            }
        }
        if noisy {
            for v in &mut data {
                *v = (*v + rng.random_range(-cfg.noise_amplitude..=cfg.noise_amplitude)).clamp(0.0, 1.0);
            }
        }

        let points = scene
            .annotation
            .points
            .iter()
            .filter(|(x, y)| {
                let (rx, ry) = (x.round(), y.round());
                rx >= x0 as f64 && rx < (x0 + pw) as f64 && ry >= y0 as f64 && ry < (y0 + ph) as f64
            })
            .map(|&(x, y)| {
                let lx = x - x0 as f64;
                (if flip { (pw - 1) as f64 - lx } else { lx }, y - y0 as f64)
            })
            .collect();

        out.push(Scene {
            image: Tensor::new(&[c, ph, pw], data)?,
            annotation: DotAnnotation::new(points),
            id: format!("{}#{k}", scene.id),
        });
    }
    Ok(out)
}

/// One supervised example at model output resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub density: DensityMap,
    pub mask: ConfidenceMask,
    pub count: usize,
    pub group: usize,
}

/// Renders targets for `scene` at full resolution and reduces them by
/// `divisor`. The group label uses the count scaled by
/// `reference_area / scene area`.
pub fn make_sample(scene: &Scene, divisor: usize, bins: &GroupBins, reference_area: f64) -> Result<Sample> {
    let (h, w) = (scene.height(), scene.width());
    let density = groundtruth::render_density(&scene.annotation, h, w)?;
    let mask = groundtruth::render_mask(&scene.annotation, h, w)?;
    let scaled = scene.count() as f64 * reference_area / (h * w) as f64;
    Ok(Sample {
        image: scene.image.clone(),
        density: groundtruth::downsample_density(&density, divisor)?,
        mask: groundtruth::downsample_mask(&mask, divisor)?,
        count: scene.count(),
        group: bins.quantize(scaled),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(points: Vec<(f64, f64)>) -> Scene {
        Scene {
            image: Tensor::arange(&[1, 64, 64]).map(|v| v / 4096.0),
            annotation: DotAnnotation::new(points),
            id: "s".into(),
        }
    }

    #[test]
    fn nine_quarter_area_patches() {
        let s = scene(vec![(10.0, 10.0), (40.0, 50.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = augment(&s, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(patches.len(), 9);
        assert!(patches.iter().all(|p| p.image.shape() == [1, 32, 32]));
    }

    #[test]
    fn flip_mirrors_points_and_pixels() {
        let cfg = AugmentConfig {
            crop_patches: 40,
            flip_p: 0.5,
            noise_p: 0.0,
            ..AugmentConfig::default()
        };
        let s = scene(vec![(20.0, 20.0), (33.0, 35.0), (50.0, 12.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches = augment(&s, &cfg, &mut rng).unwrap();
        let mut flipped = 0;
        for p in &patches {
            // undo the crop: locate the source column of patch column 0
            for &(px, py) in &p.annotation.points {
                let (r, c) = (py.round() as usize, px.round() as usize);
                let v = p.image.at(0, r, c) * 4096.0;
                let src = s
                    .annotation
                    .points
                    .iter()
                    .find(|&&(x, y)| (v - (y.round() * 64.0 + x.round())).abs() < 1e-6);
                assert!(src.is_some(), "point ({px},{py}) does not sit on its source pixel");
            }
            let row = (0..32).map(|x| p.image.at(0, 0, x)).collect::<Vec<_>>();
            if row.windows(2).all(|w| w[0] > w[1]) {
                flipped += 1;
            }
        }
        assert!(flipped > 0 && flipped < patches.len());
    }

    #[test]
    fn flip_geometry_of_center_point() {
        // x -> (W_patch - 1) - x maps the symmetric center onto itself
        let pw = 33usize;
        let center = (pw as f64 - 1.0) / 2.0;
        assert_eq!((pw - 1) as f64 - center, center);
    }

    #[test]
    fn noise_is_bounded_and_clamped() {
        let cfg = AugmentConfig {
            crop_patches: 20,
            flip_p: 0.0,
            noise_p: 1.0,
            noise_amplitude: 0.04,
        };
        let s = scene(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in augment(&s, &cfg, &mut rng).unwrap() {
            assert!(p.image.min() >= 0.0 && p.image.max() <= 1.0);
        }
    }

    #[test]
    fn tiny_scenes_are_skipped() {
        let s = Scene {
            image: Tensor::zeros(&[1, 6, 20]),
            annotation: DotAnnotation::default(),
            id: "t".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(augment(&s, &AugmentConfig::default(), &mut rng).unwrap().is_empty());
    }

    #[test]
    fn patch_density_sums_to_retained_points() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| ((i * 7 % 64) as f64 + 0.3, (i * 13 % 64) as f64)).collect();
        let s = scene(pts);
        let bins = GroupBins {
            edges: vec![0.0, 10.0, 20.0, 30.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in augment(&s, &AugmentConfig::default(), &mut rng).unwrap() {
            let sample = make_sample(&p, 4, &bins, 4096.0).unwrap();
            assert!((sample.density.count() - p.count() as f64).abs() < 1e-9);
            assert_eq!(sample.density.values.shape(), &[1, 8, 8]);
            assert_eq!(sample.group, bins.quantize(p.count() as f64 * 4.0));
        }
    }
}
