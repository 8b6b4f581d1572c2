//! Scenes, their on-disk form, and synthetic dataset generation.
//!
//! A dataset directory holds `manifest.csv` (`id,seed,count`) and, per scene,
//! `<id>.pgm` or `<id>.ppm` (16-bit) next to `<id>.txt` dot annotations.

pub mod annotation;
pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::groundtruth::DotAnnotation;
use crate::tensor::Tensor;

pub use annotation::{parse_annotation, read_annotation, write_annotation};
pub use pnm::Raster;
pub use synth::{
    derive_seed, generate_scene, make_dataset, regenerate, scene_id, Background, DatasetStats, Manifest, ManifestRow,
    SynthConfig,
};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// An image in `[0,1]` with its head annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[C,H,W]`, C in {1, 3}.
    pub image: Tensor,
    pub annotation: DotAnnotation,
    pub id: String,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.annotation.len()
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// What ingestion had to fix up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub clipped_points: usize,
}

/// Reads an image and its annotation; out-of-bounds points are clipped.
pub fn load_scene(image_path: impl AsRef<Path>, annotation_path: impl AsRef<Path>) -> Result<(Scene, LoadReport)> {
    let image_path = image_path.as_ref();
    let image = Raster::read(image_path)?.to_tensor();
    let mut annotation = read_annotation(annotation_path)?;
    let (_, h, w) = image.chw()?;
    let clipped_points = annotation.clip_to(h, w);
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((Scene { image, annotation, id }, LoadReport { clipped_points }))
}

fn image_extension(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Writes `<dir>/<id>.{pgm,ppm}` (16-bit) and `<dir>/<id>.txt`.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (c, _, _) = scene.image.chw()?;
    let img = dir.join(format!("{}.{}", scene.id, image_extension(c)));
    let ann = dir.join(format!("{}.txt", scene.id));
    Raster::from_tensor(&scene.image, u16::MAX)?.write(&img)?;
    write_annotation(&scene.annotation, &ann)?;
    Ok((img, ann))
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(["id", "seed", "count"]).map_err(csv_err)?;
    for r in &manifest.rows {
        w.write_record([r.id.clone(), r.seed.to_string(), r.count.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Ingestion {
            path: path.to_path_buf(),
            offset: format!("row {}", i + 1),
            message: "expected id,seed,count".into(),
        };
        rows.push(ManifestRow {
            id: rec.get(0).ok_or_else(bad)?.to_string(),
            seed: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            count: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
        });
    }
    Ok(Manifest { rows })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes every scene plus the manifest into `dir` (created if missing).
pub fn save_dataset(scenes: &[Scene], manifest: &Manifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for s in scenes {
        save_scene(s, dir)?;
    }
    write_manifest(manifest, dir.join(MANIFEST_FILE))
}

/// Loads a dataset directory. Scene order follows the manifest when present,
/// otherwise the sorted annotation file names.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let ids: Vec<String> = if manifest_path.exists() {
        read_manifest(&manifest_path)?.rows.into_iter().map(|r| r.id).collect()
    } else {
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        ids
    };
    let mut scenes = Vec::with_capacity(ids.len());
    for id in ids {
        let img = ["pgm", "ppm"]
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Ingestion {
                path: dir.join(&id),
                offset: "-".into(),
                message: "no .pgm or .ppm image for this id".into(),
            })?;
        let (scene, _) = load_scene(img, dir.join(format!("{id}.txt")))?;
        scenes.push(scene);
    }
    Ok(scenes)
}
