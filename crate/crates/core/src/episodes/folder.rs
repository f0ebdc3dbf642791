//! Image/mask pairs loaded from disk.
//!
//! Layout: `images_dir/<stem>.png` (RGB) pairs with `masks_dir/<stem>.png`
//! (8-bit class ids, 0 = background). The class index is a JSON object
//! `{"<id>": {"name": "...", "split": <0..4>}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{ClassCatalog, ClassInfo, LabelMap, Scene, SceneSource};
use crate::config::content_hash;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    split: usize,
}

/// In-memory dataset resized to a square working resolution.
#[derive(Debug, Clone)]
pub struct FolderDataset {
    catalog: ClassCatalog,
    image_size: usize,
    scenes: Vec<Scene>,
    files: Vec<PathBuf>,
}

impl FolderDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }
}

fn ingestion(file: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| ingestion(dir, e.to_string()))?;
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_catalog(path: &Path) -> Result<ClassCatalog> {
    let text = std::fs::read_to_string(path).map_err(|e| ingestion(path, e.to_string()))?;
    let raw: BTreeMap<String, IndexEntry> = serde_json::from_str(&text).map_err(|e| ingestion(path, e.to_string()))?;
    let mut classes = Vec::with_capacity(raw.len());
    for (key, entry) in raw {
        let id: u8 = key
            .parse()
            .map_err(|_| ingestion(path, format!("class id {key:?} is not in 1..=255")))?;
        classes.push(ClassInfo {
            id,
            name: entry.name,
            split: entry.split,
        });
    }
    ClassCatalog::new(classes).map_err(|e| ingestion(path, e.to_string()))
}

/// Loads every image/mask pair. Images are resized bilinearly and masks by
/// nearest neighbour to `image_size x image_size`.
pub fn load_folder_dataset(
    images_dir: &Path,
    masks_dir: &Path,
    class_index: &Path,
    image_size: usize,
) -> Result<FolderDataset> {
    let catalog = read_catalog(class_index)?;
    let images = png_stems(images_dir)?;
    let masks = png_stems(masks_dir)?;
    if let Some((_, path)) = images.iter().find(|(stem, _)| !masks.contains_key(*stem)) {
        return Err(ingestion(path, "image has no matching mask"));
    }
    if let Some((_, path)) = masks.iter().find(|(stem, _)| !images.contains_key(*stem)) {
        return Err(ingestion(path, "mask has no matching image"));
    }
    if images.is_empty() {
        return Err(ingestion(images_dir, "no png images found"));
    }
    let known: BTreeSet<u8> = catalog.classes().iter().map(|c| c.id).collect();

    let mut scenes = Vec::with_capacity(images.len());
    let mut files = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = &masks[stem];
        let rgb = image::open(image_path)
            .map_err(|e| ingestion(image_path, e.to_string()))?
            .to_rgb8();
        let gray = image::open(mask_path)
            .map_err(|e| ingestion(mask_path, e.to_string()))?
            .to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(ingestion(
                mask_path,
                format!("mask is {:?} but image is {:?}", gray.dimensions(), rgb.dimensions()),
            ));
        }
        if let Some(&bad) = gray.as_raw().iter().find(|&&v| v != 0 && !known.contains(&v)) {
            return Err(ingestion(mask_path, format!("unknown class id {bad}")));
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut planar = vec![0.0; 3 * h * w];
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                planar[c * h * w + p] = f64::from(px[c]) / 255.0;
            }
        }
        let image = Tensor::new(vec![3, h, w], planar)?.resize_bilinear(image_size, image_size)?;
        let class_map = LabelMap::new(h, w, gray.into_raw()).resize_nearest(image_size, image_size);
        scenes.push(Scene { image, class_map });
        files.push(image_path.clone());
    }
    Ok(FolderDataset {
        catalog,
        image_size,
        scenes,
        files,
    })
}

impl SceneSource for FolderDataset {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn draw_scene(&self, rng: &mut ChaCha8Rng) -> Result<Scene> {
        Ok(self.scenes[rng.gen_range(0..self.scenes.len())].clone())
    }

    fn fingerprint(&self) -> String {
        let names: Vec<String> = self.files.iter().map(|f| f.display().to_string()).collect();
        format!(
            "folder:{}",
            &content_hash(&(&self.catalog, names, self.image_size))[..16]
        )
    }
}
