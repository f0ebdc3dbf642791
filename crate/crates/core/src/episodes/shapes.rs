//! Procedural multi-shape scenes.
//!
//! Twelve classes: four outlines (circle, square, triangle, ring) times three
//! fills (solid, striped, dotted). Each class has its own hue; the fill
//! pattern modulates it. Class `id = 1 + 3 * kind + texture`, and class `id`
//! belongs to split `(id - 1) % 4`, so every held-out class shares its
//! outline and its fill with some training class.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassCatalog, ClassInfo, LabelMap, Scene, SceneSource, NUM_SPLITS};
use crate::config::{content_hash, WorldConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_AREA: f64 = 0.02;
const MAX_AREA: f64 = 0.40;
const PLACEMENT_ATTEMPTS: usize = 60;
const SCENE_ATTEMPTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
}

const KINDS: [ShapeKind; 4] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
];
const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Striped, Texture::Dotted];

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
        }
    }
}

impl Texture {
    fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
            Texture::Dotted => "dotted",
        }
    }
}

fn class_parts(id: u8) -> (ShapeKind, Texture) {
    let k = usize::from(id - 1);
    (KINDS[k / 3], TEXTURES[k % 3])
}

/// The synthetic scene generator.
#[derive(Debug, Clone)]
pub struct ShapeWorld {
    config: WorldConfig,
    catalog: ClassCatalog,
}

impl ShapeWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut classes = Vec::new();
        for (ki, kind) in KINDS.iter().enumerate() {
            for (ti, tex) in TEXTURES.iter().enumerate() {
                let id = (1 + ki * 3 + ti) as u8;
                classes.push(ClassInfo {
                    id,
                    name: format!("{}_{}", kind.name(), tex.name()),
                    split: usize::from(id - 1) % NUM_SPLITS,
                });
            }
        }
        Ok(Self {
            config,
            catalog: ClassCatalog::new(classes)?,
        })
    }

    /// Replaces the class catalog (classes must still be ids 1..=12).
    pub fn with_catalog(mut self, catalog: ClassCatalog) -> Self {
        self.catalog = catalog;
        self
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }
}

struct Placed {
    mask: Vec<bool>,
}

fn rasterize(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64;
    let frac: f64 = rng.gen_range(0.04..0.22);
    let area = frac * s * s;
    let mut mask = vec![false; size * size];
    let (half_w, half_h) = match kind {
        ShapeKind::Circle => {
            let r = (area / std::f64::consts::PI).sqrt();
            (r, r)
        }
        ShapeKind::Square => {
            let a = area.sqrt() / 2.0;
            (a, a)
        }
        ShapeKind::Triangle => {
            let base = (2.0 * area / 0.9).sqrt();
            (base / 2.0, base * 0.45)
        }
        ShapeKind::Ring => {
            let r = (area / (std::f64::consts::PI * (1.0 - 0.55 * 0.55))).sqrt();
            (r, r)
        }
    };
    // Centres may push up to half the shape past the border.
    let cx = rng.gen_range(half_w * 0.5..(s - half_w * 0.5).max(half_w * 0.5 + 1.0));
    let cy = rng.gen_range(half_h * 0.5..(s - half_h * 0.5).max(half_h * 0.5 + 1.0));
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let inside = match kind {
                ShapeKind::Circle => px * px + py * py <= half_w * half_w,
                ShapeKind::Square => px.abs() <= half_w && py.abs() <= half_h,
                ShapeKind::Triangle => {
                    // Apex at top, base at bottom.
                    let t = (py + half_h) / (2.0 * half_h);
                    (0.0..=1.0).contains(&t) && px.abs() <= half_w * t
                }
                ShapeKind::Ring => {
                    let d2 = px * px + py * py;
                    d2 <= half_w * half_w && d2 >= (0.55 * half_w).powi(2)
                }
            };
            mask[y * size + x] = inside;
        }
    }
    mask
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl ShapeWorld {
    fn try_scene(&self, rng: &mut ChaCha8Rng) -> Result<Option<Scene>> {
        let size = self.config.image_size;
        let pixels = size * size;
        let min_px = (MIN_AREA * pixels as f64).ceil() as usize;
        let max_px = (MAX_AREA * pixels as f64).floor() as usize;

        let n = rng.gen_range(self.config.min_shapes..=self.config.max_shapes);
        let n = n.min(self.catalog.len());
        let classes: Vec<u8> = sample(rng, self.catalog.len(), n)
            .into_iter()
            .map(|i| self.catalog.classes()[i].id)
            .collect();

        // Background: tinted grey with a linear gradient.
        let grey: f64 = rng.gen_range(0.2..0.8);
        let tint: [f64; 3] = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (gx, gy) = (angle.cos() * 0.15, angle.sin() * 0.15);
        let mut image = vec![0.0; 3 * pixels];
        for y in 0..size {
            for x in 0..size {
                let ramp = gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
                for c in 0..3 {
                    image[c * pixels + y * size + x] = grey + tint[c] + ramp;
                }
            }
        }

        let mut owner = vec![0usize; pixels]; // 0 = background, i + 1 = shape i
        let mut placed: Vec<Placed> = Vec::with_capacity(n);
        for _ in &classes {
            let mut accepted = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let kind = class_parts(classes[placed.len()]).0;
                let mask = rasterize(kind, size, rng);
                let area = mask.iter().filter(|&&m| m).count();
                if area < min_px || area > max_px {
                    continue;
                }
                // Previously placed shapes must keep enough visible area.
                let mut visible = vec![0usize; placed.len()];
                for (p, &o) in owner.iter().enumerate() {
                    if o > 0 && !mask[p] {
                        visible[o - 1] += 1;
                    }
                }
                if visible.iter().all(|&v| v >= min_px) {
                    accepted = Some(mask);
                    break;
                }
            }
            let Some(mask) = accepted else {
                return Ok(None);
            };
            let idx = placed.len() + 1;
            for (p, &m) in mask.iter().enumerate() {
                if m {
                    owner[p] = idx;
                }
            }
            placed.push(Placed { mask });
        }

        let mut class_map = vec![0u8; pixels];
        for (i, &id) in classes.iter().enumerate() {
            let (_, texture) = class_parts(id);
            let hue = f64::from(id - 1) * 30.0;
            let mut color = hsv_to_rgb(hue, 0.75, 0.9);
            for c in color.iter_mut() {
                *c += rng.gen_range(-0.05..0.05);
            }
            let dark = color.map(|c| c * 0.3);
            let phase = rng.gen_range(0..6usize);
            let (ox, oy) = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));
            for p in 0..pixels {
                if owner[p] != i + 1 {
                    continue;
                }
                debug_assert!(placed[i].mask[p]);
                class_map[p] = id;
                let (x, y) = (p % size, p / size);
                let lit = match texture {
                    Texture::Solid => true,
                    Texture::Striped => (x + y + phase) % 6 < 3,
                    Texture::Dotted => (x + ox) % 4 < 2 && (y + oy) % 4 < 2,
                };
                let rgb = if lit { color } else { dark };
                for c in 0..3 {
                    image[c * pixels + p] = rgb[c];
                }
            }
        }

        if self.config.noise > 0.0 {
            let normal = Normal::new(0.0, self.config.noise).expect("noise std");
            for v in image.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        for v in image.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }

        Ok(Some(Scene {
            image: Tensor::new(vec![3, size, size], image)?,
            class_map: LabelMap::new(size, size, class_map),
        }))
    }
}

impl SceneSource for ShapeWorld {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn draw_scene(&self, rng: &mut ChaCha8Rng) -> Result<Scene> {
        for _ in 0..SCENE_ATTEMPTS {
            if let Some(scene) = self.try_scene(rng)? {
                return Ok(scene);
            }
        }
        Err(Error::Generation(format!(
            "could not place shapes after {SCENE_ATTEMPTS} attempts"
        )))
    }

    fn fingerprint(&self) -> String {
        format!("shapes:{}", &content_hash(&(&self.config, &self.catalog))[..16])
    }
}

/// Generates the scene for `seed` deterministically.
pub fn generate_scene(world: &ShapeWorld, seed: u64) -> Result<Scene> {
    world.draw_scene(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Writes `count` scenes as `scene_NNNN.png` / `scene_NNNN_mask.png` pairs.
/// Mask pixels hold raw class ids.
pub fn export_scenes(source: &dyn SceneSource, count: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::with_capacity(2 * count);
    for i in 0..count {
        let scene = source.draw_scene(&mut rng)?;
        let (h, w) = (scene.class_map.height, scene.class_map.width);
        let px = h * w;
        let data = scene.image.data();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            let q = |c: usize| (data[c * px + p] * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        });
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([scene.class_map.data[y as usize * w + x as usize]])
        });
        let image_path = dir.join(format!("scene_{i:04}.png"));
        let mask_path = dir.join(format!("scene_{i:04}_mask.png"));
        rgb.save(&image_path)?;
        mask.save(&mask_path)?;
        written.push(image_path);
        written.push(mask_path);
    }
    Ok(written)
}
