//! Scenes, class splits and few-shot episode sampling.
//!
//! A scene is an RGB image with a dense class map. An episode fixes one
//! target class and draws support and query scenes that contain it; their
//! binary masks mark the target, and each query additionally carries an
//! auxiliary multi-class map in which every test-split class is background.

mod folder;
mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

pub use folder::{load_folder_dataset, FolderDataset};
pub use shapes::{export_scenes, generate_scene, ShapeKind, ShapeWorld, Texture};

pub const NUM_SPLITS: usize = 4;

/// Maximum number of scenes drawn while looking for the target class.
const MAX_SCENE_DRAWS: usize = 10_000;

/// Integer map of shape `[H, W]`: class ids, binary masks or aux channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len(), "label map size");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        self.data.contains(&id)
    }

    pub fn count(&self, id: u8) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    /// Binary mask of the pixels labelled `id`.
    pub fn binary_for(&self, id: u8) -> LabelMap {
        LabelMap::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| u8::from(v == id)).collect(),
        )
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("label map size")
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        LabelMap::new(
            height,
            width,
            kernels::resize_nearest(&self.data, self.height, self.width, height, width),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    pub split: usize,
}

/// Class ids (1-based, 0 is background) with their split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
}

impl ClassCatalog {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        if classes.iter().any(|c| c.id == 0) {
            return Err(Error::Config("class id 0 is reserved for background".into()));
        }
        if classes.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Config("duplicate class id".into()));
        }
        if let Some(c) = classes.iter().find(|c| c.split >= NUM_SPLITS) {
            return Err(Error::Config(format!(
                "class {} has split {} >= {NUM_SPLITS}",
                c.id, c.split
            )));
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: u8) -> Option<&ClassInfo> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Held-out classes of `split`.
    pub fn test_classes(&self, split: usize) -> Vec<u8> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    /// Classes available for meta-training when `split` is held out.
    pub fn train_classes(&self, split: usize) -> Vec<u8> {
        self.classes.iter().filter(|c| c.split != split).map(|c| c.id).collect()
    }

    pub fn pool(&self, phase: Phase, split: usize) -> Vec<u8> {
        match phase {
            Phase::Train => self.train_classes(split),
            Phase::Test => self.test_classes(split),
        }
    }

    /// Number of auxiliary decoder channels (training classes + background).
    pub fn aux_channels(&self, split: usize) -> usize {
        self.train_classes(split).len() + 1
    }

    /// Auxiliary map: test classes become background.
    pub fn aux_label(&self, class_map: &LabelMap, split: usize) -> LabelMap {
        let data = class_map
            .data
            .iter()
            .map(|&v| match self.get(v) {
                Some(c) if c.split != split => v,
                _ => 0,
            })
            .collect();
        LabelMap::new(class_map.height, class_map.width, data)
    }

    /// Channel index of every pixel of an auxiliary map (0 = background).
    pub fn aux_targets(&self, aux: &LabelMap, split: usize) -> Vec<usize> {
        let train = self.train_classes(split);
        aux.data
            .iter()
            .map(|&v| train.iter().position(|&c| c == v).map_or(0, |p| p + 1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class_map: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

/// Anything that can produce labelled scenes for episode sampling.
pub trait SceneSource {
    fn catalog(&self) -> &ClassCatalog;
    fn image_size(&self) -> usize;
    fn draw_scene(&self, rng: &mut ChaCha8Rng) -> Result<Scene>;

    /// Identifies the scene distribution; checkpoints record it.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub image: Tensor,
    pub mask: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub image: Tensor,
    pub mask: LabelMap,
    pub aux: LabelMap,
}

/// One 1-way few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: u8,
    pub phase: Phase,
    pub split: usize,
    pub seed: u64,
    pub supports: Vec<Support>,
    pub queries: Vec<Query>,
}

impl Episode {
    pub fn support_images(&self) -> Result<Tensor> {
        Ok(Tensor::stack(
            &self.supports.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
        )?)
    }

    pub fn query_images(&self) -> Result<Tensor> {
        Ok(Tensor::stack(
            &self.queries.iter().map(|q| q.image.clone()).collect::<Vec<_>>(),
        )?)
    }
}

fn draw_containing(source: &dyn SceneSource, class: u8, rng: &mut ChaCha8Rng) -> Result<Scene> {
    for _ in 0..MAX_SCENE_DRAWS {
        let scene = source.draw_scene(rng)?;
        if scene.class_map.contains(class) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "class {class} not found in {MAX_SCENE_DRAWS} scenes"
    )))
}

/// Samples an episode by rejection: scenes are drawn until they contain the
/// target. Queries are drawn before supports, so episodes with the same seed
/// and different shot counts share their queries and leading supports.
pub fn sample_episode(
    source: &dyn SceneSource,
    phase: Phase,
    split: usize,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if shots == 0 || queries == 0 {
        return Err(Error::Config("episodes need at least one support and one query".into()));
    }
    let catalog = source.catalog();
    let pool = catalog.pool(phase, split);
    if pool.is_empty() {
        return Err(Error::Config(format!("empty {phase:?} class pool for split {split}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = pool[rng.gen_range(0..pool.len())];

    let mut query_set = Vec::with_capacity(queries);
    for _ in 0..queries {
        let scene = draw_containing(source, class_id, &mut rng)?;
        query_set.push(Query {
            mask: scene.class_map.binary_for(class_id),
            aux: catalog.aux_label(&scene.class_map, split),
            image: scene.image,
        });
    }
    let mut support_set = Vec::with_capacity(shots);
    for _ in 0..shots {
        let scene = draw_containing(source, class_id, &mut rng)?;
        support_set.push(Support {
            mask: scene.class_map.binary_for(class_id),
            image: scene.image,
        });
    }
    Ok(Episode {
        class_id,
        phase,
        split,
        seed,
        supports: support_set,
        queries: query_set,
    })
}

/// Seed of the `index`-th episode of a stream (SplitMix64 finalizer).
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
