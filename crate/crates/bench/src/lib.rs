//! Shared fixtures for the benchmarks.

use taftseg::episodes::{sample_episode, Episode, Phase, ShapeWorld};
use taftseg::{Model, ModelConfig, SceneSource, WorldConfig};

pub fn world() -> ShapeWorld {
    ShapeWorld::new(WorldConfig::default()).expect("default world")
}

/// A default-size model and a training episode with `queries` queries.
pub fn fixture(queries: usize) -> (ShapeWorld, Model, Episode) {
    let w = world();
    let model = Model::new(&ModelConfig::default(), w.catalog().aux_channels(0), 0).expect("model");
    let ep = sample_episode(&w, Phase::Train, 0, 1, queries, 1).expect("episode");
    (w, model, ep)
}
