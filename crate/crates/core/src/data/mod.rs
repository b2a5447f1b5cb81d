//! Synthetic scenes with exact saliency masks, background-challenge
//! variants and the on-disk dataset format.

pub mod io;
pub mod scene;
pub mod variants;

pub use io::{load_dataset, read_index, write_dataset, IndexEntry};
pub use scene::{
    correlated_bg, gen_dataset, gen_scene, scene_seed, LabeledScene, SceneSpec, ShapeInstance, ShapeKind,
    DEFAULT_CANVAS, NUM_BG_CLASSES, NUM_FG_CLASSES,
};
pub use variants::{compose_variant, ScenePool, Variant};
