//! Procedural hand-occluded object scenes with analytic ground truth.

pub mod dataset;
pub mod manifest;
pub mod render;
pub mod scene;
pub mod shapes;

pub use dataset::{generate_dataset, generate_split, load_split, DatasetSpec, LoadedScene};
pub use manifest::{read_manifest, write_manifest, DatasetManifest};
pub use scene::{generate_scene, instruction_set, QaPair, SceneRecord, SceneSpec, Split, INSTRUCTIONS};
pub use shapes::{analytic_sdf, ObjectClass, ObjectParams, Occluder, Primitive};
