//! Whole-split generation and loading of rendered scenes.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{check_disjoint, read_manifest, write_manifest, DatasetManifest, GENERATOR_VERSION};
use super::render::SceneRender;
use super::scene::{generate_scene, SceneRecord, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::image::{patch_coverage, ImageFeatures, ImageTensor, IMAGE_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_instances: usize,
    pub test_instances: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            train_instances: 500,
            test_instances: 100,
            scene: SceneSpec::default(),
        }
    }
}

/// SplitMix64 finalizer; spreads `(seed, split, index)` into independent sub-seeds.
pub fn derive_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Test => 0x7465_7374_0000_0000u64,
    };
    let mut z = seed ^ tag ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn instance_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

fn mask_image(mask: &[bool]) -> ImageTensor {
    let mut img = ImageTensor::filled([0.0; 3]);
    for (i, m) in mask.iter().enumerate() {
        if *m {
            img.set_pixel(i / IMAGE_SIZE, i % IMAGE_SIZE, [1.0; 3]);
        }
    }
    img
}

fn write_images(dir: &Path, rec: &SceneRecord, render: &SceneRender) -> Result<()> {
    render.image.save_png(&dir.join(&rec.image))?;
    render.clean_image.save_png(&dir.join(&rec.clean_image))?;
    mask_image(&render.occluder_mask).save_png(&dir.join(&rec.mask_image))?;
    Ok(())
}

/// Generates `count` instances of one split into `dir` and writes its manifest.
pub fn generate_split(dir: &Path, split: Split, count: usize, seed: u64, spec: &SceneSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let per_instance: Vec<Vec<SceneRecord>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let views = generate_scene(derive_seed(seed, split, i), &instance_id(split, i), split, spec)?;
            let mut recs = Vec::with_capacity(views.len());
            for (rec, render) in views {
                write_images(dir, &rec, &render)?;
                recs.push(rec);
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        split,
        seed,
        version: GENERATOR_VERSION.to_string(),
        records: per_instance.into_iter().flatten().collect(),
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Writes `out/train` and `out/test`.
pub fn generate_dataset(out: &Path, spec: &DatasetSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    let train = generate_split(&out.join("train"), Split::Train, spec.train_instances, spec.seed, &spec.scene)?;
    let test = generate_split(&out.join("test"), Split::Test, spec.test_instances, spec.seed, &spec.scene)?;
    check_disjoint(&train, &test)?;
    Ok((train, test))
}

/// What training and evaluation keep in memory per scene.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub record: SceneRecord,
    pub features: ImageFeatures,
    /// Per-patch fraction covered by the occluder.
    pub occluder_coverage: Vec<f64>,
}

pub fn load_scene(dir: &Path, record: &SceneRecord) -> Result<LoadedScene> {
    let img = ImageTensor::load_png(&dir.join(&record.image))?;
    let mask = ImageTensor::load_png(&dir.join(&record.mask_image))?;
    let bits: Vec<bool> = mask.data().chunks_exact(3).map(|p| p[0] > 0.5).collect();
    Ok(LoadedScene {
        record: record.clone(),
        features: img.features(),
        occluder_coverage: patch_coverage(&bits),
    })
}

/// Reads and validates a split directory, then loads every scene in parallel.
pub fn load_split(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedScene>)> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .records
        .par_iter()
        .map(|r| load_scene(dir, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

/// Occlusion ratio recomputed from an occluded render and its clean twin.
pub fn pixel_diff_ratio(image: &ImageTensor, clean: &ImageTensor) -> f64 {
    let mut total = 0usize;
    let mut hidden = 0usize;
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            if clean.is_background(row, col) {
                continue;
            }
            total += 1;
            if image.pixel(row, col) != clean.pixel(row, col) {
                hidden += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hidden as f64 / total as f64
    }
}
