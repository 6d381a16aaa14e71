//! Second visual encoder: features → SDF → mesh → render → CLIP embedding.

pub mod mcubes;
pub mod mesh;
pub mod model;
pub mod raster;
pub mod sdf;
pub mod train;

pub use mcubes::marching_cubes;
pub use mesh::Mesh;
pub use model::{FeatureBundle, ReconConfig, ReconModel};
pub use raster::{project, project_with_albedo, Projection};
pub use sdf::{positional_encoding, SdfGrid};
pub use train::{SdfSample, SdfTrainConfig};

use crate::clip::{ClipModel, Embedding};
use crate::error::Result;
use crate::image::{ImageFeatures, ImageTensor, BACKGROUND, CHANNELS, NUM_PATCHES};
use crate::synth::render::mean_shading_factor;

pub fn reconstruct_mesh(grid: &SdfGrid) -> Result<Mesh> {
    if grid.resolution() < 8 {
        return Err(crate::Error::domain(format!(
            "grid resolution {} below 8",
            grid.resolution()
        )));
    }
    Ok(marching_cubes(grid))
}

/// Object color guessed from strongly colored patches the hand does not cover.
pub fn estimate_albedo(feats: &ImageFeatures, mask: &[f64]) -> [f64; 3] {
    let mut cands: Vec<(f64, [f64; 3])> = (0..NUM_PATCHES)
        .filter(|&i| mask[i] < 0.2)
        .map(|i| {
            let p = &feats.patches[i * CHANNELS..(i + 1) * CHANNELS];
            let dev = (0..3).map(|c| (p[c] - BACKGROUND[c]).abs()).fold(0.0, f64::max);
            (dev, [p[0], p[1], p[2]])
        })
        .filter(|(dev, _)| *dev > 0.05)
        .collect();
    if cands.is_empty() {
        return raster::DEFAULT_ALBEDO;
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = &cands[..cands.len().div_ceil(4)];
    let k = mean_shading_factor() * top.len() as f64;
    let mut sum = [0.0; 3];
    for (_, p) in top {
        for c in 0..3 {
            sum[c] += p[c];
        }
    }
    sum.map(|s| (s / k).clamp(0.0, 1.0))
}

/// Image of the reconstructed object, rendered from the input viewpoint.
pub fn render_reconstruction(recon: &ReconModel, feats: &ImageFeatures, resolution: usize) -> Result<Projection> {
    let mask = recon.predict_mask(feats)?;
    let bundle = recon.extract_from(feats, Some(&mask))?;
    let grid = recon.sample_grid(&bundle.combined, resolution)?;
    let mesh = reconstruct_mesh(&grid)?;
    Ok(project_with_albedo(&mesh, estimate_albedo(feats, &mask)))
}

#[derive(Clone, Debug)]
pub struct OccludedEmbedding {
    pub embedding: Embedding,
    /// The reconstruction produced no surface; the embedding is of a blank render.
    pub empty_mesh: bool,
}

pub fn embed_occluded_features(
    recon: &ReconModel,
    clip: &ClipModel,
    feats: &ImageFeatures,
    resolution: usize,
) -> Result<OccludedEmbedding> {
    let proj = render_reconstruction(recon, feats, resolution)?;
    Ok(OccludedEmbedding {
        embedding: clip.encode_image(&proj.image)?,
        empty_mesh: proj.empty,
    })
}

/// `x_v2` of an image, at the model's configured grid resolution.
pub fn embed_occluded(recon: &ReconModel, clip: &ClipModel, img: &ImageTensor) -> Result<OccludedEmbedding> {
    embed_occluded_features(recon, clip, &img.features(), recon.config().grid_resolution)
}
