//! Supervised SDF regression against analytic ground truth.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ReconModel;
use super::sdf::{cell_centers, MAX_ABS_SDF};
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::image::{ImageFeatures, NUM_PATCHES};
use crate::numerics::{accumulate_grads, Binder, Optimizer, OptimizerKind, Tape, Tensor, Trainable};
use crate::synth::dataset::LoadedScene;
use crate::synth::render::view_rotation;
use crate::synth::shapes::ObjectParams;

/// Cells per axis of the stratification and probe lattice.
pub const STRATA: usize = 16;

/// Everything needed to supervise one image.
#[derive(Clone, Debug)]
pub struct SdfSample {
    pub features: ImageFeatures,
    pub coverage: Vec<f64>,
    pub object: ObjectParams,
    /// World ← camera rotation of the view the image was taken from.
    pub rotation: Mat3,
}

impl SdfSample {
    pub fn from_scene(s: &LoadedScene) -> Self {
        SdfSample {
            features: s.features.clone(),
            coverage: s.occluder_coverage.clone(),
            object: s.record.object,
            rotation: view_rotation(s.record.view_id, s.record.num_views),
        }
    }

    /// Ground-truth signed distance at a camera-frame point.
    pub fn target(&self, p: Vec3) -> f64 {
        self.object
            .sdf_world(geom::mat_vec(&self.rotation, p))
            .clamp(-MAX_ABS_SDF, MAX_ABS_SDF)
    }
}

/// Anything that predicts signed distances for a sample.
pub trait SdfPredictor {
    fn predict(&self, sample: &SdfSample, points: &[Vec3]) -> Result<Vec<f64>>;
}

impl SdfPredictor for ReconModel {
    fn predict(&self, sample: &SdfSample, points: &[Vec3]) -> Result<Vec<f64>> {
        let bundle = self.extract_from(&sample.features, None)?;
        self.sdf_batch(&bundle.combined, points)
    }
}

/// Predicts the ground truth itself.
pub struct AnalyticOracle;

impl SdfPredictor for AnalyticOracle {
    fn predict(&self, sample: &SdfSample, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|p| sample.target(*p)).collect())
    }
}

/// Mean absolute error over `points` for every sample.
pub fn mean_abs_error<P: SdfPredictor + ?Sized>(model: &P, samples: &[SdfSample], points: &[Vec3]) -> Result<f64> {
    if samples.is_empty() || points.is_empty() {
        return Err(Error::domain("sdf error needs samples and points"));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = model.predict(s, points)?;
        total += pred.iter().zip(points).map(|(y, p)| (y - s.target(*p)).abs()).sum::<f64>();
    }
    Ok(total / (samples.len() * points.len()) as f64)
}

/// Error on the `16³` cell centers, which training never samples exactly.
pub fn probe_error<P: SdfPredictor + ?Sized>(model: &P, samples: &[SdfSample]) -> Result<f64> {
    mean_abs_error(model, samples, &cell_centers(STRATA))
}

/// `n` jittered points, at most one per cell of a `16³` lattice until every cell is used.
pub fn stratified_points<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec3> {
    let cells = STRATA.pow(3);
    let h = 2.0 / STRATA as f64;
    let mut order: Vec<usize> = (0..cells).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        order.shuffle(rng);
        for &c in order.iter().take(n - out.len()) {
            let (i, j, k) = (c / (STRATA * STRATA), (c / STRATA) % STRATA, c % STRATA);
            let at = |idx: usize, r: &mut R| -1.0 + (idx as f64 + r.random::<f64>()) * h;
            out.push([at(i, rng), at(j, rng), at(k, rng)]);
        }
    }
    out
}

/// Which occluder mask the hand extractor sees during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HandMaskSource {
    /// The generator's exact mask.
    Generator,
    /// The mask head's current prediction, held constant.
    #[default]
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdfTrainConfig {
    pub steps: usize,
    pub scenes_per_step: usize,
    pub points_per_scene: usize,
    pub learning_rate: f64,
    /// Cosine decay ends at this fraction of the initial rate.
    pub final_lr_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the occluder-mask regression term.
    pub mask_weight: f64,
    pub hand_mask: HandMaskSource,
    pub seed: u64,
}

impl Default for SdfTrainConfig {
    fn default() -> Self {
        SdfTrainConfig {
            steps: 2000,
            scenes_per_step: 4,
            points_per_scene: 4096,
            learning_rate: 1e-3,
            final_lr_fraction: 0.05,
            optimizer: OptimizerKind::Adam,
            mask_weight: 1.0,
            hand_mask: HandMaskSource::default(),
            seed: 0,
        }
    }
}

/// Loss of one sample and its gradients with respect to every `recon.` parameter.
pub fn sample_loss_and_grads(
    model: &ReconModel,
    sample: &SdfSample,
    points: &[Vec3],
    mask_weight: f64,
    hand_mask: HandMaskSource,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mask = match hand_mask {
        HandMaskSource::Generator => sample.coverage.clone(),
        HandMaskSource::Predicted => model.predict_mask(&sample.features)?,
    };
    let mut tape = Tape::new();
    let mut b = Binder::new(model.params(), Trainable::Prefixes(vec!["recon.".into()]));
    let bundle = model.features_on_tape(&mut tape, &mut b, &sample.features, Some(&mask))?;
    let enc = tape.constant(model.encode_points(points));
    let pred = model.sdf_on_tape(&mut tape, &mut b, bundle.combined, enc)?;
    let targets: Vec<f64> = points.iter().map(|p| sample.target(*p)).collect();
    let t = tape.constant(Tensor::from_parts(vec![points.len(), 1], targets));
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff)?;
    let mut loss = tape.mean(abs)?;
    if mask_weight > 0.0 {
        let patches = tape.constant(Tensor::from_parts(vec![NUM_PATCHES, 3], sample.features.patches.clone()));
        let m = model.mask_on_tape(&mut tape, &mut b, patches)?;
        let cov = tape.constant(Tensor::from_parts(vec![NUM_PATCHES, 1], sample.coverage.clone()));
        let d = tape.sub(m, cov)?;
        let sq = tape.mul(d, d)?;
        let mse = tape.mean(sq)?;
        let w = tape.scale(mse, mask_weight)?;
        loss = tape.add(loss, w)?;
    }
    let grads = tape.backward_scalar(loss)?;
    Ok((tape.value(loss).item(), b.gradients(&grads)))
}

/// Cosine interpolation from `lr` down to `lr · final_fraction` over `total` steps.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = step as f64 / (total - 1) as f64;
    let k = final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    lr * k
}

/// Trains in place; returns the mean loss of every step.
pub fn train_sdf(model: &mut ReconModel, samples: &[SdfSample], cfg: &SdfTrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::domain("stage-2 training needs at least one scene"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let per_step = cfg.scenes_per_step.clamp(1, samples.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.set_lr(cosine_lr(cfg.learning_rate, cfg.final_lr_fraction, step, cfg.steps));
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let pts = stratified_points(cfg.points_per_scene, &mut rng);
            let (l, g) = sample_loss_and_grads(model, s, &pts, cfg.mask_weight, cfg.hand_mask)?;
            loss += l;
            accumulate_grads(&mut grads, g);
        }
        crate::numerics::scale_grads(&mut grads, 1.0 / per_step as f64);
        opt.step(model.params_mut(), &grads)?;
        trace.push(loss / per_step as f64);
    }
    Ok(trace)
}
