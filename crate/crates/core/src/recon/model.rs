//! Learned parts of the reconstruction path: the three image feature
//! extractors, their fusion, the occluder mask head and the SDF decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sdf::{check_in_extent, encoding_len, grid_points, positional_encoding, SdfGrid};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::{ImageFeatures, ImageTensor, CHANNELS, HIST_LEN, NUM_PATCHES, POOLED_LEN};
use crate::numerics::{Binder, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub feature_dim: usize,
    /// Hidden width of the cue and hand extractors.
    pub hidden: usize,
    pub sdf_hidden: usize,
    pub num_freqs: usize,
    pub grid_resolution: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            feature_dim: 64,
            hidden: 128,
            sdf_hidden: 128,
            num_freqs: 8,
            grid_resolution: 64,
        }
    }
}

/// Per-image features; `combined` is what the SDF decoder consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub cues: Vec<f64>,
    pub hand: Vec<f64>,
    pub color: Vec<f64>,
    pub combined: Vec<f64>,
}

/// Tape handles of a bundle.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub cues: Var,
    pub hand: Var,
    pub color: Var,
    pub combined: Var,
}

#[derive(Clone, Debug)]
pub struct ReconModel {
    cfg: ReconConfig,
    params: ParamStore,
}

/// Points per tape when evaluating the decoder without gradients.
const QUERY_CHUNK: usize = 4096;

impl ReconModel {
    pub fn new(cfg: ReconConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (f, h, s) = (cfg.feature_dim, cfg.hidden, cfg.sdf_hidden);
        p.init_linear("recon.mask", CHANNELS, 1, 1.0, &mut rng);
        p.init_linear("recon.cues.fc1", POOLED_LEN, h, 2f64.sqrt(), &mut rng);
        p.init_linear("recon.cues.fc2", h, f, 1.0, &mut rng);
        p.init_linear("recon.hand.fc1", POOLED_LEN, h, 2f64.sqrt(), &mut rng);
        p.init_linear("recon.hand.fc2", h, f, 1.0, &mut rng);
        p.init_linear("recon.color", HIST_LEN, f, 1.0, &mut rng);
        p.init_linear("recon.fs.fc1", f, f, 2f64.sqrt(), &mut rng);
        p.init_linear("recon.fs.fc2", f, f, 1.0, &mut rng);
        p.init_linear("recon.sdf.feat", f, s, 1.0, &mut rng);
        p.remove("recon.sdf.feat.bias");
        p.init_linear("recon.sdf.pos", encoding_len(cfg.num_freqs), s, 2f64.sqrt(), &mut rng);
        p.init_linear("recon.sdf.fc2", s, s, 2f64.sqrt(), &mut rng);
        p.init_linear("recon.sdf.out", s, 1, 1.0, &mut rng);
        ReconModel { cfg, params: p }
    }

    pub fn from_params(cfg: ReconConfig, params: ParamStore) -> Result<Self> {
        let probe = ReconModel::new(cfg.clone(), 0);
        for (name, t) in probe.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim("recon checkpoint", t.shape(), got.shape()));
            }
        }
        Ok(ReconModel { cfg, params })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Predicted occluder coverage per patch, `[NUM_PATCHES × 1]` in `[0, 1]`.
    pub fn mask_on_tape(&self, tape: &mut Tape, b: &mut Binder, patches: Var) -> Result<Var> {
        let z = b.linear(tape, "recon.mask", patches)?;
        let t = tape.tanh(z)?;
        let half = tape.constant(Tensor::filled(&[NUM_PATCHES, 1], 0.5));
        let s = tape.scale(t, 0.5)?;
        tape.add(s, half)
    }

    fn mlp2(tape: &mut Tape, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
        let h = b.linear(tape, &format!("{name}.fc1"), x)?;
        let h = tape.relu(h)?;
        b.linear(tape, &format!("{name}.fc2"), h)
    }

    /// `f_s(cues + hand + color)`.
    pub fn combine_on_tape(&self, tape: &mut Tape, b: &mut Binder, cues: Var, hand: Var, color: Var) -> Result<Var> {
        let s = tape.add(cues, hand)?;
        let s = tape.add(s, color)?;
        Self::mlp2(tape, b, "recon.fs", s)
    }

    /// Feature bundle of one image. `mask` is the per-patch occluder coverage;
    /// when absent the mask head predicts it.
    pub fn features_on_tape(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        feats: &ImageFeatures,
        mask: Option<&[f64]>,
    ) -> Result<BundleVars> {
        let flat = tape.constant(Tensor::from_parts(vec![1, POOLED_LEN], feats.patches.clone()));
        let cues = Self::mlp2(tape, b, "recon.cues", flat)?;
        let grid = tape.constant(Tensor::from_parts(vec![NUM_PATCHES, CHANNELS], feats.patches.clone()));
        let m = match mask {
            Some(m) => {
                if m.len() != NUM_PATCHES {
                    return Err(Error::dim("occluder mask", &[NUM_PATCHES], &[m.len()]));
                }
                tape.constant(Tensor::from_parts(vec![NUM_PATCHES, 1], m.to_vec()))
            }
            None => self.mask_on_tape(tape, b, grid)?,
        };
        let ones = tape.constant(Tensor::filled(&[1, CHANNELS], 1.0));
        let spread = tape.matmul(m, ones)?;
        let masked = tape.mul(grid, spread)?;
        let masked = tape.reshape(masked, &[1, POOLED_LEN])?;
        let hand = Self::mlp2(tape, b, "recon.hand", masked)?;
        let hist = tape.constant(Tensor::from_parts(vec![1, HIST_LEN], feats.histogram.clone()));
        let color = b.linear(tape, "recon.color", hist)?;
        let combined = self.combine_on_tape(tape, b, cues, hand, color)?;
        Ok(BundleVars {
            cues,
            hand,
            color,
            combined,
        })
    }

    /// SDF decoder over a batch of encoded points `[P × enc]`; returns `[P × 1]`.
    pub fn sdf_on_tape(&self, tape: &mut Tape, b: &mut Binder, combined: Var, encoded: Var) -> Result<Var> {
        let f = b.linear(tape, "recon.sdf.feat", combined)?;
        let pos = b.linear(tape, "recon.sdf.pos", encoded)?;
        let h = tape.add_row(pos, f)?;
        let h = tape.relu(h)?;
        let h = b.linear(tape, "recon.sdf.fc2", h)?;
        let h = tape.relu(h)?;
        b.linear(tape, "recon.sdf.out", h)
    }

    pub fn encode_points(&self, points: &[Vec3]) -> Tensor {
        let w = encoding_len(self.cfg.num_freqs);
        let mut v = Vec::with_capacity(points.len() * w);
        for p in points {
            v.extend(positional_encoding(*p, self.cfg.num_freqs));
        }
        Tensor::from_parts(vec![points.len(), w], v)
    }

    pub fn predict_mask(&self, feats: &ImageFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let grid = tape.constant(Tensor::from_parts(vec![NUM_PATCHES, CHANNELS], feats.patches.clone()));
        let m = self.mask_on_tape(&mut tape, &mut b, grid)?;
        Ok(tape.value(m).values().to_vec())
    }

    pub fn extract_features(&self, img: &ImageTensor) -> Result<FeatureBundle> {
        self.extract_from(&img.features(), None)
    }

    pub fn extract_from(&self, feats: &ImageFeatures, mask: Option<&[f64]>) -> Result<FeatureBundle> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let v = self.features_on_tape(&mut tape, &mut b, feats, mask)?;
        let get = |x: Var| tape.value(x).values().to_vec();
        Ok(FeatureBundle {
            cues: get(v.cues),
            hand: get(v.hand),
            color: get(v.color),
            combined: get(v.combined),
        })
    }

    /// Recomputes `f_combined` from the three parts.
    pub fn combine(&self, cues: &[f64], hand: &[f64], color: &[f64]) -> Result<Vec<f64>> {
        let f = self.cfg.feature_dim;
        for part in [cues, hand, color] {
            if part.len() != f {
                return Err(Error::dim("feature part", &[f], &[part.len()]));
            }
        }
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let [c, h, k] = [cues, hand, color].map(|x| tape.constant(Tensor::from_parts(vec![1, f], x.to_vec())));
        let out = self.combine_on_tape(&mut tape, &mut b, c, h, k)?;
        Ok(tape.value(out).values().to_vec())
    }

    pub fn sdf_query(&self, combined: &[f64], p: Vec3) -> Result<f64> {
        check_in_extent(p)?;
        Ok(self.sdf_batch(combined, &[p])?[0])
    }

    /// Decoder values at many points; no extent check.
    pub fn sdf_batch(&self, combined: &[f64], points: &[Vec3]) -> Result<Vec<f64>> {
        if combined.len() != self.cfg.feature_dim {
            return Err(Error::dim("sdf query", &[self.cfg.feature_dim], &[combined.len()]));
        }
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let mut b = Binder::frozen(&self.params);
            let f = tape.constant(Tensor::from_parts(vec![1, combined.len()], combined.to_vec()));
            let enc = tape.constant(self.encode_points(chunk));
            let y = self.sdf_on_tape(&mut tape, &mut b, f, enc)?;
            out.extend_from_slice(tape.value(y).values());
        }
        Ok(out)
    }

    pub fn sample_grid(&self, combined: &[f64], resolution: usize) -> Result<SdfGrid> {
        let values = self.sdf_batch(combined, &grid_points(resolution))?;
        SdfGrid::new(resolution, values)
    }
}
