//! Toy CLIP-style dual encoder and the cosine score built on it.
//!
//! The image tower consumes patch-pooled pixels, the text tower a mean of
//! token embeddings. Both emit unit-norm vectors; the score is their dot
//! product.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageFeatures, ImageTensor, POOLED_LEN};
use crate::numerics::{Binder, Optimizer, ParamStore, Tape, Tensor, Trainable, Var};
use crate::text::{TokenSeq, PAD};

/// Fixed-dimension real vector, optionally unit-norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding {
            values,
            normalized: false,
        }
    }

    /// Scales `values` to unit length.
    pub fn unit(values: Vec<f64>) -> Self {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Embedding {
            values: values.iter().map(|v| v / n).collect(),
            normalized: true,
        }
    }

    pub(crate) fn from_unit(values: Vec<f64>) -> Self {
        Embedding {
            values,
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub init_temperature: f64,
}

impl ClipConfig {
    pub fn new(vocab_size: usize) -> Self {
        ClipConfig {
            embed_dim: 64,
            hidden: 64,
            vocab_size,
            init_temperature: 0.07,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            steps: 200,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Image/text pair used for contrastive training.
#[derive(Clone, Debug)]
pub struct ClipPair {
    pub image: ImageFeatures,
    pub text: TokenSeq,
}

#[derive(Clone, Debug)]
pub struct ClipModel {
    cfg: ClipConfig,
    params: ParamStore,
}

impl ClipModel {
    pub fn new(cfg: ClipConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, h) = (cfg.embed_dim, cfg.hidden);
        p.init_linear("clip.image.patch_embed", POOLED_LEN, d, 1.0, &mut rng);
        p.init_layer_norm("clip.image.ln", d);
        p.init_linear("clip.image.fc1", d, h, 2f64.sqrt(), &mut rng);
        p.init_linear("clip.image.fc2", h, d, 1.0, &mut rng);
        p.insert(
            "clip.text.token_embed",
            Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut rng),
        );
        p.init_linear("clip.text.fc1", d, h, 2f64.sqrt(), &mut rng);
        p.init_linear("clip.text.fc2", h, d, 1.0, &mut rng);
        // Non-zero output biases keep degenerate inputs off the origin.
        p.insert("clip.image.fc2.bias", Tensor::randn(&[d], 0.05, &mut rng));
        p.insert("clip.text.fc2.bias", Tensor::randn(&[d], 0.05, &mut rng));
        p.insert(
            "clip.logit_scale",
            Tensor::scalar((1.0 / cfg.init_temperature).ln()),
        );
        ClipModel { cfg, params: p }
    }

    pub fn from_params(cfg: ClipConfig, params: ParamStore) -> Result<Self> {
        let m = ClipModel::new(cfg, 0);
        for name in m.params.names() {
            let expected = m.params.get(name)?.shape();
            let got = params.get(name)?.shape();
            if expected != got {
                return Err(Error::dim("clip checkpoint", expected, got));
            }
        }
        Ok(ClipModel { cfg, params })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Unit-norm image embeddings, one row per input.
    pub fn image_tower(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        images: &[&ImageFeatures],
    ) -> Result<Var> {
        let mut flat = Vec::with_capacity(images.len() * POOLED_LEN);
        for f in images {
            flat.extend_from_slice(&f.patches);
        }
        let x = tape.constant(Tensor::matrix(images.len(), POOLED_LEN, flat)?);
        let h = binder.linear(tape, "clip.image.patch_embed", x)?;
        let h = binder.layer_norm(tape, "clip.image.ln", h)?;
        let h = binder.linear(tape, "clip.image.fc1", h)?;
        let h = tape.relu(h)?;
        let h = binder.linear(tape, "clip.image.fc2", h)?;
        tape.normalize_rows(h)
    }

    /// Unit-norm text embeddings; PAD tokens do not contribute.
    pub fn text_tower(&self, tape: &mut Tape, binder: &mut Binder, texts: &[&TokenSeq]) -> Result<Var> {
        let table = binder.var(tape, "clip.text.token_embed")?;
        let mut pooled = Vec::with_capacity(texts.len());
        for t in texts {
            let ids: Vec<usize> = t
                .ids()
                .iter()
                .filter(|&&id| id != PAD)
                .map(|&id| id as usize)
                .collect();
            if ids.is_empty() {
                return Err(Error::domain("cannot encode an empty token sequence"));
            }
            let e = tape.embedding(table, &ids)?;
            pooled.push(tape.mean_rows(e)?);
        }
        let x = tape.concat_rows(&pooled)?;
        let h = binder.linear(tape, "clip.text.fc1", x)?;
        let h = tape.relu(h)?;
        let h = binder.linear(tape, "clip.text.fc2", h)?;
        tape.normalize_rows(h)
    }

    pub fn encode_image(&self, img: &ImageTensor) -> Result<Embedding> {
        self.encode_image_features(&img.features())
    }

    pub fn encode_image_features(&self, f: &ImageFeatures) -> Result<Embedding> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let v = self.image_tower(&mut tape, &mut b, &[f])?;
        Ok(Embedding::from_unit(tape.value(v).values().to_vec()))
    }

    pub fn encode_text(&self, t: &TokenSeq) -> Result<Embedding> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let v = self.text_tower(&mut tape, &mut b, &[t])?;
        Ok(Embedding::from_unit(tape.value(v).values().to_vec()))
    }

    /// Cosine similarity of the text and image embeddings.
    pub fn clip_score(&self, t: &TokenSeq, v: &ImageTensor) -> Result<f64> {
        Ok(self.encode_text(t)?.dot(&self.encode_image(v)?))
    }

    pub fn clip_score_features(&self, t: &TokenSeq, v: &ImageFeatures) -> Result<f64> {
        Ok(self.encode_text(t)?.dot(&self.encode_image_features(v)?))
    }

    /// Symmetric InfoNCE over the in-batch similarity matrix.
    pub fn contrastive_loss(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&ClipPair],
    ) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::domain("contrastive batch needs at least 2 pairs"));
        }
        let images: Vec<&ImageFeatures> = batch.iter().map(|p| &p.image).collect();
        let texts: Vec<&TokenSeq> = batch.iter().map(|p| &p.text).collect();
        let iv = self.image_tower(tape, binder, &images)?;
        let tv = self.text_tower(tape, binder, &texts)?;
        let tt = tape.transpose(tv)?;
        let sims = tape.matmul(iv, tt)?;
        let log_scale = binder.var(tape, "clip.logit_scale")?;
        let scale = tape.exp(log_scale)?;
        let logits = tape.mul_scalar(sims, scale)?;
        let targets: Vec<Option<usize>> = (0..batch.len()).map(Some).collect();
        let l_img = tape.cross_entropy(logits, &targets)?;
        let logits_t = tape.transpose(logits)?;
        let l_txt = tape.cross_entropy(logits_t, &targets)?;
        let total = tape.add(l_img, l_txt)?;
        tape.scale(total, 0.5)
    }

    /// Adam on the symmetric InfoNCE loss; returns the loss of every step.
    pub fn train_contrastive(&mut self, pairs: &[ClipPair], cfg: &ContrastiveConfig) -> Result<Vec<f64>> {
        if pairs.len() < 2 || cfg.batch_size < 2 {
            return Err(Error::domain("contrastive training needs batches of at least 2 pairs"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Optimizer::adam(cfg.learning_rate);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut cursor = order.len();
        let mut trace = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let batch: Vec<&ClipPair> = if pairs.len() <= cfg.batch_size {
                pairs.iter().collect()
            } else {
                if cursor + cfg.batch_size > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let b = order[cursor..cursor + cfg.batch_size].iter().map(|&i| &pairs[i]).collect();
                cursor += cfg.batch_size;
                b
            };
            let mut tape = Tape::new();
            let grads = {
                let mut binder = Binder::new(&self.params, Trainable::All);
                let loss = self.contrastive_loss(&mut tape, &mut binder, &batch)?;
                trace.push(tape.value(loss).item());
                let g = tape.backward_scalar(loss)?;
                binder.gradients(&g)
            };
            opt.step(&mut self.params, &grads)?;
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ClipModel {
        ClipModel::new(ClipConfig::new(12), 3)
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = model();
        let img = ImageTensor::filled([0.2, 0.4, 0.9]);
        let a = m.encode_image(&img).unwrap();
        let b = m.encode_image(&img).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        let z = m.encode_image(&ImageTensor::filled([0.0; 3])).unwrap();
        assert!(z.values().iter().all(|v| v.is_finite()));
        assert!((z.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_padding_is_ignored() {
        let m = model();
        let t = TokenSeq::new(vec![4, 7, 5]).unwrap();
        let a = m.encode_text(&t).unwrap();
        assert_eq!(a, m.encode_text(&t.padded(9)).unwrap());
        assert_eq!(a, m.encode_text(&t).unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_is_rejected() {
        let m = model();
        assert!(matches!(m.encode_text(&TokenSeq::empty()), Err(Error::Domain(_))));
        let pad_only = TokenSeq::new(vec![PAD, PAD]).unwrap();
        assert!(m.encode_text(&pad_only).is_err());
    }

    #[test]
    fn score_is_embedding_dot_and_bounded() {
        let m = model();
        let t = TokenSeq::new(vec![6, 8]).unwrap();
        let img = ImageTensor::filled([0.9, 0.1, 0.1]);
        let s = m.clip_score(&t, &img).unwrap();
        let expected = m.encode_text(&t).unwrap().dot(&m.encode_image(&img).unwrap());
        assert_eq!(s, expected);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn equal_and_orthogonal_unit_vectors() {
        let e = Embedding::unit(vec![0.3, -0.4, 1.2]);
        assert!((e.dot(&e) - 1.0).abs() < 1e-12);
        let a = Embedding::unit(vec![1.0, 0.0]);
        let b = Embedding::unit(vec![0.0, 1.0]);
        assert_eq!(a.dot(&b), 0.0);
    }

    #[test]
    fn duplicated_pairs_give_ln2() {
        let m = model();
        let pair = ClipPair {
            image: ImageTensor::filled([0.3, 0.6, 0.1]).features(),
            text: TokenSeq::new(vec![4, 5]).unwrap(),
        };
        let batch = [&pair, &pair];
        let mut tape = Tape::new();
        let mut b = Binder::frozen(m.params());
        let loss = m.contrastive_loss(&mut tape, &mut b, &batch).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_pair_batch_is_rejected() {
        let mut m = model();
        let pair = ClipPair {
            image: ImageTensor::background().features(),
            text: TokenSeq::new(vec![4]).unwrap(),
        };
        assert!(m
            .train_contrastive(&[pair], &ContrastiveConfig::default())
            .is_err());
    }
}
