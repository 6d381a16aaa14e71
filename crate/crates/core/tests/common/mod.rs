#![allow(dead_code)]

use std::collections::BTreeMap;

use occvlm::clip::{ClipConfig, ClipModel, ClipPair, Embedding};
use occvlm::fusion::FusionConfig;
use occvlm::image::{patch_coverage, ImageFeatures, ImageTensor, IMAGE_SIZE};
use occvlm::lm::{LmConfig, Vlm, VlmConfig};
use occvlm::numerics::{ParamStore, Tensor};
use occvlm::recon::{ReconConfig, ReconModel, SdfSample};
use occvlm::synth::{generate_scene, SceneSpec, Split};
use occvlm::text::TokenSeq;
use rand::Rng;

pub const TOY_VOCAB: usize = 12;

/// A random image's features.
pub fn random_features<R: Rng>(rng: &mut R) -> ImageFeatures {
    let data: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE * 3).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(data).unwrap().features()
}

pub fn random_tokens<R: Rng>(rng: &mut R, len: usize) -> TokenSeq {
    TokenSeq::new((0..len).map(|_| rng.random_range(4..TOY_VOCAB as u32)).collect()).unwrap()
}

pub fn random_embedding<R: Rng>(rng: &mut R, dim: usize) -> Embedding {
    Embedding::unit((0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
}

pub fn toy_clip(seed: u64) -> ClipModel {
    ClipModel::new(
        ClipConfig {
            embed_dim: 8,
            hidden: 8,
            ..ClipConfig::new(TOY_VOCAB)
        },
        seed,
    )
}

pub fn random_pairs<R: Rng>(rng: &mut R, n: usize) -> Vec<ClipPair> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..5);
            ClipPair {
                image: random_features(rng),
                text: random_tokens(rng, len),
            }
        })
        .collect()
}

pub fn toy_vlm_config() -> VlmConfig {
    VlmConfig {
        lm: LmConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            mlp_hidden: 16,
            max_len: 32,
            vocab_size: TOY_VOCAB,
        },
        fusion: FusionConfig {
            alpha: 0.5,
            n_tokens: 3,
            d_model: 8,
            embed_dim: 8,
            bias: true,
        },
    }
}

pub fn toy_vlm(seed: u64) -> Vlm {
    Vlm::new(toy_vlm_config(), seed).unwrap()
}

pub fn toy_recon(seed: u64) -> ReconModel {
    ReconModel::new(
        ReconConfig {
            feature_dim: 8,
            hidden: 8,
            sdf_hidden: 8,
            num_freqs: 2,
            grid_resolution: 8,
        },
        seed,
    )
}

/// One rendered, in-memory view with its supervision.
pub fn scene_sample(seed: u64) -> SdfSample {
    let spec = SceneSpec {
        num_views: 1,
        ..SceneSpec::default()
    };
    let (rec, render) = generate_scene(seed, "gc", Split::Train, &spec).unwrap().remove(0);
    SdfSample {
        features: render.image.features(),
        coverage: patch_coverage(&render.occluder_mask),
        object: rec.object,
        rotation: occvlm::synth::render::view_rotation(rec.view_id, rec.num_views),
    }
}

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug)]
pub struct GradCase {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCase {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-9 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares one randomly chosen coordinate among the parameters with a
/// non-negligible gradient against a central difference of `loss`.
pub fn check_coordinate<R: Rng>(
    params: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    loss: impl Fn(&ParamStore) -> f64,
    h: f64,
    rng: &mut R,
) -> GradCase {
    let mut candidates: Vec<(&String, usize)> = Vec::new();
    for (name, g) in grads {
        for (i, v) in g.values().iter().enumerate() {
            if v.abs() > 1e-6 {
                candidates.push((name, i));
            }
        }
    }
    assert!(!candidates.is_empty(), "every gradient vanished");
    let (name, index) = candidates[rng.random_range(0..candidates.len())];
    let mut p = params.clone();
    let x0 = p.get(name).unwrap().values()[index];
    p.get_mut(name).unwrap().values_mut()[index] = x0 + h;
    let up = loss(&p);
    p.get_mut(name).unwrap().values_mut()[index] = x0 - h;
    let down = loss(&p);
    GradCase {
        name: name.clone(),
        index,
        analytic: grads[name].values()[index],
        numeric: (up - down) / (2.0 * h),
    }
}

/// Worst relative error across cases, with the offending case.
pub fn worst(cases: &[GradCase]) -> (f64, Option<&GradCase>) {
    cases
        .iter()
        .map(|c| (c.rel_error(), Some(c)))
        .fold((0.0, None), |a, b| if b.0 > a.0 { b } else { a })
}

use occvlm::harness::train::{example_loss_and_grads, vlm_trainable, LmExample};
use occvlm::numerics::{Binder, Tape, Trainable};
use occvlm::recon::train::stratified_points;
use occvlm::tta::{surrogate_objective, AdaptScope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn clip_loss(cfg: ClipConfig, p: &ParamStore, batch: &[ClipPair]) -> (f64, BTreeMap<String, Tensor>) {
    let model = ClipModel::from_params(cfg, p.clone()).unwrap();
    let refs: Vec<&ClipPair> = batch.iter().collect();
    let mut tape = Tape::new();
    let mut b = Binder::new(model.params(), Trainable::All);
    let l = model.contrastive_loss(&mut tape, &mut b, &refs).unwrap();
    let g = tape.backward_scalar(l).unwrap();
    (tape.value(l).item(), b.gradients(&g))
}

pub fn clip_cases(n: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let model = toy_clip(seed ^ i as u64);
            let cfg = *model.config();
            let k = rng.random_range(2..5);
            let batch = random_pairs(&mut rng, k);
            let (_, g) = clip_loss(cfg, model.params(), &batch);
            check_coordinate(model.params(), &g, |p| clip_loss(cfg, p, &batch).0, H, &mut rng)
        })
        .collect()
}

/// SDF L1 plus mask regression, with the hand branch fed by the mask head.
fn recon_loss(model: &ReconModel, p: &ParamStore, s: &SdfSample, pts: &[[f64; 3]]) -> (f64, BTreeMap<String, Tensor>) {
    let m = ReconModel::from_params(model.config().clone(), p.clone()).unwrap();
    let mut tape = Tape::new();
    let mut b = Binder::new(m.params(), Trainable::All);
    let bundle = m.features_on_tape(&mut tape, &mut b, &s.features, None).unwrap();
    let enc = tape.constant(m.encode_points(pts));
    let pred = m.sdf_on_tape(&mut tape, &mut b, bundle.combined, enc).unwrap();
    let t = tape.constant(Tensor::new(vec![pts.len(), 1], pts.iter().map(|q| s.target(*q)).collect()).unwrap());
    let d = tape.sub(pred, t).unwrap();
    let a = tape.abs(d).unwrap();
    let l1 = tape.mean(a).unwrap();
    let patches = tape.constant(Tensor::new(vec![s.coverage.len(), 3], s.features.patches.clone()).unwrap());
    let mk = m.mask_on_tape(&mut tape, &mut b, patches).unwrap();
    let cov = tape.constant(Tensor::new(vec![s.coverage.len(), 1], s.coverage.clone()).unwrap());
    let e = tape.sub(mk, cov).unwrap();
    let sq = tape.mul(e, e).unwrap();
    let mse = tape.mean(sq).unwrap();
    let l = tape.add(l1, mse).unwrap();
    let g = tape.backward_scalar(l).unwrap();
    (tape.value(l).item(), b.gradients(&g))
}

pub fn recon_cases(n: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<SdfSample> = (0..4).map(|i| scene_sample(seed.wrapping_add(i))).collect();
    (0..n)
        .map(|i| {
            let model = toy_recon(seed ^ i as u64);
            let s = &samples[i % samples.len()];
            let pts: Vec<[f64; 3]> = stratified_points(16, &mut rng);
            let (_, g) = recon_loss(&model, model.params(), s, &pts);
            check_coordinate(model.params(), &g, |p| recon_loss(&model, p, s, &pts).0, H, &mut rng)
        })
        .collect()
}

fn fusion_loss(vlm: &Vlm, p: &ParamStore, x: &Embedding, w: &Tensor) -> (f64, BTreeMap<String, Tensor>) {
    let cfg = &vlm.config().fusion;
    let mut tape = Tape::new();
    let mut b = Binder::new(p, Trainable::Prefixes(vec!["fusion.".into()]));
    let xv = tape.constant(Tensor::new(vec![1, x.dim()], x.values().to_vec()).unwrap());
    let y = occvlm::fusion::map_on_tape(&mut tape, &mut b, cfg, xv).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv).unwrap();
    let sq = tape.mul(prod, prod).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward_scalar(l).unwrap();
    (tape.value(l).item(), b.gradients(&g))
}

pub fn fusion_cases(n: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let vlm = toy_vlm(seed ^ i as u64);
            let cfg = vlm.config().fusion.clone();
            let x = random_embedding(&mut rng, cfg.embed_dim);
            let w = Tensor::new(
                vec![cfg.n_tokens, cfg.d_model],
                (0..cfg.n_tokens * cfg.d_model).map(|_| rng.random::<f64>() - 0.5).collect(),
            )
            .unwrap();
            let (_, g) = fusion_loss(&vlm, vlm.params(), &x, &w);
            check_coordinate(vlm.params(), &g, |p| fusion_loss(&vlm, p, &x, &w).0, H, &mut rng)
        })
        .collect()
}

fn with_params(vlm: &Vlm, p: &ParamStore) -> Vlm {
    Vlm::from_params(vlm.config().clone(), p.clone()).unwrap()
}

pub fn lm_cases(n: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let vlm = toy_vlm(seed ^ i as u64);
            let (li, la) = (rng.random_range(1..5), rng.random_range(1..4));
            let ex = LmExample::new(
                random_embedding(&mut rng, 8),
                &random_tokens(&mut rng, li),
                &random_tokens(&mut rng, la),
            );
            let tr = vlm_trainable();
            let (_, g) = example_loss_and_grads(&vlm, &ex, &tr).unwrap();
            check_coordinate(
                vlm.params(),
                &g,
                |p| example_loss_and_grads(&with_params(&vlm, p), &ex, &tr).unwrap().0,
                H,
                &mut rng,
            )
        })
        .collect()
}

pub fn tta_cases(n: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let vlm = toy_vlm(seed ^ i as u64);
            let x = random_embedding(&mut rng, 8);
            let li = rng.random_range(1..4);
            let ins = random_tokens(&mut rng, li);
            let k = rng.random_range(1..5);
            let samples: Vec<(TokenSeq, f64)> = (0..k)
                .map(|_| {
                    let len = rng.random_range(1..4);
                    (random_tokens(&mut rng, len), rng.random::<f64>() - 0.5)
                })
                .collect();
            let scope = AdaptScope::LmPlusFusion;
            let (_, g) = surrogate_objective(&vlm, &x, &ins, &samples, scope).unwrap();
            check_coordinate(
                vlm.params(),
                &g,
                |p| surrogate_objective(&with_params(&vlm, p), &x, &ins, &samples, scope).unwrap().0,
                H,
                &mut rng,
            )
        })
        .collect()
}

use occvlm::lm::NextTokenModel;
use occvlm::numerics::log_softmax;

/// Same next-token distribution after every prefix.
pub struct FixedLogits(pub Vec<f64>);

impl NextTokenModel for FixedLogits {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }
    fn next_log_probs(&self, _: &[u32]) -> occvlm::Result<Vec<f64>> {
        Ok(log_softmax(&self.0))
    }
}

/// Logits are a pseudo-random function of the full context.
pub struct HashedLogits {
    pub vocab: usize,
    pub prefix: Vec<u32>,
    pub salt: u64,
}

impl NextTokenModel for HashedLogits {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_log_probs(&self, generated: &[u32]) -> occvlm::Result<Vec<f64>> {
        let mut h = self.salt;
        for &t in self.prefix.iter().chain(generated) {
            h = occvlm::tta::mix_seed(h, t as u64 + 1, 7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        Ok(log_softmax(&logits))
    }
}

/// Best complete sequence of at most `max_new` tokens by summed
/// log-probability; ties go to the lexicographically smaller ids.
pub fn exhaustive_best<M: NextTokenModel>(model: &M, max_new: usize) -> (Vec<u32>, f64) {
    fn walk<M: NextTokenModel>(m: &M, ids: &mut Vec<u32>, score: f64, max_new: usize, best: &mut Option<(Vec<u32>, f64)>) {
        let lp = m.next_log_probs(ids).unwrap();
        for (t, l) in lp.iter().enumerate() {
            ids.push(t as u32);
            let s = score + l;
            if t as u32 == occvlm::text::EOS || ids.len() == max_new {
                let better = match best {
                    None => true,
                    Some((b_ids, b)) => s > *b || (s == *b && ids < b_ids),
                };
                if better {
                    *best = Some((ids.clone(), s));
                }
            } else {
                walk(m, ids, s, max_new, best);
            }
            ids.pop();
        }
    }
    let mut best = None;
    walk(model, &mut Vec::new(), 0.0, max_new, &mut best);
    best.unwrap()
}
