use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use crate::clip::{ClipConfig, ClipModel, ClipPair, ContrastiveConfig, Embedding};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, Vlm, VlmConfig};
use crate::numerics::{accumulate_grads, scale_grads, Binder, Optimizer, Tape, Tensor, Trainable};
use crate::recon::train::{train_sdf, SdfSample};
use crate::recon::ReconModel;
use crate::synth::dataset::LoadedScene;
use crate::synth::{ObjectClass, INSTRUCTIONS};
use crate::text::{TokenSeq, Vocab, BOS, EOS};

/// Vocabulary over every instruction and every answer the generator can emit.
pub fn build_vocab() -> Result<Vocab> {
    let mut corpus: Vec<String> = INSTRUCTIONS.iter().map(|s| s.to_string()).collect();
    for c in ObjectClass::ALL {
        for size in ["small", "large"] {
            corpus.push(format!("a {size} {} {}", c.color_name(), c.name()));
        }
    }
    corpus.push("yes no".into());
    Vocab::build(&corpus)
}

/// Text paired with each image for contrastive pretraining: its description.
pub fn clip_pairs(scenes: &[LoadedScene], vocab: &Vocab) -> Vec<ClipPair> {
    scenes
        .iter()
        .map(|s| ClipPair {
            image: s.features.clone(),
            text: vocab.tokenize(&s.record.qa[4].answer),
        })
        .collect()
}

pub fn pretrain_clip(scenes: &[LoadedScene], vocab: &Vocab, cfg: &ContrastiveConfig, seed: u64) -> Result<(ClipModel, Vec<f64>)> {
    let mut clip = ClipModel::new(ClipConfig::new(vocab.len()), seed);
    let trace = clip.train_contrastive(&clip_pairs(scenes, vocab), cfg)?;
    Ok((clip, trace))
}

/// One supervised question/answer pair.
#[derive(Clone, Debug)]
pub struct LmExample {
    pub x_v: Embedding,
    /// Instruction followed by BOS.
    pub prompt: Vec<u32>,
    /// Answer followed by EOS.
    pub answer: Vec<u32>,
    /// Which answer positions contribute to the loss.
    pub supervise: Vec<bool>,
}

impl LmExample {
    pub fn new(x_v: Embedding, instruction: &TokenSeq, answer: &TokenSeq) -> Self {
        let mut prompt = instruction.content().to_vec();
        prompt.push(BOS);
        let mut ans = answer.content().to_vec();
        ans.push(EOS);
        LmExample {
            x_v,
            supervise: vec![true; ans.len()],
            prompt,
            answer: ans,
        }
    }
}

pub fn lm_examples(scenes: &[LoadedScene], clip: &ClipModel, vocab: &Vocab) -> Result<Vec<LmExample>> {
    let embeds = scenes
        .par_iter()
        .map(|s| clip.encode_image_features(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(scenes.len() * INSTRUCTIONS.len());
    for (s, x_v) in scenes.iter().zip(embeds) {
        for qa in &s.record.qa {
            out.push(LmExample::new(
                x_v.clone(),
                &vocab.tokenize(&qa.instruction),
                &vocab.tokenize(&qa.answer),
            ));
        }
    }
    Ok(out)
}

/// Mean next-token cross-entropy over the supervised answer positions; the
/// visual and instruction positions never contribute.
pub fn example_loss_and_grads(
    vlm: &Vlm,
    ex: &LmExample,
    trainable: &Trainable,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let mut b = Binder::new(vlm.params(), trainable.clone());
    let visual = vlm.visual_on_tape(&mut tape, &mut b, &ex.x_v)?;
    let n = tape.value(visual).rows();
    let mut ids = ex.prompt.clone();
    ids.extend_from_slice(&ex.answer[..ex.answer.len() - 1]);
    let logits = vlm.logits_on_tape(&mut tape, &mut b, visual, &ids)?;
    let mut targets = vec![None; n + ids.len()];
    let start = n + ex.prompt.len() - 1;
    for (i, (&t, &keep)) in ex.answer.iter().zip(&ex.supervise).enumerate() {
        if keep {
            targets[start + i] = Some(t as usize);
        }
    }
    let loss = tape.cross_entropy(logits, &targets)?;
    let grads = tape.backward_scalar(loss)?;
    Ok((tape.value(loss).item(), b.gradients(&grads)))
}

pub fn vlm_trainable() -> Trainable {
    Trainable::Prefixes(vec!["lm.".into(), "fusion.".into()])
}

/// Mean loss and gradient over a batch, computed in parallel.
pub fn batch_loss_and_grads(vlm: &Vlm, batch: &[&LmExample]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let trainable = vlm_trainable();
    let parts = batch
        .par_iter()
        .map(|ex| example_loss_and_grads(vlm, ex, &trainable))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = BTreeMap::new();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        accumulate_grads(&mut grads, g);
    }
    let k = 1.0 / batch.len() as f64;
    scale_grads(&mut grads, k);
    Ok((loss * k, grads))
}

pub fn vlm_config(cfg: &RunConfig, vocab: &Vocab, clip: &ClipModel) -> VlmConfig {
    let mut fusion = cfg.fusion.clone();
    fusion.embed_dim = clip.config().embed_dim;
    VlmConfig {
        lm: LmConfig {
            d_model: fusion.d_model,
            ..LmConfig::new(vocab.len())
        },
        fusion,
    }
}

/// Fine-tunes a fresh language model and fusion map on `examples`; returns the per-step loss.
pub fn finetune_vlm(vlm: &mut Vlm, examples: &[LmExample], cfg: &RunConfig) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::domain("stage-1 training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_4531);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LmExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_loss_and_grads(vlm, &batch)?;
            opt.step(vlm.params_mut(), &grads)?;
            trace.push(loss);
        }
    }
    Ok(trace)
}

pub struct Stage1Output {
    pub vocab: Vocab,
    pub clip: ClipModel,
    pub vlm: Vlm,
    pub clip_trace: Vec<f64>,
    pub lm_trace: Vec<f64>,
}

/// Contrastive pretraining of the CLIP pair, which is then frozen, followed by
/// supervised fine-tuning of the fusion map and language model.
pub fn stage1_finetune(cfg: &RunConfig, scenes: &[LoadedScene]) -> Result<Stage1Output> {
    if scenes.is_empty() {
        return Err(Error::domain("stage-1 training set is empty"));
    }
    let vocab = build_vocab()?;
    let clip_cfg = ContrastiveConfig {
        seed: cfg.seed,
        ..cfg.clip
    };
    let (clip, clip_trace) = pretrain_clip(scenes, &vocab, &clip_cfg, cfg.seed)?;
    let examples = lm_examples(scenes, &clip, &vocab)?;
    let mut vlm = Vlm::new(vlm_config(cfg, &vocab, &clip), cfg.seed)?;
    let lm_trace = finetune_vlm(&mut vlm, &examples, cfg)?;
    Ok(Stage1Output {
        vocab,
        clip,
        vlm,
        clip_trace,
        lm_trace,
    })
}

pub fn stage2_train_sdf(cfg: &RunConfig, scenes: &[LoadedScene]) -> Result<(ReconModel, Vec<f64>)> {
    if scenes.is_empty() {
        return Err(Error::domain("stage-2 training set is empty"));
    }
    let samples: Vec<SdfSample> = scenes.iter().map(SdfSample::from_scene).collect();
    let mut model = ReconModel::new(cfg.recon.clone(), cfg.seed);
    let trace = train_sdf(&mut model, &samples, &cfg.sdf_train)?;
    Ok((model, trace))
}

/// Moving average with the given window; shorter at the start.
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for i in 0..trace.len() {
        sum += trace[i];
        if i >= w {
            sum -= trace[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
