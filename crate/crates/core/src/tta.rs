//! Per-sample test-time adaptation: sample candidate answers, score them with
//! the frozen CLIP pair and take policy-gradient ascent steps on the
//! centered reward.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{ClipModel, Embedding};
use crate::error::{Error, Result};
use crate::image::ImageFeatures;
use crate::lm::{beam_search, sample_decode, BeamHypothesis, Vlm};
use crate::numerics::{Binder, Optimizer, Tape, Tensor, Trainable};
use crate::text::{TokenSeq, PAD};

/// Score assigned to a candidate with no content tokens.
pub const EMPTY_CLIP_SCORE: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    LmHeadOnly,
    LmAll,
    LmPlusFusion,
}

impl AdaptScope {
    pub fn trainable(self) -> Trainable {
        let p: &[&str] = match self {
            AdaptScope::LmHeadOnly => &["lm.head."],
            AdaptScope::LmAll => &["lm."],
            AdaptScope::LmPlusFusion => &["lm.", "fusion."],
        };
        Trainable::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }
}

/// Estimator of the expected score subtracted from each candidate's score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBaseline {
    Mean,
    LeaveOneOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub k: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub scope: AdaptScope,
    pub baseline: RewardBaseline,
    pub max_new: usize,
    pub beam_width: usize,
    /// Carry adapted parameters from one test sample to the next.
    pub cumulative: bool,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            k: 8,
            steps: 4,
            learning_rate: 2e-5,
            temperature: 1.0,
            scope: AdaptScope::LmPlusFusion,
            baseline: RewardBaseline::Mean,
            max_new: 8,
            beam_width: 4,
            cumulative: false,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("tta needs at least one sample per step".into()));
        }
        if !(self.temperature > 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("tta temperature must be positive and lr non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardSample {
    pub text: TokenSeq,
    pub logprob: f64,
    pub clip_s: f64,
    pub reward: f64,
}

/// `s_i − baseline_i`. The mean baseline makes rewards sum to zero.
pub fn center_scores(scores: &[f64], baseline: RewardBaseline) -> Result<Vec<f64>> {
    let k = scores.len();
    if k == 0 {
        return Err(Error::domain("reward batch is empty"));
    }
    let total: f64 = scores.iter().sum();
    Ok(match baseline {
        RewardBaseline::Mean => {
            let mean = total / k as f64;
            scores.iter().map(|s| s - mean).collect()
        }
        RewardBaseline::LeaveOneOut if k == 1 => vec![0.0],
        RewardBaseline::LeaveOneOut => scores
            .iter()
            .map(|s| s - (total - s) / (k - 1) as f64)
            .collect(),
    })
}

/// CLIP score of a candidate's content tokens against the image; padding is ignored.
pub fn candidate_score(clip: &ClipModel, text: &TokenSeq, img: &ImageFeatures) -> Result<f64> {
    let content = TokenSeq::new(text.content().iter().copied().filter(|&t| t != PAD).collect())?;
    if content.is_empty() {
        return Ok(EMPTY_CLIP_SCORE);
    }
    clip.clip_score_features(&content, img)
}

pub fn compute_rewards(
    clip: &ClipModel,
    candidates: &[BeamHypothesis],
    img: &ImageFeatures,
    baseline: RewardBaseline,
) -> Result<Vec<RewardSample>> {
    if candidates.is_empty() {
        return Err(Error::domain("reward batch is empty"));
    }
    let scores = candidates
        .iter()
        .map(|c| candidate_score(clip, &c.tokens, img))
        .collect::<Result<Vec<_>>>()?;
    let rewards = center_scores(&scores, baseline)?;
    Ok(candidates
        .iter()
        .zip(scores.iter().zip(rewards))
        .map(|(c, (&clip_s, reward))| RewardSample {
            text: c.tokens.clone(),
            logprob: c.cum_logprob,
            clip_s,
            reward,
        })
        .collect())
}

/// `(1/K) Σ w_i · log p(t_i | prompt)` and its gradient over `scope`.
pub fn surrogate_objective(
    vlm: &Vlm,
    x_v: &Embedding,
    instruction: &TokenSeq,
    samples: &[(TokenSeq, f64)],
    scope: AdaptScope,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if samples.is_empty() {
        return Err(Error::domain("surrogate needs at least one sample"));
    }
    let k = samples.len() as f64;
    let mut tape = Tape::new();
    let mut b = Binder::new(vlm.params(), scope.trainable());
    let visual = vlm.visual_on_tape(&mut tape, &mut b, x_v)?;
    let n = tape.value(visual).rows();
    let mut prefix = instruction.content().to_vec();
    prefix.push(crate::text::BOS);
    let mut terms = Vec::with_capacity(samples.len());
    for (text, w) in samples {
        let mut ids = prefix.clone();
        ids.extend_from_slice(text.ids());
        let logits = vlm.logits_on_tape(&mut tape, &mut b, visual, &ids)?;
        let start = n + prefix.len() - 1;
        let picks = text
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &t)| (start + i, t as usize, w / k))
            .collect();
        terms.push(tape.log_likelihood(logits, picks)?);
    }
    let mut j = terms[0];
    for &t in &terms[1..] {
        j = tape.add(j, t)?;
    }
    let grads = tape.backward_scalar(j)?;
    Ok((tape.value(j).item(), b.gradients(&grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub mean_clip_s: f64,
    pub reward_variance: f64,
    /// Log-probability of the highest-scoring candidate.
    pub cum_logprob_of_best: f64,
    pub updated: bool,
}

/// SplitMix64 step; used to give every candidate its own sampling stream.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `K` candidates from the current model.
pub fn draw_candidates(
    vlm: &Vlm,
    x_v: &Embedding,
    instruction: &TokenSeq,
    cfg: &TtaConfig,
    seed: u64,
) -> Result<Vec<BeamHypothesis>> {
    let prompt = vlm.prompt(x_v, instruction)?;
    (0..cfg.k)
        .into_par_iter()
        .map(|i| sample_decode(&prompt, cfg.max_new, cfg.temperature, mix_seed(seed, i as u64, 0)))
        .collect()
}

/// One ascent step on the score-function objective; a no-op when every reward is zero.
pub fn adapt_step(
    vlm: &mut Vlm,
    clip: &ClipModel,
    x_v: &Embedding,
    img: &ImageFeatures,
    instruction: &TokenSeq,
    cfg: &TtaConfig,
    seed: u64,
) -> Result<StepReport> {
    cfg.validate()?;
    let candidates = draw_candidates(vlm, x_v, instruction, cfg, seed)?;
    let rewards = compute_rewards(clip, &candidates, img, cfg.baseline)?;
    let k = rewards.len() as f64;
    let mean_clip_s = rewards.iter().map(|r| r.clip_s).sum::<f64>() / k;
    let reward_variance = rewards.iter().map(|r| r.reward * r.reward).sum::<f64>() / k;
    let best = rewards
        .iter()
        .fold(&rewards[0], |a, r| if r.clip_s > a.clip_s { r } else { a });
    let mut report = StepReport {
        mean_clip_s,
        reward_variance,
        cum_logprob_of_best: best.logprob,
        updated: false,
    };
    if rewards.iter().all(|r| r.reward == 0.0) {
        return Ok(report);
    }
    let samples: Vec<(TokenSeq, f64)> = rewards.iter().map(|r| (r.text.clone(), r.reward)).collect();
    let (_, mut grads) = surrogate_objective(vlm, x_v, instruction, &samples, cfg.scope)?;
    // Ascent: descend on the negated objective.
    crate::numerics::scale_grads(&mut grads, -1.0);
    Optimizer::sgd(cfg.learning_rate).step(vlm.params_mut(), &grads)?;
    report.updated = true;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_id: String,
    pub step: usize,
    pub mean_clip_s: f64,
    pub reward_variance: f64,
    pub cum_logprob_of_best: f64,
}

/// Adapts `vlm` in place for `cfg.steps` steps, then answers with beam search.
pub fn adapt_and_answer(
    vlm: &mut Vlm,
    clip: &ClipModel,
    x_v: &Embedding,
    img: &ImageFeatures,
    instruction: &TokenSeq,
    cfg: &TtaConfig,
    sample_id: &str,
) -> Result<(BeamHypothesis, Vec<TraceRecord>)> {
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seed = mix_seed(cfg.seed, step as u64 + 1, fnv(sample_id));
        let r = adapt_step(vlm, clip, x_v, img, instruction, cfg, seed)?;
        trace.push(TraceRecord {
            sample_id: sample_id.to_string(),
            step,
            mean_clip_s: r.mean_clip_s,
            reward_variance: r.reward_variance,
            cum_logprob_of_best: r.cum_logprob_of_best,
        });
    }
    let prompt = vlm.prompt(x_v, instruction)?;
    let answer = beam_search(&prompt, cfg.beam_width, cfg.max_new, false)?;
    Ok((answer, trace))
}

/// Per-sample adaptation on a private copy; `vlm` itself is untouched.
pub fn test_time_adapt(
    vlm: &Vlm,
    clip: &ClipModel,
    x_v: &Embedding,
    img: &ImageFeatures,
    instruction: &TokenSeq,
    cfg: &TtaConfig,
    sample_id: &str,
) -> Result<(BeamHypothesis, Vec<TraceRecord>)> {
    let mut local = vlm.clone();
    adapt_and_answer(&mut local, clip, x_v, img, instruction, cfg, sample_id)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering() {
        let r = center_scores(&[0.6, 0.4], RewardBaseline::Mean).unwrap();
        assert!((r[0] - 0.1).abs() < 1e-15 && (r[1] + 0.1).abs() < 1e-15);
        assert_eq!(center_scores(&[0.37], RewardBaseline::Mean).unwrap(), vec![0.0]);
        assert_eq!(center_scores(&[0.37], RewardBaseline::LeaveOneOut).unwrap(), vec![0.0]);
        assert!(center_scores(&[], RewardBaseline::Mean).is_err());
    }
}
