use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalMode;
use crate::clip::{ClipModel, Embedding};
use crate::error::{Error, Result};
use crate::fusion::blend;
use crate::image::ImageFeatures;
use crate::lm::{DecodeConfig, Vlm};
use crate::recon::{embed_occluded_features, ReconModel};
use crate::synth::dataset::LoadedScene;
use crate::synth::INSTRUCTIONS;
use crate::text::{split_words, Vocab};
use crate::tta::{test_time_adapt, TraceRecord, TtaConfig};

/// Instructions that are graded; the fifth (free description) is not.
pub const GRADED: usize = 4;

fn words(s: &str) -> Vec<String> {
    split_words(s)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect()
}

/// Instruction 1 by class name, 2–4 by yes/no; case and punctuation are ignored.
pub fn grade(instruction: usize, expected: &str, predicted: &str, substring_match: bool) -> bool {
    let e = words(expected);
    let p = words(predicted);
    if instruction == 1 && substring_match && !e.is_empty() {
        return p.windows(e.len()).any(|w| w == e.as_slice());
    }
    e == p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub scene_id: String,
    /// 1-based instruction number.
    pub instruction: usize,
    pub expected: String,
    pub predicted: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionAccuracy {
    pub instruction: usize,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueBlock {
    pub total: usize,
    pub baseline_correct: usize,
    pub baseline_failures: usize,
    pub rescued: usize,
    pub increment: f64,
    /// Externally quoted increment this block should be compared against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_increment: Option<f64>,
}

impl RescueBlock {
    /// Sign-prefixed, four decimals: `+0.1803`.
    pub fn increment_display(&self) -> String {
        format!("{:+.4}", self.increment)
    }

    pub fn note(&self) -> Option<String> {
        let r = self.reference_increment?;
        let same = format!("{:+.4}", r) == self.increment_display();
        Some(if same {
            format!("increment {} matches the reference {:+.4}", self.increment_display(), r)
        } else {
            format!(
                "increment {} = {}/{} differs from the reference {:+.4} by {:.4}",
                self.increment_display(),
                self.rescued,
                self.total,
                r,
                (self.increment - r).abs()
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub fingerprint: String,
    pub per_instruction: Vec<InstructionAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescue: Option<RescueBlock>,
    /// Per-sample log the aggregate fields are computed from.
    pub samples: Vec<SampleResult>,
}

pub fn aggregate(samples: &[SampleResult]) -> Vec<InstructionAccuracy> {
    (1..=GRADED)
        .map(|i| {
            let total = samples.iter().filter(|s| s.instruction == i).count();
            let correct = samples.iter().filter(|s| s.instruction == i && s.correct).count();
            InstructionAccuracy {
                instruction: i,
                total,
                correct,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            }
        })
        .collect()
}

/// Produces answers to instructions 1–4 for one scene.
pub trait Answerer: Sync {
    fn answer(&self, scene: &LoadedScene) -> Result<Vec<String>>;
}

/// Grades every scene; results keep the scene order.
pub fn evaluate_with<A: Answerer + ?Sized>(
    answerer: &A,
    scenes: &[LoadedScene],
    mode: EvalMode,
    fingerprint: &str,
    substring_match: bool,
) -> Result<EvalReport> {
    let per_scene = scenes
        .par_iter()
        .map(|s| {
            let answers = answerer.answer(s)?;
            if answers.len() != GRADED {
                return Err(Error::dim("answers", &[GRADED], &[answers.len()]));
            }
            Ok(answers
                .into_iter()
                .enumerate()
                .map(|(i, predicted)| {
                    let expected = s.record.qa[i].answer.clone();
                    SampleResult {
                        scene_id: s.record.scene_id.clone(),
                        instruction: i + 1,
                        correct: grade(i + 1, &expected, &predicted, substring_match),
                        expected,
                        predicted,
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<SampleResult> = per_scene.into_iter().flatten().collect();
    Ok(EvalReport {
        mode,
        fingerprint: fingerprint.to_string(),
        per_instruction: aggregate(&samples),
        rescue: None,
        samples,
    })
}

/// Fraction of scenes whose instruction-`instruction` answer equals the most
/// frequent training answer.
pub fn majority_baseline(train: &[LoadedScene], test: &[LoadedScene], instruction: usize) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in train {
        *counts.entry(s.record.qa[instruction - 1].answer.as_str()).or_default() += 1;
    }
    let Some((majority, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
        return 0.0;
    };
    if test.is_empty() {
        return 0.0;
    }
    let hits = test
        .iter()
        .filter(|s| s.record.qa[instruction - 1].answer == *majority)
        .count();
    hits as f64 / test.len() as f64
}

/// The trained model answering from one of the three visual inputs.
pub struct VlmAnswerer<'a> {
    pub vlm: &'a Vlm,
    pub clip: &'a ClipModel,
    pub recon: Option<&'a ReconModel>,
    pub vocab: &'a Vocab,
    pub mode: EvalMode,
    pub alpha: f64,
    pub grid_resolution: usize,
    pub decode: DecodeConfig,
    /// Adapt per sample before answering.
    pub tta: Option<TtaConfig>,
    pub trace: Mutex<Vec<TraceRecord>>,
}

impl<'a> VlmAnswerer<'a> {
    fn recon(&self) -> Result<&ReconModel> {
        self.recon
            .ok_or_else(|| Error::Config("this evaluation mode needs the stage-2 checkpoint".into()))
    }

    /// Visual embedding the language model is conditioned on.
    pub fn visual_embedding(&self, feats: &ImageFeatures) -> Result<Embedding> {
        match self.mode {
            EvalMode::Baseline => self.clip.encode_image_features(feats),
            EvalMode::Fused => {
                let x1 = self.clip.encode_image_features(feats)?;
                if self.alpha == 1.0 {
                    return Ok(x1);
                }
                let x2 = embed_occluded_features(self.recon()?, self.clip, feats, self.grid_resolution)?;
                blend(&x1, &x2.embedding, self.alpha)
            }
            EvalMode::ReconDescribe => {
                Ok(embed_occluded_features(self.recon()?, self.clip, feats, self.grid_resolution)?.embedding)
            }
        }
    }
}

impl Answerer for VlmAnswerer<'_> {
    fn answer(&self, scene: &LoadedScene) -> Result<Vec<String>> {
        let x_v = self.visual_embedding(&scene.features)?;
        let mut out = Vec::with_capacity(GRADED);
        for (i, instruction) in INSTRUCTIONS.iter().take(GRADED).enumerate() {
            let ins = self.vocab.tokenize(instruction);
            let hyp = match &self.tta {
                Some(t) => {
                    let id = format!("{}#{}", scene.record.scene_id, i + 1);
                    let (hyp, trace) = test_time_adapt(self.vlm, self.clip, &x_v, &scene.features, &ins, t, &id)?;
                    self.trace.lock().expect("trace lock").extend(trace);
                    hyp
                }
                None => self.decode.decode(&self.vlm.prompt(&x_v, &ins)?)?,
            };
            out.push(self.vocab.detokenize(&hyp.tokens));
        }
        Ok(out)
    }
}

/// Rescues among the baseline's instruction-1 failures.
pub fn rescue_analysis(baseline: &[SampleResult], recon: &[SampleResult]) -> Result<RescueBlock> {
    let pick = |v: &[SampleResult]| -> BTreeMap<String, bool> {
        v.iter()
            .filter(|s| s.instruction == 1)
            .map(|s| (s.scene_id.clone(), s.correct))
            .collect()
    };
    let b = pick(baseline);
    let r = pick(recon);
    let kb: BTreeSet<&String> = b.keys().collect();
    let kr: BTreeSet<&String> = r.keys().collect();
    if kb != kr {
        let diff: Vec<&str> = kb.symmetric_difference(&kr).map(|s| s.as_str()).collect();
        return Err(Error::domain(format!(
            "result sets cover different samples: {}",
            diff.join(", ")
        )));
    }
    let total = b.len();
    let baseline_correct = b.values().filter(|c| **c).count();
    let rescued = b.iter().filter(|(id, ok)| !**ok && r[*id]).count();
    Ok(RescueBlock {
        total,
        baseline_correct,
        baseline_failures: total - baseline_correct,
        rescued,
        increment: if total == 0 { 0.0 } else { rescued as f64 / total as f64 },
        reference_increment: None,
    })
}
