//! Greedy, beam and ancestral decoding over any next-token model.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{TokenSeq, EOS};

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Log-probabilities of the next token after a fixed prefix plus `generated`.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: TokenSeq,
    pub cum_logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated ids without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        self.tokens.content()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_width: usize,
    pub max_new: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Rank beams by mean instead of summed log-probability.
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Beam,
            beam_width: 4,
            max_new: 8,
            temperature: 1.0,
            seed: 0,
            length_norm: false,
        }
    }
}

impl DecodeConfig {
    pub fn decode<M: NextTokenModel + ?Sized>(&self, model: &M) -> Result<BeamHypothesis> {
        match self.strategy {
            DecodeStrategy::Greedy => greedy_decode(model, self.max_new),
            DecodeStrategy::Beam => beam_search(model, self.beam_width, self.max_new, self.length_norm),
            DecodeStrategy::Sample => sample_decode(model, self.max_new, self.temperature, self.seed),
        }
    }
}

fn checked_log_probs<M: NextTokenModel + ?Sized>(model: &M, generated: &[u32]) -> Result<Vec<f64>> {
    let lp = model.next_log_probs(generated)?;
    if lp.len() != model.vocab_size() || lp.len() <= EOS as usize {
        return Err(Error::dim("next-token distribution", &[model.vocab_size()], &[lp.len()]));
    }
    Ok(lp)
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode<M: NextTokenModel + ?Sized>(model: &M, max_new: usize) -> Result<BeamHypothesis> {
    let mut ids = Vec::new();
    let mut total = 0.0;
    while ids.len() < max_new {
        let lp = checked_log_probs(model, &ids)?;
        let t = argmax(&lp);
        total += lp[t];
        ids.push(t as u32);
        if t as u32 == EOS {
            break;
        }
    }
    Ok(BeamHypothesis {
        tokens: TokenSeq::new(ids)?,
        cum_logprob: total,
        finished: true,
    })
}

#[derive(Clone)]
struct Beam {
    ids: Vec<u32>,
    score: f64,
}

impl Beam {
    fn key(&self, length_norm: bool) -> f64 {
        if length_norm && !self.ids.is_empty() {
            self.score / self.ids.len() as f64
        } else {
            self.score
        }
    }
}

/// Higher key first, then lexicographically smaller ids.
fn rank(a: &Beam, b: &Beam, length_norm: bool) -> Ordering {
    b.key(length_norm)
        .total_cmp(&a.key(length_norm))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Keeps the `width` best expansions per step; hypotheses ending in EOS or
/// reaching `max_new` are frozen and compete in the final ranking.
pub fn beam_search<M: NextTokenModel + ?Sized>(
    model: &M,
    width: usize,
    max_new: usize,
    length_norm: bool,
) -> Result<BeamHypothesis> {
    if width < 1 {
        return Err(Error::domain("beam width must be at least 1"));
    }
    let mut alive = vec![Beam {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    if max_new == 0 {
        finished.append(&mut alive);
    }
    for step in 0..max_new {
        let mut candidates = Vec::with_capacity(alive.len() * model.vocab_size());
        for h in &alive {
            let lp = checked_log_probs(model, &h.ids)?;
            for (t, l) in lp.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(t as u32);
                candidates.push(Beam { ids, score: h.score + l });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, length_norm));
        candidates.truncate(width);
        alive.clear();
        for c in candidates {
            if *c.ids.last().unwrap() == EOS || step + 1 == max_new {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
        // Summed scores never increase, so a strictly better finished beam is final.
        if !length_norm {
            let best_fin = finished.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = alive.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            if best_fin > best_alive {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, length_norm));
    let best = finished.swap_remove(0);
    Ok(BeamHypothesis {
        tokens: TokenSeq::new(best.ids)?,
        cum_logprob: best.score,
        finished: true,
    })
}

/// Ancestral sampling at `temperature`; the returned log-probability is
/// under the distribution actually sampled from.
pub fn sample_decode<M: NextTokenModel + ?Sized>(
    model: &M,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<BeamHypothesis> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature {temperature} must be positive")));
    }
    if temperature < GREEDY_TEMPERATURE {
        return greedy_decode(model, max_new);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut total = 0.0;
    while ids.len() < max_new {
        let lp = checked_log_probs(model, &ids)?;
        let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
        let lq = crate::numerics::log_softmax(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = lq.len() - 1;
        for (i, l) in lq.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        total += lq[pick];
        ids.push(pick as u32);
        if pick as u32 == EOS {
            break;
        }
    }
    Ok(BeamHypothesis {
        tokens: TokenSeq::new(ids)?,
        cum_logprob: total,
        finished: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Context-free distribution over (A, B, EOS).
    struct Fixed([f64; 3]);

    impl NextTokenModel for Fixed {
        fn vocab_size(&self) -> usize {
            3
        }
        fn next_log_probs(&self, _: &[u32]) -> Result<Vec<f64>> {
            Ok(crate::numerics::log_softmax(&self.0))
        }
    }

    #[test]
    fn eos_peak_gives_empty_generation() {
        let m = Fixed([0.0, 0.0, 5.0]);
        let g = greedy_decode(&m, 5).unwrap();
        assert!(g.content().is_empty());
        assert_eq!(g.tokens.ids(), &[EOS]);
    }

    #[test]
    fn greedy_hand_trace() {
        // A beats EOS every step, so three A's until max length.
        let m = Fixed([1.0, 0.5, 0.0]);
        let g = greedy_decode(&m, 3).unwrap();
        assert_eq!(g.tokens.ids(), &[0, 0, 0]);
        let lp = crate::numerics::log_softmax(&m.0);
        assert!((g.cum_logprob - 3.0 * lp[0]).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let m = Fixed([1.0, 1.0, 0.0]);
        assert_eq!(greedy_decode(&m, 1).unwrap().tokens.ids(), &[0]);
        assert_eq!(beam_search(&m, 2, 1, false).unwrap().tokens.ids(), &[0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = Fixed([0.0; 3]);
        assert!(beam_search(&m, 0, 3, false).is_err());
        assert!(sample_decode(&m, 3, 0.0, 1).is_err());
    }
}
