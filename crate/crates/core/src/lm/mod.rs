//! Small pre-LN causal transformer conditioned on visual tokens, plus the
//! decoding strategies that run on top of it.

pub mod decode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::{beam_search, greedy_decode, sample_decode, BeamHypothesis, DecodeConfig, DecodeStrategy, NextTokenModel};

use crate::clip::Embedding;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, ModelInput, VisualTokenSeq};
use crate::numerics::{log_softmax, softmax, Binder, ParamStore, Tape, Tensor, Var};
use crate::text::{TokenSeq, BOS};

pub const HEAD_PARAM: &str = "lm.head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        LmConfig {
            layers: 2,
            heads: 2,
            d_model: 64,
            mlp_hidden: 256,
            max_len: 128,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config("empty vocabulary or zero max length".into()));
        }
        Ok(())
    }
}

/// `sin`/`cos` position table, `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut v = Vec::with_capacity(len * d);
    for t in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 / rate;
            v.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::from_parts(vec![len, d], v)
}

/// One hidden vector per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    h: Tensor,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, t: usize) -> &[f64] {
        self.h.row(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub lm: LmConfig,
    pub fusion: FusionConfig,
}

impl VlmConfig {
    pub fn new(vocab_size: usize) -> Self {
        VlmConfig {
            lm: LmConfig::new(vocab_size),
            fusion: FusionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.fusion.validate()?;
        if self.fusion.d_model != self.lm.d_model {
            return Err(Error::Config(format!(
                "fusion width {} differs from model width {}",
                self.fusion.d_model, self.lm.d_model
            )));
        }
        Ok(())
    }
}

/// The fusion map and the language model, sharing one parameter store
/// (`fusion.*` and `lm.*`).
#[derive(Clone, Debug)]
pub struct Vlm {
    cfg: VlmConfig,
    params: ParamStore,
}

impl Vlm {
    pub fn new(cfg: VlmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        fusion::init_params(&mut p, &cfg.fusion, &mut rng);
        let c = &cfg.lm;
        let d = c.d_model;
        p.insert("lm.tok_emb", Tensor::randn(&[c.vocab_size, d], 0.5, &mut rng));
        for l in 0..c.layers {
            p.init_layer_norm(&format!("lm.l{l}.ln1"), d);
            for m in ["q", "k", "v"] {
                p.init_linear(&format!("lm.l{l}.attn.{m}"), d, d, 1.0, &mut rng);
            }
            p.init_linear(&format!("lm.l{l}.attn.o"), d, d, 0.5, &mut rng);
            p.init_layer_norm(&format!("lm.l{l}.ln2"), d);
            p.init_linear(&format!("lm.l{l}.mlp.fc1"), d, c.mlp_hidden, 2f64.sqrt(), &mut rng);
            p.init_linear(&format!("lm.l{l}.mlp.fc2"), c.mlp_hidden, d, 0.5, &mut rng);
        }
        p.init_layer_norm("lm.ln_f", d);
        p.init_linear(HEAD_PARAM, d, c.vocab_size, 0.1, &mut rng);
        Ok(Vlm { cfg, params: p })
    }

    pub fn from_params(cfg: VlmConfig, params: ParamStore) -> Result<Self> {
        let probe = Vlm::new(cfg.clone(), 0)?;
        for (name, t) in probe.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim("vlm checkpoint", t.shape(), got.shape()));
            }
        }
        Ok(Vlm { cfg, params })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn visual_on_tape(&self, tape: &mut Tape, b: &mut Binder, x_v: &Embedding) -> Result<Var> {
        let x = tape.constant(Tensor::from_parts(vec![1, x_v.dim()], x_v.values().to_vec()));
        fusion::map_on_tape(tape, b, &self.cfg.fusion, x)
    }

    pub fn visual_tokens(&self, x_v: &Embedding) -> Result<VisualTokenSeq> {
        fusion::map_to_tokens(&self.params, &self.cfg.fusion, x_v)
    }

    /// Final hidden states `[T × d]` for visual rows followed by embedded `ids`.
    pub fn hidden_on_tape(&self, tape: &mut Tape, b: &mut Binder, visual: Var, ids: &[u32]) -> Result<Var> {
        let c = &self.cfg.lm;
        let n = tape.value(visual).rows();
        let t_len = n + ids.len();
        if t_len == 0 {
            return Err(Error::domain("empty model input"));
        }
        if t_len > c.max_len {
            return Err(Error::Length {
                len: t_len,
                max: c.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::domain(format!("token id {bad} outside vocabulary")));
        }
        let mut x = if ids.is_empty() {
            visual
        } else {
            let table = b.var(tape, "lm.tok_emb")?;
            let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            let emb = tape.embedding(table, &idx)?;
            if n == 0 {
                emb
            } else {
                tape.concat_rows(&[visual, emb])?
            }
        };
        let pos = tape.constant(sinusoidal_positions(t_len, c.d_model));
        x = tape.add(x, pos)?;
        let dh = c.d_model / c.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        for l in 0..c.layers {
            let h = b.layer_norm(tape, &format!("lm.l{l}.ln1"), x)?;
            let q = b.linear(tape, &format!("lm.l{l}.attn.q"), h)?;
            let k = b.linear(tape, &format!("lm.l{l}.attn.k"), h)?;
            let v = b.linear(tape, &format!("lm.l{l}.attn.v"), h)?;
            let mut outs = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, inv)?;
                let a = tape.causal_softmax(s)?;
                outs.push(tape.matmul(a, vh)?);
            }
            let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let o = b.linear(tape, &format!("lm.l{l}.attn.o"), cat)?;
            x = tape.add(x, o)?;
            let h = b.layer_norm(tape, &format!("lm.l{l}.ln2"), x)?;
            let h = b.linear(tape, &format!("lm.l{l}.mlp.fc1"), h)?;
            let h = tape.relu(h)?;
            let h = b.linear(tape, &format!("lm.l{l}.mlp.fc2"), h)?;
            x = tape.add(x, h)?;
        }
        b.layer_norm(tape, "lm.ln_f", x)
    }

    /// Vocabulary logits `[T × V]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, b: &mut Binder, visual: Var, ids: &[u32]) -> Result<Var> {
        let h = self.hidden_on_tape(tape, b, visual, ids)?;
        b.linear(tape, HEAD_PARAM, h)
    }

    fn check_visual(&self, v: &VisualTokenSeq) -> Result<()> {
        if v.d_model() != self.cfg.lm.d_model {
            return Err(Error::dim("visual tokens", &[self.cfg.lm.d_model], &[v.d_model()]));
        }
        Ok(())
    }

    pub fn forward(&self, input: &ModelInput) -> Result<HiddenStates> {
        self.check_visual(&input.visual)?;
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let vis = tape.constant(input.visual.tensor().clone());
        let h = self.hidden_on_tape(&mut tape, &mut b, vis, &input.text)?;
        Ok(HiddenStates { h: tape.value(h).clone() })
    }

    pub fn head_logits(&self, h_t: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.lm.d_model;
        if h_t.len() != d {
            return Err(Error::dim("vocabulary head", &[d], &[h_t.len()]));
        }
        let w = self.params.get(&format!("{HEAD_PARAM}.weight"))?;
        let bias = self.params.get(&format!("{HEAD_PARAM}.bias"))?;
        let v = self.cfg.lm.vocab_size;
        let mut out = bias.values().to_vec();
        for (i, x) in h_t.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w.values()[i * v..(i + 1) * v]) {
                *o += x * wv;
            }
        }
        Ok(out)
    }

    /// `softmax(H(h_t))`.
    pub fn next_token_dist(&self, h_t: &[f64]) -> Result<Vec<f64>> {
        let logits = self.head_logits(h_t)?;
        let n = logits.len();
        Ok(softmax(&Tensor::from_parts(vec![1, n], logits))?.into_values())
    }

    /// Prompt of visual tokens, instruction and [`BOS`], ready for decoding.
    pub fn prompt(&self, x_v: &Embedding, instruction: &TokenSeq) -> Result<Prompted<'_>> {
        let vt = self.visual_tokens(x_v)?;
        self.prompt_from_tokens(vt, instruction)
    }

    pub fn prompt_from_tokens(&self, vt: VisualTokenSeq, instruction: &TokenSeq) -> Result<Prompted<'_>> {
        self.check_visual(&vt)?;
        let mut text = instruction.content().to_vec();
        text.push(BOS);
        let input = fusion::fuse_inputs(&vt, &TokenSeq::new(text)?)?;
        Ok(Prompted { vlm: self, input })
    }
}

/// A model bound to a fixed prefix.
pub struct Prompted<'a> {
    vlm: &'a Vlm,
    input: ModelInput,
}

impl<'a> Prompted<'a> {
    pub fn input(&self) -> &ModelInput {
        &self.input
    }

    /// Cumulative log-probability of `tokens` as a continuation of the prefix.
    pub fn score(&self, tokens: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.vlm.params);
        let vis = tape.constant(self.input.visual.tensor().clone());
        let mut ids = self.input.text.clone();
        ids.extend_from_slice(tokens);
        let logits = self.vlm.logits_on_tape(&mut tape, &mut b, vis, &ids)?;
        let lv = tape.value(logits);
        let start = self.input.len() - 1;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| log_softmax(lv.row(start + i))[tok as usize])
            .sum())
    }
}

impl NextTokenModel for Prompted<'_> {
    fn vocab_size(&self) -> usize {
        self.vlm.cfg.lm.vocab_size
    }

    fn next_log_probs(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let input = self.input.extended(generated);
        let h = self.vlm.forward(&input)?;
        let logits = self.vlm.head_logits(h.state(h.len() - 1))?;
        Ok(log_softmax(&logits))
    }
}
