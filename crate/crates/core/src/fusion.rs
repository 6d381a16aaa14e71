//! Blending of the two visual embeddings and their mapping into visual tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::Embedding;
use crate::error::{Error, Result};
use crate::numerics::{Binder, ParamStore, Tape, Tensor, Var};
use crate::text::TokenSeq;

pub const MAP_PARAM: &str = "fusion.map";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub n_tokens: usize,
    pub d_model: usize,
    pub embed_dim: usize,
    pub bias: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.5,
            n_tokens: 16,
            d_model: 64,
            embed_dim: 64,
            bias: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.n_tokens == 0 || self.d_model == 0 || self.embed_dim == 0 {
            return Err(Error::Config("fusion sizes must be positive".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::domain(format!("alpha {alpha} outside [0,1]")))
    }
}

/// `α·x1 + (1−α)·x2`, not renormalized. The endpoints return an input unchanged.
pub fn blend(x1: &Embedding, x2: &Embedding, alpha: f64) -> Result<Embedding> {
    check_alpha(alpha)?;
    if x1.dim() != x2.dim() {
        return Err(Error::dim("blend", &[x1.dim()], &[x2.dim()]));
    }
    if alpha == 1.0 {
        return Ok(x1.clone());
    }
    if alpha == 0.0 {
        return Ok(x2.clone());
    }
    let values = x1
        .values()
        .iter()
        .zip(x2.values())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Ok(Embedding::new(values))
}

/// Weight std `1`, so a unit embedding maps to tokens of roughly unit scale.
pub fn init_params<R: Rng + ?Sized>(params: &mut ParamStore, cfg: &FusionConfig, rng: &mut R) {
    let gain = (cfg.embed_dim as f64).sqrt();
    params.init_linear(MAP_PARAM, cfg.embed_dim, cfg.n_tokens * cfg.d_model, gain, rng);
    if !cfg.bias {
        params.remove(&format!("{MAP_PARAM}.bias"));
    }
}

/// Exactly `N` vectors of width `d_model`, stored as an `[N × d]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokenSeq {
    tokens: Tensor,
}

impl VisualTokenSeq {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::dim("visual tokens", &[0, 0], tokens.shape()));
        }
        Ok(VisualTokenSeq { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }
}

/// `[1 × embed] → [N × d]` on a tape.
pub fn map_on_tape(tape: &mut Tape, b: &mut Binder, cfg: &FusionConfig, x: Var) -> Result<Var> {
    let cols = tape.value(x).cols();
    if cols != cfg.embed_dim {
        return Err(Error::dim("fusion map", &[cfg.embed_dim], &[cols]));
    }
    let y = b.linear(tape, MAP_PARAM, x)?;
    tape.reshape(y, &[cfg.n_tokens, cfg.d_model])
}

pub fn map_to_tokens(params: &ParamStore, cfg: &FusionConfig, x_v: &Embedding) -> Result<VisualTokenSeq> {
    if x_v.dim() != cfg.embed_dim {
        return Err(Error::dim("fusion map", &[cfg.embed_dim], &[x_v.dim()]));
    }
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let x = tape.constant(Tensor::from_parts(vec![1, x_v.dim()], x_v.values().to_vec()));
    let y = map_on_tape(&mut tape, &mut b, cfg, x)?;
    VisualTokenSeq::new(tape.value(y).clone())
}

/// Visual tokens followed by text token ids; the language model embeds the ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub visual: VisualTokenSeq,
    pub text: Vec<u32>,
}

impl ModelInput {
    /// `T = N + M`.
    pub fn len(&self) -> usize {
        self.visual.len() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy with `ids` appended to the text part.
    pub fn extended(&self, ids: &[u32]) -> ModelInput {
        let mut text = self.text.clone();
        text.extend_from_slice(ids);
        ModelInput {
            visual: self.visual.clone(),
            text,
        }
    }
}

pub fn fuse_inputs(vt: &VisualTokenSeq, text: &TokenSeq) -> Result<ModelInput> {
    if text.is_empty() {
        return Err(Error::domain("text part of the model input is empty"));
    }
    Ok(ModelInput {
        visual: vt.clone(),
        text: text.ids().to_vec(),
    })
}
