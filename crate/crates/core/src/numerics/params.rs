use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    params: BTreeMap<String, CheckpointEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Merges `other` into `self`, overwriting same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        self.to_tagged_json(None)
    }

    /// Checkpoint JSON carrying the fingerprint of the run that produced it.
    pub fn to_tagged_json(&self, fingerprint: Option<&str>) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            fingerprint: fingerprint.map(str::to_string),
            params: self
                .entries
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        CheckpointEntry {
                            shape: t.shape().to_vec(),
                            values: t.values().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        Ok(ParamStore::from_tagged_json(text)?.0)
    }

    pub fn from_tagged_json(text: &str) -> Result<(Self, Option<String>)> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                line: 1,
                message: format!("unsupported checkpoint format_version {}", ckpt.format_version),
            });
        }
        let mut store = ParamStore::new();
        for (name, e) in ckpt.params {
            store.insert(name, Tensor::new(e.shape, e.values)?);
        }
        Ok((store, ckpt.fingerprint))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_checkpoint_json(&text)
    }

    /// Adds a `[fan_in × fan_out]` weight and a zero `[fan_out]` bias.
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) {
        let std = gain / (fan_in as f64).sqrt();
        self.insert(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }
}

/// Which parameters of a store become differentiable leaves.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    None,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Lazily places parameters of a store on a tape, once each.
pub struct Binder<'p> {
    store: &'p ParamStore,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore, trainable: Trainable) -> Self {
        Binder {
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn frozen(store: &'p ParamStore) -> Self {
        Binder::new(store, Trainable::None)
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable.includes(name) {
            tape.leaf(t)
        } else {
            tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · W + b` for the linear layer `name`.
    pub fn linear(&mut self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let w = self.var(tape, &format!("{name}.weight"))?;
        let y = tape.matmul(x, w)?;
        let bias = format!("{name}.bias");
        if self.store.contains(&bias) {
            let b = self.var(tape, &bias)?;
            tape.add_row(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let g = self.var(tape, &format!("{name}.gamma"))?;
        let b = self.var(tape, &format!("{name}.beta"))?;
        tape.layer_norm(x, g, b)
    }

    /// Gradients of the bound trainable parameters, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.includes(name))
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(name).unwrap().shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Sums `src` into `dst` by name.
pub fn accumulate_grads(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f64) {
    for g in grads.values_mut() {
        for v in g.values_mut() {
            *v *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.init_linear("a.l1", 3, 4, 1.0, &mut rng);
        store.init_layer_norm("a.ln", 4);
        let json = store.to_checkpoint_json().unwrap();
        assert!(json.contains("\"format_version\":1"));
        let back = ParamStore::from_checkpoint_json(&json).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.checksum(), store.checksum());
    }

    #[test]
    fn rejects_unknown_version() {
        let text = r#"{"format_version":2,"params":{}}"#;
        assert!(matches!(
            ParamStore::from_checkpoint_json(text),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn binder_respects_trainable_prefixes() {
        let mut store = ParamStore::new();
        store.insert("lm.head.weight", Tensor::scalar(1.0));
        store.insert("lm.emb", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let mut b = Binder::new(&store, Trainable::Prefixes(vec!["lm.head".into()]));
        let h = b.var(&mut tape, "lm.head.weight").unwrap();
        let e = b.var(&mut tape, "lm.emb").unwrap();
        assert!(tape.requires_grad(h));
        assert!(!tape.requires_grad(e));
        assert_eq!(b.var(&mut tape, "lm.head.weight").unwrap(), h);
    }
}
