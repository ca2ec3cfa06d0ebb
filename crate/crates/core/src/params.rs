//! Named, tagged model parameters and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("dimension error in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("task construction error: {0}")]
    Task(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Slow parameters (encoder, explainer) only move in the global update;
/// fast parameters (predictor) are also adapted per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    Slow,
    Fast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub tag: ParamTag,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

/// Values for a subset of parameters, keyed by name.
pub type TensorMap = BTreeMap<String, Tensor>;

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tag: ParamTag, value: Tensor) -> Result<(), ModelError> {
        if self.params.contains_key(name) {
            return Err(ModelError::DuplicateParam(name.to_string()));
        }
        self.params
            .insert(name.to_string(), Parameter { tag, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self, tag: ParamTag) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn values(&self, tag: ParamTag) -> TensorMap {
        self.iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of the selected
    /// parameters (`None` selects all).
    pub fn fingerprint(&self, tag: Option<ParamTag>) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter().filter(|(_, p)| tag.is_none_or(|t| p.tag == t)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Overwrites values from `source`, which may be a clone of this set.
    pub fn restore(&mut self, source: &ParameterSet) -> Result<(), ModelError> {
        if self.params.len() != source.params.len() {
            return Err(ModelError::Checkpoint(
                "parameter sets differ in size".into(),
            ));
        }
        for (name, p) in &source.params {
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if dst.value.shape() != p.value.shape() || dst.tag != p.tag {
                return Err(ModelError::Checkpoint(format!("'{name}' does not match")));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    /// Records every parameter on `tape`. Parameters with a tag in `trainable`
    /// become gradient leaves, the rest constants. `overrides` substitutes
    /// values by name (used for adapted fast weights).
    pub fn bind<'t>(
        &self,
        tape: &'t Tape,
        trainable: &[ParamTag],
        overrides: Option<&TensorMap>,
    ) -> Bound<'t> {
        self.bind_tags(
            tape,
            &[ParamTag::Slow, ParamTag::Fast],
            trainable,
            overrides,
        )
    }

    /// Like [`bind`](Self::bind) but only records parameters tagged `include`.
    pub fn bind_tags<'t>(
        &self,
        tape: &'t Tape,
        include: &[ParamTag],
        trainable: &[ParamTag],
        overrides: Option<&TensorMap>,
    ) -> Bound<'t> {
        let vars = self
            .iter()
            .filter(|(_, p)| include.contains(&p.tag))
            .map(|(name, p)| {
                let value = overrides
                    .and_then(|o| o.get(name))
                    .unwrap_or(&p.value)
                    .clone();
                let var = if trainable.contains(&p.tag) {
                    tape.param(value)
                } else {
                    tape.constant(value)
                };
                (name.to_string(), var)
            })
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Adds the bindings of `other`, which must live on the same tape.
    pub fn merge(mut self, other: Bound<'t>) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        self.vars.extend(other.vars);
        self
    }

    /// Gradients of every trainable parameter after `backward`.
    pub fn grads(&self) -> TensorMap {
        self.vars
            .iter()
            .filter_map(|(n, v)| self.tape.grad(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` weight.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("fan_in * fan_out values")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        p.insert("a.w", ParamTag::Slow, glorot(3, 2, &mut rng))
            .unwrap();
        p.insert("b.w", ParamTag::Fast, glorot(2, 2, &mut rng))
            .unwrap();
        p
    }

    #[test]
    fn insert_rejects_duplicates() {
        let mut p = sample();
        assert!(matches!(
            p.insert("a.w", ParamTag::Fast, Tensor::zeros(&[1])),
            Err(ModelError::DuplicateParam(_))
        ));
    }

    #[test]
    fn snapshot_restore_is_bit_exact() {
        let mut p = sample();
        let snap = p.clone();
        let before = p.fingerprint(None);
        p.value_mut("b.w").unwrap().data_mut()[0] += 1.0;
        assert_ne!(p.fingerprint(None), before);
        assert_eq!(
            p.fingerprint(Some(ParamTag::Slow)),
            snap.fingerprint(Some(ParamTag::Slow))
        );
        p.restore(&snap).unwrap();
        assert_eq!(p.fingerprint(None), before);
        assert_eq!(p, snap);
    }

    #[test]
    fn bind_marks_trainable_tags() {
        let p = sample();
        let tape = Tape::new();
        let b = p.bind(&tape, &[ParamTag::Fast], None);
        let loss = b
            .get("a.w")
            .unwrap()
            .sum(None)
            .unwrap()
            .add(b.get("b.w").unwrap().sum(None).unwrap())
            .unwrap();
        loss.backward().unwrap();
        let grads = b.grads();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["b.w"]);
        assert!(matches!(b.get("nope"), Err(ModelError::MissingParam(_))));
    }

    #[test]
    fn glorot_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = glorot(10, 6, &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() < limit));
    }
}
