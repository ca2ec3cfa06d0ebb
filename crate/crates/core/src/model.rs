//! The explainer–predictor model.
//!
//! For an episode, every graph is encoded by the encoder `f`; class
//! prototypes built from the support set form the task information `TI`.
//! The explainer (its own GNN plus a sigmoid MLP fed with `[h'_v ‖ TI]`)
//! scores every node, the mask splits the node embeddings into rationale and
//! non-rationale readouts, and the predictor classifies `[h_r ‖ TI]`.
//! During training, rationale and non-rationale readouts of the support set
//! are recombined pairwise into augmented embeddings.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{readout, EncoderKind, FinalActivation, GnnEncoder, GraphInput, MlpBlock};
use crate::graphdata::{Episode, Graph, Shot};
use crate::objective::{
    contrastive_loss, rationale_loss_batch, size_regularizer, total_loss, LossWeights,
    ObjectiveError,
};
use crate::params::{Bound, ModelError, ParamTag, ParameterSet, TensorMap};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub layers: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub n_way: usize,
    pub mask_hidden: usize,
    pub predictor_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Gin,
            layers: 2,
            hidden: 32,
            feature_dim: 8,
            n_way: 2,
            mask_hidden: 32,
            predictor_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Input(m));
        if !(2..=3).contains(&self.layers) {
            return bad(format!("layers must be 2 or 3, got {}", self.layers));
        }
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("mask_hidden", self.mask_hidden),
            ("predictor_hidden", self.predictor_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-class prototypes from the support set and their concatenation.
#[derive(Clone)]
pub struct TaskInfo<'t> {
    pub prototypes: Vec<Var<'t>>,
    /// `1 × (n_way · hidden)`.
    pub concat: Var<'t>,
}

/// Explainer output for one graph.
#[derive(Clone)]
pub struct GraphRationale<'t> {
    /// Soft node mask, length `n`.
    pub mask: Var<'t>,
    /// `1 × hidden` readout of the masked node embeddings.
    pub h_r: Var<'t>,
    /// `1 × hidden` readout under the complementary mask.
    pub h_n: Var<'t>,
}

pub struct EpisodeRationales<'t> {
    pub task_info: TaskInfo<'t>,
    pub support: Vec<GraphRationale<'t>>,
    pub query: Vec<GraphRationale<'t>>,
}

/// Values of [`EpisodeRationales`], detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRationales {
    pub prototypes: Vec<Tensor>,
    pub task_info: Tensor,
    /// `(mask, h_r, h_n)` per graph.
    pub support: Vec<(Tensor, Tensor, Tensor)>,
    pub query: Vec<(Tensor, Tensor, Tensor)>,
}

impl EpisodeRationales<'_> {
    pub fn freeze(&self) -> FrozenRationales {
        let conv =
            |g: &GraphRationale<'_>| (g.mask.to_tensor(), g.h_r.to_tensor(), g.h_n.to_tensor());
        FrozenRationales {
            prototypes: self
                .task_info
                .prototypes
                .iter()
                .map(Var::to_tensor)
                .collect(),
            task_info: self.task_info.concat.to_tensor(),
            support: self.support.iter().map(conv).collect(),
            query: self.query.iter().map(conv).collect(),
        }
    }
}

impl FrozenRationales {
    /// Records the frozen values on `tape` as constants.
    pub fn to_tape<'t>(&self, tape: &'t Tape) -> EpisodeRationales<'t> {
        let conv = |(m, r, n): &(Tensor, Tensor, Tensor)| GraphRationale {
            mask: tape.constant(m.clone()),
            h_r: tape.constant(r.clone()),
            h_n: tape.constant(n.clone()),
        };
        EpisodeRationales {
            task_info: TaskInfo {
                prototypes: self
                    .prototypes
                    .iter()
                    .map(|p| tape.constant(p.clone()))
                    .collect(),
                concat: tape.constant(self.task_info.clone()),
            },
            support: self.support.iter().map(conv).collect(),
            query: self.query.iter().map(conv).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Support augmentation is produced.
    Train,
    Eval,
}

pub struct Augmented<'t> {
    /// Row `i·M + j` combines rationale `i` with non-rationale `j`.
    pub embeddings: Var<'t>,
    pub labels: Vec<usize>,
}

pub struct EpisodeOutput<'t> {
    pub rationales: EpisodeRationales<'t>,
    /// `|support| × n_way`.
    pub support_logits: Var<'t>,
    /// `|query| × n_way`, absent for an empty query set.
    pub query_logits: Option<Var<'t>>,
    pub augmented: Option<(Augmented<'t>, Var<'t>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSide {
    Support,
    Query,
}

/// The total loss together with its component values.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub rationale: f64,
    pub contrastive: Option<f64>,
    pub regularizer: f64,
}

#[derive(Debug, Clone)]
pub struct MseGnn {
    config: ModelConfig,
    encoder: GnnEncoder,
    explainer_encoder: GnnEncoder,
    mask_mlp: MlpBlock,
    predictor: MlpBlock,
}

impl MseGnn {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden;
        let ti = config.n_way * d;
        Ok(Self {
            encoder: GnnEncoder::new(
                "encoder",
                config.encoder,
                config.feature_dim,
                d,
                config.layers,
            ),
            explainer_encoder: GnnEncoder::new(
                "explainer.gnn",
                config.encoder,
                config.feature_dim,
                d,
                config.layers,
            ),
            mask_mlp: MlpBlock::new(
                "explainer.mask",
                vec![d + ti, config.mask_hidden, 1],
                FinalActivation::Sigmoid,
            ),
            predictor: MlpBlock::new(
                "predictor",
                vec![d + ti, config.predictor_hidden, config.n_way],
                FinalActivation::None,
            ),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters: encoder and explainer slow, predictor fast.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let fill = |params: &mut ParameterSet, rng: &mut ChaCha8Rng| -> Result<(), ModelError> {
            self.encoder.init(params, ParamTag::Slow, rng)?;
            self.explainer_encoder.init(params, ParamTag::Slow, rng)?;
            self.mask_mlp.init(params, ParamTag::Slow, rng)?;
            self.predictor.init(params, ParamTag::Fast, rng)
        };
        fill(&mut params, &mut rng).expect("parameter names are unique");
        params
    }

    /// Checks that `params` has exactly the names, tags and shapes this model uses.
    pub fn validate_params(&self, params: &ParameterSet) -> Result<(), ModelError> {
        let reference = self.init_params(0);
        for (name, p) in reference.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if got.tag != p.tag || got.value.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter '{name}' is {:?} {:?}, model expects {:?} {:?}",
                    got.tag,
                    got.value.shape(),
                    p.tag,
                    p.value.shape()
                )));
            }
        }
        if params.len() != reference.len() {
            let extra = params
                .iter()
                .find(|(n, _)| reference.get(n).is_none())
                .map(|(n, _)| n.to_string())
                .unwrap_or_default();
            return Err(ModelError::Checkpoint(format!(
                "unexpected parameter '{extra}'"
            )));
        }
        Ok(())
    }

    pub fn input<'t>(&self, tape: &'t Tape, graph: &Graph) -> GraphInput<'t> {
        GraphInput::new(tape, graph, self.config.encoder)
    }

    /// Node embeddings from the encoder `f`.
    pub fn encode<'t>(
        &self,
        bound: &Bound<'t>,
        input: &GraphInput<'t>,
    ) -> Result<Var<'t>, ModelError> {
        self.encoder.encode(bound, input)
    }

    /// Class prototypes from support embeddings (`1 × d` rows with local labels).
    pub fn task_info_from_embeddings<'t>(
        &self,
        embeddings: &[(Var<'t>, usize)],
    ) -> Result<TaskInfo<'t>, ModelError> {
        let d = self.config.hidden;
        let mut prototypes = Vec::with_capacity(self.config.n_way);
        for c in 0..self.config.n_way {
            let members: Vec<Var<'t>> = embeddings
                .iter()
                .filter(|(_, y)| *y == c)
                .map(|(e, _)| *e)
                .collect();
            if members.is_empty() {
                return Err(ModelError::Task(format!("no support graph for class {c}")));
            }
            let stacked = Var::concat(&members, 0)?;
            prototypes.push(stacked.mean(Some(0))?.reshape(&[1, d])?);
        }
        let concat = Var::concat(&prototypes, 1)?;
        Ok(TaskInfo { prototypes, concat })
    }

    /// Task information from a support set.
    pub fn compute_task_info<'t>(
        &self,
        bound: &Bound<'t>,
        support: &[Shot],
    ) -> Result<TaskInfo<'t>, ModelError> {
        let tape = bound.tape();
        let mut embeddings = Vec::with_capacity(support.len());
        for shot in support {
            let input = self.input(tape, &shot.graph);
            embeddings.push((readout(self.encode(bound, &input)?, None)?, shot.label));
        }
        self.task_info_from_embeddings(&embeddings)
    }

    fn check_task_info(&self, ti: &TaskInfo<'_>) -> Result<(), ModelError> {
        let expected = self.config.n_way * self.config.hidden;
        let got = ti.concat.value().len();
        if got != expected {
            return Err(ModelError::Dimension {
                what: "task information",
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Soft node mask `σ(MLP([h'_v ‖ TI]))`, length `n`.
    pub fn explain<'t>(
        &self,
        bound: &Bound<'t>,
        input: &GraphInput<'t>,
        ti: &TaskInfo<'t>,
    ) -> Result<Var<'t>, ModelError> {
        self.check_task_info(ti)?;
        let n = input.num_nodes;
        let h = self.explainer_encoder.encode(bound, input)?;
        let x = Var::concat(&[h, ti.concat.repeat_rows(n)?], 1)?;
        Ok(self.mask_mlp.forward(bound, x)?.reshape(&[n])?)
    }

    /// Logits for every row of `h` (`rows × d`), each paired with `TI`.
    pub fn predict<'t>(
        &self,
        bound: &Bound<'t>,
        h: Var<'t>,
        ti: &TaskInfo<'t>,
    ) -> Result<Var<'t>, ModelError> {
        self.check_task_info(ti)?;
        let shape = h.shape();
        if shape.len() != 2 || shape[1] != self.config.hidden {
            return Err(ModelError::Dimension {
                what: "predictor embedding",
                expected: self.config.hidden,
                got: *shape.last().unwrap_or(&0),
            });
        }
        let x = Var::concat(&[h, ti.concat.repeat_rows(shape[0])?], 1)?;
        self.predictor.forward(bound, x)
    }

    /// Explainer pass over support and (optionally) query graphs.
    pub fn explain_episode<'t>(
        &self,
        bound: &Bound<'t>,
        episode: &Episode,
        include_query: bool,
    ) -> Result<EpisodeRationales<'t>, ModelError> {
        let tape = bound.tape();
        let encode_all = |shots: &[Shot]| -> Result<Vec<(GraphInput<'t>, Var<'t>)>, ModelError> {
            shots
                .iter()
                .map(|s| {
                    let input = self.input(tape, &s.graph);
                    let h = self.encode(bound, &input)?;
                    Ok((input, h))
                })
                .collect()
        };
        let support = encode_all(&episode.support)?;
        let embeddings = support
            .iter()
            .zip(&episode.support)
            .map(|((_, h), s)| Ok((readout(*h, None)?, s.label)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let task_info = self.task_info_from_embeddings(&embeddings)?;

        let rationales = |encoded: Vec<(GraphInput<'t>, Var<'t>)>| {
            encoded
                .into_iter()
                .map(|(input, h)| {
                    let mask = self.explain(bound, &input, &task_info)?;
                    let (h_r, h_n) = decompose(h, mask)?;
                    Ok(GraphRationale { mask, h_r, h_n })
                })
                .collect::<Result<Vec<_>, ModelError>>()
        };
        let support = rationales(support)?;
        let query = if include_query {
            rationales(encode_all(&episode.query)?)?
        } else {
            Vec::new()
        };
        Ok(EpisodeRationales {
            task_info,
            support,
            query,
        })
    }

    /// Predictor pass over explained graphs; in [`Phase::Train`] the support
    /// set is also augmented.
    pub fn predict_episode<'t>(
        &self,
        bound: &Bound<'t>,
        rationales: EpisodeRationales<'t>,
        support_labels: &[usize],
        phase: Phase,
    ) -> Result<EpisodeOutput<'t>, ModelError> {
        let ti = &rationales.task_info;
        let stack = |items: &[GraphRationale<'t>], pick: fn(&GraphRationale<'t>) -> Var<'t>| {
            Var::concat(&items.iter().map(pick).collect::<Vec<_>>(), 0)
        };
        let support_r = stack(&rationales.support, |g| g.h_r)?;
        let support_logits = self.predict(bound, support_r, ti)?;
        let query_logits = if rationales.query.is_empty() {
            None
        } else {
            Some(self.predict(bound, stack(&rationales.query, |g| g.h_r)?, ti)?)
        };
        let augmented = if phase == Phase::Train {
            let support_n = stack(&rationales.support, |g| g.h_n)?;
            let aug = augment(support_r, support_labels, support_n)?;
            let logits = self.predict(bound, aug.embeddings, ti)?;
            Some((aug, logits))
        } else {
            None
        };
        Ok(EpisodeOutput {
            rationales,
            support_logits,
            query_logits,
            augmented,
        })
    }

    /// Full forward pass over an episode.
    pub fn forward_episode<'t>(
        &self,
        bound: &Bound<'t>,
        episode: &Episode,
        phase: Phase,
    ) -> Result<EpisodeOutput<'t>, ModelError> {
        let rationales = self.explain_episode(bound, episode, true)?;
        let labels: Vec<usize> = episode.support.iter().map(|s| s.label).collect();
        self.predict_episode(bound, rationales, &labels, phase)
    }
}

/// Splits node embeddings `h` (`n × d`) by mask `m` into the rationale and
/// non-rationale readouts.
pub fn decompose<'t>(h: Var<'t>, m: Var<'t>) -> Result<(Var<'t>, Var<'t>), ModelError> {
    let n = h.shape()[0];
    let len = m.value().len();
    if len != n {
        return Err(ModelError::Dimension {
            what: "mask length",
            expected: n,
            got: len,
        });
    }
    let complement = m.neg()?.add_scalar(1.0)?;
    Ok((readout(h, Some(m))?, readout(h, Some(complement))?))
}

/// Every ordered pair `(i, j)` gives `h_r[i] + h_n[j]` labelled `labels[i]`.
/// `rationales` and `non_rationales` are `M × d`; the result has `M²` rows.
pub fn augment<'t>(
    rationales: Var<'t>,
    labels: &[usize],
    non_rationales: Var<'t>,
) -> Result<Augmented<'t>, ModelError> {
    let m = labels.len();
    let (r_shape, n_shape) = (rationales.shape(), non_rationales.shape());
    if r_shape.first() != Some(&m) || n_shape.first() != Some(&m) {
        return Err(ModelError::Dimension {
            what: "augmentation inputs",
            expected: m,
            got: r_shape.first().copied().unwrap_or(0),
        });
    }
    let mut left = Vec::with_capacity(m * m);
    let mut right = Vec::with_capacity(m * m);
    let mut out_labels = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            left.push(i);
            right.push(j);
            out_labels.push(labels[i]);
        }
    }
    let embeddings = rationales
        .index_rows(&left)?
        .add(non_rationales.index_rows(&right)?)?;
    Ok(Augmented {
        embeddings,
        labels: out_labels,
    })
}

/// Loss on one side of an episode: rationale cross-entropy and size
/// regulariser over that side's graphs, plus the contrastive term over the
/// support augmentation when present.
pub fn episode_loss<'t>(
    out: &EpisodeOutput<'t>,
    episode: &Episode,
    side: LossSide,
    weights: &LossWeights,
) -> Result<LossParts<'t>, ObjectiveError> {
    let (logits, shots, graphs) = match side {
        LossSide::Support => (
            Some(out.support_logits),
            &episode.support,
            &out.rationales.support,
        ),
        LossSide::Query => (out.query_logits, &episode.query, &out.rationales.query),
    };
    let logits = logits.ok_or(ObjectiveError::DegenerateBatch)?;
    let labels: Vec<usize> = shots.iter().map(|s| s.label).collect();
    let l_r = rationale_loss_batch(logits, &labels)?;

    let mut l_reg: Option<Var<'t>> = None;
    for g in graphs {
        let r = size_regularizer(g.mask, weights.gamma)?;
        l_reg = Some(match l_reg {
            Some(acc) => acc.add(r)?,
            None => r,
        });
    }
    let l_reg = l_reg
        .ok_or(ObjectiveError::DegenerateBatch)?
        .scale(1.0 / graphs.len() as f64)?;

    let l_a = match &out.augmented {
        Some((aug, aug_logits)) if weights.alpha_a > 0.0 => Some(contrastive_loss(
            aug_logits.softmax()?,
            &aug.labels,
            weights.tau,
        )?),
        _ => None,
    };
    let total = total_loss(l_r, l_a, l_reg, weights)?;
    Ok(LossParts {
        total,
        rationale: l_r.item(),
        contrastive: l_a.map(|v| v.item()),
        regularizer: l_reg.item(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    /// Free-form provenance (run configuration, fingerprint, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &MseGnn, params: &ParameterSet, extra: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: model.config.clone(),
            tensors: params
                .iter()
                .map(|(name, p)| NamedTensor {
                    name: name.to_string(),
                    tag: p.tag,
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
            extra,
        }
    }

    /// Rebuilds the model and its parameters, validating every shape.
    pub fn restore(&self) -> Result<(MseGnn, ParameterSet), ModelError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let model = MseGnn::new(self.model.clone())?;
        let mut params = ParameterSet::new();
        for t in &self.tensors {
            let value = Tensor::new(t.shape.clone(), t.values.clone())
                .map_err(|e| ModelError::Checkpoint(format!("'{}': {e}", t.name)))?;
            params.insert(&t.name, t.tag, value)?;
        }
        model.validate_params(&params)?;
        Ok((model, params))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text =
            serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, text + "\n")
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

/// Overrides for the fast parameters (adapted predictor weights).
pub type FastWeights = TensorMap;
