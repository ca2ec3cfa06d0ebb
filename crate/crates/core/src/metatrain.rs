//! Episodic meta-training with per-task adaptation of the predictor.
//!
//! Each meta-step samples a task, adapts a copy of the fast (predictor)
//! weights on the support set for `local_steps` gradient steps while the
//! slow (encoder, explainer) weights stay frozen, then evaluates the query
//! loss with the adapted weights and applies its gradient to every
//! parameter. The meta-gradient is first-order: gradients taken at the
//! adapted fast weights are applied to their pre-adaptation values.

use std::time::Instant;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{
    accuracy, aggregate, mean_explanation_auc, roc_auc, MetricError, MetricReport,
};
use crate::graphdata::{sample_episode, DataError, Dataset, DatasetSplit, Episode, SplitRole};
use crate::model::{episode_loss, FrozenRationales, LossSide, MseGnn, Phase};
use crate::objective::{LossWeights, ObjectiveError};
use crate::params::{ModelError, ParamTag, ParameterSet, TensorMap};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("adaptation diverged at local step {step}: {detail}")]
    Adaptation { step: usize, detail: String },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<MetaError>,
    },
}

impl MetaError {
    /// Whether the failure is numeric (divergence, NaN, overflow).
    pub fn is_numeric(&self) -> bool {
        match self {
            MetaError::Adaptation { .. } | MetaError::NonFinite(_) => true,
            MetaError::Objective(ObjectiveError::NonFinite { .. }) => true,
            MetaError::Objective(ObjectiveError::Tensor(TensorError::Domain { .. })) => true,
            MetaError::Model(ModelError::Tensor(TensorError::Domain { .. })) => true,
            MetaError::Episode { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub local_steps: usize,
    pub local_optimizer: OptimizerKind,
    pub episodes_per_meta_update: usize,
    pub max_meta_iterations: usize,
    /// Meta-iterations between validation runs.
    pub eval_every: usize,
    pub val_episodes: usize,
    /// Validation runs without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub local_weights: LossWeights,
    pub global_weights: LossWeights,
    /// Reserved for differentiating through the inner loop; must stay false.
    pub second_order: bool,
    /// Fingerprint slow parameters around every local adaptation.
    pub audit_slow_params: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            n_way: 2,
            k_shot: 5,
            query_per_class: 15,
            local_lr: 1e-3,
            global_lr: 1e-3,
            local_steps: 5,
            local_optimizer: OptimizerKind::Adam,
            episodes_per_meta_update: 1,
            max_meta_iterations: 2000,
            eval_every: 50,
            val_episodes: 20,
            patience: 20,
            seed: 0,
            local_weights: LossWeights::default(),
            global_weights: LossWeights::default(),
            second_order: false,
            audit_slow_params: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: &str| Err(MetaError::Config(m.to_string()));
        if self.n_way < 2 {
            return bad("n_way must be at least 2");
        }
        if self.k_shot == 0 {
            return bad("k_shot must be positive");
        }
        if self.query_per_class == 0 {
            return bad("query_per_class must be positive");
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return bad("local_lr must be positive");
        }
        if !(self.global_lr >= 0.0 && self.global_lr.is_finite()) {
            return bad("global_lr must be non-negative");
        }
        if self.local_steps == 0 {
            return bad("local_steps (T) must be at least 1");
        }
        if self.episodes_per_meta_update == 0 {
            return bad("episodes_per_meta_update must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.second_order {
            return bad("second_order meta-gradients are not implemented");
        }
        self.local_weights
            .validate()
            .map_err(|e| MetaError::Config(format!("local weights: {e}")))?;
        self.global_weights
            .validate()
            .map_err(|e| MetaError::Config(format!("global weights: {e}")))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimisers

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: TensorMap,
    second: TensorMap,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: TensorMap::new(),
            second: TensorMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new step; call once before the `apply` calls of that step.
    pub fn next_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, name: &str, value: &mut Tensor, grad: &Tensor) {
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((x, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

enum LocalOptimizer {
    Adam(Adam),
    Sgd(f64),
}

impl LocalOptimizer {
    fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Self::Sgd(lr),
        }
    }

    fn update(&mut self, values: &mut TensorMap, grads: &TensorMap) {
        if let Self::Adam(adam) = self {
            adam.next_step();
        }
        for (name, g) in grads {
            let Some(value) = values.get_mut(name) else {
                continue;
            };
            match self {
                Self::Adam(adam) => adam.apply(name, value, g),
                Self::Sgd(lr) => {
                    for (x, gi) in value.data_mut().iter_mut().zip(g.data()) {
                        *x -= *lr * gi;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Local adaptation

/// Adapted fast weights and the support loss seen at every local step.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub fast: TensorMap,
    pub step_losses: Vec<f64>,
}

impl Adaptation {
    pub fn final_loss(&self) -> f64 {
        self.step_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs `local_steps` updates of a copy of the fast weights on the support
/// loss. `params` is never modified.
pub fn local_adapt(
    model: &MseGnn,
    params: &ParameterSet,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<Adaptation, MetaError> {
    if episode.support.is_empty() {
        return Err(MetaError::Config("empty support set".into()));
    }
    let tape = Tape::new();
    let bound = params.bind_tags(&tape, &[ParamTag::Slow], &[], None);
    let frozen = model.explain_episode(&bound, episode, false)?.freeze();
    adapt_frozen(model, params, &frozen, episode, config)
}

/// Local adaptation from support rationales computed beforehand. Slow
/// weights only enter through `frozen`, so they receive no updates.
fn adapt_frozen(
    model: &MseGnn,
    params: &ParameterSet,
    frozen: &FrozenRationales,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<Adaptation, MetaError> {
    let labels: Vec<usize> = episode.support.iter().map(|s| s.label).collect();
    let mut fast = params.values(ParamTag::Fast);
    let mut optimizer = LocalOptimizer::new(config.local_optimizer, config.local_lr);
    let mut step_losses = Vec::with_capacity(config.local_steps);
    let diverged = |step: usize, detail: String| MetaError::Adaptation { step, detail };

    for step in 0..config.local_steps {
        let tape = Tape::new();
        let bound = params.bind_tags(&tape, &[ParamTag::Fast], &[ParamTag::Fast], Some(&fast));
        let out = model
            .predict_episode(&bound, frozen.to_tape(&tape), &labels, Phase::Train)
            .map_err(|e| diverged(step, e.to_string()))?;
        let parts = episode_loss(&out, episode, LossSide::Support, &config.local_weights)
            .map_err(|e| diverged(step, e.to_string()))?;
        let loss = parts.total.item();
        if !loss.is_finite() {
            return Err(diverged(step, format!("support loss {loss}")));
        }
        parts
            .total
            .backward()
            .map_err(|e| diverged(step, e.to_string()))?;
        optimizer.update(&mut fast, &bound.grads());
        step_losses.push(loss);
    }
    Ok(Adaptation { fast, step_losses })
}

// ---------------------------------------------------------------------------
// Meta step

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub support_loss: f64,
    pub query_loss: f64,
}

/// Counts slow-parameter fingerprint checks around local adaptation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlowAudit {
    pub checks: usize,
    pub violations: usize,
}

/// First-order meta-gradient of one episode: gradients of the query loss
/// at `(θ_f, θ_g, θ_p')`, keyed by parameter name.
pub fn meta_gradients(
    model: &MseGnn,
    params: &ParameterSet,
    episode: &Episode,
    config: &MetaConfig,
    audit: Option<&mut SlowAudit>,
) -> Result<(TensorMap, StepMetrics), MetaError> {
    let tape = Tape::new();
    let slow = params.bind_tags(&tape, &[ParamTag::Slow], &[ParamTag::Slow], None);
    let rationales = model.explain_episode(&slow, episode, true)?;

    let mut frozen = rationales.freeze();
    frozen.query.clear();
    let before = audit
        .is_some()
        .then(|| params.fingerprint(Some(ParamTag::Slow)));
    let adaptation = adapt_frozen(model, params, &frozen, episode, config)?;
    if let (Some(audit), Some(before)) = (audit, before) {
        audit.checks += 1;
        if params.fingerprint(Some(ParamTag::Slow)) != before {
            audit.violations += 1;
        }
    }

    let fast = params.bind_tags(
        &tape,
        &[ParamTag::Fast],
        &[ParamTag::Fast],
        Some(&adaptation.fast),
    );
    let bound = slow.merge(fast);
    let labels: Vec<usize> = episode.support.iter().map(|s| s.label).collect();
    let out = model.predict_episode(&bound, rationales, &labels, Phase::Train)?;
    let parts = episode_loss(&out, episode, LossSide::Query, &config.global_weights)?;
    let query_loss = parts.total.item();
    if !query_loss.is_finite() {
        return Err(MetaError::NonFinite(format!("query loss {query_loss}")));
    }
    parts.total.backward().map_err(ModelError::from)?;
    let grads = bound.grads();
    if grads.values().any(|g| !g.all_finite()) {
        return Err(MetaError::NonFinite("meta-gradient".into()));
    }
    Ok((
        grads,
        StepMetrics {
            support_loss: adaptation.final_loss(),
            query_loss,
        },
    ))
}

/// Applies `grads` (averaged over a meta-batch) with one optimiser step.
pub fn apply_meta_update(optimizer: &mut Adam, params: &mut ParameterSet, grads: &TensorMap) {
    optimizer.next_step();
    for (name, g) in grads {
        if let Some(value) = params.value_mut(name) {
            optimizer.apply(name, value, g);
        }
    }
}

/// Local adaptation on the support set followed by one global update from
/// the query loss.
pub fn meta_step(
    model: &MseGnn,
    params: &mut ParameterSet,
    episode: &Episode,
    config: &MetaConfig,
    optimizer: &mut Adam,
) -> Result<StepMetrics, MetaError> {
    let (grads, metrics) = meta_gradients(model, params, episode, config, None)?;
    apply_meta_update(optimizer, params, &grads);
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Metrics for one evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEval {
    pub accuracy: f64,
    /// Binary tasks only.
    pub auc: Option<f64>,
    /// Present when every query graph has a ground-truth mask.
    pub explanation_auc: Option<f64>,
    pub predictions: Vec<usize>,
    /// Query masks in query order.
    pub masks: Vec<Vec<f64>>,
}

/// Adapts on the support set, then scores the query set.
pub fn evaluate_episode(
    model: &MseGnn,
    params: &ParameterSet,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<EpisodeEval, MetaError> {
    let tape = Tape::new();
    let slow = params.bind_tags(&tape, &[ParamTag::Slow], &[], None);
    let rationales = model.explain_episode(&slow, episode, true)?;
    let mut frozen = rationales.freeze();
    frozen.query.clear();
    let adaptation = adapt_frozen(model, params, &frozen, episode, config)?;

    let fast = params.bind_tags(&tape, &[ParamTag::Fast], &[], Some(&adaptation.fast));
    let bound = slow.merge(fast);
    let query_r = Var::concat(
        &rationales.query.iter().map(|g| g.h_r).collect::<Vec<_>>(),
        0,
    )
    .map_err(ModelError::from)?;
    let probs = model
        .predict(&bound, query_r, &rationales.task_info)?
        .softmax()
        .map_err(ModelError::from)?
        .to_tensor();
    let n_way = episode.n_way;
    let predictions: Vec<usize> = (0..episode.query.len())
        .map(|i| {
            let row = probs.row(i);
            (0..n_way).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    let labels: Vec<usize> = episode.query.iter().map(|s| s.label).collect();
    let acc = accuracy(&predictions, &labels)?;

    let auc = if n_way == 2 {
        let scores: Vec<f64> = (0..labels.len()).map(|i| probs.row(i)[1]).collect();
        let binary: Vec<u8> = labels.iter().map(|&l| (l == 1) as u8).collect();
        Some(roc_auc(&scores, &binary)?)
    } else {
        None
    };

    let masks: Vec<Vec<f64>> = rationales
        .query
        .iter()
        .map(|g| g.mask.to_tensor().into_data())
        .collect();
    let truths: Option<Vec<&[u8]>> = episode.query.iter().map(|s| s.graph.truth_mask()).collect();
    let explanation_auc = match truths {
        Some(truths) => Some(mean_explanation_auc(
            masks.iter().map(Vec::as_slice).zip(truths),
        )?),
        None => None,
    };
    Ok(EpisodeEval {
        accuracy: acc,
        auc,
        explanation_auc,
        predictions,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub accuracy: Option<MetricReport>,
    pub auc: Option<MetricReport>,
    pub explanation_auc: Option<MetricReport>,
}

/// Test-time protocol: for each sampled episode of `role`, adapt a copy of
/// the fast weights on the support set and score the query set. The passed
/// parameters are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn test_protocol(
    model: &MseGnn,
    params: &ParameterSet,
    dataset: &Dataset,
    split: &DatasetSplit,
    role: SplitRole,
    config: &MetaConfig,
    num_episodes: usize,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalSummary, MetaError> {
    let mut summary = EvalSummary {
        episodes: num_episodes,
        ..EvalSummary::default()
    };
    if num_episodes == 0 {
        return Ok(summary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Vec::with_capacity(num_episodes);
    let mut auc = Vec::new();
    let mut expl = Vec::new();
    let mut warned = false;
    for i in 0..num_episodes {
        let episode = sample_episode(
            dataset,
            split,
            role,
            config.n_way,
            config.k_shot,
            config.query_per_class,
            &mut rng,
        )?;
        let eval =
            evaluate_episode(model, params, &episode, config).map_err(|e| MetaError::Episode {
                episode: i,
                source: Box::new(e),
            })?;
        acc.push(eval.accuracy);
        auc.extend(eval.auc);
        match eval.explanation_auc {
            Some(v) => expl.push(v),
            None if !warned => {
                warn!("query graphs without ground-truth masks; explanation AUC not reported");
                warned = true;
            }
            None => {}
        }
    }
    summary.accuracy = Some(aggregate("accuracy", &acc, fingerprint)?);
    if auc.len() == num_episodes {
        summary.auc = Some(aggregate("auc", &auc, fingerprint)?);
    }
    if expl.len() == num_episodes {
        summary.explanation_auc = Some(aggregate("explanation_auc", &expl, fingerprint)?);
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode_idx: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParameterSet,
    pub last: ParameterSet,
    pub best_val_accuracy: Option<f64>,
    pub log: Vec<LogRecord>,
    pub audit: SlowAudit,
    pub stopped_early: bool,
}

/// Seed of the fixed validation episodes, derived from the training seed.
pub fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x005e_ed0f_7a11_da7e
}

/// Meta-trains `params` in place. `on_record` sees every log record as it is
/// produced.
pub fn meta_train(
    model: &MseGnn,
    params: &mut ParameterSet,
    dataset: &Dataset,
    split: &DatasetSplit,
    config: &MetaConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome, MetaError> {
    config.validate()?;
    if model.config().n_way != config.n_way {
        return Err(MetaError::Config(format!(
            "model is {}-way but training is {}-way",
            model.config().n_way,
            config.n_way
        )));
    }
    if split.train_classes.len() < config.n_way {
        return Err(MetaError::Config(format!(
            "{} training classes cannot form {}-way episodes",
            split.train_classes.len(),
            config.n_way
        )));
    }
    model.validate_params(params)?;
    let validate = split.val_classes.len() >= config.n_way && config.val_episodes > 0;
    if !validate {
        info!("no validation episodes; the last parameters are kept as best");
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.global_lr);
    let mut audit = SlowAudit::default();
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_val: Option<f64> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for it in 0..config.max_meta_iterations {
        let mut sum: Option<TensorMap> = None;
        let mut support_loss = 0.0;
        let mut query_loss = 0.0;
        for _ in 0..config.episodes_per_meta_update {
            let episode = sample_episode(
                dataset,
                split,
                SplitRole::Train,
                config.n_way,
                config.k_shot,
                config.query_per_class,
                &mut rng,
            )?;
            let (grads, metrics) = meta_gradients(
                model,
                params,
                &episode,
                config,
                config.audit_slow_params.then_some(&mut audit),
            )
            .map_err(|e| MetaError::Episode {
                episode: it,
                source: Box::new(e),
            })?;
            support_loss += metrics.support_loss;
            query_loss += metrics.query_loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        acc.get_mut(&name)
                            .expect("same parameter names")
                            .add_assign(&g);
                    }
                }
            }
        }
        let batch = config.episodes_per_meta_update as f64;
        let mut grads = sum.expect("at least one episode per update");
        if config.episodes_per_meta_update > 1 {
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x /= batch);
            }
        }
        apply_meta_update(&mut optimizer, params, &grads);

        let mut record = LogRecord {
            episode_idx: it,
            support_loss: support_loss / batch,
            query_loss: query_loss / batch,
            val_accuracy: None,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if validate && (it + 1) % config.eval_every == 0 {
            let summary = test_protocol(
                model,
                params,
                dataset,
                split,
                SplitRole::Val,
                config,
                config.val_episodes,
                validation_seed(config.seed),
                "",
            )?;
            let val = summary.accuracy.map(|r| r.mean).unwrap_or(0.0);
            record.val_accuracy = Some(val);
            debug!("episode {it}: val accuracy {val:.4}");
            // Ties move the best checkpoint forward but do not reset patience.
            match best_val {
                Some(b) if val < b => stale += 1,
                Some(b) if val == b => {
                    best = params.clone();
                    stale += 1;
                }
                _ => {
                    best_val = Some(val);
                    best = params.clone();
                    stale = 0;
                }
            }
        }
        on_record(&record);
        log.push(record);
        if stale >= config.patience && config.patience > 0 {
            stopped_early = true;
            info!("early stop after {} meta-iterations", it + 1);
            break;
        }
    }
    if !validate {
        best = params.clone();
    }
    Ok(TrainOutcome {
        best,
        last: params.clone(),
        best_val_accuracy: best_val,
        log,
        audit,
        stopped_early,
    })
}
