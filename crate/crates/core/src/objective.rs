//! Training losses: rationale cross-entropy, supervised contrastive loss over
//! augmented predictions, rationale-size regulariser and their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("contrastive batch has no anchor with a positive pair")]
    DegenerateBatch,
    #[error("{component} loss is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_r: f64,
    pub alpha_a: f64,
    pub alpha_reg: f64,
    /// Target fraction of nodes in the rationale.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_r: 1.0,
            alpha_a: 0.5,
            alpha_reg: 1.0,
            gamma: 0.1,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, v) in [
            ("alpha_r", self.alpha_r),
            ("alpha_a", self.alpha_a),
            ("alpha_reg", self.alpha_reg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ObjectiveError::Weights(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ObjectiveError::Weights(
                "gamma must lie strictly inside (0, 1)".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::Weights("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Negative log-likelihood of `label` under `softmax(logits)` for a single
/// prediction (`[N]` or `[1, N]`).
pub fn rationale_loss<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>, ObjectiveError> {
    let n = logits.value().len();
    let row = logits.reshape(&[1, n])?;
    rationale_loss_batch(row, &[label])
}

/// Mean negative log-likelihood over the rows of `logits` (`B × N`).
pub fn rationale_loss_batch<'t>(
    logits: Var<'t>,
    labels: &[usize],
) -> Result<Var<'t>, ObjectiveError> {
    let shape = logits.shape();
    let (b, n) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(TensorError::Shape {
            op: "rationale_loss",
            left: shape,
            right: vec![labels.len()],
        }
        .into());
    }
    let mut onehot = Tensor::zeros(&[b, n]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(ObjectiveError::Label {
                label: y,
                classes: n,
            });
        }
        onehot.data_mut()[i * n + y] = 1.0;
    }
    let picked = logits
        .log_softmax()?
        .mul(logits.tape().constant(onehot))?
        .sum(None)?;
    Ok(picked.scale(-1.0 / b as f64)?)
}

/// Supervised contrastive loss over prediction vectors `preds` (`M × N`).
///
/// For anchor `i`, positives are the other rows with the same label.
/// Similarity is `preds_i · preds_j / τ`, and the anchor loss is
/// `-mean_{j∈P(i)} log(exp(s_ij) / Σ_{k≠i} exp(s_ik))`. Anchors without
/// positives are skipped; the result is the mean over the remaining anchors.
pub fn contrastive_loss<'t>(
    preds: Var<'t>,
    labels: &[usize],
    tau: f64,
) -> Result<Var<'t>, ObjectiveError> {
    let shape = preds.shape();
    let m = shape[0];
    if labels.len() != m {
        return Err(TensorError::Shape {
            op: "contrastive_loss",
            left: shape,
            right: vec![labels.len()],
        }
        .into());
    }
    let positives: Vec<usize> = (0..m)
        .map(|i| (0..m).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if m < 2 || anchors == 0 {
        return Err(ObjectiveError::DegenerateBatch);
    }
    let tape = preds.tape();
    let sim = preds.matmul(preds.transpose()?)?.scale(1.0 / tau)?;

    // Row-wise log-sum-exp over k != i, shifted by the (constant) row max.
    let s = sim.to_tensor();
    let mut shift = Tensor::zeros(&[m, m]);
    let mut row_max = vec![0.0; m];
    for i in 0..m {
        let mx = (0..m)
            .filter(|&k| k != i)
            .map(|k| s.get(i, k))
            .fold(f64::NEG_INFINITY, f64::max);
        row_max[i] = mx;
        shift.data_mut()[i * m..(i + 1) * m].fill(mx);
    }
    let mut off_diag = Tensor::ones(&[m, m]);
    let mut pos_weight = Tensor::zeros(&[m, m]);
    let mut anchor_weight = vec![0.0; m];
    for i in 0..m {
        off_diag.data_mut()[i * m + i] = 0.0;
        if positives[i] > 0 {
            anchor_weight[i] = 1.0 / anchors as f64;
            for j in 0..m {
                if j != i && labels[j] == labels[i] {
                    pos_weight.data_mut()[i * m + j] = 1.0 / positives[i] as f64;
                }
            }
        }
    }
    let log_denom = sim
        .sub(tape.constant(shift))?
        .exp()?
        .mul(tape.constant(off_diag))?
        .sum(Some(1))?
        .log()?
        .add(tape.constant(Tensor::vector(row_max)))?;
    let mean_pos = sim.mul(tape.constant(pos_weight))?.sum(Some(1))?;
    Ok(log_denom
        .sub(mean_pos)?
        .mul(tape.constant(Tensor::vector(anchor_weight)))?
        .sum(None)?)
}

/// `|mean(mask) - γ|`; the subgradient at the kink is zero.
pub fn size_regularizer<'t>(mask: Var<'t>, gamma: f64) -> Result<Var<'t>, ObjectiveError> {
    Ok(mask.mean(None)?.add_scalar(-gamma)?.abs()?)
}

/// `α_r·L_r + α_a·L_a + α_reg·L_reg`. A missing contrastive term (no
/// augmentation for this batch) contributes nothing.
pub fn total_loss<'t>(
    l_r: Var<'t>,
    l_a: Option<Var<'t>>,
    l_reg: Var<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>, ObjectiveError> {
    let check = |component: &'static str, v: Var<'t>| {
        let value = v.item();
        if value.is_finite() {
            Ok(())
        } else {
            Err(ObjectiveError::NonFinite { component, value })
        }
    };
    check("rationale", l_r)?;
    check("regularizer", l_reg)?;
    let mut total = l_r
        .scale(weights.alpha_r)?
        .add(l_reg.scale(weights.alpha_reg)?)?;
    if let Some(l_a) = l_a {
        check("contrastive", l_a)?;
        total = total.add(l_a.scale(weights.alpha_a)?)?;
    }
    Ok(total)
}
