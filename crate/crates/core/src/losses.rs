//! Masked per-field losses and the weighted multi-task total.
//!
//! Every loss returns its value together with the gradient with respect to the
//! raw field values, which the engine feeds into the reverse pass.

use serde::{Deserialize, Serialize};

use crate::codec::FieldTarget;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::{log_sum_exp, logistic, softplus};
use crate::registry::{AttributeKind, AttributeSpec, Group};

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// Binary focal cross-entropy on one logit. Returns `(loss, dloss/dlogit)`.
pub fn focal_bce(logit: f64, target: f64, gamma: f64) -> Result<(f64, f64)> {
    if target != 0.0 && target != 1.0 {
        return Err(Error::invalid(format!("binary target must be 0 or 1, got {target}")));
    }
    Ok(focal_bce_unchecked(logit, target == 1.0, gamma))
}

#[inline]
fn focal_bce_unchecked(logit: f64, positive: bool, gamma: f64) -> (f64, f64) {
    // s is the logit of p_t
    let s = if positive { logit } else { -logit };
    let nll = softplus(-s); // -ln p_t
    let q = logistic(-s); // 1 - p_t
    let p = logistic(s);
    let focus = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = focus * nll;
    let dloss_ds = -gamma * focus * p * nll - focus * q;
    (loss, if positive { dloss_ds } else { -dloss_ds })
}

/// Categorical focal cross-entropy. Returns the loss and the gradient per logit.
pub fn focal_ce_categorical(logits: &[f64], target: usize, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::invalid("categorical loss needs at least 2 classes"));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of {} classes",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let probs: Vec<f64> = logits.iter().map(|&x| (x - lse).exp()).collect();
    let nll = lse - logits[target];
    let q = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, p)| p)
        .sum::<f64>();
    let pt = probs[target];
    let focus = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = focus * nll;
    // the (1-p_t)^(gamma-1) factor is dropped at q == 0, where its product with -ln p_t vanishes
    let focal_term = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * nll * pt
    };
    let coeff = -(focal_term + focus);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| coeff * (f64::from(u8::from(j == target)) - p))
        .collect();
    Ok((loss, grad))
}

/// Sum of absolute differences. Returns the loss and the (sub)gradient w.r.t. `pred`.
pub fn l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Value and raw-field gradient of a masked loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldLoss {
    pub value: f64,
    pub grad: Grid,
    /// Number of supervised cells; zero means the task is absent for this example.
    pub cells: usize,
}

impl FieldLoss {
    pub fn is_active(&self) -> bool {
        self.cells > 0
    }
}

/// Mean of the per-cell loss over masked cells.
pub fn masked_field_loss(field: &Grid, target: &FieldTarget, spec: &AttributeSpec, gamma: f64) -> Result<FieldLoss> {
    if !field.same_shape(&target.target) || target.mask.len() != field.plane() || field.channels() != spec.channels() {
        return Err(Error::shape(format!(
            "field '{}' {:?} vs target {:?} / mask {}",
            spec.name,
            field.shape(),
            target.target.shape(),
            target.mask.len()
        )));
    }
    let plane = field.plane();
    let channels = field.channels();
    let cells = target.masked_cells();
    let mut grad = Grid::zeros(channels, field.height(), field.width());
    if cells == 0 {
        return Ok(FieldLoss {
            value: 0.0,
            grad,
            cells,
        });
    }
    let norm = 1.0 / cells as f64;
    let mut total = 0.0;
    let raw = field.data();
    let tgt = target.target.data();
    let g = grad.data_mut();
    let mut pred = vec![0.0; channels];
    let mut want = vec![0.0; channels];
    for cell in (0..plane).filter(|&i| target.mask[i]) {
        for c in 0..channels {
            pred[c] = raw[c * plane + cell];
            want[c] = tgt[c * plane + cell];
        }
        let (loss, dl): (f64, Vec<f64>) = match spec.kind {
            AttributeKind::Binary => {
                let (l, d) = focal_bce(pred[0], want[0], gamma)?;
                (l, vec![d])
            }
            AttributeKind::Categorical { .. } => {
                let class = crate::math::argmax(&want);
                focal_ce_categorical(&pred, class, gamma)?
            }
            AttributeKind::Continuous | AttributeKind::Vectorial => l1(&pred, &want),
        };
        total += loss;
        for c in 0..channels {
            g[c * plane + cell] = dl[c] * norm;
        }
    }
    Ok(FieldLoss {
        value: total * norm,
        grad,
        cells,
    })
}

/// How tasks are weighted in the total loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    /// Per-field `lambda`; in uncertainty mode this carries only the fixed bias.
    pub lambda: Vec<f64>,
    /// Learned log-variances `s_t`, when uncertainty weighting is enabled.
    pub log_var: Option<Vec<f64>>,
}

impl TaskWeights {
    pub fn uniform(tasks: usize) -> Self {
        TaskWeights {
            lambda: vec![1.0; tasks],
            log_var: None,
        }
    }

    /// `lambda` from per-spec overrides and a multiplier on detection fields.
    pub fn with_bias(specs: &[AttributeSpec], detection_bias: f64, uncertainty: bool) -> Self {
        let lambda = specs
            .iter()
            .map(|s| {
                if s.group == Group::Detection {
                    detection_bias
                } else {
                    1.0
                }
            })
            .collect::<Vec<_>>();
        let log_var = uncertainty.then(|| vec![0.0; specs.len()]);
        TaskWeights { lambda, log_var }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid("task weights must be positive"));
        }
        if let Some(s) = &self.log_var {
            if s.len() != self.lambda.len() {
                return Err(Error::shape("log-variance count differs from task count"));
            }
        }
        Ok(())
    }

    /// Multiplier on `L_t` in the total: `exp(-s_t) * lambda_t` or `lambda_t`.
    pub fn effective(&self, t: usize) -> f64 {
        match &self.log_var {
            Some(s) => (-s[t]).exp() * self.lambda[t],
            None => self.lambda[t],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// `effective(t) * L_t` per task.
    pub weighted: Vec<f64>,
    /// Gradient w.r.t. each log-variance (empty without uncertainty weighting).
    pub log_var_grad: Vec<f64>,
}

/// `sum_t w_t L_t (+ s_t)`. `scale[t]` multiplies each task's weight (used
/// by the mean-loss strategy; pass 1.0 otherwise).
pub fn total_loss(losses: &[f64], weights: &TaskWeights, scale: &[f64], active: &[bool]) -> Result<TotalLoss> {
    if losses.len() != weights.lambda.len() || scale.len() != losses.len() || active.len() != losses.len() {
        return Err(Error::shape("loss, weight and scale vectors differ in length"));
    }
    let mut value = 0.0;
    let mut weighted = Vec::with_capacity(losses.len());
    let mut log_var_grad = Vec::new();
    for t in 0..losses.len() {
        let w = weights.effective(t) * scale[t];
        weighted.push(w * losses[t]);
        value += w * losses[t];
        if let Some(s) = &weights.log_var {
            if active[t] {
                value += s[t];
                log_var_grad.push(1.0 - w * losses[t]);
            } else {
                log_var_grad.push(0.0);
            }
        }
    }
    Ok(TotalLoss {
        value,
        weighted,
        log_var_grad,
    })
}
