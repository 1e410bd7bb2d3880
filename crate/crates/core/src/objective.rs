//! Uncertainty objectives on the next-token distribution and their exact
//! gradients with respect to the logits.
//!
//! All logarithms are natural. `0 · log 0` is taken as 0; probabilities below
//! [`TINY_PROB`] are treated as zero before taking logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TINY_PROB: f64 = 1e-300;

/// Tolerance on `Σp = 1` accepted by [`shannon_entropy`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Absorbs rounding in the nucleus running sum (nine 0.1s sum below 0.9).
pub const NUCLEUS_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Shannon entropy of the full distribution.
    Entropy,
    /// Entropy of the nucleus: the smallest set of most-likely tokens whose
    /// cumulative mass reaches `mass`.
    TopPEntropy {
        mass: f64,
        /// Renormalize the nucleus to sum 1 before taking its entropy.
        #[serde(default = "default_true")]
        renormalize: bool,
    },
    /// Log of the top-1 probability.
    MaxProb,
}

fn default_true() -> bool {
    true
}

impl ObjectiveKind {
    pub fn top_p(mass: f64) -> Self {
        ObjectiveKind::TopPEntropy {
            mass,
            renormalize: true,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ObjectiveKind::Entropy => "entropy".into(),
            ObjectiveKind::TopPEntropy { mass, .. } => format!("top_p({mass})"),
            ObjectiveKind::MaxProb => "max_prob".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    #[serde(flatten)]
    pub kind: ObjectiveKind,
    /// Which generated token's distribution the objective is defined on;
    /// 1 is the first answer token.
    #[serde(default = "first_step")]
    pub decode_step: usize,
}

fn first_step() -> usize {
    1
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Entropy,
            decode_step: 1,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decode_step == 0 {
            return Err(Error::invalid("decode_step must be >= 1"));
        }
        if let ObjectiveKind::TopPEntropy { mass, .. } = self.kind {
            if !(mass > 0.0 && mass <= 1.0) {
                return Err(Error::invalid(format!("top-p mass {mass} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Statistics of one next-token distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextTokenSummary {
    pub probs: Vec<f64>,
    pub decode_step: usize,
    pub max_prob: f64,
    /// Shannon entropy in nats.
    pub entropy: f64,
}

impl NextTokenSummary {
    pub fn from_logits(logits: &[f64], decode_step: usize) -> Result<Self> {
        check_finite(logits)?;
        let probs = softmax(logits);
        let entropy = entropy_unchecked(&probs);
        let max_prob = probs.iter().copied().fold(0.0, f64::max);
        Ok(NextTokenSummary {
            probs,
            decode_step,
            max_prob,
            entropy,
        })
    }

    pub fn vocab(&self) -> usize {
        self.probs.len()
    }

    /// Index of the most likely token; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if let Some((i, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is {z}")));
    }
    Ok(())
}

fn validate_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if let Some((i, p)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !p.is_finite() || **p < 0.0)
    {
        return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p < TINY_PROB {
        0.0
    } else {
        p * p.ln()
    }
}

fn entropy_unchecked(probs: &[f64]) -> f64 {
    // Clamp the rounding noise that can push a one-hot entropy to -0.0.
    (-probs.iter().map(|&p| plogp(p)).sum::<f64>()).max(0.0)
}

/// `−Σ p log p` in nats.
pub fn shannon_entropy(probs: &[f64]) -> Result<f64> {
    validate_distribution(probs)?;
    Ok(entropy_unchecked(probs))
}

/// Entropy of `softmax(z)` differentiated w.r.t. `z` given `p = softmax(z)`:
/// `∂H/∂z_j = −p_j (log p_j + H)`.
fn entropy_grad_from_probs(probs: &[f64]) -> (f64, Vec<f64>) {
    let h = entropy_unchecked(probs);
    let grad = probs
        .iter()
        .map(|&p| if p < TINY_PROB { 0.0 } else { -p * (p.ln() + h) })
        .collect();
    (h, grad)
}

/// Exact gradient of `shannon_entropy(softmax(logits))` w.r.t. the logits.
pub fn entropy_grad_logits(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    Ok(entropy_grad_from_probs(&softmax(logits)).1)
}

/// Minimal prefix of the probabilities sorted descending (ties by index) whose
/// cumulative sum reaches `mass`, up to [`NUCLEUS_SLACK`] of summation error.
/// A mass of 1 selects the full support.
pub fn nucleus(probs: &[f64], mass: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if mass >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut take = order.len();
    for (k, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= mass - NUCLEUS_SLACK {
            take = k + 1;
            break;
        }
    }
    order.truncate(take);
    order
}

/// Top-P entropy with the nucleus renormalized to sum 1. Returns the value and
/// the nucleus indices in descending-probability order.
pub fn top_p_entropy(probs: &[f64], mass: f64) -> Result<(f64, Vec<usize>)> {
    top_p_entropy_with(probs, mass, true)
}

/// Top-P entropy; without renormalization the value is `−Σ_{i∈N} p_i log p_i`
/// over the raw probabilities.
pub fn top_p_entropy_with(probs: &[f64], mass: f64, renormalize: bool) -> Result<(f64, Vec<usize>)> {
    validate_distribution(probs)?;
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::invalid(format!("top-p mass {mass} outside (0, 1]")));
    }
    let set = nucleus(probs, mass);
    let value = if renormalize {
        let total: f64 = set.iter().map(|&i| probs[i]).sum();
        let renorm: Vec<f64> = set.iter().map(|&i| probs[i] / total).collect();
        entropy_unchecked(&renorm)
    } else {
        -set.iter().map(|&i| plogp(probs[i])).sum::<f64>()
    };
    Ok((value, set))
}

/// Top-P entropy and its gradient w.r.t. the logits, holding the nucleus
/// fixed. Away from nucleus boundaries this is the exact gradient.
fn top_p_seed(logits: &[f64], mass: f64, renormalize: bool) -> Result<(f64, Vec<f64>)> {
    check_finite(logits)?;
    let probs = softmax(logits);
    let set = nucleus(&probs, mass);
    let mut grad = vec![0.0; logits.len()];
    if renormalize {
        // The renormalized nucleus is exactly softmax over the nucleus logits.
        let sub: Vec<f64> = set.iter().map(|&i| logits[i]).collect();
        let (h, g) = entropy_grad_from_probs(&softmax(&sub));
        for (k, &i) in set.iter().enumerate() {
            grad[i] = g[k];
        }
        Ok((h, grad))
    } else {
        let value = -set.iter().map(|&i| plogp(probs[i])).sum::<f64>();
        // ∂/∂z_j of −Σ_{i∈N} p_i log p_i, with ∂p_i/∂z_j = p_i(δ_ij − p_j).
        let a: f64 = set
            .iter()
            .map(|&i| {
                let p = probs[i];
                if p < TINY_PROB {
                    0.0
                } else {
                    p * (p.ln() + 1.0)
                }
            })
            .sum();
        for (j, g) in grad.iter_mut().enumerate() {
            *g = probs[j] * a;
        }
        for &i in &set {
            let p = probs[i];
            if p >= TINY_PROB {
                grad[i] -= p * (p.ln() + 1.0);
            }
        }
        Ok((value, grad))
    }
}

/// `log max_k softmax(z)` and its gradient `e_k − p` (ties: lowest index).
pub fn max_prob_objective(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_finite(logits)?;
    let k = argmax(logits);
    let max = logits[k];
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let value = logits[k] - lse;
    let mut grad: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    grad[k] += 1.0;
    Ok((value, grad))
}

/// Objective value and its gradient w.r.t. the logits, dispatched on the
/// configured kind. This is the seed of backpropagation into the model.
pub fn objective_seed(config: &ObjectiveConfig, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    config.validate()?;
    match config.kind {
        ObjectiveKind::Entropy => {
            check_finite(logits)?;
            Ok(entropy_grad_from_probs(&softmax(logits)))
        }
        ObjectiveKind::TopPEntropy { mass, renormalize } => top_p_seed(logits, mass, renormalize),
        ObjectiveKind::MaxProb => max_prob_objective(logits),
    }
}

/// Objective value only, computed straight from the definition. Used as the
/// function side of finite-difference checks.
pub fn objective_value(config: &ObjectiveConfig, logits: &[f64]) -> Result<f64> {
    config.validate()?;
    check_finite(logits)?;
    let probs = softmax(logits);
    match config.kind {
        ObjectiveKind::Entropy => Ok(entropy_unchecked(&probs)),
        ObjectiveKind::TopPEntropy { mass, renormalize } => {
            Ok(top_p_entropy_with(&probs, mass, renormalize)?.0)
        }
        ObjectiveKind::MaxProb => Ok(probs[argmax(&probs)].ln()),
    }
}
