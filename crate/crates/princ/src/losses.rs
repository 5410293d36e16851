//! Training objectives: prototype classification loss, instance-instance and
//! instance-prototype contrastive losses, the parameter anchor penalty, and
//! the distillation loss used with replay.
//!
//! Every loss is built on a [`Tape`], so its gradients with respect to all
//! participating leaves (projected vectors, prototypes, and anything
//! upstream of them) flow on `backward`. All of them are nonnegative and
//! finite on valid inputs, and all are checked against central finite
//! differences in `gradcheck`.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projected vectors with their target prototype indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub vectors: Vec<NodeId>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(vectors: Vec<NodeId>, labels: Vec<usize>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        if vectors.len() != labels.len() {
            return Err(Error::dims("batch labels", &[vectors.len()], &[labels.len()]));
        }
        Ok(Batch { vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// A scalar objective. The node keeps the loss attached to its tape so
/// gradient contributions reach every parameter leaf on backward.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub value: f64,
    pub node: NodeId,
}

fn finish(tape: &Tape, node: NodeId, what: &str) -> Result<LossValue> {
    let value = tape.scalar_value(node);
    if !value.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(LossValue { value, node })
}

fn check_labels(batch: &Batch, class_count: usize) -> Result<()> {
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::Infeasible(format!(
            "label {bad} out of range for {class_count} prototypes"
        )));
    }
    Ok(())
}

/// Mean temperature-scaled cross entropy of each instance against all
/// prototypes, with cosine similarities as logits.
pub fn loss_cls(tape: &mut Tape, batch: &Batch, protos: &[NodeId], tau: f64) -> Result<LossValue> {
    if protos.is_empty() {
        return Err(Error::Empty("prototype list".into()));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    check_labels(batch, protos.len())?;

    let mut per_instance = Vec::with_capacity(batch.len());
    for (&v, &y) in batch.vectors.iter().zip(&batch.labels) {
        let sims: Vec<NodeId> = protos
            .iter()
            .map(|&c| tape.cosine(v, c))
            .collect::<Result<_>>()?;
        let stacked = tape.stack(&sims)?;
        let logits = tape.scale(stacked, 1.0 / tau);
        let log_probs = tape.log_softmax(logits);
        let gold = tape.pick(log_probs, y)?;
        per_instance.push(tape.scale(gold, -1.0));
    }
    let total = tape.sum(&per_instance)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    finish(tape, mean, "loss_cls")
}

/// Contrastive loss over ordered same-label pairs: each anchor's positives
/// must outscore the rest of the batch. Batches with no positive pair
/// contribute zero.
pub fn loss_ii(tape: &mut Tape, batch: &Batch) -> Result<LossValue> {
    let t = batch.len();
    if t < 2 {
        return Err(Error::InvalidConfig(format!(
            "instance-instance loss needs at least 2 instances, got {t}"
        )));
    }

    let mut pair_terms = Vec::new();
    for i in 0..t {
        let positives: Vec<usize> = (0..t)
            .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        // similarities of anchor i to every other instance, cached per anchor
        let mut sim_to = vec![None; t];
        let mut others = Vec::with_capacity(t - 1);
        for k in (0..t).filter(|&k| k != i) {
            let s = tape.cosine(batch.vectors[i], batch.vectors[k])?;
            sim_to[k] = Some(s);
            others.push(s);
        }
        let stacked = tape.stack(&others)?;
        let lse = tape.log_sum_exp(stacked);
        for j in positives {
            let sim = sim_to[j].expect("positive is another instance");
            pair_terms.push(tape.sub(lse, sim)?);
        }
    }

    if pair_terms.is_empty() {
        let zero = tape.constant_scalar(0.0);
        return finish(tape, zero, "loss_ii");
    }
    let count = pair_terms.len() as f64;
    let total = tape.sum(&pair_terms)?;
    let mean = tape.scale(total, 1.0 / count);
    finish(tape, mean, "loss_ii")
}

/// Instance-to-prototype contrastive loss: softmax over prototype
/// similarities at the gold prototype, averaged over instances and scaled by
/// the prototype count.
pub fn loss_is(tape: &mut Tape, batch: &Batch, protos: &[NodeId]) -> Result<LossValue> {
    if protos.is_empty() {
        return Err(Error::Empty("prototype list".into()));
    }
    check_labels(batch, protos.len())?;

    let mut per_instance = Vec::with_capacity(batch.len());
    for (&v, &y) in batch.vectors.iter().zip(&batch.labels) {
        let sims: Vec<NodeId> = protos
            .iter()
            .map(|&c| tape.cosine(v, c))
            .collect::<Result<_>>()?;
        let stacked = tape.stack(&sims)?;
        let log_probs = tape.log_softmax(stacked);
        let gold = tape.pick(log_probs, y)?;
        per_instance.push(tape.scale(gold, -1.0));
    }
    let total = tape.sum(&per_instance)?;
    let scale = 1.0 / (protos.len() as f64 * batch.len() as f64);
    let loss = tape.scale(total, scale);
    finish(tape, loss, "loss_is")
}

/// Sum of squared differences between live parameters and their frozen
/// reference copies. Pairs are (live leaf, frozen tensor); shape mismatches
/// are rejected.
pub fn loss_l2_penalty(tape: &mut Tape, pairs: &[(NodeId, &Tensor)]) -> Result<LossValue> {
    if pairs.is_empty() {
        return Err(Error::Empty("penalized parameter set".into()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(node, reference) in pairs {
        terms.push(tape.sq_diff(node, reference)?);
    }
    let total = tape.sum(&terms)?;
    finish(tape, total, "loss_l2_penalty")
}

/// Distillation loss against a frozen soft-label distribution:
/// `-(1/N) sum_i p_i log softmax(q/tau)_i` over the N seen intents.
pub fn loss_kd(
    tape: &mut Tape,
    q_logits: &[NodeId],
    p_soft: &Tensor,
    tau_kd: f64,
) -> Result<LossValue> {
    let n = q_logits.len();
    if n == 0 {
        return Err(Error::Empty("distillation logits".into()));
    }
    if p_soft.dims() != [n] {
        return Err(Error::dims("soft labels", &[n], p_soft.dims()));
    }
    if tau_kd <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tau_kd must be positive, got {tau_kd}"
        )));
    }
    let sum: f64 = p_soft.data().iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p_soft.data().iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "soft labels must form a distribution (sum {sum})"
        )));
    }
    let stacked = tape.stack(q_logits)?;
    let logits = tape.scale(stacked, 1.0 / tau_kd);
    let log_q = tape.log_softmax(logits);
    let dot = tape.weighted_sum(log_q, p_soft)?;
    let loss = tape.scale(dot, -1.0 / n as f64);
    finish(tape, loss, "loss_kd")
}

/// Lower bound of [`loss_kd`] for a fixed target: the target's own entropy
/// under the same 1/N normalization (Gibbs' inequality).
pub fn kd_entropy_floor(p_soft: &Tensor) -> f64 {
    let n = p_soft.len() as f64;
    -p_soft
        .data()
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
        / n
}
