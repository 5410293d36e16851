//! Knowledge preservation between the two training phases.
//!
//! Two mechanisms, for two data-access regimes:
//!
//! - parameter anchoring ("dakp"): freeze a copy of the first-phase
//!   parameters and penalize squared drift from it, for when old data
//!   cannot be revisited;
//! - replay with distillation ("ddkp"): keep a small fixed-size memory of
//!   first-phase utterances, label them once with the first-phase model's
//!   soft output over seen intents, and distill against those labels while
//!   training on the joint data.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::prototypes::{PrototypeStore, Stage, PROTO_PREFIX};
use crate::rng::Rng;
use crate::tensor::{cosine_sim, softmax, ModelParams, Tensor};
use crate::text::{Utterance, Vocab};

/// Frozen copies of the first-phase parameters: encoder weights, projection,
/// and seen prototypes. Novel prototypes are never covered, and neither are
/// embedding rows of tokens that never occurred in the first-phase data:
/// those rows are still at their random initialization, so they carry no
/// knowledge to preserve, and anchoring them would only block novel intents
/// from learning their own vocabulary.
#[derive(Debug, Clone)]
pub struct ParameterSnapshot {
    entries: Vec<(String, Tensor)>,
    /// Embedding rows excluded from the drift penalty (sorted, deduplicated).
    free_embed_rows: Vec<usize>,
}

/// Deep copy of every trainable tensor in the penalized set. Later mutation
/// of the live model does not touch the snapshot. `phase1_data` determines
/// which embedding rows count as adapted; rows of tokens absent from it are
/// left out of the penalty.
pub fn take_snapshot(model: &Model, phase1_data: &[Utterance]) -> Result<ParameterSnapshot> {
    let mut entries: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for e in model.store.entries() {
        if e.stage == Stage::Seen {
            entries.push((e.param.name.clone(), e.param.value.clone()));
        }
    }

    let mut adapted = vec![false; model.vocab.len()];
    for u in phase1_data {
        for id in crate::text::encode_tokens(&u.text, &model.vocab)? {
            adapted[id] = true;
        }
    }
    let free_embed_rows: Vec<usize> = (0..model.vocab.len()).filter(|&i| !adapted[i]).collect();
    Ok(ParameterSnapshot {
        entries,
        free_embed_rows,
    })
}

impl ParameterSnapshot {
    pub fn from_entries(entries: Vec<(String, Tensor)>, free_embed_rows: Vec<usize>) -> Self {
        ParameterSnapshot {
            entries,
            free_embed_rows,
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn free_embed_rows(&self) -> &[usize] {
        &self.free_embed_rows
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Penalty reference for one covered parameter. For the embedding table
    /// the uncovered rows are replaced by the live values, which zeroes both
    /// their contribution and their gradient; everything else is the frozen
    /// tensor as stored.
    pub fn penalty_reference(&self, name: &str, frozen: &Tensor, live: &Tensor) -> Result<Tensor> {
        if live.dims() != frozen.dims() {
            return Err(Error::dims(name.to_string(), frozen.dims(), live.dims()));
        }
        if name != crate::text::PARAM_EMBED || self.free_embed_rows.is_empty() {
            return Ok(frozen.clone());
        }
        let cols = frozen.dims()[1];
        let mut reference = frozen.clone();
        for &row in &self.free_embed_rows {
            let span = row * cols..(row + 1) * cols;
            reference.data_mut()[span.clone()].copy_from_slice(&live.data()[span]);
        }
        Ok(reference)
    }

    /// Live drift from the snapshot: the sum over covered parameters of the
    /// squared elementwise difference. Novel prototypes and unadapted
    /// embedding rows contribute nothing.
    pub fn l2_drift(&self, model: &Model) -> Result<f64> {
        let mut total = 0.0;
        for (name, frozen) in &self.entries {
            let live = match name.strip_prefix(PROTO_PREFIX) {
                Some(intent) => {
                    let idx = model
                        .store
                        .index_of(intent)
                        .ok_or_else(|| Error::UnknownParam(name.clone()))?;
                    model.store.vector(idx)
                }
                None => &model.params.get(name)?.value,
            };
            let reference = self.penalty_reference(name, frozen, live)?;
            total += live
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    /// Rebuild a frozen model from the snapshot, for soft-label generation.
    pub fn materialize(&self, cfg: ModelConfig, vocab: Vocab) -> Result<Model> {
        let mut params = ModelParams::new();
        let mut protos = Vec::new();
        for (name, tensor) in &self.entries {
            match name.strip_prefix(PROTO_PREFIX) {
                Some(intent) => protos.push((intent.to_string(), Stage::Seen, tensor.clone())),
                None => params.insert(name.clone(), tensor.clone())?,
            }
        }
        Ok(Model {
            cfg,
            vocab,
            params,
            store: PrototypeStore::from_parts(protos)?,
        })
    }
}

/// Fixed-size store of first-phase utterances with optional frozen soft
/// labels over the seen intents.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    pub capacity: usize,
    items: Vec<Utterance>,
    soft_labels: Option<Vec<Tensor>>,
}

impl ReplayMemory {
    pub fn from_parts(
        capacity: usize,
        items: Vec<Utterance>,
        soft_labels: Option<Vec<Tensor>>,
    ) -> Result<Self> {
        if items.len() > capacity {
            return Err(Error::InvalidConfig(format!(
                "{} stored items exceed capacity {capacity}",
                items.len()
            )));
        }
        if let Some(labels) = &soft_labels {
            if labels.len() != items.len() {
                return Err(Error::dims("soft labels", &[items.len()], &[labels.len()]));
            }
        }
        Ok(ReplayMemory {
            capacity,
            items,
            soft_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Utterance] {
        &self.items
    }

    pub fn soft_labels(&self) -> Option<&[Tensor]> {
        self.soft_labels.as_deref()
    }

    pub fn has_soft_labels(&self) -> bool {
        self.soft_labels.is_some()
    }
}

/// Class-stratified sampling of first-phase data into a replay memory.
///
/// Capacity is `max(1, floor(ratio * n))`. Each intent contributes a quota of
/// `max(1, floor(ratio * count))` items drawn without replacement; the pooled
/// selection is then truncated uniformly at random if the quotas overshoot
/// the capacity, or topped up uniformly from the unselected remainder if
/// they undershoot, so the memory always holds exactly `capacity` items.
pub fn build_memory(seen_data: &[Utterance], ratio: f64, rng: &mut Rng) -> Result<ReplayMemory> {
    if seen_data.is_empty() {
        return Err(Error::Empty("seen data for replay memory".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "memory ratio must be in (0, 1], got {ratio}"
        )));
    }
    let capacity = ((ratio * seen_data.len() as f64).floor() as usize).max(1);

    // intents in first-appearance order
    let mut intents: Vec<&str> = Vec::new();
    for u in seen_data {
        if !intents.contains(&u.label.as_str()) {
            intents.push(&u.label);
        }
    }

    let mut chosen: Vec<usize> = Vec::new();
    for intent in &intents {
        let members: Vec<usize> = seen_data
            .iter()
            .enumerate()
            .filter(|(_, u)| u.label == *intent)
            .map(|(i, _)| i)
            .collect();
        let quota = ((ratio * members.len() as f64).floor() as usize).max(1);
        for pick in rng.sample_indices(members.len(), quota.min(members.len())) {
            chosen.push(members[pick]);
        }
    }

    if chosen.len() > capacity {
        let keep = rng.sample_indices(chosen.len(), capacity);
        chosen = keep.into_iter().map(|i| chosen[i]).collect();
    } else if chosen.len() < capacity {
        let rest: Vec<usize> = (0..seen_data.len())
            .filter(|i| !chosen.contains(i))
            .collect();
        let extra = rng.sample_indices(rest.len(), capacity - chosen.len());
        chosen.extend(extra.into_iter().map(|i| rest[i]));
    }
    chosen.sort_unstable();

    let items = chosen.iter().map(|&i| seen_data[i].clone()).collect();
    ReplayMemory::from_parts(capacity, items, None)
}

/// Soft label for one projected vector: softmax over its cosine similarities
/// to the seen prototypes, temperature-scaled.
pub fn soft_label(v: &Tensor, seen_protos: &[&Tensor], tau_kd: f64) -> Result<Tensor> {
    if seen_protos.is_empty() {
        return Err(Error::Empty("seen prototypes".into()));
    }
    if tau_kd <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tau_kd must be positive, got {tau_kd}"
        )));
    }
    let mut logits = Vec::with_capacity(seen_protos.len());
    for c in seen_protos {
        logits.push(cosine_sim(v, c)? / tau_kd);
    }
    Ok(softmax(&Tensor::vector(&logits)))
}

/// Label every stored utterance with the snapshot model's output over the
/// seen intents. Computed once; the labels never change during the second
/// phase.
pub fn compute_soft_labels(
    memory: &mut ReplayMemory,
    snapshot: &ParameterSnapshot,
    cfg: ModelConfig,
    vocab: &Vocab,
    tau_kd: f64,
) -> Result<()> {
    let frozen = snapshot.materialize(cfg, vocab.clone())?;
    let protos: Vec<&Tensor> = (0..frozen.store.len())
        .map(|i| frozen.store.vector(i))
        .collect();
    let mut labels = Vec::with_capacity(memory.len());
    for item in memory.items() {
        let v = frozen.project_text(&item.text)?;
        labels.push(soft_label(&v, &protos, tau_kd)?);
    }
    memory.soft_labels = Some(labels);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utterances(spec: &[(&str, usize)]) -> Vec<Utterance> {
        let mut out = Vec::new();
        for (label, count) in spec {
            for i in 0..*count {
                out.push(Utterance::new(format!("{label} sample {i}"), *label).unwrap());
            }
        }
        out
    }

    fn tiny_world(seed: u64) -> (Model, Vec<Utterance>) {
        let data = utterances(&[("alpha", 3), ("beta", 3)]);
        let vocab = Vocab::build(data.iter().map(|u| u.text.as_str())).unwrap();
        let mut rng = Rng::new(seed);
        let model = Model::init(
            vocab,
            ModelConfig::default(),
            &["alpha".to_string(), "beta".to_string()],
            &mut rng,
        )
        .unwrap();
        (model, data)
    }

    #[test]
    fn snapshot_drift_starts_at_zero_and_tracks_mutation() {
        let (mut model, data) = tiny_world(3);
        let snap = take_snapshot(&model, &data).unwrap();
        assert_eq!(snap.l2_drift(&model).unwrap(), 0.0);

        model
            .params
            .get_mut(crate::text::PARAM_B1)
            .unwrap()
            .value
            .data_mut()[0] += 0.25;
        let drift = snap.l2_drift(&model).unwrap();
        assert!((drift - 0.0625).abs() < 1e-15, "{drift}");
    }

    #[test]
    fn snapshot_leaves_unadapted_embedding_rows_free() {
        let (mut model, data) = tiny_world(8);
        // phase-1 data covers only the first utterance's tokens; everything
        // else in the vocab counts as unadapted
        let snap = take_snapshot(&model, &data[..1]).unwrap();
        assert!(!snap.free_embed_rows().is_empty());

        // drift in a free row is invisible to the penalty
        let free_row = snap.free_embed_rows()[0];
        let cols = model.cfg.encoder.embedding_dim;
        model
            .params
            .get_mut(crate::text::PARAM_EMBED)
            .unwrap()
            .value
            .data_mut()[free_row * cols] += 5.0;
        assert_eq!(snap.l2_drift(&model).unwrap(), 0.0);

        // drift in an adapted row is not
        let covered = (0..model.vocab.len())
            .find(|r| !snap.free_embed_rows().contains(r))
            .unwrap();
        model
            .params
            .get_mut(crate::text::PARAM_EMBED)
            .unwrap()
            .value
            .data_mut()[covered * cols] += 0.5;
        assert!((snap.l2_drift(&model).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn snapshot_excludes_later_novel_prototypes() {
        let (mut model, data) = tiny_world(4);
        let snap = take_snapshot(&model, &data).unwrap();
        let covered = snap.entries().len();
        model
            .store
            .init_novel(&[("newbie".into(), vec![Tensor::vector(&[1.0; 32])])])
            .unwrap();
        // same coverage, drift still computes, novel prototype ignored
        assert_eq!(snap.entries().len(), covered);
        assert_eq!(snap.l2_drift(&model).unwrap(), 0.0);
    }

    #[test]
    fn memory_capacity_arithmetic() {
        let data = utterances(&[("a", 50), ("b", 50)]);
        let mem = build_memory(&data, 0.1, &mut Rng::new(0)).unwrap();
        assert_eq!(mem.capacity, 10);
        assert_eq!(mem.len(), 10);

        let all = build_memory(&data, 1.0, &mut Rng::new(0)).unwrap();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn memory_is_stratified_and_deterministic() {
        let data = utterances(&[("a", 40), ("b", 40), ("c", 20)]);
        let mem1 = build_memory(&data, 0.1, &mut Rng::new(7)).unwrap();
        let mem2 = build_memory(&data, 0.1, &mut Rng::new(7)).unwrap();
        assert_eq!(mem1.items(), mem2.items());
        for label in ["a", "b", "c"] {
            assert!(
                mem1.items().iter().any(|u| u.label == label),
                "{label} missing from memory"
            );
        }
    }

    #[test]
    fn memory_tops_up_to_exact_capacity() {
        // quotas: floor(0.1*15) = 1 per intent = 2 total, capacity floor(3) = 3
        let data = utterances(&[("a", 15), ("b", 15)]);
        let mem = build_memory(&data, 0.1, &mut Rng::new(1)).unwrap();
        assert_eq!(mem.capacity, 3);
        assert_eq!(mem.len(), 3);
    }

    #[test]
    fn memory_rejects_bad_ratio() {
        let data = utterances(&[("a", 5)]);
        assert!(build_memory(&data, 0.0, &mut Rng::new(0)).is_err());
        assert!(build_memory(&data, 1.5, &mut Rng::new(0)).is_err());
        assert!(build_memory(&[], 0.5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn soft_label_hand_example_and_single_intent() {
        // v equals the first prototype, orthogonal to the second, tau 1:
        // softmax(1, 0) = (e/(e+1), 1/(e+1))
        let v = Tensor::vector(&[1.0, 0.0]);
        let p0 = Tensor::vector(&[2.0, 0.0]);
        let p1 = Tensor::vector(&[0.0, 0.5]);
        let label = soft_label(&v, &[&p0, &p1], 1.0).unwrap();
        let e = 1.0f64.exp();
        assert!((label.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((label.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        let only = soft_label(&v, &[&p0], 1.0).unwrap();
        assert_eq!(only.data(), &[1.0]);
    }

    #[test]
    fn computed_soft_labels_sum_to_one_and_are_deterministic() {
        let (model, seed_data) = tiny_world(11);
        let snap = take_snapshot(&model, &seed_data).unwrap();
        let data = utterances(&[("alpha", 10), ("beta", 10)]);
        let run = || {
            let mut mem = build_memory(&data, 0.3, &mut Rng::new(5)).unwrap();
            compute_soft_labels(&mut mem, &snap, model.cfg, &model.vocab, 1.0).unwrap();
            mem
        };
        let mem = run();
        for label in mem.soft_labels().unwrap() {
            assert_eq!(label.len(), 2);
            assert!((label.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let again = run();
        for (a, b) in mem
            .soft_labels()
            .unwrap()
            .iter()
            .zip(again.soft_labels().unwrap())
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn materialized_snapshot_matches_live_model_before_training() {
        let (model, data) = tiny_world(13);
        let snap = take_snapshot(&model, &data).unwrap();
        let frozen = snap.materialize(model.cfg, model.vocab.clone()).unwrap();
        let text = "alpha sample 0";
        assert_eq!(
            model.project_text(text).unwrap(),
            frozen.project_text(text).unwrap()
        );
    }
}
