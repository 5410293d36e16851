//! Joint seen/novel splits and both evaluation protocols: one full pass
//! over the joint test set against the trained prototype store, and
//! repeated sampled few-shot tasks scored against episode-local prototypes.
//! Also the preservation diagnostics that compare seen-block retention
//! across preservation modes.

use std::fmt;

use serde::Serialize;

use crate::digest::Fnv;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prototypes::{classify, PrototypeStore, Stage, PARAM_PROJECTION};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{DeskEncoder, Encoder, Utterance};
use crate::training::Preservation;

/// Index-based train/test partition over one labeled dataset: per-seen-intent
/// 80/20 train/test pools, pre-selected novel supports (exactly `k` each),
/// and the remaining novel instances as test data. Indices point into the
/// dataset the split was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSplit {
    pub seen_intents: Vec<String>,
    pub novel_intents: Vec<String>,
    pub seen_train: Vec<usize>,
    pub seen_test: Vec<usize>,
    pub novel_supports: Vec<(String, Vec<usize>)>,
    pub novel_test: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl JointSplit {
    /// Digest of every pool, for detecting mismatched reports.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.update_u64(self.seed);
        h.update_u64(self.k as u64);
        for name in self.seen_intents.iter().chain(&self.novel_intents) {
            h.update(name.as_bytes());
        }
        for pool in [&self.seen_train, &self.seen_test, &self.novel_test] {
            h.update_u64(pool.len() as u64);
            for &i in pool.iter() {
                h.update_u64(i as u64);
            }
        }
        for (name, picks) in &self.novel_supports {
            h.update(name.as_bytes());
            for &i in picks {
                h.update_u64(i as u64);
            }
        }
        h.finish()
    }

    pub fn seen_train_data(&self, data: &[Utterance]) -> Vec<Utterance> {
        self.seen_train.iter().map(|&i| data[i].clone()).collect()
    }

    /// Few-shot joint support set for phase 2: `k` utterances per seen
    /// intent drawn from the seen train pool, plus the pre-selected novel
    /// supports.
    pub fn sample_joint_support(&self, data: &[Utterance], rng: &mut Rng) -> Result<Vec<Utterance>> {
        let mut out = Vec::new();
        for intent in &self.seen_intents {
            let members: Vec<usize> = self
                .seen_train
                .iter()
                .copied()
                .filter(|&i| data[i].label == *intent)
                .collect();
            if members.len() < self.k {
                return Err(Error::Infeasible(format!(
                    "seen intent {intent:?} has only {} training instances, need {}",
                    members.len(),
                    self.k
                )));
            }
            for pick in rng.sample_indices(members.len(), self.k) {
                out.push(data[members[pick]].clone());
            }
        }
        for (_, picks) in &self.novel_supports {
            out.extend(picks.iter().map(|&i| data[i].clone()));
        }
        Ok(out)
    }
}

/// Build a joint split: uniform per-seen-intent 80/20 train/test partition
/// (test size `max(1, floor(0.2 n))`), `k` supports per novel intent drawn
/// without replacement, everything else novel test data.
pub fn make_split(
    data: &[Utterance],
    seen: &[String],
    novel: &[String],
    k: usize,
    rng: &mut Rng,
) -> Result<JointSplit> {
    if data.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if let Some(dup) = seen.iter().find(|s| novel.contains(s)) {
        return Err(Error::InvalidConfig(format!(
            "intent {dup:?} is listed as both seen and novel"
        )));
    }
    for u in data {
        if !seen.contains(&u.label) && !novel.contains(&u.label) {
            return Err(Error::InvalidConfig(format!(
                "label {:?} is neither seen nor novel",
                u.label
            )));
        }
    }

    let members_of = |intent: &String| -> Vec<usize> {
        data.iter()
            .enumerate()
            .filter(|(_, u)| &u.label == intent)
            .map(|(i, _)| i)
            .collect()
    };

    let mut seen_train = Vec::new();
    let mut seen_test = Vec::new();
    for intent in seen {
        let mut members = members_of(intent);
        if members.is_empty() {
            return Err(Error::Empty(format!("seen intent {intent:?} has no data")));
        }
        rng.shuffle(&mut members);
        let test_n = ((members.len() as f64 * 0.2).floor() as usize).max(1);
        let (test, train) = members.split_at(test_n);
        seen_test.extend_from_slice(test);
        seen_train.extend_from_slice(train);
    }
    seen_train.sort_unstable();
    seen_test.sort_unstable();

    let mut novel_supports = Vec::new();
    let mut novel_test = Vec::new();
    for intent in novel {
        let mut members = members_of(intent);
        if members.len() <= k {
            return Err(Error::Infeasible(format!(
                "novel intent {intent:?} has {} instances, need more than {k}",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let (support, test) = members.split_at(k);
        let mut support = support.to_vec();
        support.sort_unstable();
        novel_supports.push((intent.clone(), support));
        novel_test.extend_from_slice(test);
    }
    novel_test.sort_unstable();

    Ok(JointSplit {
        seen_intents: seen.to_vec(),
        novel_intents: novel.to_vec(),
        seen_train,
        seen_test,
        novel_supports,
        novel_test,
        k,
        seed: rng.seed(),
    })
}

/// Episodic protocol: `episodes` sampled `ways`-way `shots`-shot tasks with
/// a fixed number of queries per class, scored against episode-local
/// prototypes built from the sampled supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    /// Restrict sampled classes to novel intents.
    pub novel_only: bool,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize) -> Self {
        EpisodeSpec {
            ways,
            shots,
            queries_per_class: 5,
            episodes: 1000,
            novel_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::InvalidConfig("need at least 2 ways".into()));
        }
        if self.shots < 1 || self.queries_per_class < 1 || self.episodes < 1 {
            return Err(Error::InvalidConfig(
                "shots, queries and episodes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntentAccuracy {
    pub intent: String,
    pub stage: Stage,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Sparse confusion count: how often `gold` was predicted as `predicted`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionCell {
    pub gold: String,
    pub predicted: String,
    pub count: usize,
}

/// Accuracy summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub split_fingerprint: u64,
    pub total_queries: usize,
    pub overall_accuracy: f64,
    pub seen_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub per_intent: Vec<IntentAccuracy>,
    pub confusion: Vec<ConfusionCell>,
    pub episodes: Option<usize>,
    pub episode_accuracy_mean: Option<f64>,
    pub episode_accuracy_std: Option<f64>,
}

impl EvalReport {
    /// Render the human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let push = |out: &mut String, line: &str| {
            out.push_str(line);
            out.push('\n');
        };
        push(&mut out, &format!("mode: {}", self.mode));
        push(
            &mut out,
            &format!(
                "overall accuracy: {:.4} ({} queries)",
                self.overall_accuracy, self.total_queries
            ),
        );
        if let (Some(seen), Some(novel)) = (self.seen_accuracy, self.novel_accuracy) {
            push(
                &mut out,
                &format!("seen block: {seen:.4}   novel block: {novel:.4}"),
            );
        }
        if let (Some(mean), Some(std)) = (self.episode_accuracy_mean, self.episode_accuracy_std) {
            push(
                &mut out,
                &format!(
                    "episodes: {}  accuracy {mean:.4} +- {std:.4}",
                    self.episodes.unwrap_or(0)
                ),
            );
        }
        push(&mut out, &format!("{:<24} {:>8} {:>8} {:>10}", "intent", "correct", "total", "accuracy"));
        for row in &self.per_intent {
            push(
                &mut out,
                &format!(
                    "{:<24} {:>8} {:>8} {:>10.4}",
                    row.intent, row.correct, row.total, row.accuracy
                ),
            );
        }
        out
    }
}

/// A frozen classifier: an encoder, a projection matrix, and the prototype
/// store to score against. Any [`Encoder`] implementation plugs in here.
pub struct FrozenView<'a, E: Encoder> {
    pub encoder: E,
    pub projection: &'a Tensor,
    pub store: &'a PrototypeStore,
}

impl<'a, E: Encoder> FrozenView<'a, E> {
    pub fn project(&self, index: usize, utterance: &Utterance) -> Result<Tensor> {
        let hidden = self.encoder.encode_utterance(index, utterance)?;
        crate::prototypes::project(self.projection, &hidden)
    }
}

impl Model {
    /// Frozen view over this model's own encoder, projection and store.
    pub fn frozen_view(&self) -> Result<FrozenView<'_, DeskEncoder<'_>>> {
        Ok(FrozenView {
            encoder: self.encoder(),
            projection: &self.params.get(PARAM_PROJECTION)?.value,
            store: &self.store,
        })
    }
}

struct Tally {
    records: Vec<(String, String)>,
}

impl Tally {
    fn new() -> Self {
        Tally {
            records: Vec::new(),
        }
    }

    fn push(&mut self, gold: &str, predicted: &str) {
        self.records.push((gold.to_string(), predicted.to_string()));
    }

    fn report(
        &self,
        mode: &str,
        split: &JointSplit,
        episodes: Option<(usize, f64, f64)>,
    ) -> EvalReport {
        let stage_of = |intent: &str| {
            if split.novel_intents.iter().any(|n| n == intent) {
                Stage::Novel
            } else {
                Stage::Seen
            }
        };

        let mut intents: Vec<String> = Vec::new();
        for (gold, _) in &self.records {
            if !intents.contains(gold) {
                intents.push(gold.clone());
            }
        }
        let mut per_intent = Vec::new();
        let mut confusion: Vec<ConfusionCell> = Vec::new();
        let (mut seen_correct, mut seen_total) = (0usize, 0usize);
        let (mut novel_correct, mut novel_total) = (0usize, 0usize);
        let mut correct_all = 0usize;

        for intent in &intents {
            let mut correct = 0;
            let mut total = 0;
            for (gold, predicted) in &self.records {
                if gold != intent {
                    continue;
                }
                total += 1;
                if gold == predicted {
                    correct += 1;
                }
                match confusion
                    .iter_mut()
                    .find(|c| &c.gold == gold && &c.predicted == predicted)
                {
                    Some(cell) => cell.count += 1,
                    None => confusion.push(ConfusionCell {
                        gold: gold.clone(),
                        predicted: predicted.clone(),
                        count: 1,
                    }),
                }
            }
            correct_all += correct;
            match stage_of(intent) {
                Stage::Seen => {
                    seen_correct += correct;
                    seen_total += total;
                }
                Stage::Novel => {
                    novel_correct += correct;
                    novel_total += total;
                }
            }
            per_intent.push(IntentAccuracy {
                intent: intent.clone(),
                stage: stage_of(intent),
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            });
        }

        let total_queries = self.records.len();
        EvalReport {
            mode: mode.to_string(),
            split_fingerprint: split.fingerprint(),
            total_queries,
            overall_accuracy: correct_all as f64 / total_queries as f64,
            seen_accuracy: (seen_total > 0).then(|| seen_correct as f64 / seen_total as f64),
            novel_accuracy: (novel_total > 0).then(|| novel_correct as f64 / novel_total as f64),
            per_intent,
            confusion,
            episodes: episodes.map(|(n, _, _)| n),
            episode_accuracy_mean: episodes.map(|(_, m, _)| m),
            episode_accuracy_std: episodes.map(|(_, _, s)| s),
        }
    }
}

/// One pass over the full joint test pool (seen test plus novel test),
/// classified against the trained global prototype store.
pub fn eval_nonepisodic<E: Encoder>(
    view: &FrozenView<'_, E>,
    data: &[Utterance],
    split: &JointSplit,
) -> Result<EvalReport> {
    if view.store.novel_count() == 0 {
        return Err(Error::InvalidConfig(
            "non-episodic evaluation expects a store with novel prototypes (run phase 2)".into(),
        ));
    }
    let test_pool: Vec<usize> = split
        .seen_test
        .iter()
        .chain(&split.novel_test)
        .copied()
        .collect();
    if test_pool.is_empty() {
        return Err(Error::Empty("joint test pool".into()));
    }
    let mut tally = Tally::new();
    for &i in &test_pool {
        let u = &data[i];
        let v = view.project(i, u)?;
        let (winner, _) = classify(&v, view.store)?;
        tally.push(&u.label, view.store.intent(winner));
    }
    Ok(tally.report("noneps", split, None))
}

/// Sampled few-shot tasks: per episode, draw `ways` intents and
/// support/query instances from the test-side pools, build episode-local
/// prototypes from the projected supports, and score the queries against
/// those prototypes only. Episode `i` draws from an independent stream
/// derived from the evaluation seed, so results never depend on scheduling.
pub fn eval_episodic<E: Encoder>(
    view: &FrozenView<'_, E>,
    data: &[Utterance],
    split: &JointSplit,
    spec: &EpisodeSpec,
    rng: &Rng,
) -> Result<EvalReport> {
    spec.validate()?;

    // per-intent evaluation pools from the test side of the split
    let mut pools: Vec<(String, Stage, Vec<usize>)> = Vec::new();
    if !spec.novel_only {
        for intent in &split.seen_intents {
            let members: Vec<usize> = split
                .seen_test
                .iter()
                .copied()
                .filter(|&i| data[i].label == *intent)
                .collect();
            pools.push((intent.clone(), Stage::Seen, members));
        }
    }
    for intent in &split.novel_intents {
        let members: Vec<usize> = split
            .novel_test
            .iter()
            .copied()
            .filter(|&i| data[i].label == *intent)
            .collect();
        pools.push((intent.clone(), Stage::Novel, members));
    }

    let needed = spec.shots + spec.queries_per_class;
    let eligible: Vec<usize> = (0..pools.len())
        .filter(|&i| pools[i].2.len() >= needed)
        .collect();
    if eligible.len() < spec.ways {
        return Err(Error::Infeasible(format!(
            "{} intents have at least {needed} evaluation instances, need {} ways",
            eligible.len(),
            spec.ways
        )));
    }

    let mut tally = Tally::new();
    let mut episode_accuracies = Vec::with_capacity(spec.episodes);
    for episode in 0..spec.episodes {
        let mut ep_rng = rng.child(episode as u64);
        let class_picks = ep_rng.sample_indices(eligible.len(), spec.ways);

        let mut parts = Vec::with_capacity(spec.ways);
        let mut queries: Vec<(usize, String)> = Vec::new();
        for pick in class_picks {
            let (intent, stage, pool) = &pools[eligible[pick]];
            let draw = ep_rng.sample_indices(pool.len(), needed);
            let (support_picks, query_picks) = draw.split_at(spec.shots);

            let mut mean: Option<Tensor> = None;
            for &s in support_picks {
                let idx = pool[s];
                let v = view.project(idx, &data[idx])?;
                match &mut mean {
                    Some(m) => m.add_assign(&v),
                    None => mean = Some(v),
                }
            }
            let mut proto = mean.expect("shots >= 1");
            proto.scale_assign(1.0 / spec.shots as f64);
            parts.push((intent.clone(), *stage, proto));

            for &q in query_picks {
                queries.push((pool[q], intent.clone()));
            }
        }

        let episode_store = PrototypeStore::from_parts(
            // seen entries must precede novel ones
            {
                let mut seen: Vec<_> = parts
                    .iter()
                    .filter(|(_, s, _)| *s == Stage::Seen)
                    .cloned()
                    .collect();
                let novel: Vec<_> = parts
                    .iter()
                    .filter(|(_, s, _)| *s == Stage::Novel)
                    .cloned()
                    .collect();
                seen.extend(novel);
                seen
            },
        )?;

        let mut correct = 0;
        for (idx, gold) in &queries {
            let v = view.project(*idx, &data[*idx])?;
            let (winner, _) = classify(&v, &episode_store)?;
            let predicted = episode_store.intent(winner);
            if predicted == gold {
                correct += 1;
            }
            tally.push(gold, predicted);
        }
        episode_accuracies.push(correct as f64 / queries.len() as f64);
    }

    let n = episode_accuracies.len();
    let mean = episode_accuracies.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (episode_accuracies
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(tally.report("eps", split, Some((n, mean, std))))
}

/// Seen/novel accuracy deltas of each preservation mode against the
/// unpreserved baseline.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub mode: Preservation,
    pub seen_accuracy: f64,
    pub novel_accuracy: f64,
    pub seen_delta_vs_none: f64,
    pub novel_delta_vs_none: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreservationComparison {
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for PreservationComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>10} {:>10} {:>12} {:>12}",
            "mode", "seen", "novel", "d_seen", "d_novel"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<8} {:>10.4} {:>10.4} {:>+12.4} {:>+12.4}",
                row.mode.to_string(),
                row.seen_accuracy,
                row.novel_accuracy,
                row.seen_delta_vs_none,
                row.novel_delta_vs_none
            )?;
        }
        Ok(())
    }
}

/// Compare preservation modes evaluated on the same split. All reports must
/// carry the same split fingerprint and block accuracies, and the baseline
/// (`none`) must be present.
pub fn forgetting_diagnostics(
    reports: &[(Preservation, &EvalReport)],
) -> Result<PreservationComparison> {
    let baseline = reports
        .iter()
        .find(|(mode, _)| *mode == Preservation::None)
        .map(|(_, r)| *r)
        .ok_or_else(|| Error::InvalidConfig("diagnostics need the unpreserved baseline".into()))?;
    let expected = baseline.split_fingerprint;

    let mut rows = Vec::with_capacity(reports.len());
    for (mode, report) in reports {
        if report.split_fingerprint != expected {
            return Err(Error::InvalidConfig(format!(
                "report for mode {mode} was computed on a different split"
            )));
        }
        let (seen, novel) = match (report.seen_accuracy, report.novel_accuracy) {
            (Some(s), Some(n)) => (s, n),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "report for mode {mode} lacks block accuracies"
                )))
            }
        };
        let (base_seen, base_novel) = (
            baseline.seen_accuracy.expect("checked for baseline"),
            baseline.novel_accuracy.expect("checked for baseline"),
        );
        rows.push(ComparisonRow {
            mode: *mode,
            seen_accuracy: seen,
            novel_accuracy: novel,
            seen_delta_vs_none: seen - base_seen,
            novel_delta_vs_none: novel - base_novel,
        });
    }
    Ok(PreservationComparison { rows })
}
