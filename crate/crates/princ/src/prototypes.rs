//! Prototype space: the linear projection out of the encoder, prototype
//! storage with seen/novel staging, and cosine classification over the
//! joint store.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{cosine_sim, matvec, ModelParams, Param, Tensor, EPSILON_NORM};

/// Name of the projection matrix parameter (`[proto_dim x hidden_dim]`).
pub const PARAM_PROJECTION: &str = "projection.w";

/// Prefix for per-intent prototype parameter names.
pub const PROTO_PREFIX: &str = "prototype.";

pub fn proto_param_name(intent: &str) -> String {
    format!("{PROTO_PREFIX}{intent}")
}

/// Whether an intent was learned from abundant first-phase data or from a
/// few second-phase supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    Seen,
    Novel,
}

/// One trainable prototype vector.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub intent: String,
    pub stage: Stage,
    pub param: Param,
}

/// Ordered prototype collection; the seen block always precedes the novel
/// block, and classification runs over the union.
#[derive(Debug, Clone, Default)]
pub struct PrototypeStore {
    entries: Vec<Prototype>,
}

impl PrototypeStore {
    /// Fresh randomly initialized seen prototypes: entries uniform in
    /// [-0.5, 0.5], rescaled to unit norm.
    pub fn init_seen(intents: &[String], dim: usize, rng: &mut Rng) -> Result<Self> {
        if intents.is_empty() {
            return Err(Error::Empty("seen intent list".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("prototype dim must be at least 1".into()));
        }
        let mut store = PrototypeStore::default();
        for intent in intents {
            if store.index_of(intent).is_some() {
                return Err(Error::DuplicateName(intent.clone()));
            }
            let mut v = Tensor::zeros(&[dim]);
            for x in v.data_mut() {
                *x = rng.uniform(-0.5, 0.5);
            }
            let v = v.normalized()?;
            store.entries.push(Prototype {
                intent: intent.clone(),
                stage: Stage::Seen,
                param: Param::new(proto_param_name(intent), v),
            });
        }
        Ok(store)
    }

    /// Append novel prototypes initialized to the mean of their projected
    /// support vectors. Names must be new; every intent needs at least one
    /// support; a degenerate mean is an error rather than a silent patch.
    pub fn init_novel(&mut self, supports: &[(String, Vec<Tensor>)]) -> Result<()> {
        for (intent, vectors) in supports {
            if self.index_of(intent).is_some() {
                return Err(Error::DuplicateName(intent.clone()));
            }
            if vectors.is_empty() {
                return Err(Error::Empty(format!("support set for intent {intent:?}")));
            }
            let dims = vectors[0].dims().to_vec();
            let mut mean = Tensor::zeros(&dims);
            for v in vectors {
                if v.dims() != dims {
                    return Err(Error::dims("novel support", &dims, v.dims()));
                }
                mean.add_assign(v);
            }
            mean.scale_assign(1.0 / vectors.len() as f64);
            if mean.norm() <= EPSILON_NORM {
                return Err(Error::Degenerate {
                    norm: mean.norm(),
                    min: EPSILON_NORM,
                });
            }
            self.entries.push(Prototype {
                intent: intent.clone(),
                stage: Stage::Novel,
                param: Param::new(proto_param_name(intent), mean),
            });
        }
        Ok(())
    }

    /// Rebuild from (intent, stage, vector) triples, e.g. when loading a
    /// checkpoint or assembling episode-local prototypes.
    pub fn from_parts(parts: Vec<(String, Stage, Tensor)>) -> Result<Self> {
        let mut store = PrototypeStore::default();
        let mut seen_novel = false;
        for (intent, stage, vector) in parts {
            if store.index_of(&intent).is_some() {
                return Err(Error::DuplicateName(intent));
            }
            match stage {
                Stage::Novel => seen_novel = true,
                Stage::Seen if seen_novel => {
                    return Err(Error::InvalidConfig(
                        "seen prototypes must precede novel ones".into(),
                    ))
                }
                Stage::Seen => {}
            }
            store.entries.push(Prototype {
                param: Param::new(proto_param_name(&intent), vector),
                intent,
                stage,
            });
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen_count(&self) -> usize {
        self.entries.iter().filter(|p| p.stage == Stage::Seen).count()
    }

    pub fn novel_count(&self) -> usize {
        self.entries.iter().filter(|p| p.stage == Stage::Novel).count()
    }

    pub fn entries(&self) -> &[Prototype] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Prototype> {
        self.entries.iter_mut()
    }

    pub fn index_of(&self, intent: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.intent == intent)
    }

    pub fn intent(&self, index: usize) -> &str {
        &self.entries[index].intent
    }

    pub fn vector(&self, index: usize) -> &Tensor {
        &self.entries[index].param.value
    }

    /// Tape leaves for every prototype, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|p| tape.leaf(p.param.value.clone()))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.param.zero_grad();
        }
    }
}

/// Projection into prototype space: `v = W h`.
pub fn project(w: &Tensor, hidden: &Tensor) -> Result<Tensor> {
    matvec(w, hidden)
}

pub fn project_on_tape(tape: &mut Tape, w: NodeId, hidden: NodeId) -> Result<NodeId> {
    tape.matvec(w, hidden)
}

/// Insert a freshly initialized projection matrix (uniform in
/// +-1/sqrt(hidden_dim)).
pub fn init_projection(
    params: &mut ModelParams,
    proto_dim: usize,
    hidden_dim: usize,
    rng: &mut Rng,
) -> Result<()> {
    if proto_dim == 0 {
        return Err(Error::InvalidConfig("prototype dim must be at least 1".into()));
    }
    let limit = 1.0 / (hidden_dim as f64).sqrt();
    let mut w = Tensor::zeros(&[proto_dim, hidden_dim]);
    for x in w.data_mut() {
        *x = rng.uniform(-limit, limit);
    }
    params.insert(PARAM_PROJECTION, w)
}

/// Nearest prototype by cosine similarity over the whole store (seen and
/// novel jointly). Ties go to the lowest store index. Returns the winning
/// index and the full score vector.
pub fn classify(v: &Tensor, store: &PrototypeStore) -> Result<(usize, Vec<f64>)> {
    if store.is_empty() {
        return Err(Error::Empty("prototype store".into()));
    }
    let mut scores = Vec::with_capacity(store.len());
    for entry in store.entries() {
        scores.push(cosine_sim(v, &entry.param.value)?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn project_identity_zero_and_hand_example() {
        let h = Tensor::vector(&[3.0, 5.0]);
        assert_eq!(project(&Tensor::identity(2), &h).unwrap(), h);

        let z = project(&Tensor::zeros(&[2, 2]), &h).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        // downstream cosine then rejects the zero vector
        let store = PrototypeStore::init_seen(&names(&["a"]), 2, &mut Rng::new(0)).unwrap();
        assert!(classify(&z, &store).is_err());

        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(project(&w, &h).unwrap().data(), &[3.0, 10.0]);
    }

    #[test]
    fn init_seen_shapes_norms_and_determinism() {
        let intents = names(&["alpha", "beta", "gamma"]);
        let store = PrototypeStore::init_seen(&intents, 4, &mut Rng::new(5)).unwrap();
        assert_eq!(store.len(), 3);
        for e in store.entries() {
            assert_eq!(e.param.value.dims(), &[4]);
            assert!((e.param.value.norm() - 1.0).abs() < 1e-12);
            assert_eq!(e.stage, Stage::Seen);
        }
        let again = PrototypeStore::init_seen(&intents, 4, &mut Rng::new(5)).unwrap();
        for (a, b) in store.entries().iter().zip(again.entries()) {
            assert_eq!(a.param.value, b.param.value);
        }
    }

    #[test]
    fn init_seen_rejects_duplicates_and_empty() {
        assert!(matches!(
            PrototypeStore::init_seen(&names(&["x", "x"]), 3, &mut Rng::new(0)),
            Err(Error::DuplicateName(_))
        ));
        assert!(PrototypeStore::init_seen(&[], 3, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn single_intent_always_wins() {
        let store = PrototypeStore::init_seen(&names(&["only"]), 3, &mut Rng::new(2)).unwrap();
        let (idx, scores) = classify(&Tensor::vector(&[0.3, -0.2, 0.9]), &store).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(scores.len(), 1);
    }

    #[test]
    fn novel_init_mean_and_errors() {
        let mut store = PrototypeStore::init_seen(&names(&["s"]), 2, &mut Rng::new(1)).unwrap();

        // mean of one support is that support
        store
            .init_novel(&[("n1".into(), vec![Tensor::vector(&[0.0, 2.0])])])
            .unwrap();
        assert_eq!(store.vector(1).data(), &[0.0, 2.0]);

        // mean of (1,0) and (0,1) is (0.5, 0.5)
        store
            .init_novel(&[(
                "n2".into(),
                vec![Tensor::vector(&[1.0, 0.0]), Tensor::vector(&[0.0, 1.0])],
            )])
            .unwrap();
        assert_eq!(store.vector(2).data(), &[0.5, 0.5]);
        assert_eq!(store.entries()[2].stage, Stage::Novel);
        assert_eq!(store.seen_count(), 1);
        assert_eq!(store.novel_count(), 2);

        // opposing supports average to zero: degenerate
        let degenerate = store.init_novel(&[(
            "n3".into(),
            vec![Tensor::vector(&[1.0, 1.0]), Tensor::vector(&[-1.0, -1.0])],
        )]);
        assert!(matches!(degenerate, Err(Error::Degenerate { .. })));

        // name collision and empty support list
        assert!(matches!(
            store.init_novel(&[("s".into(), vec![Tensor::vector(&[1.0, 0.0])])]),
            Err(Error::DuplicateName(_))
        ));
        assert!(matches!(
            store.init_novel(&[("n4".into(), vec![])]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn classify_hand_example_and_tie_breaking() {
        let store = PrototypeStore::from_parts(vec![
            ("first".into(), Stage::Seen, Tensor::vector(&[1.0, 0.0])),
            ("second".into(), Stage::Seen, Tensor::vector(&[0.0, 1.0])),
        ])
        .unwrap();

        let (idx, scores) = classify(&Tensor::vector(&[2.0, 1.0]), &store).unwrap();
        assert_eq!(idx, 0);
        assert!((scores[0] - 2.0 / 5.0_f64.sqrt()).abs() < 1e-12);
        assert!((scores[1] - 1.0 / 5.0_f64.sqrt()).abs() < 1e-12);

        // exactly equidistant: lowest index wins
        let (idx, _) = classify(&Tensor::vector(&[1.0, 1.0]), &store).unwrap();
        assert_eq!(idx, 0);

        // exact match scores 1.0
        let (idx, scores) = classify(&Tensor::vector(&[0.0, 3.0]), &store).unwrap();
        assert_eq!(idx, 1);
        assert!((scores[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_errors_on_empty_store() {
        let store = PrototypeStore::default();
        assert!(classify(&Tensor::vector(&[1.0]), &store).is_err());
    }

    #[test]
    fn from_parts_rejects_novel_before_seen() {
        let parts = vec![
            ("n".into(), Stage::Novel, Tensor::vector(&[1.0])),
            ("s".into(), Stage::Seen, Tensor::vector(&[1.0])),
        ];
        assert!(PrototypeStore::from_parts(parts).is_err());
    }

    proptest! {
        #[test]
        fn classify_is_scale_invariant(
            coords in proptest::collection::vec(-3.0f64..3.0, 3),
            alpha in 0.01f64..50.0,
        ) {
            let store = PrototypeStore::init_seen(
                &names(&["a", "b", "c", "d"]), 3, &mut Rng::new(77)).unwrap();
            let v = Tensor::vector(&coords);
            if v.norm() > 1e-6 {
                let mut scaled = v.clone();
                scaled.scale_assign(alpha);
                let (i1, s1) = classify(&v, &store).unwrap();
                let (i2, _) = classify(&scaled, &store).unwrap();
                prop_assert_eq!(i1, i2);
                prop_assert_eq!(s1.len(), store.len());
                prop_assert!(s1.iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s)));
            }
        }
    }
}
