//! The trained artifact: encoder parameters, projection, prototype store and
//! vocabulary, bundled so training, evaluation and checkpointing hand around
//! one thing.

use serde::{Deserialize, Serialize};

use crate::digest::Fnv;
use crate::error::Result;
use crate::prototypes::{self, PrototypeStore};
use crate::rng::Rng;
use crate::tensor::{matvec, ModelParams, Tensor};
use crate::text::{self, DeskEncoder, EncoderConfig, Vocab};

/// Dimensions of the desk model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prototype_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prototype_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.prototype_dim == 0 {
            return Err(crate::error::Error::InvalidConfig(
                "prototype dim must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder + projection parameters, prototypes, and the fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub store: PrototypeStore,
}

impl Model {
    /// Freshly initialized model with seen prototypes. Draw order is fixed
    /// (embedding, affines, projection, prototypes) so equal seeds give
    /// bitwise-equal models.
    pub fn init(
        vocab: Vocab,
        cfg: ModelConfig,
        seen_intents: &[String],
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = ModelParams::new();
        text::init_encoder_params(&mut params, vocab.len(), &cfg.encoder, rng)?;
        prototypes::init_projection(&mut params, cfg.prototype_dim, cfg.encoder.hidden_dim, rng)?;
        let store = PrototypeStore::init_seen(seen_intents, cfg.prototype_dim, rng)?;
        Ok(Model {
            cfg,
            vocab,
            params,
            store,
        })
    }

    pub fn encoder(&self) -> DeskEncoder<'_> {
        DeskEncoder {
            params: &self.params,
            vocab: &self.vocab,
            cfg: self.cfg.encoder,
        }
    }

    /// Hidden vector of a raw utterance text under the frozen parameters.
    pub fn hidden(&self, utterance_text: &str) -> Result<Tensor> {
        let ids = text::encode_tokens(utterance_text, &self.vocab)?;
        text::encode(&ids, &self.params, &self.cfg.encoder)
    }

    /// Projection of a hidden vector into prototype space.
    pub fn project_hidden(&self, hidden: &Tensor) -> Result<Tensor> {
        matvec(&self.params.get(prototypes::PARAM_PROJECTION)?.value, hidden)
    }

    /// Encode and project a raw utterance text.
    pub fn project_text(&self, utterance_text: &str) -> Result<Tensor> {
        let h = self.hidden(utterance_text)?;
        self.project_hidden(&h)
    }

    /// FNV-1a digest over every parameter and prototype, used to pin run
    /// determinism in reports.
    pub fn checksum(&self) -> u64 {
        let mut hash = Fnv::new();
        for p in self.params.iter() {
            hash.update(p.name.as_bytes());
            hash.update(&p.value.le_bytes());
        }
        for e in self.store.entries() {
            hash.update(e.intent.as_bytes());
            hash.update(&e.param.value.le_bytes());
        }
        for token in self.vocab.tokens() {
            hash.update(token.as_bytes());
        }
        hash.finish()
    }
}
