//! Prototype-based class-incremental intent detection.
//!
//! `princ` trains an intent classifier in two phases. Phase 1 fits a
//! prompt-templated encoder, a projection into prototype space, and one
//! trainable prototype per seen intent on abundant labeled data, using
//! cosine-similarity classification plus two supervised contrastive
//! objectives. Phase 2 introduces novel intents from a handful of supports:
//! their prototypes start at the mean of the projected supports, and every
//! parameter is then fine-tuned on the joint few-shot data. Two knowledge
//! preservation modes fight forgetting along the way: `dakp` anchors the
//! parameters to a frozen phase-1 snapshot with a squared-drift penalty, and
//! `ddkp` replays a small stored sample of seen-intent data whose soft
//! labels were frozen before phase 2, distilling against them.
//!
//! Classification is always joint: a query is matched by cosine similarity
//! against seen and novel prototypes together. Evaluation covers both a
//! single pass over the full joint test split and repeated sampled few-shot
//! episodes with episode-local prototypes.
//!
//! Everything is deterministic under explicit seeds, double precision, and
//! gradient-checked against central finite differences.
//!
//! ## Runnable examples
//!
//! ```text
//! cargo run --example two_phase_training       # end-to-end walkthrough
//! cargo run --example preservation_comparison  # none vs dakp vs ddkp
//! cargo run --example episodic_evaluation      # sampled few-shot tasks
//! cargo run --example gradient_check           # finite-difference audit
//! cargo run --example checkpoint_roundtrip     # bit-exact persistence
//! cargo run --example precomputed_embeddings   # offline encoder vectors
//! ```
//!
//! The `princ` binary wraps the same library surface in four batch
//! subcommands: `gen-data`, `train`, `eval` and `gradcheck`.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod digest;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod preservation;
pub mod prototypes;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use rng::Rng;
pub use tensor::{ModelParams, Param, Tensor};
pub use text::{EncoderConfig, Utterance, Vocab};
pub use training::{Preservation, TrainConfig, TrainReport};
