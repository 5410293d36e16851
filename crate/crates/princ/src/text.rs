//! Template wrapping, tokenization, vocabulary, and the desk-scale trainable
//! encoder that maps an utterance to its hidden vector.
//!
//! The encoder here is deliberately small: embedding lookup, mean pooling
//! over all positions (template tokens and the mask token included), one
//! tanh layer, one linear layer. It is a stand-in for a large masked
//! language model behind the same interface: templated token sequence in,
//! fixed-size hidden vector out, trainable end to end. Anything that
//! produces such a vector (see [`Encoder`]) can drive the downstream
//! prototype machinery unchanged.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ModelParams, Tensor};

pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_TOKEN: &str = "[PAD]";

/// Reserved ids; corpus tokens start after these.
pub const MASK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_ID: usize = 2;

pub const PARAM_EMBED: &str = "encoder.embed";
pub const PARAM_W1: &str = "encoder.w1";
pub const PARAM_B1: &str = "encoder.b1";
pub const PARAM_W2: &str = "encoder.w2";
pub const PARAM_B2: &str = "encoder.b2";

/// Raw labeled utterance, the unit of ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub label: String,
}

impl Utterance {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let label = label.into();
        if text.trim().is_empty() {
            return Err(Error::Empty("utterance text".into()));
        }
        if label.is_empty() {
            return Err(Error::Empty("utterance label".into()));
        }
        Ok(Utterance { text, label })
    }
}

/// Wrap an utterance in the fixed prompt, ending in the mask token whose
/// hidden state the encoder summarizes.
pub fn apply_template(text: &str) -> Result<String> {
    if text.trim().is_empty() {
        return Err(Error::Empty("cannot template empty text".into()));
    }
    Ok(format!("{text}. The intent is to {MASK_TOKEN}"))
}

const TRAILING_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Lowercase whitespace tokenization with trailing punctuation split off as
/// separate tokens. The mask token is preserved verbatim.
pub fn split_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        if word == MASK_TOKEN {
            out.push(word.to_string());
            continue;
        }
        let mut tail = Vec::new();
        let mut stem = word;
        while let Some(last) = stem.chars().last() {
            if TRAILING_PUNCT.contains(&last) {
                tail.push(last.to_string());
                stem = &stem[..stem.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        if !stem.is_empty() {
            out.push(stem.to_lowercase());
        }
        // peeled right-to-left; restore original order
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Token-to-id bijection with reserved mask/unk/pad entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from the texts available when the first phase starts. Tokens are
    /// assigned contiguous ids in first-appearance order after the reserved
    /// entries; the template is applied so its tokens are always covered.
    /// Tokens first seen later map to the unk id.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut vocab = Vocab::empty();
        for text in texts {
            let templated = apply_template(text)?;
            for token in split_tokens(&templated) {
                vocab.intern(&token);
            }
        }
        Ok(vocab)
    }

    fn empty() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for reserved in [MASK_TOKEN, UNK_TOKEN, PAD_TOKEN] {
            vocab.intern(reserved);
        }
        vocab
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Rebuild from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::DuplicateName(t.clone()));
            }
        }
        for (reserved, id) in [(MASK_TOKEN, MASK_ID), (UNK_TOKEN, UNK_ID), (PAD_TOKEN, PAD_ID)] {
            if tokens.get(id).map(String::as_str) != Some(reserved) {
                return Err(Error::Format(format!(
                    "vocab is missing reserved token {reserved:?} at id {id}"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Map a templated string to token ids under a fixed vocabulary.
pub fn tokenize(s: &str, vocab: &Vocab) -> Vec<usize> {
    split_tokens(s).iter().map(|t| vocab.id(t)).collect()
}

/// Template + tokenize in one step.
pub fn encode_tokens(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    Ok(tokenize(&apply_template(text)?, vocab))
}

/// Desk-scale encoder dimensions. The hidden activation is fixed to tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 32,
            hidden_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "encoder dims must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Insert freshly initialized encoder parameters. Embeddings are uniform in
/// [-0.1, 0.1]; affine weights uniform in +-1/sqrt(fan_in); biases zero.
pub fn init_encoder_params(
    params: &mut ModelParams,
    vocab_size: usize,
    cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let (e, h) = (cfg.embedding_dim, cfg.hidden_dim);

    let mut embed = Tensor::zeros(&[vocab_size, e]);
    for x in embed.data_mut() {
        *x = rng.uniform(-0.1, 0.1);
    }
    params.insert(PARAM_EMBED, embed)?;

    let mut w1 = Tensor::zeros(&[h, e]);
    let lim1 = 1.0 / (e as f64).sqrt();
    for x in w1.data_mut() {
        *x = rng.uniform(-lim1, lim1);
    }
    params.insert(PARAM_W1, w1)?;
    params.insert(PARAM_B1, Tensor::zeros(&[h]))?;

    let mut w2 = Tensor::zeros(&[h, h]);
    let lim2 = 1.0 / (h as f64).sqrt();
    for x in w2.data_mut() {
        *x = rng.uniform(-lim2, lim2);
    }
    params.insert(PARAM_W2, w2)?;
    params.insert(PARAM_B2, Tensor::zeros(&[h]))?;
    Ok(())
}

/// Tape leaves for the encoder parameters, so one batch shares one set.
pub struct EncoderNodes {
    pub embed: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl EncoderNodes {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Result<Self> {
        Ok(EncoderNodes {
            embed: tape.leaf(params.get(PARAM_EMBED)?.value.clone()),
            w1: tape.leaf(params.get(PARAM_W1)?.value.clone()),
            b1: tape.leaf(params.get(PARAM_B1)?.value.clone()),
            w2: tape.leaf(params.get(PARAM_W2)?.value.clone()),
            b2: tape.leaf(params.get(PARAM_B2)?.value.clone()),
        })
    }
}

/// Differentiable forward pass: ids -> mean-pooled embedding -> tanh affine
/// -> affine -> hidden vector.
pub fn encode_on_tape(tape: &mut Tape, nodes: &EncoderNodes, ids: &[usize]) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::Empty("token id sequence".into()));
    }
    let vocab_rows = tape.value(nodes.embed).dims()[0];
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_rows) {
        return Err(Error::Infeasible(format!(
            "token id {bad} out of vocab range {vocab_rows}"
        )));
    }
    let pooled = tape.row_mean(nodes.embed, ids)?;
    let a1 = tape.matvec(nodes.w1, pooled)?;
    let a1 = tape.add(a1, nodes.b1)?;
    let t1 = tape.tanh(a1);
    let h = tape.matvec(nodes.w2, t1)?;
    tape.add(h, nodes.b2)
}

/// Pure forward pass over frozen parameters.
pub fn encode(ids: &[usize], params: &ModelParams, cfg: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::bind(&mut tape, params)?;
    let out = encode_on_tape(&mut tape, &nodes, ids)?;
    let value = tape.value(out).clone();
    debug_assert_eq!(value.dims(), &[cfg.hidden_dim]);
    Ok(value)
}

/// Anything that turns an utterance into a hidden vector. `index` is the
/// utterance's position in its dataset, which lets table-backed encoders
/// (precomputed vectors from a real language model) find their entry; the
/// desk encoder ignores it.
pub trait Encoder {
    fn hidden_dim(&self) -> usize;
    fn encode_utterance(&self, index: usize, utterance: &Utterance) -> Result<Tensor>;
}

/// The trainable desk encoder viewed over frozen parameters.
pub struct DeskEncoder<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub cfg: EncoderConfig,
}

impl Encoder for DeskEncoder<'_> {
    fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    fn encode_utterance(&self, _index: usize, utterance: &Utterance) -> Result<Tensor> {
        let ids = encode_tokens(&utterance.text, self.vocab)?;
        encode(&ids, self.params, &self.cfg)
    }
}
