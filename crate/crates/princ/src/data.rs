//! Dataset ingestion, the synthetic corpus generator, and precomputed
//! embedding files.
//!
//! Datasets are line-delimited JSON, one `{"text": ..., "label": ...}`
//! object per line. The synthetic generator is a desk-scale stand-in for a
//! real intent corpus: each intent owns a disjoint set of signature tokens
//! mixed with a shared filler pool, hard enough that one support is shaky
//! and five are reliable.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{Encoder, Utterance};

/// Parse a dataset file: one JSON record per line, order preserved.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let file = fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let utterance = Utterance::new(record.text, record.label).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(utterance);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "dataset {} has no records",
            path.as_ref().display()
        )));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: String,
}

/// Write a dataset in the same line-delimited format `load_dataset` reads.
pub fn save_dataset(utterances: &[Utterance], path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for u in utterances {
        serde_json::to_writer(&mut file, u).map_err(|e| Error::Format(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Seen/novel intent names and the generator seed, written next to a
/// synthetic dataset so later commands can rebuild the same split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seen: Vec<String>,
    pub novel: Vec<String>,
    pub per_intent: usize,
    pub seed: u64,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

const SIGNATURES_PER_INTENT: usize = 5;
const SIGNATURE_PROBABILITY: f64 = 0.6;
const MIN_LENGTH: usize = 3;
const MAX_LENGTH: usize = 10;

const FILLERS: [&str; 20] = [
    "please", "could", "you", "would", "like", "me", "my", "now", "today", "some", "any", "that",
    "this", "just", "really", "need", "want", "can", "get", "go",
];

/// Synthetic corpus: `seen + novel` intents with `per_intent` utterances
/// each, grouped by intent, seen intents first. Every intent owns five
/// signature tokens disjoint from every other intent's; each utterance
/// position is a signature token with probability 0.6, otherwise a shared
/// filler. Token length is uniform in 3..=10.
pub fn generate_synthetic(
    seen: usize,
    novel: usize,
    per_intent: usize,
    rng: &mut Rng,
) -> Result<(Vec<Utterance>, Vec<String>, Vec<String>)> {
    if seen < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 seen intents, got {seen}"
        )));
    }
    if novel < 1 {
        return Err(Error::InvalidConfig(format!(
            "need at least 1 novel intent, got {novel}"
        )));
    }
    if per_intent < 10 {
        return Err(Error::InvalidConfig(format!(
            "need at least 10 utterances per intent, got {per_intent}"
        )));
    }

    let seen_names: Vec<String> = (0..seen).map(|i| format!("seen{i:02}")).collect();
    let novel_names: Vec<String> = (0..novel).map(|i| format!("novel{i:02}")).collect();

    let mut utterances = Vec::with_capacity((seen + novel) * per_intent);
    for name in seen_names.iter().chain(&novel_names) {
        let signatures: Vec<String> = (0..SIGNATURES_PER_INTENT)
            .map(|j| format!("{name}_kw{j}"))
            .collect();
        for _ in 0..per_intent {
            let length = rng.int_inclusive(MIN_LENGTH, MAX_LENGTH);
            let mut tokens = Vec::with_capacity(length);
            for _ in 0..length {
                if rng.chance(SIGNATURE_PROBABILITY) {
                    tokens.push(signatures[rng.index(SIGNATURES_PER_INTENT)].clone());
                } else {
                    tokens.push(FILLERS[rng.index(FILLERS.len())].to_string());
                }
            }
            utterances.push(Utterance::new(tokens.join(" "), name.clone())?);
        }
    }
    Ok((utterances, seen_names, novel_names))
}

/// Precomputed hidden vectors keyed by zero-based dataset index, produced
/// offline by a stronger encoder. Drop-in [`Encoder`] replacement.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<usize, Tensor>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.vectors.get(&index)
    }

    /// Fail unless the table covers exactly the indices `0..dataset_len`.
    pub fn check_complete(&self, dataset_len: usize) -> Result<()> {
        if self.vectors.len() != dataset_len {
            return Err(Error::Infeasible(format!(
                "embedding table holds {} records but the dataset has {dataset_len}",
                self.vectors.len()
            )));
        }
        if let Some(bad) = self.vectors.keys().find(|&&i| i >= dataset_len) {
            return Err(Error::Infeasible(format!(
                "embedding index {bad} out of range for dataset of {dataset_len}"
            )));
        }
        Ok(())
    }
}

impl Encoder for EmbeddingTable {
    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn encode_utterance(&self, index: usize, _utterance: &Utterance) -> Result<Tensor> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Infeasible(format!("no embedding for dataset index {index}")))
    }
}

/// Load an embedding file: a `h=<dim>` header line, then one record per
/// line as `<index> <v0> <v1> ...` with exactly `dim` decimal floats.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let file = fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let dim = loop {
        match lines.next() {
            Some((lineno, line)) => {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let value = trimmed.strip_prefix("h=").ok_or(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected header h=<dim>, got {trimmed:?}"),
                })?;
                break value.parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            }
            None => return Err(Error::Empty("embedding file".into())),
        }
    };
    if dim == 0 {
        return Err(Error::Format("embedding dim must be at least 1".into()));
    }

    let mut vectors = HashMap::new();
    for (lineno, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let index: usize = fields
            .next()
            .expect("non-empty line has a first field")
            .parse()
            .map_err(|e: std::num::ParseIntError| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        if vectors.insert(index, Tensor::vector(&values)).is_some() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("duplicate embedding index {index}"),
            });
        }
    }
    Ok(EmbeddingTable { dim, vectors })
}

/// Write an embedding file in the format `load_embeddings` reads.
pub fn save_embeddings(
    vectors: impl IntoIterator<Item = (usize, Tensor)>,
    dim: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "h={dim}")?;
    for (index, v) in vectors {
        if v.dims() != [dim] {
            return Err(Error::dims("embedding record", &[dim], v.dims()));
        }
        let fields: Vec<String> = v.data().iter().map(|x| format!("{x}")).collect();
        writeln!(file, "{index} {}", fields.join(" "))?;
    }
    Ok(())
}
