//! Node attribute vectors.
//!
//! Graph nodes get fixed-dimension attribute vectors computed from a
//! canonical text: event nodes use their template string verbatim, field
//! nodes use the field's positive prompt (so "imap://localhost/" embeds as
//! "imap://localhost/ is a server entity"). The default backend feature-
//! hashes word unigrams and character trigrams with a signed hash and
//! L2-normalizes — deterministic, dependency-free, and similar texts share
//! buckets. Precomputed vectors can be loaded from a TSV file and override
//! the hash for listed texts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{build_prompt, FieldType, Polarity, PromptTemplate};

/// Node kind within a graph snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Event,
    Field,
}

/// Identity of a graph node: `(kind, field_type, text)` is unique within
/// and across snapshots. Events carry their template string; fields carry
/// the raw field text plus their type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub kind: NodeKind,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub field_type: Option<FieldType>,
    pub text: String,
}

impl NodeKey {
    pub fn event(template_text: impl Into<String>) -> NodeKey {
        NodeKey {
            kind: NodeKind::Event,
            field_type: None,
            text: template_text.into(),
        }
    }

    pub fn field(field_type: FieldType, text: impl Into<String>) -> NodeKey {
        NodeKey {
            kind: NodeKind::Field,
            field_type: Some(field_type),
            text: text.into(),
        }
    }
}

/// The canonical text a node is embedded from: template strings verbatim
/// for events, the positive prompt for fields.
pub fn node_text(key: &NodeKey) -> String {
    match (key.kind, key.field_type) {
        (NodeKind::Field, Some(ft)) => {
            build_prompt(&key.text, Some(ft), PromptTemplate::P1, Polarity::Positive)
                .expect("positive prompt with a type always renders")
        }
        // Field keys built through NodeKey::field always carry a type; a
        // hand-rolled key without one falls back to its raw text.
        _ => key.text.clone(),
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Feature-hashes a text into a d-dimensional L2-normalized vector.
///
/// Features are word unigrams (`w:` namespace) and character trigrams
/// (`c:` namespace); each feature adds ±1 to the bucket chosen by its
/// 64-bit hash, with the sign taken from the hash's top bit. A text whose
/// contributions cancel exactly stays the zero vector rather than being
/// divided by zero.
///
/// # Errors
/// [`Error::Usage`] when `d < 8`; [`Error::Data`] on whitespace-only text.
pub fn embed(text: &str, d: usize) -> Result<Vec<f64>> {
    if d < 8 {
        return Err(Error::usage(format!("embedding dimension {d} < 8")));
    }
    if text.trim().is_empty() {
        return Err(Error::data("cannot embed empty text"));
    }
    let mut v = vec![0.0f64; d];
    let mut add = |feature: &str| {
        let h = fnv1a64(feature.as_bytes());
        let bucket = (h % d as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    };
    for word in text.split_whitespace() {
        add(&format!("w:{word}"));
    }
    let chars: Vec<char> = text.chars().collect();
    for tri in chars.windows(3) {
        add(&format!("c:{}{}{}", tri[0], tri[1], tri[2]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(v)
}

/// Precomputed embeddings keyed by exact node text.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    by_text: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.by_text.get(text).map(Vec::as_slice)
    }
}

/// Reads a TSV embedding file: one row per text, `text \t f1 \t … \t fd`.
/// The dimension is fixed by the first row.
///
/// # Errors
/// [`Error::Io`] on read failure; [`Error::Data`] on an empty file, a row
/// whose float count differs from the first row's, an unparsable float, or
/// a duplicate text.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading embeddings {}", path.display()), e))?;
    let mut table = EmbeddingTable::default();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let text = parts.next().unwrap_or_default();
        let values: Vec<f64> = parts
            .enumerate()
            .map(|(i, p)| {
                p.parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "{}:{}: bad float in column {}",
                        path.display(),
                        lineno + 1,
                        i + 2
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::data(format!(
                "{}:{}: row has no vector values",
                path.display(),
                lineno + 1
            )));
        }
        if table.dim == 0 {
            table.dim = values.len();
        } else if values.len() != table.dim {
            return Err(Error::data(format!(
                "{}:{}: dimension {} != {} from first row",
                path.display(),
                lineno + 1,
                values.len(),
                table.dim
            )));
        }
        if table.by_text.insert(text.to_string(), values).is_some() {
            return Err(Error::data(format!(
                "{}:{}: duplicate text {text:?}",
                path.display(),
                lineno + 1
            )));
        }
    }
    if table.by_text.is_empty() {
        return Err(Error::data(format!(
            "{}: no embedding rows",
            path.display()
        )));
    }
    Ok(table)
}

/// Embedding backend selection, matching the `embed.source` config key.
#[derive(Clone, Debug)]
pub enum Embedder {
    /// Pure feature hashing at the given dimension.
    Hash { dim: usize },
    /// Table lookup with hash fallback for texts the file does not list.
    File { table: EmbeddingTable },
}

impl Embedder {
    pub fn hash(dim: usize) -> Result<Embedder> {
        if dim < 8 {
            return Err(Error::usage(format!("embedding dimension {dim} < 8")));
        }
        Ok(Embedder::Hash { dim })
    }

    /// Loads a table backend, checking the file's dimension up front.
    pub fn from_file(path: &Path, dim: usize) -> Result<Embedder> {
        let table = load_embeddings(path)?;
        if table.dim != dim {
            return Err(Error::data(format!(
                "{}: embeddings are {}-dimensional, config wants {}",
                path.display(),
                table.dim,
                dim
            )));
        }
        Ok(Embedder::File { table })
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedder::Hash { dim } => *dim,
            Embedder::File { table } => table.dim,
        }
    }

    /// Embeds a node's canonical text.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            Embedder::Hash { dim } => embed(text, *dim),
            Embedder::File { table } => match table.get(text) {
                Some(v) => Ok(v.to_vec()),
                None => embed(text, table.dim),
            },
        }
    }

    /// Embeds a node key via [`node_text`].
    pub fn embed_node(&self, key: &NodeKey) -> Result<Vec<f64>> {
        self.embed_text(&node_text(key))
    }
}
