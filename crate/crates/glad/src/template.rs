//! Online event-template mining with a fixed-depth prefix tree.
//!
//! Messages are tokenized on whitespace, volatile tokens (numbers, long hex
//! runs, IPs, path-like strings) are pre-masked to `<*>`, and the masked
//! token list is routed through a tree keyed first by token count, then by
//! the leading tokens. Each leaf holds template clusters; a message joins the
//! most similar cluster at or above the similarity threshold (fraction of
//! positionally equal tokens) or founds a new one. Joining a cluster rewrites
//! every disagreeing position to `<*>`, so template token lists only ever
//! move from constant to wildcard.
//!
//! Template ids are a stable hash of the token list: the id changes when a
//! merge rewrites the tokens. Callers that need final ids for every message
//! mine in one pass and then re-resolve messages with [`TemplateMiner::lookup`],
//! which never mutates state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The wildcard marker used in template token lists.
pub const WILDCARD: &str = "<*>";

/// A mined event template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTemplate {
    /// Stable content hash of `tokens`.
    pub template_id: String,
    pub tokens: Vec<String>,
    /// Number of messages that matched this template during mining.
    pub support: u64,
}

impl EventTemplate {
    /// The template rendered as a single string, tokens joined by spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Tree shape and matching parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    /// Total tree depth including the root and leaf levels; depth 4 routes on
    /// the token count plus the first two tokens.
    pub depth: usize,
    /// Minimum fraction of positionally equal tokens to join a cluster.
    pub sim_threshold: f64,
    /// Maximum distinct children per internal node; overflow routes through a
    /// wildcard child.
    pub max_children: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            depth: 4,
            sim_threshold: 0.5,
            max_children: 100,
        }
    }
}

#[derive(Default)]
struct TreeNode {
    children: HashMap<String, TreeNode>,
    /// Indices into `TemplateMiner::clusters`; only populated at leaves.
    clusters: Vec<usize>,
}

struct Cluster {
    tokens: Vec<String>,
    support: u64,
}

/// Online template miner state.
pub struct TemplateMiner {
    config: MinerConfig,
    /// First tree level, keyed by token count.
    root: HashMap<usize, TreeNode>,
    clusters: Vec<Cluster>,
    /// Current id of each live cluster, kept in sync as merges rewrite
    /// tokens.
    ids: HashMap<String, usize>,
}

fn ip_like(token: &str) -> bool {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"^\d{1,3}(\.\d{1,3}){3}(:\d+)?$").unwrap())
        .is_match(token)
}

fn mask_token(token: &str) -> &str {
    let pure_digits = !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit());
    let long_hex = token.len() >= 8 && token.bytes().all(|b| b.is_ascii_hexdigit());
    if pure_digits || long_hex || ip_like(token) || token.contains('/') {
        WILDCARD
    } else {
        token
    }
}

/// Fraction of positions where the two equal-length token lists agree
/// exactly (a wildcard only matches another wildcard).
fn similarity(a: &[String], b: &[String]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let equal = a.iter().zip(b).filter(|(x, y)| x == y).count();
    equal as f64 / a.len() as f64
}

/// Stable content hash for a token list (FNV-1a over tokens with a
/// separator, rendered as 16 hex digits).
fn template_id_for(tokens: &[String]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for token in tokens {
        for b in token.bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash ^= 0x1f;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Routes masked tokens down the tree, creating nodes as needed, and returns
/// the leaf. Internal nodes that are full route new tokens through a shared
/// wildcard child.
fn descend_or_create<'a>(
    root: &'a mut HashMap<usize, TreeNode>,
    depth: usize,
    max_children: usize,
    masked: &[String],
) -> &'a mut TreeNode {
    let levels = depth.saturating_sub(2).min(masked.len());
    let mut node = root.entry(masked.len()).or_default();
    for token in &masked[..levels] {
        let key = if node.children.contains_key(token.as_str())
            || node.children.len() < max_children
        {
            token.as_str()
        } else {
            WILDCARD
        };
        node = node.children.entry(key.to_string()).or_default();
    }
    node
}

/// Read-only descent; `None` when the path was never created.
fn descend<'a>(
    root: &'a HashMap<usize, TreeNode>,
    depth: usize,
    masked: &[String],
) -> Option<&'a TreeNode> {
    let levels = depth.saturating_sub(2).min(masked.len());
    let mut node = root.get(&masked.len())?;
    for token in &masked[..levels] {
        node = match node.children.get(token.as_str()) {
            Some(child) => child,
            None => node.children.get(WILDCARD)?,
        };
    }
    Some(node)
}

/// Index of the most similar cluster at or above the threshold; ties resolve
/// to the earliest-created cluster.
fn best_cluster(
    clusters: &[Cluster],
    candidates: &[usize],
    masked: &[String],
    threshold: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &ci in candidates {
        let sim = similarity(&clusters[ci].tokens, masked);
        if sim >= threshold && best.is_none_or(|(_, s)| sim > s) {
            best = Some((ci, sim));
        }
    }
    best.map(|(ci, _)| ci)
}

impl TemplateMiner {
    pub fn new(config: MinerConfig) -> Self {
        TemplateMiner {
            config,
            root: HashMap::new(),
            clusters: Vec::new(),
            ids: HashMap::new(),
        }
    }

    fn tokenize(message: &str) -> Result<Vec<String>> {
        let masked: Vec<String> = message
            .split_whitespace()
            .map(|t| mask_token(t).to_string())
            .collect();
        if masked.is_empty() {
            return Err(Error::data(format!(
                "message has no tokens: {message:?}"
            )));
        }
        Ok(masked)
    }

    /// Mines one message: matches or creates a template and returns its id
    /// (the post-merge id when the match rewrote tokens).
    ///
    /// # Errors
    /// Fails on a message with no whitespace tokens.
    pub fn parse_message(&mut self, message: &str) -> Result<String> {
        let masked = Self::tokenize(message)?;
        let leaf = descend_or_create(
            &mut self.root,
            self.config.depth,
            self.config.max_children,
            &masked,
        );
        match best_cluster(&self.clusters, &leaf.clusters, &masked, self.config.sim_threshold) {
            Some(ci) => {
                let old_id = template_id_for(&self.clusters[ci].tokens);
                let cluster = &mut self.clusters[ci];
                for (slot, token) in cluster.tokens.iter_mut().zip(&masked) {
                    if slot != token {
                        *slot = WILDCARD.to_string();
                    }
                }
                cluster.support += 1;
                let new_id = template_id_for(&cluster.tokens);
                if new_id != old_id {
                    self.ids.remove(&old_id);
                }
                self.ids.insert(new_id.clone(), ci);
                Ok(new_id)
            }
            None => {
                let ci = self.clusters.len();
                leaf.clusters.push(ci);
                let id = template_id_for(&masked);
                self.clusters.push(Cluster {
                    tokens: masked,
                    support: 1,
                });
                self.ids.insert(id.clone(), ci);
                Ok(id)
            }
        }
    }

    /// Resolves a message against the current template set without mutating
    /// state. Returns `None` when no cluster clears the threshold.
    pub fn lookup(&self, message: &str) -> Option<String> {
        let masked = Self::tokenize(message).ok()?;
        let leaf = descend(&self.root, self.config.depth, &masked)?;
        let best = best_cluster(
            &self.clusters,
            &leaf.clusters,
            &masked,
            self.config.sim_threshold,
        )?;
        Some(template_id_for(&self.clusters[best].tokens))
    }

    /// Current template for an id.
    ///
    /// # Errors
    /// Fails if the id does not name a live template.
    pub fn get_template(&self, template_id: &str) -> Result<EventTemplate> {
        let &ci = self
            .ids
            .get(template_id)
            .ok_or_else(|| Error::data(format!("unknown template id {template_id}")))?;
        let cluster = &self.clusters[ci];
        Ok(EventTemplate {
            template_id: template_id.to_string(),
            tokens: cluster.tokens.clone(),
            support: cluster.support,
        })
    }

    /// All live templates, sorted by id for stable serialization.
    pub fn templates(&self) -> Vec<EventTemplate> {
        let mut out: Vec<EventTemplate> = self
            .clusters
            .iter()
            .map(|c| EventTemplate {
                template_id: template_id_for(&c.tokens),
                tokens: c.tokens.clone(),
                support: c.support,
            })
            .collect();
        out.sort_by(|a, b| a.template_id.cmp(&b.template_id));
        out
    }
}

/// Writes a template store as pretty JSON.
///
/// # Errors
/// Fails on I/O problems.
pub fn save_templates(path: &Path, templates: &[EventTemplate]) -> Result<()> {
    let json = serde_json::to_string_pretty(templates)
        .map_err(|e| Error::data(format!("serializing templates: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a template store written by [`save_templates`].
///
/// # Errors
/// Fails if the file is unreadable or not a template list.
pub fn load_templates(path: &Path) -> Result<Vec<EventTemplate>> {
    let json =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&json)
        .map_err(|e| Error::data(format!("parsing {}: {e}", path.display())))
}
