//! Per-window attributed graphs.
//!
//! Each log window becomes an undirected, weighted, bipartite graph: one
//! node per distinct event template, one per distinct (field type, text)
//! pair, and an edge wherever a log instance links its template to an
//! extracted field, weighted by how many instances do so. Node attributes
//! are embeddings of the nodes' canonical texts. Snapshots carry optional
//! edge labels (an edge is anomalous when any log that produced it was) for
//! evaluation only — training never reads them.
//!
//! Adjacency is stored as an edge list; the dense self-loop-augmented,
//! degree-normalized matrix the model consumes is materialized on demand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, NodeKey};
use crate::error::{Error, Result};
use crate::fields::ParsedLog;
use crate::ingest::{LogWindow, RecordLabel, WindowLabel};
use crate::numeric::Matrix;

/// An undirected edge `(i, j, w)` with `i < j` and weight ≥ 1, serialized
/// as a JSON triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge(pub usize, pub usize, pub u64);

impl Edge {
    pub fn i(self) -> usize {
        self.0
    }
    pub fn j(self) -> usize {
        self.1
    }
    pub fn weight(self) -> u64 {
        self.2
    }
}

/// Label attached to an edge when the window's records carry labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    Normal,
    Anomalous,
}

/// One window's graph: nodes in deterministic order (events sorted by
/// template id, then fields sorted by type and text), attribute matrix `x`
/// with one row per node, and a weighted edge list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphSnapshot {
    /// Window index within the run.
    pub t: usize,
    pub start_ms: i64,
    pub end_ms: i64,
    pub nodes: Vec<NodeKey>,
    pub edges: Vec<Edge>,
    /// Aligned to `edges`; present once labels have been computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_labels: Option<Vec<EdgeLabel>>,
    /// Any-anomalous-record label of the source window, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_label: Option<WindowLabel>,
    /// Row i = embedding of node i. Persisted in a binary sidecar, not in
    /// the JSON.
    #[serde(skip)]
    pub x: Matrix,
    /// Per edge, the window-local record indices that produced it.
    /// Build-time provenance for labeling; not persisted.
    #[serde(skip)]
    pub contributors: Vec<Vec<usize>>,
    /// Labels of the window's records, aligned to window-local indices.
    /// Build-time provenance for labeling; not persisted.
    #[serde(skip)]
    pub record_labels: Vec<RecordLabel>,
}

impl GraphSnapshot {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Dense symmetric adjacency with zero diagonal.
    pub fn adjacency(&self) -> Matrix {
        let n = self.nodes.len();
        let mut a = Matrix::zeros(n, n);
        for e in &self.edges {
            a.set(e.0, e.1, e.2 as f64);
            a.set(e.1, e.0, e.2 as f64);
        }
        a
    }

    /// Total edge weight, i.e. the number of (log, field-mention)
    /// incidences in the window.
    pub fn total_weight(&self) -> u64 {
        self.edges.iter().map(|e| e.2).sum()
    }
}

/// Builds the snapshot for one window from its parsed logs.
///
/// `templates` maps template id → template text; every id referenced by
/// `parsed` must be present, and `parsed` must align one-to-one with
/// `window.records`.
///
/// # Errors
/// [`Error::Data`] on a missing template id or a parsed/record count
/// mismatch; embedder failures propagate.
pub fn build_snapshot(
    window: &LogWindow,
    parsed: &[ParsedLog],
    templates: &HashMap<String, String>,
    embedder: &Embedder,
) -> Result<GraphSnapshot> {
    if parsed.len() != window.records.len() {
        return Err(Error::data(format!(
            "window {}: {} parsed logs for {} records",
            window.window_index,
            parsed.len(),
            window.records.len()
        )));
    }

    // Collect distinct nodes. Events sort by template id, fields by
    // (type, text); both orders are total, so the layout is reproducible.
    let mut event_ids: Vec<&str> = Vec::new();
    let mut field_keys: Vec<NodeKey> = Vec::new();
    for log in parsed {
        if !event_ids.contains(&log.template_id.as_str()) {
            event_ids.push(&log.template_id);
        }
        for m in &log.mentions {
            let key = NodeKey::field(m.field_type, m.text.clone());
            if !field_keys.contains(&key) {
                field_keys.push(key);
            }
        }
    }
    event_ids.sort_unstable();
    field_keys.sort();

    let mut nodes: Vec<NodeKey> = Vec::with_capacity(event_ids.len() + field_keys.len());
    let mut event_index: HashMap<&str, usize> = HashMap::new();
    for id in &event_ids {
        let text = templates.get(*id).ok_or_else(|| {
            Error::data(format!(
                "window {}: unknown template id {id}",
                window.window_index
            ))
        })?;
        event_index.insert(id, nodes.len());
        nodes.push(NodeKey::event(text.clone()));
    }
    let mut field_index: HashMap<NodeKey, usize> = HashMap::new();
    for key in field_keys {
        field_index.insert(key.clone(), nodes.len());
        nodes.push(key);
    }

    // Accumulate edge weights and contributor sets per (event, field) pair.
    let mut weights: HashMap<(usize, usize), u64> = HashMap::new();
    let mut contributors: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (r, log) in parsed.iter().enumerate() {
        let ei = event_index[log.template_id.as_str()];
        for m in &log.mentions {
            let fi = field_index[&NodeKey::field(m.field_type, m.text.clone())];
            let pair = (ei.min(fi), ei.max(fi));
            *weights.entry(pair).or_insert(0) += 1;
            let contrib = contributors.entry(pair).or_default();
            if contrib.last() != Some(&r) {
                contrib.push(r);
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = weights.keys().copied().collect();
    pairs.sort_unstable();
    let edges: Vec<Edge> = pairs.iter().map(|&(i, j)| Edge(i, j, weights[&(i, j)])).collect();
    let edge_contributors: Vec<Vec<usize>> =
        pairs.iter().map(|p| contributors.remove(p).unwrap_or_default()).collect();

    let mut x = Matrix::zeros(nodes.len(), embedder.dim());
    for (i, key) in nodes.iter().enumerate() {
        let v = embedder.embed_node(key)?;
        x.as_mut_slice()[i * embedder.dim()..(i + 1) * embedder.dim()].copy_from_slice(&v);
    }

    let record_labels: Vec<RecordLabel> = window.records.iter().map(|r| r.label).collect();
    let window_label = if record_labels.iter().any(|l| *l != RecordLabel::Unlabeled) {
        Some(crate::ingest::label_window(window))
    } else {
        None
    };

    let mut snapshot = GraphSnapshot {
        t: window.window_index,
        start_ms: window.start_ms,
        end_ms: window.end_ms,
        nodes,
        edges,
        edge_labels: None,
        window_label,
        x,
        contributors: edge_contributors,
        record_labels,
    };
    if snapshot.record_labels.iter().any(|l| *l != RecordLabel::Unlabeled) {
        snapshot.edge_labels = Some(label_edges(&snapshot));
    }
    Ok(snapshot)
}

/// Labels each edge: anomalous iff any contributing record is anomalous.
/// Requires build-time provenance (`contributors`, `record_labels`).
pub fn label_edges(snapshot: &GraphSnapshot) -> Vec<EdgeLabel> {
    snapshot
        .contributors
        .iter()
        .map(|records| {
            let hit = records
                .iter()
                .any(|&r| snapshot.record_labels.get(r) == Some(&RecordLabel::Anomalous));
            if hit {
                EdgeLabel::Anomalous
            } else {
                EdgeLabel::Normal
            }
        })
        .collect()
}

/// Adds self-loops: Â = A + I, with D̂ the resulting row-sum degrees.
///
/// # Errors
/// [`Error::Data`] when A is not square.
pub fn with_self_loops(a: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if a.rows() != a.cols() {
        return Err(Error::data(format!(
            "adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut hat = a.clone();
    for i in 0..hat.rows() {
        hat.set(i, i, hat.get(i, i) + 1.0);
    }
    let degrees = (0..hat.rows())
        .map(|i| hat.row(i).iter().sum::<f64>())
        .collect();
    Ok((hat, degrees))
}

/// The symmetric-normalized adjacency D̂^(−1/2) Â D̂^(−1/2) the graph
/// convolution consumes. Self-loops make every degree ≥ 1.
pub fn normalized_adjacency(snapshot: &GraphSnapshot) -> Result<Matrix> {
    let (hat, degrees) = with_self_loops(&snapshot.adjacency())?;
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let n = hat.rows();
    let mut out = hat;
    for i in 0..n {
        for j in 0..n {
            let v = out.get(i, j);
            if v != 0.0 {
                out.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    Ok(out)
}

const X_MAGIC: &[u8; 8] = b"GLADXMAT";

fn snapshot_paths(dir: &Path, t: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("window_{t:05}.json")),
        dir.join(format!("window_{t:05}.x.bin")),
    )
}

/// Writes `window_{t}.json` plus the `window_{t}.x.bin` attribute sidecar.
pub fn save_snapshot(dir: &Path, snapshot: &GraphSnapshot) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let (json_path, x_path) = snapshot_paths(dir, snapshot.t);
    let json = serde_json::to_string_pretty(snapshot)
        .map_err(|e| Error::data(format!("serializing snapshot {}: {e}", snapshot.t)))?;
    std::fs::write(&json_path, json)
        .map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
    let mut out = Vec::new();
    crate::numeric::io::write_matrix(&mut out, X_MAGIC, &snapshot.x)?;
    std::fs::write(&x_path, out)
        .map_err(|e| Error::io(format!("writing {}", x_path.display()), e))
}

/// Loads one snapshot and validates its shape invariants.
pub fn load_snapshot(dir: &Path, t: usize) -> Result<GraphSnapshot> {
    let (json_path, x_path) = snapshot_paths(dir, t);
    let json = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(format!("reading {}", json_path.display()), e))?;
    let mut snapshot: GraphSnapshot = serde_json::from_str(&json)
        .map_err(|e| Error::data(format!("malformed snapshot {}: {e}", json_path.display())))?;
    let bytes = std::fs::read(&x_path)
        .map_err(|e| Error::io(format!("reading {}", x_path.display()), e))?;
    snapshot.x = crate::numeric::io::read_matrix(&mut bytes.as_slice(), X_MAGIC)?;
    validate_snapshot(&snapshot)
        .map_err(|e| Error::data(format!("{}: {e}", json_path.display())))?;
    Ok(snapshot)
}

/// Loads every `window_*.json` under `dir`, ordered by window index.
///
/// # Errors
/// [`Error::Data`] when the directory holds no snapshots or indices are
/// not the contiguous range 0..n.
pub fn load_snapshots(dir: &Path) -> Result<Vec<GraphSnapshot>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut indices: Vec<usize> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("window_").and_then(|s| s.strip_suffix(".json")) {
            let t = stem.parse::<usize>().map_err(|_| {
                Error::data(format!("unparsable snapshot file name {name:?}"))
            })?;
            indices.push(t);
        }
    }
    if indices.is_empty() {
        return Err(Error::data(format!(
            "no window_*.json snapshots in {}",
            dir.display()
        )));
    }
    indices.sort_unstable();
    for (expect, &got) in indices.iter().enumerate() {
        if expect != got {
            return Err(Error::data(format!(
                "snapshot indices must cover 0..{} contiguously, missing {expect}",
                indices.len()
            )));
        }
    }
    indices.into_iter().map(|t| load_snapshot(dir, t)).collect()
}

fn validate_snapshot(snapshot: &GraphSnapshot) -> Result<()> {
    let n = snapshot.nodes.len();
    if snapshot.x.rows() != n {
        return Err(Error::data(format!(
            "attribute matrix has {} rows for {} nodes",
            snapshot.x.rows(),
            n
        )));
    }
    for e in &snapshot.edges {
        if e.0 >= e.1 || e.1 >= n {
            return Err(Error::data(format!(
                "edge ({}, {}) out of order or out of range for {n} nodes",
                e.0, e.1
            )));
        }
        if e.2 == 0 {
            return Err(Error::data(format!("edge ({}, {}) has zero weight", e.0, e.1)));
        }
        if snapshot.nodes[e.0].kind == snapshot.nodes[e.1].kind {
            return Err(Error::data(format!(
                "edge ({}, {}) joins two {:?} nodes; snapshots are bipartite",
                e.0, e.1, snapshot.nodes[e.0].kind
            )));
        }
    }
    if let Some(labels) = &snapshot.edge_labels {
        if labels.len() != snapshot.edges.len() {
            return Err(Error::data(format!(
                "{} edge labels for {} edges",
                labels.len(),
                snapshot.edges.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::NodeKind;
    use crate::fields::{FieldMention, FieldType, MentionScore};
    use crate::ingest::LogRecord;

    fn record(msg: &str, label: RecordLabel) -> LogRecord {
        LogRecord {
            raw_text: msg.to_string(),
            timestamp: 0,
            source_id: String::new(),
            label,
        }
    }

    fn mention(span: (usize, usize), text: &str, ft: FieldType) -> FieldMention {
        FieldMention {
            span,
            text: text.to_string(),
            field_type: ft,
            score: MentionScore::RuleMax,
        }
    }

    fn window_of(records: Vec<LogRecord>) -> LogWindow {
        LogWindow {
            window_index: 0,
            start_ms: 0,
            end_ms: 60_000,
            records,
        }
    }

    fn parsed(record: LogRecord, template_id: &str, mentions: Vec<FieldMention>) -> ParsedLog {
        ParsedLog {
            record,
            template_id: template_id.to_string(),
            mentions,
        }
    }

    fn embedder() -> Embedder {
        Embedder::hash(16).unwrap()
    }

    fn template_map(entries: &[(&str, &str)]) -> HashMap<String, String> {
        entries
            .iter()
            .map(|(id, text)| (id.to_string(), text.to_string()))
            .collect()
    }

    #[test]
    fn one_log_with_two_fields_makes_a_three_node_star() {
        let rec = record("login root from 10.0.0.1", RecordLabel::Normal);
        let window = window_of(vec![rec.clone()]);
        let logs = vec![parsed(
            rec,
            "t0",
            vec![
                mention((1, 2), "root", FieldType::UserName),
                mention((3, 4), "10.0.0.1", FieldType::Ip),
            ],
        )];
        let templates = template_map(&[("t0", "login <*> from <*>")]);
        let snap = build_snapshot(&window, &logs, &templates, &embedder()).unwrap();
        assert_eq!(snap.node_count(), 3);
        assert_eq!(snap.edges.len(), 2);
        assert!(snap.edges.iter().all(|e| e.weight() == 1));
        assert_eq!(snap.nodes[0].kind, NodeKind::Event);
    }

    #[test]
    fn repeated_incidences_accumulate_edge_weight() {
        // 28 logs of one template all mentioning the same user collapse to
        // a single weight-28 edge.
        let mut records = Vec::new();
        let mut logs = Vec::new();
        for _ in 0..28 {
            let rec = record("request by keven", RecordLabel::Normal);
            records.push(rec.clone());
            logs.push(parsed(
                rec,
                "f49657b2",
                vec![mention((2, 3), "keven", FieldType::UserName)],
            ));
        }
        let templates = template_map(&[("f49657b2", "request by <*>")]);
        let snap = build_snapshot(&window_of(records), &logs, &templates, &embedder()).unwrap();
        assert_eq!(snap.node_count(), 2);
        assert_eq!(snap.edges, vec![Edge(0, 1, 28)]);
        assert_eq!(snap.total_weight(), 28);
    }

    #[test]
    fn empty_window_builds_an_empty_snapshot() {
        let snap =
            build_snapshot(&window_of(vec![]), &[], &template_map(&[]), &embedder()).unwrap();
        assert_eq!(snap.node_count(), 0);
        assert!(snap.edges.is_empty());
    }

    #[test]
    fn node_order_is_events_by_id_then_fields_by_type_and_text() {
        let r1 = record("b", RecordLabel::Normal);
        let r2 = record("a", RecordLabel::Normal);
        let window = window_of(vec![r1.clone(), r2.clone()]);
        let logs = vec![
            parsed(r1, "zz", vec![mention((0, 1), "10.0.0.9", FieldType::Ip)]),
            parsed(
                r2,
                "aa",
                vec![
                    mention((0, 1), "worker-1", FieldType::Service),
                    mention((0, 1), "10.0.0.1", FieldType::Ip),
                ],
            ),
        ];
        let templates = template_map(&[("zz", "b"), ("aa", "a")]);
        let snap = build_snapshot(&window, &logs, &templates, &embedder()).unwrap();
        let texts: Vec<&str> = snap.nodes.iter().map(|k| k.text.as_str()).collect();
        // Events by template id (aa < zz), then ip fields by text, then the
        // service field (ip precedes service in type order).
        assert_eq!(texts, vec!["a", "b", "10.0.0.1", "10.0.0.9", "worker-1"]);
        let rebuilt = build_snapshot(&window, &logs, &templates, &embedder()).unwrap();
        assert_eq!(snap.nodes, rebuilt.nodes);
        assert_eq!(snap.edges, rebuilt.edges);
        assert_eq!(snap.x.as_slice(), rebuilt.x.as_slice());
    }

    #[test]
    fn missing_template_id_is_a_data_error() {
        let rec = record("x", RecordLabel::Normal);
        let window = window_of(vec![rec.clone()]);
        let logs = vec![parsed(rec, "absent", vec![])];
        let err = build_snapshot(&window, &logs, &template_map(&[]), &embedder()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("absent"));
    }

    #[test]
    fn self_loops_on_an_isolated_node() {
        let a = Matrix::zeros(1, 1);
        let (hat, deg) = with_self_loops(&a).unwrap();
        assert_eq!(hat.as_slice(), &[1.0]);
        assert_eq!(deg, vec![1.0]);
    }

    #[test]
    fn self_loops_on_a_weighted_pair() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 1, 2.0);
        a.set(1, 0, 2.0);
        let (_, deg) = with_self_loops(&a).unwrap();
        assert_eq!(deg, vec![3.0, 3.0]);
    }

    #[test]
    fn self_loops_on_a_three_node_path() {
        let mut a = Matrix::zeros(3, 3);
        for (i, j) in [(0, 1), (1, 2)] {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        let (_, deg) = with_self_loops(&a).unwrap();
        assert_eq!(deg, vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn normalized_adjacency_of_the_path_matches_hand_values() {
        let rec = record("x", RecordLabel::Normal);
        let window = window_of(vec![rec.clone(), rec.clone()]);
        // Path event–field–event: two templates sharing one field.
        let logs = vec![
            parsed(rec.clone(), "a", vec![mention((0, 1), "root", FieldType::UserName)]),
            parsed(rec, "b", vec![mention((0, 1), "root", FieldType::UserName)]),
        ];
        let templates = template_map(&[("a", "ta"), ("b", "tb")]);
        let snap = build_snapshot(&window, &logs, &templates, &embedder()).unwrap();
        // Nodes: events ta, tb then field root; edges (0,2) and (1,2).
        let norm = normalized_adjacency(&snap).unwrap();
        let s6 = 1.0 / 6.0f64.sqrt();
        let expect = [
            [0.5, 0.0, s6],
            [0.0, 0.5, s6],
            [s6, s6, 1.0 / 3.0],
        ];
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((norm.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unlabeled_windows_get_no_edge_labels() {
        let rec = record("x", RecordLabel::Unlabeled);
        let window = window_of(vec![rec.clone()]);
        let logs = vec![parsed(rec, "a", vec![mention((0, 1), "root", FieldType::UserName)])];
        let snap =
            build_snapshot(&window, &logs, &template_map(&[("a", "ta")]), &embedder()).unwrap();
        assert!(snap.edge_labels.is_none());
        assert!(snap.window_label.is_none());
    }

    #[test]
    fn all_normal_records_label_every_edge_normal() {
        let rec = record("x", RecordLabel::Normal);
        let window = window_of(vec![rec.clone()]);
        let logs = vec![parsed(rec, "a", vec![mention((0, 1), "root", FieldType::UserName)])];
        let snap =
            build_snapshot(&window, &logs, &template_map(&[("a", "ta")]), &embedder()).unwrap();
        assert_eq!(snap.edge_labels, Some(vec![EdgeLabel::Normal]));
        assert_eq!(snap.window_label, Some(WindowLabel::Normal));
    }

    #[test]
    fn one_anomalous_contributor_taints_its_edge() {
        let r0 = record("x", RecordLabel::Normal);
        let r1 = record("x", RecordLabel::Normal);
        let r2 = record("x", RecordLabel::Anomalous);
        let window = window_of(vec![r0.clone(), r1.clone(), r2.clone()]);
        let m = || mention((0, 1), "root", FieldType::UserName);
        let logs = vec![
            parsed(r0, "a", vec![m()]),
            parsed(r1, "a", vec![m()]),
            parsed(r2, "a", vec![m()]),
        ];
        let snap =
            build_snapshot(&window, &logs, &template_map(&[("a", "ta")]), &embedder()).unwrap();
        assert_eq!(snap.edges.len(), 1);
        assert_eq!(snap.edge_labels, Some(vec![EdgeLabel::Anomalous]));
    }

    #[test]
    fn labels_respect_contributor_scoping() {
        // Two edges share the event node; only the edge whose log is
        // anomalous is labeled anomalous.
        let r0 = record("x", RecordLabel::Normal);
        let r1 = record("x", RecordLabel::Anomalous);
        let window = window_of(vec![r0.clone(), r1.clone()]);
        let logs = vec![
            parsed(r0, "a", vec![mention((0, 1), "alice", FieldType::UserName)]),
            parsed(r1, "a", vec![mention((0, 1), "mallory", FieldType::UserName)]),
        ];
        let snap =
            build_snapshot(&window, &logs, &template_map(&[("a", "ta")]), &embedder()).unwrap();
        assert_eq!(snap.edges.len(), 2);
        let labels = snap.edge_labels.as_ref().unwrap();
        let by_field: Vec<(&str, EdgeLabel)> = snap
            .edges
            .iter()
            .zip(labels)
            .map(|(e, l)| (snap.nodes[e.j()].text.as_str(), *l))
            .collect();
        assert!(by_field.contains(&("alice", EdgeLabel::Normal)));
        assert!(by_field.contains(&("mallory", EdgeLabel::Anomalous)));
    }

    #[test]
    fn snapshots_round_trip_through_disk() {
        let rec = record("x", RecordLabel::Anomalous);
        let window = window_of(vec![rec.clone()]);
        let logs = vec![parsed(rec, "a", vec![mention((0, 1), "root", FieldType::UserName)])];
        let snap =
            build_snapshot(&window, &logs, &template_map(&[("a", "ta")]), &embedder()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_snapshot(dir.path(), &snap).unwrap();
        let back = load_snapshot(dir.path(), 0).unwrap();
        assert_eq!(back.t, snap.t);
        assert_eq!(back.nodes, snap.nodes);
        assert_eq!(back.edges, snap.edges);
        assert_eq!(back.edge_labels, snap.edge_labels);
        assert_eq!(back.window_label, snap.window_label);
        assert_eq!((back.start_ms, back.end_ms), (snap.start_ms, snap.end_ms));
        assert_eq!(back.x.as_slice(), snap.x.as_slice());
    }

    #[test]
    fn load_snapshots_requires_contiguous_indices() {
        let dir = tempfile::tempdir().unwrap();
        let snap =
            build_snapshot(&window_of(vec![]), &[], &template_map(&[]), &embedder()).unwrap();
        let mut snap = snap;
        snap.t = 1; // gap: no window 0
        save_snapshot(dir.path(), &snap).unwrap();
        let err = load_snapshots(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("missing 0"));
    }

    #[test]
    fn corrupt_snapshot_json_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("window_00000.json"), "{not json").unwrap();
        std::fs::write(dir.path().join("window_00000.x.bin"), b"junk").unwrap();
        let err = load_snapshot(dir.path(), 0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn non_bipartite_edges_are_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let json = serde_json::json!({
            "t": 0,
            "start_ms": 0,
            "end_ms": 1,
            "nodes": [
                {"kind": "event", "text": "ta"},
                {"kind": "event", "text": "tb"},
            ],
            "edges": [[0, 1, 1]],
        });
        std::fs::write(dir.path().join("window_00000.json"), json.to_string()).unwrap();
        let mut buf = Vec::new();
        crate::numeric::io::write_matrix(&mut buf, X_MAGIC, &Matrix::zeros(2, 8)).unwrap();
        std::fs::write(dir.path().join("window_00000.x.bin"), buf).unwrap();
        let err = load_snapshot(dir.path(), 0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("bipartite"));
    }

    proptest::proptest! {
        /// Random windows always yield bipartite snapshots whose self-loop
        /// degree sum is 2·Σw + n.
        #[test]
        fn snapshots_are_bipartite_with_consistent_degrees(
            layout in proptest::collection::vec((0usize..3, proptest::collection::vec((0usize..4, 0usize..3), 0..4)), 0..6),
        ) {
            let templates = template_map(&[("t0", "e zero"), ("t1", "e one"), ("t2", "e two")]);
            let users = ["ann", "bob", "cal", "dee"];
            let types = [FieldType::UserName, FieldType::Service, FieldType::Session];
            let mut records = Vec::new();
            let mut logs = Vec::new();
            for (tpl, fields) in &layout {
                let rec = record("m", RecordLabel::Normal);
                records.push(rec.clone());
                let mentions: Vec<FieldMention> = fields
                    .iter()
                    .map(|&(u, ty)| mention((0, 1), users[u], types[ty]))
                    .collect();
                logs.push(parsed(rec, &format!("t{tpl}"), mentions));
            }
            let snap = build_snapshot(&window_of(records), &logs, &templates, &embedder()).unwrap();
            for e in &snap.edges {
                proptest::prop_assert!(snap.nodes[e.i()].kind != snap.nodes[e.j()].kind);
            }
            let (_, deg) = with_self_loops(&snap.adjacency()).unwrap();
            let total: f64 = deg.iter().sum();
            let expect = 2.0 * snap.total_weight() as f64 + snap.node_count() as f64;
            proptest::prop_assert!((total - expect).abs() < 1e-9);
            let incidences: u64 = logs.iter().map(|l| l.mentions.len() as u64).sum();
            proptest::prop_assert_eq!(snap.total_weight(), incidences);
        }
    }
}
