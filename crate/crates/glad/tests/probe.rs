//! Throwaway diagnostic for the criterion-7 investigation.

use glad::eval::split_sequences;
use glad::graph::load_snapshots;
use glad::model::{edge_score, load_model, temporal_encode};
use glad::train::{center_dist_sq, graph_repr};
use std::path::Path;

#[test]
#[ignore]
fn probe_history_effect() {
    let dir = Path::new("/tmp/c7/artifacts");
    let params = load_model(&dir.join("model.bin")).unwrap();
    let snapshots = load_snapshots(&dir.join("graphs")).unwrap();
    let split = split_sequences(&snapshots).unwrap();
    let n_train = split.train.len();
    let n_val = split.val.len();

    // Full-sequence encode: every window with its genuine history.
    let hs_full = temporal_encode(&snapshots, &params).unwrap();
    // Cold-start encode of the test split alone (current eval protocol).
    let hs_cold = temporal_encode(split.test, &params).unwrap();

    let dist = |h: &glad::numeric::Matrix| -> f64 {
        center_dist_sq(&graph_repr(h).unwrap(), &params.center).unwrap()
    };

    println!("radius_sq = {:.2}", params.radius_sq);
    let train_d: Vec<f64> = (0..n_train).map(|i| dist(&hs_full[i])).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "train dists (full encode): mean {:.1} min {:.1} max {:.1}",
        mean(&train_d),
        train_d.iter().cloned().fold(f64::INFINITY, f64::min),
        train_d.iter().cloned().fold(0.0, f64::max)
    );

    println!("test windows: t, label, dist_full, dist_cold");
    for (k, snap) in split.test.iter().enumerate() {
        let full = dist(&hs_full[n_train + n_val + k]);
        let cold = dist(&hs_cold[k]);
        let label = format!("{:?}", snap.window_label);
        if snap.window_label == Some(glad::ingest::WindowLabel::Anomalous) || k < 8 {
            println!("  t={} {:22} full={:8.1} cold={:8.1}", snap.t, label, full, cold);
        }
    }

    // Edge scores for anomalous edges and normal summary, both encodes.
    let mut rows: Vec<(usize, bool, f64, f64, u64)> = Vec::new();
    for (k, snap) in split.test.iter().enumerate() {
        let labels = snap.edge_labels.as_ref().unwrap();
        for (e, edge) in snap.edges.iter().enumerate() {
            let sf = edge_score(
                &hs_full[n_train + n_val + k],
                *edge,
                &params.w1,
                &params.w2,
                params.config.mu,
            )
            .unwrap();
            let sc = edge_score(&hs_cold[k], *edge, &params.w1, &params.w2, params.config.mu)
                .unwrap();
            rows.push((
                snap.t,
                labels[e] == glad::graph::EdgeLabel::Anomalous,
                sf,
                sc,
                edge.weight(),
            ));
        }
    }
    let anom: Vec<_> = rows.iter().filter(|r| r.1).collect();
    let norm: Vec<_> = rows.iter().filter(|r| !r.1).collect();
    println!("anomalous edges (t, w, full, cold):");
    for r in &anom {
        println!("  t={} w={} full={:.6} cold={:.6}", r.0, r.4, r.2, r.3);
    }
    let meanf = |v: &[&(usize, bool, f64, f64, u64)], f: fn(&(usize, bool, f64, f64, u64)) -> f64| {
        v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64
    };
    println!(
        "normal edges: n={} mean_full={:.6} mean_cold={:.6} max_full={:.6}",
        norm.len(),
        meanf(&norm, |r| r.2),
        meanf(&norm, |r| r.3),
        norm.iter().map(|r| r.2).fold(0.0, f64::max)
    );

    // AUC under each encode.
    let auc = |get: fn(&(usize, bool, f64, f64, u64)) -> f64, rows: &[(usize, bool, f64, f64, u64)]| {
        let mut pairs = 0.0;
        let mut wins = 0.0;
        for a in rows.iter().filter(|r| r.1) {
            for b in rows.iter().filter(|r| !r.1) {
                pairs += 1.0;
                if get(a) > get(b) {
                    wins += 1.0;
                } else if get(a) == get(b) {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    };
    println!("edge AUC full={:.4} cold={:.4}", auc(|r| r.2, &rows), auc(|r| r.3, &rows));
}
