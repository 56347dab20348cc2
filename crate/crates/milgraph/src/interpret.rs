//! Instance-level explanations: which instances a trained model assigns to
//! which cluster (or attends to), exported as PGM heatmaps and CSV.

use crate::error::{MilError, Result};
use crate::graph::BagGraph;
use crate::matrix::Matrix;
use crate::model::{argmax_row, forward_eval, ModelConfig, ModelParams, PoolingVariant};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationRecord {
    pub bag_id: String,
    pub true_label: usize,
    pub predicted: usize,
    /// C x K scores in [0, 1]: per-cluster soft assignments over instances,
    /// or a single row of attention weights.
    pub scores: Matrix,
    /// Pre-softmax cluster scores (K x C); only the clustering variant has
    /// them.
    pub raw_logits: Option<Matrix>,
}

pub fn collect_explanations(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &[BagGraph],
) -> Result<Vec<ExplanationRecord>> {
    graphs
        .iter()
        .map(|g| {
            let mut tape = Tape::new();
            let out = forward_eval(&mut tape, params, cfg, g)?;
            let predicted = argmax_row(tape.value(out.pred1).row(0));
            let (scores, raw_logits) = match cfg.pooling {
                PoolingVariant::DiffPool => {
                    let s = tape.value(out.assignment.expect("assignment"));
                    let logits = tape.value(out.cluster_logits.expect("cluster logits"));
                    (s.transpose(), Some(logits.clone()))
                }
                PoolingVariant::Attention => {
                    (tape.value(out.alpha.expect("alpha")).clone(), None)
                }
            };
            Ok(ExplanationRecord {
                bag_id: g.id.clone(),
                true_label: g.label,
                predicted,
                scores,
                raw_logits,
            })
        })
        .collect()
}

/// Render scores as a plain-text PGM (P2), one image row per cluster and one
/// column per instance; value v maps to round(v * 255). With `stretch` the
/// scores are min-max rescaled to the full range first (a constant image maps
/// to 0).
pub fn heatmap_pgm(scores: &Matrix, stretch: bool) -> Result<String> {
    if scores.len() == 0 {
        return Err(MilError::Data("empty score matrix".into()));
    }
    let mut vals = scores.clone();
    if stretch {
        let lo = vals.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        vals = vals.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    }
    for &v in vals.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(MilError::Data(format!(
                "heatmap value {v} outside [0, 1]; use stretch for raw scores"
            )));
        }
    }
    let mut out = format!("P2\n{} {}\n255\n", vals.cols(), vals.rows());
    for r in 0..vals.rows() {
        let line: Vec<String> = vals
            .row(r)
            .iter()
            .map(|&v| format!("{}", (v * 255.0).round() as u32))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Long-form CSV of explanation scores, exact enough to roundtrip.
pub fn explanations_csv(records: &[ExplanationRecord]) -> String {
    let mut out = String::from("bag_id,instance_index,cluster_index,value\n");
    for rec in records {
        for c in 0..rec.scores.rows() {
            for k in 0..rec.scores.cols() {
                out.push_str(&format!("{},{},{},{}\n", rec.bag_id, k, c, rec.scores.get(c, k)));
            }
        }
    }
    out
}

/// Parse the CSV written by [`explanations_csv`] back into per-bag matrices
/// (bag order preserved).
pub fn parse_explanations_csv(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("bag_id,instance_index,cluster_index,value") => {}
        other => {
            return Err(MilError::Data(format!(
                "bad explanation CSV header: {other:?}"
            )))
        }
    }
    struct Acc {
        entries: Vec<(usize, usize, f64)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_bag: std::collections::HashMap<String, Acc> = std::collections::HashMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(MilError::Data(format!("line {}: expected 4 fields", i + 2)));
        }
        let k: usize = fields[1]
            .parse()
            .map_err(|_| MilError::Data(format!("line {}: bad instance index", i + 2)))?;
        let c: usize = fields[2]
            .parse()
            .map_err(|_| MilError::Data(format!("line {}: bad cluster index", i + 2)))?;
        let v: f64 = fields[3]
            .parse()
            .map_err(|_| MilError::Data(format!("line {}: bad value", i + 2)))?;
        let id = fields[0].to_string();
        if !by_bag.contains_key(&id) {
            order.push(id.clone());
            by_bag.insert(id.clone(), Acc { entries: Vec::new() });
        }
        by_bag.get_mut(&id).unwrap().entries.push((c, k, v));
    }
    order
        .into_iter()
        .map(|id| {
            let acc = by_bag.remove(&id).unwrap();
            let rows = acc.entries.iter().map(|e| e.0).max().unwrap() + 1;
            let cols = acc.entries.iter().map(|e| e.1).max().unwrap() + 1;
            let mut m = Matrix::zeros(rows, cols);
            for (c, k, v) in acc.entries {
                m.set(c, k, v);
            }
            Ok((id, m))
        })
        .collect()
}
