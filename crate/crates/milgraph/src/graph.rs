//! Bag-to-graph conversion by thresholded pairwise Euclidean distance.

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{MilError, Result};
use crate::matrix::Matrix;

/// Edge threshold: an edge exists where the pairwise distance is strictly
/// below the threshold. `Infinite` yields the complete graph, `Value(0.0)`
/// the empty edge set. `Percentile(p)` resolves to the p-th percentile of
/// within-bag pairwise distances over the training bags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EtaSpec {
    Infinite,
    Value(f64),
    Percentile(f64),
}

impl EtaSpec {
    pub fn parse(s: &str) -> Result<EtaSpec> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(EtaSpec::Infinite);
        }
        if let Some(p) = t.strip_prefix('p').or_else(|| t.strip_prefix('P')) {
            let pct: f64 = p
                .parse()
                .map_err(|_| MilError::Config(format!("bad eta percentile `{s}`")))?;
            if !(0.0..=100.0).contains(&pct) {
                return Err(MilError::Config(format!("eta percentile {pct} out of [0,100]")));
            }
            return Ok(EtaSpec::Percentile(pct));
        }
        let v: f64 = t
            .parse()
            .map_err(|_| MilError::Config(format!("bad eta `{s}`, expected number, INF, or pNN")))?;
        if v < 0.0 {
            return Err(MilError::Config(format!("eta must be >= 0, got {v}")));
        }
        Ok(EtaSpec::Value(v))
    }

    /// Resolve percentile specs against a pool of within-bag pairwise
    /// distances; `Infinite`/`Value` pass through.
    pub fn resolve(&self, train_bags: &[&Bag]) -> Result<Eta> {
        match *self {
            EtaSpec::Infinite => Ok(Eta::Infinite),
            EtaSpec::Value(v) => Ok(Eta::Value(v)),
            EtaSpec::Percentile(p) => {
                let mut dists = Vec::new();
                for bag in train_bags {
                    let k = bag.num_instances();
                    for m in 0..k {
                        for n in (m + 1)..k {
                            dists.push(euclidean(bag.instances.row(m), bag.instances.row(n)));
                        }
                    }
                }
                if dists.is_empty() {
                    return Err(MilError::Data(
                        "eta percentile: no instance pairs in training bags".into(),
                    ));
                }
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let rank = (p / 100.0 * (dists.len() - 1) as f64).round() as usize;
                Ok(Eta::Value(dists[rank]))
            }
        }
    }
}

impl std::fmt::Display for EtaSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EtaSpec::Infinite => write!(f, "INF"),
            EtaSpec::Value(v) => write!(f, "{v}"),
            EtaSpec::Percentile(p) => write!(f, "p{p}"),
        }
    }
}

/// A resolved threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eta {
    Infinite,
    Value(f64),
}

/// Adjacency plus node features for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagGraph {
    pub id: String,
    pub label: usize,
    /// KxK symmetric 0/1 adjacency. No self-loops unless `self_loops` was set
    /// at build time: the aggregation step already includes the center node,
    /// so a self-loop would double-count it in the mean.
    pub adjacency: Matrix,
    /// KxD node features.
    pub features: Matrix,
}

impl BagGraph {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Eq-style construction: A_mn = 1 iff m != n and ||x_m - x_n|| < eta
/// (strict inequality; ties at exactly eta produce no edge).
pub fn build_graph(bag: &Bag, eta: Eta, self_loops: bool) -> Result<BagGraph> {
    let k = bag.num_instances();
    if k == 0 {
        return Err(MilError::Data(format!("bag {}: empty bag", bag.id)));
    }
    if let Eta::Value(v) = eta {
        if v < 0.0 {
            return Err(MilError::Config(format!("eta must be >= 0, got {v}")));
        }
    }
    let mut adjacency = Matrix::zeros(k, k);
    for m in 0..k {
        for n in (m + 1)..k {
            let connected = match eta {
                Eta::Infinite => true,
                Eta::Value(v) => euclidean(bag.instances.row(m), bag.instances.row(n)) < v,
            };
            if connected {
                adjacency.set(m, n, 1.0);
                adjacency.set(n, m, 1.0);
            }
        }
    }
    if self_loops {
        let with_edges = match eta {
            Eta::Infinite => true,
            Eta::Value(v) => v > 0.0,
        };
        if with_edges {
            for m in 0..k {
                adjacency.set(m, m, 1.0);
            }
        }
    }
    Ok(BagGraph {
        id: bag.id.clone(),
        label: bag.label,
        adjacency,
        features: bag.instances.clone(),
    })
}

/// Sorted neighbor index lists, one per node.
pub fn neighbor_lists(graph: &BagGraph) -> Vec<Vec<usize>> {
    let k = graph.num_nodes();
    (0..k)
        .map(|m| {
            (0..k)
                .filter(|&n| graph.adjacency.get(m, n) != 0.0 && n != m)
                .collect()
        })
        .collect()
}

/// Row-normalized propagation matrix over N(k) ∪ {k}: `rownorm(A ∨ I)`.
/// Each output row k averages the features of node k and its neighbors.
pub fn propagation_matrix(adjacency: &Matrix) -> Matrix {
    let k = adjacency.rows();
    let mut p = adjacency.clone();
    for m in 0..k {
        p.set(m, m, 1.0);
    }
    for m in 0..k {
        let deg: f64 = p.row(m).iter().sum();
        for v in p.row_mut(m) {
            *v /= deg;
        }
    }
    p
}
