//! Dataset ingestion: canonical CSV and svmlight-style bag files, feature
//! normalization, and stratified cross-validation fold plans.
//!
//! Both on-disk formats are documented in `docs/formats.md`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::matrix::Matrix;

/// One labeled set of instance feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    /// Class index; 0 = negative, 1 = positive.
    pub label: usize,
    /// KxD instance features, file order preserved.
    pub instances: Matrix,
    /// Optional ground-truth instance labels (text datasets provide them).
    pub instance_labels: Option<Vec<usize>>,
}

impl Bag {
    pub fn num_instances(&self) -> usize {
        self.instances.rows()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub bags: Vec<Bag>,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl Dataset {
    pub fn from_bags(name: impl Into<String>, bags: Vec<Bag>) -> Result<Self> {
        let name = name.into();
        if bags.is_empty() {
            return Err(MilError::Data(format!("dataset {name}: no bags")));
        }
        let feature_dim = bags[0].instances.cols();
        let mut seen = HashMap::new();
        let mut max_label = 0usize;
        for bag in &bags {
            if bag.instances.cols() != feature_dim {
                return Err(MilError::Data(format!(
                    "bag {}: feature dim {} does not match dataset dim {}",
                    bag.id,
                    bag.instances.cols(),
                    feature_dim
                )));
            }
            if bag.num_instances() == 0 {
                return Err(MilError::Data(format!("bag {}: empty bag", bag.id)));
            }
            if seen.insert(bag.id.clone(), ()).is_some() {
                return Err(MilError::Data(format!("duplicate bag id {}", bag.id)));
            }
            max_label = max_label.max(bag.label);
        }
        let class_count = max_label + 1;
        for class in 0..class_count {
            if !bags.iter().any(|b| b.label == class) {
                return Err(MilError::Data(format!(
                    "class labels are not contiguous: class {class} has no bags"
                )));
            }
        }
        Ok(Dataset {
            name,
            bags,
            feature_dim,
            class_count,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for bag in &self.bags {
            counts[bag.label] += 1;
        }
        counts
    }

    pub fn total_instances(&self) -> usize {
        self.bags.iter().map(Bag::num_instances).sum()
    }
}

fn path_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Parse the canonical CSV format: header `bag_id,label,f1,..,fD` with an
/// optional trailing `instance_label` column, one instance per row.
pub fn parse_canonical_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_canonical_csv_str(&text, &path.to_string_lossy(), path_stem(path))
}

pub fn parse_canonical_csv_str(text: &str, path: &str, name: String) -> Result<Dataset> {
    let err = |line: usize, msg: String| MilError::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file, header row required".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "bag_id" || cols[1] != "label" {
        return Err(err(1, format!("expected header `bag_id,label,f1,..`, got `{header}`")));
    }
    let has_instance_label = cols.last() == Some(&"instance_label");
    let dim = cols.len() - 2 - usize::from(has_instance_label);
    if dim == 0 {
        return Err(err(1, "header declares zero feature columns".into()));
    }
    for (i, c) in cols[2..2 + dim].iter().enumerate() {
        let expected = format!("f{}", i + 1);
        if *c != expected {
            return Err(err(1, format!("feature column {} named `{c}`, expected `{expected}`", i + 3)));
        }
    }

    struct Acc {
        label: usize,
        rows: Vec<f64>,
        inst_labels: Vec<usize>,
        count: usize,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Acc> = HashMap::new();

    for (lineno0, line) in lines {
        let lineno = lineno0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(err(
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let bag_id = fields[0].to_string();
        let label: usize = fields[1]
            .parse()
            .map_err(|_| err(lineno, format!("non-numeric label `{}`", fields[1])))?;
        let mut feats = Vec::with_capacity(dim);
        for f in &fields[2..2 + dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| err(lineno, format!("non-numeric feature `{f}`")))?;
            feats.push(v);
        }
        let inst_label = if has_instance_label {
            Some(
                fields[cols.len() - 1]
                    .parse::<usize>()
                    .map_err(|_| err(lineno, format!("non-numeric instance_label `{}`", fields[cols.len() - 1])))?,
            )
        } else {
            None
        };
        let acc = groups.entry(bag_id.clone()).or_insert_with(|| {
            order.push(bag_id.clone());
            Acc {
                label,
                rows: Vec::new(),
                inst_labels: Vec::new(),
                count: 0,
            }
        });
        if acc.label != label {
            return Err(err(
                lineno,
                format!(
                    "bag {bag_id} has conflicting labels {} and {label}",
                    acc.label
                ),
            ));
        }
        acc.rows.extend_from_slice(&feats);
        if let Some(il) = inst_label {
            acc.inst_labels.push(il);
        }
        acc.count += 1;
    }

    let mut bags = Vec::with_capacity(order.len());
    for id in order {
        let acc = groups.remove(&id).expect("grouped");
        let instances = Matrix::from_vec(acc.count, dim, acc.rows)?;
        bags.push(Bag {
            id,
            label: acc.label,
            instances,
            instance_labels: if has_instance_label {
                Some(acc.inst_labels)
            } else {
                None
            },
        });
    }
    Dataset::from_bags(name, bags)
}

/// Serialize to canonical CSV. Features use shortest-roundtrip formatting, so
/// reparsing reproduces the values bit for bit.
pub fn write_canonical_csv(dataset: &Dataset) -> String {
    let has_inst = dataset.bags.iter().all(|b| b.instance_labels.is_some());
    let mut out = String::from("bag_id,label");
    for i in 1..=dataset.feature_dim {
        let _ = write!(out, ",f{i}");
    }
    if has_inst {
        out.push_str(",instance_label");
    }
    out.push('\n');
    for bag in &dataset.bags {
        for r in 0..bag.num_instances() {
            let _ = write!(out, "{},{}", bag.id, bag.label);
            for v in bag.instances.row(r) {
                let _ = write!(out, ",{v}");
            }
            if has_inst {
                let _ = write!(out, ",{}", bag.instance_labels.as_ref().unwrap()[r]);
            }
            out.push('\n');
        }
    }
    out
}

/// Parse svmlight-style bag files: `label bag_id index:value ...` per
/// instance, 1-based sparse indices, strictly increasing within a line.
/// Missing indices are zero; D is the maximum index seen in the file.
/// Labels -1/0 map to class 0, positive labels to class 1.
pub fn parse_svmlight_bags(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_svmlight_bags_str(&text, &path.to_string_lossy(), path_stem(path))
}

pub fn parse_svmlight_bags_str(text: &str, path: &str, name: String) -> Result<Dataset> {
    let err = |line: usize, msg: String| MilError::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    struct Line {
        lineno: usize,
        bag_id: String,
        label: usize,
        feats: Vec<(usize, f64)>,
    }
    let mut parsed: Vec<Line> = Vec::new();
    let mut max_index = 0usize;
    for (lineno0, line) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().ok_or_else(|| err(lineno, "missing label".into()))?;
        let raw_label: i64 = label_tok
            .parse()
            .map_err(|_| err(lineno, format!("non-numeric label `{label_tok}`")))?;
        let label = usize::from(raw_label > 0);
        let bag_id = tokens
            .next()
            .ok_or_else(|| err(lineno, "missing bag id".into()))?
            .to_string();
        let mut feats = Vec::new();
        let mut last_index = 0usize;
        for tok in tokens {
            let (idx_s, val_s) = tok
                .split_once(':')
                .ok_or_else(|| err(lineno, format!("malformed feature `{tok}`, expected index:value")))?;
            let idx: usize = idx_s
                .parse()
                .map_err(|_| err(lineno, format!("non-numeric feature index `{idx_s}`")))?;
            if idx == 0 {
                return Err(err(lineno, "feature indices are 1-based".into()));
            }
            if idx <= last_index {
                return Err(err(
                    lineno,
                    format!("non-increasing feature index {idx} after {last_index}"),
                ));
            }
            let val: f64 = val_s
                .parse()
                .map_err(|_| err(lineno, format!("non-numeric feature value `{val_s}`")))?;
            feats.push((idx, val));
            last_index = idx;
            max_index = max_index.max(idx);
        }
        parsed.push(Line {
            lineno,
            bag_id,
            label,
            feats,
        });
    }
    if parsed.is_empty() {
        return Err(err(1, "no instances in file".into()));
    }
    let dim = max_index.max(1);

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (usize, Vec<f64>, usize)> = HashMap::new();
    for line in &parsed {
        let mut dense = vec![0.0; dim];
        for &(idx, val) in &line.feats {
            dense[idx - 1] = val;
        }
        let entry = groups.entry(line.bag_id.clone()).or_insert_with(|| {
            order.push(line.bag_id.clone());
            (line.label, Vec::new(), 0)
        });
        if entry.0 != line.label {
            return Err(MilError::Parse {
                path: path.to_string(),
                line: line.lineno,
                msg: format!("bag {} has conflicting labels", line.bag_id),
            });
        }
        entry.1.extend_from_slice(&dense);
        entry.2 += 1;
    }
    let mut bags = Vec::with_capacity(order.len());
    for id in order {
        let (label, rows, count) = groups.remove(&id).expect("grouped");
        bags.push(Bag {
            id,
            label,
            instances: Matrix::from_vec(count, dim, rows)?,
            instance_labels: None,
        });
    }
    Dataset::from_bags(name, bags)
}

/// Per-dimension z-score statistics pooled over all training instances.
/// Dimensions with std below 1e-12 pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_normalizer(train_bags: &[&Bag]) -> Result<Normalizer> {
    let dim = train_bags
        .first()
        .map(|b| b.instances.cols())
        .ok_or_else(|| MilError::Data("fit_normalizer: no training bags".into()))?;
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for bag in train_bags {
        for r in 0..bag.num_instances() {
            for (m, v) in mean.iter_mut().zip(bag.instances.row(r)) {
                *m += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(MilError::Data("fit_normalizer: no training instances".into()));
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for bag in train_bags {
        for r in 0..bag.num_instances() {
            for ((s, v), m) in var.iter_mut().zip(bag.instances.row(r)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
    }
    let mut std = Vec::with_capacity(dim);
    for (j, s) in var.iter().enumerate() {
        let sd = (s / n as f64).sqrt();
        if sd < 1e-12 {
            // degenerate column: leave it untouched
            mean[j] = 0.0;
            std.push(1.0);
        } else {
            std.push(sd);
        }
    }
    Ok(Normalizer { mean, std })
}

pub fn apply_normalizer(norm: &Normalizer, bags: &[Bag]) -> Vec<Bag> {
    bags.iter()
        .map(|bag| {
            let mut instances = bag.instances.clone();
            for r in 0..instances.rows() {
                let row = instances.row_mut(r);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - norm.mean[j]) / norm.std[j];
                }
            }
            Bag {
                id: bag.id.clone(),
                label: bag.label,
                instances,
                instance_labels: bag.instance_labels.clone(),
            }
        })
        .collect()
}

/// A stratified assignment of bags to folds, deterministic in
/// (dataset order, fold count, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub fold_count: usize,
    /// Fold index per bag, aligned with the dataset's bag order.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Stratified fold assignment: within each class, bags are shuffled by a
/// ChaCha8 generator seeded with `seed` and dealt round-robin. The dealing
/// cursor carries over between classes so remainder bags spread evenly and
/// fold sizes differ by at most one.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(MilError::Config(format!("fold count must be >= 2, got {k}")));
    }
    let counts = dataset.class_counts();
    for (class, &c) in counts.iter().enumerate() {
        if c < k {
            return Err(MilError::Config(format!(
                "class {class} has {c} bags, fewer than {k} folds"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![usize::MAX; dataset.bags.len()];
    let mut cursor = 0usize;
    for class in 0..dataset.class_count {
        let mut idxs: Vec<usize> = dataset
            .bags
            .iter()
            .enumerate()
            .filter(|(_, b)| b.label == class)
            .map(|(i, _)| i)
            .collect();
        idxs.shuffle(&mut rng);
        for idx in idxs {
            assignments[idx] = cursor;
            cursor = (cursor + 1) % k;
        }
    }
    Ok(FoldPlan {
        seed,
        fold_count: k,
        assignments,
    })
}
