//! Shared helpers for the integration suites: synthetic benchmark datasets
//! shaped like the published ones, plus finite-difference utilities.
//!
//! The original benchmark files (MUSK, animal, text, retinal-image bags) are
//! not redistributable here, so each suite builds a planted-signal surrogate
//! with the same bag counts and class balance. Set `MILGRAPH_DATA_DIR` to a
//! directory containing `musk1.csv`, `fox.csv`, `messidor.csv`, or
//! `sci_space.svm` in the documented formats to run against real data
//! instead.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use milgraph::data::{parse_canonical_csv, parse_svmlight_bags, Bag, Dataset};
use milgraph::matrix::Matrix;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub struct PlantedSpec {
    pub name: &'static str,
    pub n_pos: usize,
    pub n_neg: usize,
    pub dim: usize,
    pub bag_size: (usize, usize),
    pub informative: usize,
    /// mean shift applied to every instance of a positive bag
    pub bag_shift: f64,
    /// extra shift applied to a few witness instances of a positive bag
    pub witness_shift: f64,
    pub witnesses: usize,
    pub noise: f64,
    /// scale of a per-bag interference vector added with alternating signs
    /// to instance pairs; it cancels in the bag mean but not through a
    /// per-instance nonlinearity
    pub interference: f64,
}

/// Bags of Gaussian noise; positive bags carry a planted signal on the first
/// `informative` dimensions (a global mean shift, witness instances, or both).
pub fn planted_dataset(spec: &PlantedSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::new();
    let counts = [spec.n_neg, spec.n_pos];
    for label in 0..2usize {
        for i in 0..counts[label] {
            let k = rng.gen_range(spec.bag_size.0..=spec.bag_size.1);
            let witnesses: Vec<usize> = if label == 1 {
                (0..spec.witnesses.min(k)).collect()
            } else {
                Vec::new()
            };
            let style: Vec<f64> = (0..spec.dim)
                .map(|_| spec.interference * gauss(&mut rng))
                .collect();
            let paired = k - k % 2;
            let mut m = Matrix::zeros(k, spec.dim);
            for r in 0..k {
                for c in 0..spec.dim {
                    let mut v = spec.noise * gauss(&mut rng);
                    if r < paired {
                        v += if r % 2 == 0 { style[c] } else { -style[c] };
                    }
                    if c < spec.informative && label == 1 {
                        v += spec.bag_shift;
                        if witnesses.contains(&r) {
                            v += spec.witness_shift;
                        }
                    }
                    m.set(r, c, v);
                }
            }
            bags.push(Bag {
                id: format!("{}{}", if label == 1 { "p" } else { "n" }, i),
                label,
                instances: m,
                instance_labels: None,
            });
        }
    }
    Dataset::from_bags(spec.name, bags).unwrap()
}

/// Use a real benchmark file from MILGRAPH_DATA_DIR when present, otherwise
/// fall back to the surrogate. Returns the dataset and whether it is real.
pub fn load_or_synthesize(file: &str, synth: impl FnOnce() -> Dataset) -> (Dataset, bool) {
    if let Ok(dir) = std::env::var("MILGRAPH_DATA_DIR") {
        let path = std::path::Path::new(&dir).join(file);
        if path.exists() {
            let ds = if file.ends_with(".csv") {
                parse_canonical_csv(&path)
            } else {
                parse_svmlight_bags(&path)
            };
            match ds {
                Ok(ds) => return (ds, true),
                Err(e) => panic!("MILGRAPH_DATA_DIR set but {file} failed to parse: {e}"),
            }
        }
    }
    (synth(), false)
}

pub fn musk1_like() -> Dataset {
    planted_dataset(
        &PlantedSpec {
            name: "musk1-like",
            n_pos: 47,
            n_neg: 45,
            dim: 64,
            bag_size: (2, 8),
            informative: 8,
            bag_shift: 0.2,
            witness_shift: 2.5,
            witnesses: 2,
            noise: 1.0,
            interference: 0.0,
        },
        20260823,
    )
}

pub fn fox_like() -> Dataset {
    planted_dataset(
        &PlantedSpec {
            name: "fox-like",
            n_pos: 100,
            n_neg: 100,
            dim: 64,
            bag_size: (2, 10),
            informative: 6,
            bag_shift: 0.3,
            witness_shift: 0.9,
            witnesses: 1,
            noise: 1.0,
            interference: 0.0,
        },
        7031,
    )
}

pub fn messidor_like(n_pos: usize, n_neg: usize, seed: u64) -> Dataset {
    planted_dataset(
        &PlantedSpec {
            name: "messidor-like",
            n_pos,
            n_neg,
            dim: 64,
            bag_size: (10, 10),
            informative: 10,
            bag_shift: 0.5,
            witness_shift: 0.0,
            witnesses: 0,
            noise: 1.0,
            interference: 2.5,
        },
        seed,
    )
}

/// svmlight-format text of a planted text-like dataset (sparse positive
/// signal on a handful of vocabulary dimensions).
pub fn text_like_svmlight(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 200;
    let mut out = String::from("# synthetic text-task bags\n");
    for label in 0..2usize {
        for b in 0..50usize {
            let bag_id = label * 50 + b;
            let k = rng.gen_range(5..=10);
            for inst in 0..k {
                let y = if label == 1 { 1 } else { -1 };
                out.push_str(&format!("{y} {bag_id}"));
                // a few background terms per instance
                let mut idxs: Vec<usize> = Vec::new();
                while idxs.len() < 6 {
                    let i = rng.gen_range(1..=dim);
                    if !idxs.contains(&i) {
                        idxs.push(i);
                    }
                }
                // witness instances of positive bags hit the signal terms
                if label == 1 && inst < 3 {
                    for s in 1..=4usize {
                        if !idxs.contains(&s) {
                            idxs.push(s);
                        }
                    }
                }
                idxs.sort_unstable();
                for i in idxs {
                    let base: f64 = rng.gen_range(0.5..1.5);
                    let v = if label == 1 && i <= 4 { base + 1.5 } else { base };
                    out.push_str(&format!(" {i}:{v:.4}"));
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Central finite differences of `f` at `x0` for a single coordinate.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

pub fn assert_close_rel(analytic: f64, numeric: f64, tol: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    assert!(
        (analytic - numeric).abs() / denom < tol,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}
