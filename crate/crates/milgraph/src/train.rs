//! Training loop (AdamW or SGD with cosine annealing), evaluation metrics,
//! and repeated stratified cross-validation.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_normalizer, fit_normalizer, Dataset, Normalizer};
use crate::error::{MilError, Result};
use crate::graph::{build_graph, BagGraph};
use crate::matrix::Matrix;
use crate::model::{
    argmax_row, bind_params, forward_batch, forward_eval, loss, Mode, ModelConfig, ModelParams,
};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(MilError::Config(format!(
                "unknown optimizer `{other}`, expected adamw or sgd"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn new() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 1e-3,
            optimizer: OptimizerKind::AdamW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MilError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(MilError::Config(
                "lr must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// Cosine annealing from `lr_max` at step 0 down to 0 at `total_steps`.
pub fn cosine_lr(lr_max: f64, step: usize, total_steps: usize) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    lr_max * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream of sub-seeds so that every (repeat, fold, epoch)
/// combination shuffles and initializes independently.
pub fn derive_seed(seed: u64, repeat: u64, fold: u64, epoch: u64) -> u64 {
    let mut h = mix64(seed);
    h = mix64(h ^ repeat);
    h = mix64(h ^ fold);
    mix64(h ^ epoch)
}

/// AdamW (decoupled weight decay) or plain SGD; the schedule supplies the
/// learning rate each step.
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ModelParams) -> Self {
        let shapes: Vec<Matrix> = params
            .trainable()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Optimizer {
            kind,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix], lr: f64) -> Result<()> {
        let mut tensors = params.trainable_mut();
        if tensors.len() != grads.len() {
            return Err(MilError::Training(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                tensors.len()
            )));
        }
        for g in grads {
            if !g.all_finite() {
                return Err(MilError::Training(
                    "non-finite gradient encountered, aborting".into(),
                ));
            }
        }
        self.t += 1;
        for (i, p) in tensors.iter_mut().enumerate() {
            let g = grads[i].data();
            let decay = 1.0 - lr * self.weight_decay;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g) {
                        *pv = *pv * decay - lr * gv;
                    }
                }
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Train one model on the given graphs. Returns the trained parameters and
/// the mean per-bag loss of each epoch. `repeat`/`fold` only feed the shuffle
/// seed stream, so standalone training can pass zeros.
pub fn train_one_model(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    graphs: &[BagGraph],
    repeat: u64,
    fold: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    tcfg.validate()?;
    if graphs.is_empty() {
        return Err(MilError::Training("no training graphs".into()));
    }
    let mut params = ModelParams::init(cfg)?;
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.weight_decay, &params);
    let n = graphs.len();
    let batches_per_epoch = n.div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..tcfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, repeat, fold, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&BagGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let outs = forward_batch(&mut tape, &mut params, &bound, cfg, &batch, Mode::Train)?;
            let mut total: Option<NodeId> = None;
            for out in &outs {
                let l = loss(&mut tape, out, out.label, cfg)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let sum = total.expect("non-empty batch");
            let mean = tape.scale(sum, 1.0 / batch.len() as f64);
            tape.backward(mean)?;
            loss_sum += tape.value(sum).get(0, 0);
            let grads: Vec<Matrix> = bound.flat.iter().map(|&id| tape.grad(id).clone()).collect();
            let lr = cosine_lr(tcfg.lr, step, total_steps);
            opt.step(&mut params, &grads, lr)?;
            step += 1;
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    if !params.all_finite() {
        return Err(MilError::Training("parameters diverged to non-finite".into()));
    }
    Ok((params, epoch_losses))
}

/// Eval-mode class predictions for each graph.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, graphs: &[BagGraph]) -> Result<Vec<usize>> {
    graphs
        .iter()
        .map(|g| {
            let mut tape = Tape::new();
            let out = forward_eval(&mut tape, params, cfg, g)?;
            Ok(argmax_row(tape.value(out.pred1).row(0)))
        })
        .collect()
}

/// Binary confusion counts; class 1 is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    pub r#fn: usize,
    pub tp: usize,
}

impl Confusion {
    pub fn add(&mut self, other: &Confusion) {
        self.tn += other.tn;
        self.fp += other.fp;
        self.r#fn += other.r#fn;
        self.tp += other.tp;
    }

    pub fn total(&self) -> usize {
        self.tn + self.fp + self.r#fn + self.tp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// F1 of the positive class; 0 when precision + recall is 0.
    pub f1: f64,
    pub confusion: Confusion,
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(MilError::Training(format!(
            "metrics need equal, non-empty prediction/label lists (got {}/{})",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    let mut correct = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            correct += 1;
        }
        match (y, p) {
            (0, 0) => c.tn += 1,
            (0, _) => c.fp += 1,
            (1, 1) => c.tp += 1,
            (1, _) => c.r#fn += 1,
            _ => {} // multi-class: confusion tracks the binary part only
        }
    }
    let accuracy = correct as f64 / predictions.len() as f64;
    let denom = 2 * c.tp + c.fp + c.r#fn;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    };
    Ok(Metrics {
        accuracy,
        f1,
        confusion: c,
    })
}

pub fn metrics_from_confusion(c: Confusion) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(MilError::Training("empty confusion matrix".into()));
    }
    let accuracy = (c.tn + c.tp) as f64 / c.total() as f64;
    let denom = 2 * c.tp + c.fp + c.r#fn;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    };
    Ok(Metrics {
        accuracy,
        f1,
        confusion: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl CvConfig {
    pub fn new() -> Self {
        CvConfig {
            folds: 10,
            repeats: 5,
            seed: 0,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(MilError::Config("folds must be >= 2".into()));
        }
        if self.repeats == 0 || self.jobs == 0 {
            return Err(MilError::Config("repeats and jobs must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for CvConfig {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub repeat: usize,
    pub fold: usize,
    pub test_bags: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: String,
    pub bags: usize,
    pub feature_dim: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub folds: Vec<FoldReport>,
    pub repeats: Vec<RepeatReport>,
    /// Mean and population std of the per-repeat accuracies.
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub pooled_confusion: Confusion,
}

impl CvReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One CSV row per fold.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("repeat,fold,test_bags,accuracy,f1,tn,fp,fn,tp\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                f.repeat,
                f.fold,
                f.test_bags,
                f.accuracy,
                f.f1,
                f.confusion.tn,
                f.confusion.fp,
                f.confusion.r#fn,
                f.confusion.tp
            ));
        }
        out
    }
}

struct FoldTask {
    repeat: usize,
    fold: usize,
}

fn run_fold(
    dataset: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    plan: &crate::data::FoldPlan,
    task: &FoldTask,
) -> Result<FoldReport> {
    let train_idx = plan.train_indices(task.fold);
    let test_idx = plan.fold_indices(task.fold);
    let train_bags: Vec<&crate::data::Bag> =
        train_idx.iter().map(|&i| &dataset.bags[i]).collect();

    // everything data-dependent is fitted on the training folds only
    let normalizer: Normalizer = fit_normalizer(&train_bags)?;
    let eta = cfg.eta.resolve(&train_bags)?;

    let prep = |idx: &[usize]| -> Result<Vec<BagGraph>> {
        idx.iter()
            .map(|&i| {
                let bag = apply_normalizer(&normalizer, std::slice::from_ref(&dataset.bags[i]))
                    .pop()
                    .expect("one bag in, one bag out");
                build_graph(&bag, eta, cfg.self_loops)
            })
            .collect()
    };
    let train_graphs = prep(&train_idx)?;
    let test_graphs = prep(&test_idx)?;

    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = derive_seed(cfg.seed, task.repeat as u64, task.fold as u64, u64::MAX);
    let (params, losses) =
        train_one_model(&fold_cfg, tcfg, &train_graphs, task.repeat as u64, task.fold as u64)?;

    let preds = evaluate(&params, &fold_cfg, &test_graphs)?;
    let labels: Vec<usize> = test_idx.iter().map(|&i| dataset.bags[i].label).collect();
    let m = compute_metrics(&preds, &labels)?;
    Ok(FoldReport {
        repeat: task.repeat,
        fold: task.fold,
        test_bags: test_idx.len(),
        accuracy: m.accuracy,
        f1: m.f1,
        confusion: m.confusion,
        final_train_loss: *losses.last().expect("at least one epoch"),
    })
}

/// Repeated stratified k-fold cross-validation. Fold jobs may run on several
/// threads (`cv.jobs`), but results are merged in (repeat, fold) order so the
/// report does not depend on scheduling.
pub fn run_cross_validation(
    dataset: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<CvReport> {
    cfg.validate()?;
    tcfg.validate()?;
    cv.validate()?;

    let mut tasks = Vec::new();
    let mut plans = Vec::new();
    for r in 0..cv.repeats {
        plans.push(crate::data::make_folds(
            dataset,
            cv.folds,
            cv.seed.wrapping_add(r as u64),
        )?);
        for f in 0..cv.folds {
            tasks.push(FoldTask { repeat: r, fold: f });
        }
    }

    let mut fold_reports: Vec<Option<FoldReport>> = (0..tasks.len()).map(|_| None).collect();
    if cv.jobs <= 1 {
        for (slot, task) in fold_reports.iter_mut().zip(&tasks) {
            *slot = Some(run_fold(dataset, cfg, tcfg, &plans[task.repeat], task)?);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<std::sync::Mutex<Option<Result<FoldReport>>>> =
            (0..tasks.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..cv.jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let task = &tasks[i];
                    let r = run_fold(dataset, cfg, tcfg, &plans[task.repeat], task);
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
        for (slot, cell) in fold_reports.iter_mut().zip(results) {
            *slot = Some(cell.into_inner().unwrap().expect("worker ran task")?);
        }
    }
    let folds: Vec<FoldReport> = fold_reports.into_iter().map(|f| f.expect("filled")).collect();

    let mut repeats = Vec::with_capacity(cv.repeats);
    let mut pooled = Confusion::default();
    for r in 0..cv.repeats {
        let mut c = Confusion::default();
        let mut correct = 0usize;
        let mut total = 0usize;
        for f in folds.iter().filter(|f| f.repeat == r) {
            c.add(&f.confusion);
            correct += (f.accuracy * f.test_bags as f64).round() as usize;
            total += f.test_bags;
        }
        pooled.add(&c);
        let m = metrics_from_confusion(c)?;
        repeats.push(RepeatReport {
            repeat: r,
            accuracy: correct as f64 / total as f64,
            f1: m.f1,
            confusion: c,
        });
    }
    let accs: Vec<f64> = repeats.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    let mean_f1 = repeats.iter().map(|r| r.f1).sum::<f64>() / repeats.len() as f64;

    Ok(CvReport {
        dataset: dataset.name.clone(),
        bags: dataset.bags.len(),
        feature_dim: dataset.feature_dim,
        model: cfg.clone(),
        train: tcfg.clone(),
        cv: cv.clone(),
        folds,
        repeats,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        mean_f1,
        pooled_confusion: pooled,
    })
}
