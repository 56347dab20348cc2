//! Command-line front end: dataset conversion, training, cross-validation,
//! and instance-level explanations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use milgraph::data::{
    apply_normalizer, fit_normalizer, parse_canonical_csv, parse_svmlight_bags,
    write_canonical_csv, Bag, Dataset,
};
use milgraph::graph::{build_graph, BagGraph, EtaSpec};
use milgraph::interpret::{collect_explanations, explanations_csv, heatmap_pgm};
use milgraph::model::{
    Checkpoint, ClusterInput, DsPool, ModelConfig, PoolingVariant, CHECKPOINT_VERSION,
};
use milgraph::pooling::ReadoutMode;
use milgraph::train::{
    run_cross_validation, train_one_model, CvConfig, OptimizerKind, TrainConfig,
};
use milgraph::{MilError, Result};

#[derive(Parser)]
#[command(name = "milgraph", version, about = "Graph neural networks for multiple-instance learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a dataset to the canonical CSV format and print a summary
    Convert(ConvertArgs),
    /// Train a single model on the full dataset and save a checkpoint
    Train(TrainArgs),
    /// Repeated stratified k-fold cross-validation
    Crossval(CrossvalArgs),
    /// Export per-instance explanation heatmaps from a checkpoint
    Explain(ExplainArgs),
}

#[derive(Args)]
struct DataOpts {
    /// Input dataset file
    #[arg(long)]
    data: PathBuf,
    /// Input format: csv or svmlight (default: guess from the extension)
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Default, Clone)]
struct ModelOpts {
    /// Pooling variant: diffpool or attention
    #[arg(long)]
    pool: Option<String>,
    /// Edge threshold: a distance, INF, or pNN for a percentile of
    /// within-bag distances (resolved on training data)
    #[arg(long)]
    eta: Option<String>,
    /// Number of clusters for the pooling stage (1 or 2)
    #[arg(long)]
    clusters: Option<usize>,
    /// Readout over cluster embeddings: max or concat
    #[arg(long)]
    readout: Option<String>,
    /// Weight of the deep-supervision loss terms
    #[arg(long)]
    ds_weight: Option<f64>,
    /// Weight of the link-prediction regularizer
    #[arg(long)]
    lp_weight: Option<f64>,
    /// Add self-loops to bag graphs (finite nonzero eta only)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    self_loops: Option<bool>,
    /// Cluster head input: features or embeddings
    #[arg(long)]
    cluster_input: Option<String>,
    /// Pooling before the deep-supervision heads: max or mean
    #[arg(long)]
    ds_pool: Option<String>,
    /// RNG seed (falls back to MILGRAPH_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Optional key=value config file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Default, Clone)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// adamw or sgd
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Output path for the canonical CSV (omit to only print the summary)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Number of worker threads for fold jobs
    #[arg(long)]
    jobs: Option<usize>,
    /// Report output path (JSON); a per-fold CSV is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Trained model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated bag ids to explain (default: all)
    #[arg(long)]
    bags: Option<String>,
    /// Min-max stretch scores to the full gray range
    #[arg(long)]
    stretch: bool,
    /// Output directory for PGM heatmaps and the CSV
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Convert(a) => run_convert(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Crossval(a) => run_crossval(a),
        Cmd::Explain(a) => run_explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_dataset(opts: &DataOpts) -> Result<Dataset> {
    let format = match &opts.format {
        Some(f) => f.clone(),
        None => match opts.data.extension().and_then(|e| e.to_str()) {
            Some("csv") => "csv".to_string(),
            Some("svm") | Some("svmlight") => "svmlight".to_string(),
            _ => {
                return Err(MilError::Config(
                    "cannot guess format from extension; pass --format csv|svmlight".into(),
                ))
            }
        },
    };
    match format.as_str() {
        "csv" => parse_canonical_csv(&opts.data),
        "svmlight" => parse_svmlight_bags(&opts.data),
        other => Err(MilError::Config(format!(
            "unknown format `{other}`, expected csv or svmlight"
        ))),
    }
}

/// `key = value` file, one pair per line, `#` comments. Unknown keys are an
/// error so typos do not silently fall back to defaults.
fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    const KNOWN: &[&str] = &[
        "pool", "eta", "clusters", "readout", "ds_weight", "lp_weight", "self_loops",
        "cluster_input", "ds_pool", "seed", "epochs", "batch_size", "lr", "weight_decay",
        "optimizer", "folds", "repeats", "jobs",
    ];
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            MilError::Config(format!(
                "{}:{}: expected key = value",
                path.display(),
                i + 1
            ))
        })?;
        let k = k.trim().to_string();
        if !KNOWN.contains(&k.as_str()) {
            return Err(MilError::Config(format!(
                "{}:{}: unknown config key `{k}`",
                path.display(),
                i + 1
            )));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

fn cfg_get<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| MilError::Config(format!("config key `{key}`: bad value `{v}`"))),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("MILGRAPH_SEED") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| MilError::Config(format!("MILGRAPH_SEED: bad value `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn resolve_model_config(opts: &ModelOpts, feature_dim: usize, class_count: usize) -> Result<ModelConfig> {
    let file = match &opts.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let mut cfg = ModelConfig::new(feature_dim);
    cfg.class_count = class_count;
    if let Some(p) = opts.pool.clone().or_else(|| file.get("pool").cloned()) {
        cfg.pooling = PoolingVariant::parse(&p)?;
    }
    if let Some(e) = opts.eta.clone().or_else(|| file.get("eta").cloned()) {
        cfg.eta = EtaSpec::parse(&e)?;
    }
    if let Some(c) = opts.clusters.or(cfg_get(&file, "clusters")?) {
        cfg.clusters = c;
    }
    if let Some(r) = opts.readout.clone().or_else(|| file.get("readout").cloned()) {
        cfg.readout = ReadoutMode::parse(&r)?;
    }
    if let Some(w) = opts.ds_weight.or(cfg_get(&file, "ds_weight")?) {
        cfg.ds_weight = w;
    }
    if let Some(w) = opts.lp_weight.or(cfg_get(&file, "lp_weight")?) {
        cfg.lp_weight = w;
    }
    if let Some(s) = opts.self_loops.or(cfg_get(&file, "self_loops")?) {
        cfg.self_loops = s;
    }
    if let Some(ci) = opts
        .cluster_input
        .clone()
        .or_else(|| file.get("cluster_input").cloned())
    {
        cfg.cluster_input = match ci.as_str() {
            "features" => ClusterInput::RawFeatures,
            "embeddings" => ClusterInput::Embeddings,
            other => {
                return Err(MilError::Config(format!(
                    "unknown cluster input `{other}`, expected features or embeddings"
                )))
            }
        };
    }
    if let Some(dp) = opts.ds_pool.clone().or_else(|| file.get("ds_pool").cloned()) {
        cfg.ds_pool = match dp.as_str() {
            "max" => DsPool::Max,
            "mean" => DsPool::Mean,
            other => {
                return Err(MilError::Config(format!(
                    "unknown ds pooling `{other}`, expected max or mean"
                )))
            }
        };
    }
    cfg.seed = match opts.seed.or(cfg_get(&file, "seed")?) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_train_config(opts: &TrainOpts, model: &ModelOpts) -> Result<TrainConfig> {
    let file = match &model.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let mut cfg = TrainConfig::new();
    if let Some(e) = opts.epochs.or(cfg_get(&file, "epochs")?) {
        cfg.epochs = e;
    }
    if let Some(b) = opts.batch_size.or(cfg_get(&file, "batch_size")?) {
        cfg.batch_size = b;
    }
    if let Some(l) = opts.lr.or(cfg_get(&file, "lr")?) {
        cfg.lr = l;
    }
    if let Some(w) = opts.weight_decay.or(cfg_get(&file, "weight_decay")?) {
        cfg.weight_decay = w;
    }
    if let Some(o) = opts.optimizer.clone().or_else(|| file.get("optimizer").cloned()) {
        cfg.optimizer = OptimizerKind::parse(&o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_resolved(cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<()> {
    println!("model: {}", serde_json::to_string(cfg)?);
    println!("train: {}", serde_json::to_string(tcfg)?);
    Ok(())
}

fn summary_line(ds: &Dataset) -> String {
    let counts = ds.class_counts();
    let pos: usize = counts.iter().skip(1).sum();
    format!(
        "bags={} pos={} neg={} dim={}",
        ds.bags.len(),
        pos,
        counts[0],
        ds.feature_dim
    )
}

fn run_convert(args: ConvertArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    if let Some(out) = &args.out {
        std::fs::write(out, write_canonical_csv(&ds))?;
    }
    println!("{}", summary_line(&ds));
    Ok(())
}

fn prepare_graphs(bags: &[Bag], cfg: &ModelConfig) -> Result<(Vec<BagGraph>, milgraph::data::Normalizer)> {
    let refs: Vec<&Bag> = bags.iter().collect();
    let normalizer = fit_normalizer(&refs)?;
    let eta = cfg.eta.resolve(&refs)?;
    let graphs = apply_normalizer(&normalizer, bags)
        .iter()
        .map(|b| build_graph(b, eta, cfg.self_loops))
        .collect::<Result<Vec<_>>>()?;
    Ok((graphs, normalizer))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let cfg = resolve_model_config(&args.model, ds.feature_dim, ds.class_count)?;
    let tcfg = resolve_train_config(&args.train, &args.model)?;
    print_resolved(&cfg, &tcfg)?;
    println!("{}", summary_line(&ds));

    let (graphs, normalizer) = prepare_graphs(&ds.bags, &cfg)?;
    let (params, losses) = train_one_model(&cfg, &tcfg, &graphs, 0, 0)?;
    println!(
        "trained {} epochs, first/final mean loss {:.6} / {:.6}",
        losses.len(),
        losses.first().unwrap(),
        losses.last().unwrap()
    );
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg,
        params,
        normalizer: Some(normalizer),
    }
    .save(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn run_crossval(args: CrossvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let cfg = resolve_model_config(&args.model, ds.feature_dim, ds.class_count)?;
    let tcfg = resolve_train_config(&args.train, &args.model)?;
    let file = match &args.model.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let mut cv = CvConfig::new();
    if let Some(f) = args.folds.or(cfg_get(&file, "folds")?) {
        cv.folds = f;
    }
    if let Some(r) = args.repeats.or(cfg_get(&file, "repeats")?) {
        cv.repeats = r;
    }
    if let Some(j) = args.jobs.or(cfg_get(&file, "jobs")?) {
        cv.jobs = j;
    }
    cv.seed = cfg.seed;
    cv.validate()?;
    print_resolved(&cfg, &tcfg)?;
    println!("{}", summary_line(&ds));
    println!("cv: folds={} repeats={} jobs={}", cv.folds, cv.repeats, cv.jobs);

    let report = run_cross_validation(&ds, &cfg, &tcfg, &cv)?;
    println!(
        "accuracy {:.4} +/- {:.4}  f1 {:.4}  confusion tn={} fp={} fn={} tp={}",
        report.mean_accuracy,
        report.std_accuracy,
        report.mean_f1,
        report.pooled_confusion.tn,
        report.pooled_confusion.fp,
        report.pooled_confusion.r#fn,
        report.pooled_confusion.tp
    );
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json()?)?;
        let csv_path = out.with_extension("folds.csv");
        std::fs::write(&csv_path, report.folds_csv())?;
        println!("report written to {} and {}", out.display(), csv_path.display());
    }
    Ok(())
}

fn run_explain(args: ExplainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    if ds.feature_dim != ckpt.config.feature_dim {
        return Err(MilError::Config(format!(
            "dataset dim {} does not match checkpoint dim {}",
            ds.feature_dim, ckpt.config.feature_dim
        )));
    }
    let selected: Vec<Bag> = match &args.bags {
        None => ds.bags.clone(),
        Some(list) => {
            let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
            let mut out = Vec::new();
            for id in wanted {
                let bag = ds
                    .bags
                    .iter()
                    .find(|b| b.id == id)
                    .ok_or_else(|| MilError::Data(format!("bag id `{id}` not in dataset")))?;
                out.push(bag.clone());
            }
            out
        }
    };
    let normalized = match &ckpt.normalizer {
        Some(n) => apply_normalizer(n, &selected),
        None => selected,
    };
    let refs: Vec<&Bag> = normalized.iter().collect();
    let eta = ckpt.config.eta.resolve(&refs)?;
    let graphs = normalized
        .iter()
        .map(|b| build_graph(b, eta, ckpt.config.self_loops))
        .collect::<Result<Vec<_>>>()?;

    let records = collect_explanations(&ckpt.params, &ckpt.config, &graphs)?;
    std::fs::create_dir_all(&args.out)?;
    for rec in &records {
        let pgm = heatmap_pgm(&rec.scores, args.stretch)?;
        let path = args.out.join(format!("{}.pgm", rec.bag_id));
        std::fs::write(&path, pgm)?;
    }
    let csv_path = args.out.join("explanations.csv");
    std::fs::write(&csv_path, explanations_csv(&records))?;
    println!(
        "wrote {} heatmaps and {} to {}",
        records.len(),
        csv_path.display(),
        args.out.display()
    );
    Ok(())
}
