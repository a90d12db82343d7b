mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lmc_core::experiment::{
    run_grad_error, run_training, GradErrorSettings, TrainSettings, GRAD_ERROR_HEADER, TRAIN_HEADER,
};
use lmc_core::graph::{generate_sbm, load_graph, normalize_adjacency, Graph};
use lmc_core::lmc::EstimatorMode;
use lmc_core::model::{init_glorot, ModelParams};
use lmc_core::partition::{partition_bfs, Partition};
use sha2::{Digest, Sha256};

use config::{ConfigMap, Dataset, RunConfig};

#[derive(Parser)]
#[command(
    name = "lmc",
    version,
    about = "Subgraph-wise GNN training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stochastic-block-model dataset.
    GenData(CommonArgs),
    /// Partition the dataset into `num_clusters` clusters.
    Partition(CommonArgs),
    /// Train one estimator and record metrics.
    Train(SeededArgs),
    /// Compare the gradient error of several estimators along one run.
    GradError(SeededArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SeededArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: u64,
}

fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut map = match config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    for pair in overrides {
        map.set_pair(pair)
            .with_context(|| format!("--set {pair}"))?;
    }
    map.into_run_config()
}

fn dataset(cfg: &RunConfig) -> Result<Graph> {
    Ok(match &cfg.dataset {
        Dataset::Files {
            edges,
            features,
            labels,
        } => load_graph(edges, features, labels)?,
        Dataset::Sbm(sbm) => generate_sbm(sbm)?,
    })
}

/// `sha256("blob <len>\0" ++ bytes)`, the git object hashing scheme over SHA-256.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn input_hashes(cfg: &RunConfig) -> Result<Vec<(String, String)>> {
    let mut files: Vec<(&str, &Path)> = Vec::new();
    if let Dataset::Files {
        edges,
        features,
        labels,
    } = &cfg.dataset
    {
        files.extend([
            ("edges", edges.as_path()),
            ("features", features),
            ("labels", labels),
        ]);
    }
    if let Some(p) = &cfg.partition {
        files.push(("partition", p));
    }
    files
        .into_iter()
        .map(|(name, path)| {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok((name.to_string(), blob_hash(&bytes)))
        })
        .collect()
}

fn write_manifest(cfg: &RunConfig, command: &str, seed: u64) -> Result<()> {
    let mut text = format!("# lmc manifest\n# command = {command}\n# seed = {seed}\n");
    let hashes = input_hashes(cfg)?;
    let mut all = Sha256::new();
    for (name, hash) in &hashes {
        text.push_str(&format!("# input {name} = {hash}\n"));
        all.update(hash.as_bytes());
    }
    all.update(cfg.render().as_bytes());
    text.push_str(&format!(
        "# content_hash = {}\n",
        hex::encode(all.finalize())
    ));
    text.push_str(&cfg.render());
    fs::write(cfg.out_dir.join("manifest.txt"), text)?;
    Ok(())
}

fn partition_for(cfg: &RunConfig, g: &Graph, seed: u64) -> Result<Partition> {
    let p = match &cfg.partition {
        Some(path) => Partition::read(path)?,
        None => partition_bfs(g, cfg.num_clusters, seed)?,
    };
    if p.num_nodes() != g.num_nodes() || p.num_clusters() != cfg.num_clusters {
        bail!(
            "partition has {} nodes in {} clusters, expected {} nodes in {}",
            p.num_nodes(),
            p.num_clusters(),
            g.num_nodes(),
            cfg.num_clusters
        );
    }
    p.write(&cfg.out_dir.join("partition.txt"))?;
    Ok(p)
}

fn model_dims(cfg: &RunConfig, g: &Graph) -> Vec<usize> {
    let mut dims = vec![g.feature_dim()];
    dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
    dims.push(g.num_classes().max(2));
    dims
}

fn prepare(cfg: &RunConfig, command: &str, seed: u64) -> Result<(Graph, Partition, ModelParams)> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let g = dataset(cfg)?;
    let p = partition_for(cfg, &g, seed)?;
    let params = init_glorot(&model_dims(cfg, &g), seed)?;
    write_manifest(cfg, command, seed)?;
    Ok((g, p, params))
}

fn gen_data(args: &CommonArgs) -> Result<()> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("data_seed={seed}"));
    }
    let cfg = resolve(args.config.as_deref(), &overrides)?;
    let Dataset::Sbm(_) = cfg.dataset else {
        bail!("gen-data builds a synthetic graph; drop the edges/features/labels keys");
    };
    let g = dataset(&cfg)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let dir = &cfg.out_dir;
    g.write_files(
        &dir.join("edges.txt"),
        &dir.join("features.txt"),
        &dir.join("labels.txt"),
    )
    .with_context(|| format!("writing dataset to {}", dir.display()))?;
    let mut hist = vec![0usize; g.num_classes()];
    for &y in g.labels() {
        hist[y] += 1;
    }
    println!("nodes: {}", g.num_nodes());
    println!("edges: {}", g.num_edges());
    println!("labeled: {}", g.num_labeled());
    for (c, count) in hist.iter().enumerate() {
        println!("class {c}: {count}");
    }
    Ok(())
}

fn partition(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args.config.as_deref(), &args.overrides)?;
    let seed = args.seed.unwrap_or(0);
    fs::create_dir_all(&cfg.out_dir)?;
    let g = dataset(&cfg)?;
    let p = partition_for(&cfg, &g, seed)?;
    for (k, nodes) in p.clusters().iter().enumerate() {
        println!("cluster {k}: {} nodes", nodes.len());
    }
    Ok(())
}

fn csv_writer(cfg: &RunConfig, header: &str) -> Result<BufWriter<File>> {
    let path = cfg.out_dir.join("metrics.csv");
    let mut out = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(out, "{header}")?;
    out.flush()?;
    Ok(out)
}

fn train(args: &SeededArgs) -> Result<()> {
    let cfg = resolve(args.config.as_deref(), &args.overrides)?;
    let (g, p, params) = prepare(&cfg, "train", args.seed)?;
    let adj = normalize_adjacency(&g);
    let settings = TrainSettings {
        mode: cfg.mode,
        batch_clusters: cfg.batch_clusters,
        lr: cfg.lr,
        iterations: cfg.iterations,
        sched: cfg.sched,
        sampler_seed: args.seed.wrapping_add(1),
        eval_every: cfg.eval_every,
        warm_start: cfg.warm_start,
    };
    let mut out = csv_writer(&cfg, TRAIN_HEADER)?;
    let ckpt = cfg.out_dir.join("params.ckpt");
    if cfg.iterations == 0 {
        params.write_checkpoint(&ckpt)?;
    }
    let outcome = run_training(&g, &adj, &p, params, &settings, &mut |row| {
        writeln!(out, "{}", row.to_csv()).and_then(|_| out.flush())?;
        Ok(())
    })?;
    outcome.params.write_checkpoint(&ckpt)?;
    if let Some(last) = outcome.rows.last() {
        println!(
            "iteration {}: full-batch loss {:.6}, test accuracy {:.4}",
            last.iteration, last.full_batch_loss, last.test_acc
        );
    }
    Ok(())
}

fn grad_error(args: &SeededArgs) -> Result<()> {
    let cfg = resolve(args.config.as_deref(), &args.overrides)?;
    if cfg.modes.contains(&EstimatorMode::FullBatch) {
        bail!("modes must be drawn from Cluster, GAS, LMC, LMC_ForwardOnly, BackwardSGD");
    }
    let (g, p, params) = prepare(&cfg, "grad-error", args.seed)?;
    let adj = normalize_adjacency(&g);
    let settings = GradErrorSettings {
        batch_clusters: cfg.batch_clusters,
        lr: cfg.lr,
        iterations: cfg.iterations,
        sched: cfg.sched,
        sampler_seed: args.seed.wrapping_add(1),
        warm_start: cfg.warm_start,
        warmup: cfg.warmup,
        measure_every: cfg.measure_every,
    };
    let mut out = csv_writer(&cfg, GRAD_ERROR_HEADER)?;
    let summary = run_grad_error(&g, &adj, &p, params, &cfg.modes, &settings, &mut |row| {
        writeln!(out, "{}", row.to_csv()).and_then(|_| out.flush())?;
        Ok(())
    })?;
    for s in &summary {
        writeln!(out, "{}", s.to_csv())?;
        println!(
            "{}: mean relative error {:.6} over {} steps",
            s.mode, s.rel_err_mean, s.measured_steps
        );
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Partition(a) => partition(a),
        Command::Train(a) => train(a),
        Command::GradError(a) => grad_error(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
