//! `softtriple` command-line tool: dataset generation, training, evaluation,
//! center analysis and the self-verification suites.

mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use softtriple::checkpoint::Checkpoint;
use softtriple::data::{self, ClusterSpec, LabeledDataset, Split};
use softtriple::eval::{self, DEFAULT_KS, DEFAULT_MERGE_EPS};
use softtriple::linalg::{rng_for, streams};
use softtriple::losses::{HyperParams, LossKind};
use softtriple::model::{Architecture, EmbeddingModel, DEFAULT_HIDDEN};
use softtriple::trainer::{self, MetricsRecord, TrainConfig};
use softtriple::verify::{self, Fault, VerifyConfig};

use manifest::RunManifest;

const DEFAULT_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "softtriple", version, about = "Multi-center metric learning on embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic multi-cluster dataset as CSV.
    Gen(GenArgs),
    /// Train an embedding model and its class centers.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on one side of the class split.
    Eval(EvalArgs),
    /// Count distinct centers per class in a checkpoint.
    AnalyzeCenters(AnalyzeArgs),
    /// Run the property suites on random instances.
    Verify(VerifyArgs),
    /// Re-execute the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GenArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    clusters: u64,
    #[arg(long, default_value_t = 34, value_parser = clap::value_parser!(u64).range(1..))]
    per_cluster: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[arg(long, default_value_t = 0.35)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, env = "SOFTTRIPLE_SEED", default_value_t = 0)]
    seed: u64,
    /// Output CSV; the cluster ids and manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Softmax,
    Hardtriple,
    Softtriple,
    Proxynca,
    ProxyncaHinge,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Softmax => LossKind::Softmax,
            LossArg::Hardtriple => LossKind::HardTriple,
            LossArg::Softtriple => LossKind::SoftTriple,
            LossArg::Proxynca => LossKind::ProxyNca,
            LossArg::ProxyncaHinge => LossKind::ProxyNcaHinge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Identity,
    Affine,
    Mlp,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fraction of classes used for training; the rest form the test split.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    #[arg(long, value_enum, default_value = "softtriple")]
    loss: LossArg,
    /// Centers per class (default 10, or 1 for single-center losses).
    #[arg(long = "K")]
    k: Option<usize>,
    /// Regularizer weight (default 0.2 when K ≥ 2, else 0).
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_model: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_centers: f64,
    /// Epochs after which both learning rates are divided by --decay-factor.
    #[arg(long, value_delimiter = ',', default_value = "20,40")]
    decay: Vec<usize>,
    #[arg(long, default_value_t = 10.0)]
    decay_factor: f64,
    /// Embedding dimension (default 64; identity uses the input dimension).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum, default_value = "mlp")]
    arch: ArchArg,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, env = "SOFTTRIPLE_SEED", default_value_t = 0)]
    seed: u64,
    /// Evaluate on the test split every N epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, default_value_t = DEFAULT_MERGE_EPS)]
    merge_eps: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Fully resolved training run, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainPlan {
    data: PathBuf,
    train_fraction: f64,
    architecture: Architecture,
    embedding_dim: usize,
    config: TrainConfig,
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Seed of the class split (and of k-means).
    #[arg(long, env = "SOFTTRIPLE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MERGE_EPS)]
    merge_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    None,
    GradientSign,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    #[arg(long, env = "SOFTTRIPLE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "none")]
    inject_fault: FaultArg,
}

#[derive(Debug, Clone, Args)]
struct RerunArgs {
    manifest: PathBuf,
    /// Write artifacts here instead of the recorded location (the output CSV
    /// for `gen`, the output directory for `train`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Verification(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<softtriple::Error> for Failure {
    fn from(e: softtriple::Error) -> Self {
        match e {
            softtriple::Error::Io(_) | softtriple::Error::Parse { .. } => Failure::Io(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => resolve_train(&a).and_then(|plan| cmd_train(&plan)),
        Command::Eval(a) => cmd_eval(&a),
        Command::AnalyzeCenters(a) => cmd_analyze_centers(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Rerun(a) => cmd_rerun(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("softtriple: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_gen(args: &GenArgs) -> CmdResult {
    let spec = ClusterSpec {
        num_classes: args.classes as usize,
        clusters_per_class: args.clusters as usize,
        points_per_cluster: args.per_cluster as usize,
        dim: args.dim as usize,
        sigma: args.sigma,
        scale: args.scale,
        seed: args.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = data::generate_synthetic(&spec)?;
    let clusters = sidecar_path(&args.out, ".clusters");
    data::save_csv(&ds, &args.out)?;
    data::save_cluster_sidecar(&ds, &clusters)?;

    let manifest_path = sidecar_path(&args.out, ".manifest.json");
    let mut m = RunManifest::new("gen", serde_json::to_value(args).expect("gen args serialize"));
    m.artifacts.insert("dataset".into(), args.out.clone());
    m.artifacts.insert("clusters".into(), clusters);
    m.save(&manifest_path).map_err(io_err(&manifest_path))?;
    println!("wrote {} rows to {}", ds.len(), args.out.display());
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Result<TrainPlan, Failure> {
    let loss = LossKind::from(a.loss);
    let k = match (loss.single_center(), a.k) {
        (true, Some(k)) if k != 1 => {
            return Err(Failure::Usage(format!(
                "--loss {} uses one center per class, but --K {k} was given",
                loss.name()
            )))
        }
        (true, _) => 1,
        (false, k) => k.unwrap_or(10),
    };
    if k == 0 {
        return Err(Failure::Usage("--K must be at least 1".into()));
    }
    let tau = a.tau.unwrap_or(if k >= 2 { 0.2 } else { 0.0 });
    if k == 1 && tau > 0.0 {
        return Err(Failure::Usage(format!(
            "--K 1 conflicts with --tau {tau}: the center regularizer needs at least two centers per class"
        )));
    }
    let architecture = match a.arch {
        ArchArg::Identity => Architecture::Identity,
        ArchArg::Affine => Architecture::Affine,
        ArchArg::Mlp => Architecture::Mlp { hidden: a.hidden },
    };
    if architecture == Architecture::Identity && a.dim.is_some() {
        return Err(Failure::Usage(
            "--arch identity embeds in the input dimension; drop --dim".into(),
        ));
    }
    let config = TrainConfig {
        loss,
        hp: HyperParams {
            lambda: a.lambda,
            gamma: a.gamma,
            delta: a.delta,
            tau,
            centers_per_class: k,
        },
        batch_size: a.batch,
        epochs: a.epochs,
        lr_model: a.lr_model,
        lr_centers: a.lr_centers,
        lr_decay_epochs: a.decay.clone(),
        lr_decay_factor: a.decay_factor,
        seed: a.seed,
        eval_every: a.eval_every,
        merge_eps: a.merge_eps,
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(TrainPlan {
        data: a.data.clone(),
        train_fraction: a.train_fraction,
        architecture,
        embedding_dim: a.dim.unwrap_or(DEFAULT_EMBEDDING_DIM),
        config,
        out_dir: a.out_dir.clone(),
    })
}

fn split_dataset(path: &Path, train_fraction: f64, seed: u64) -> Result<LabeledDataset, Failure> {
    let ds = data::load_csv(path)?;
    data::split_by_class(&ds, train_fraction, seed).map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_train(plan: &TrainPlan) -> CmdResult {
    let ds = split_dataset(&plan.data, plan.train_fraction, plan.config.seed)?;
    let train_set = ds.subset(Split::Train)?;
    let test_set = ds.subset(Split::Test)?;
    let dim = match plan.architecture {
        Architecture::Identity => ds.dim(),
        _ => plan.embedding_dim,
    };
    let mut rng = rng_for(plan.config.seed, streams::MODEL);
    let model = EmbeddingModel::new(plan.architecture, ds.dim(), dim, &mut rng)?;
    let eval_set = (plan.config.eval_every > 0).then_some(&test_set);
    let outcome = trainer::train(&train_set, model, &plan.config, eval_set)?;

    let dir = &plan.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ckpt_path = dir.join("checkpoint.txt");
    Checkpoint::new(outcome.model, outcome.centers)?.save(&ckpt_path)?;
    let metrics_path = dir.join("metrics.jsonl");
    write_jsonl(&metrics_path, &outcome.log).map_err(io_err(&metrics_path))?;

    let mut m = RunManifest::new("train", serde_json::to_value(plan).expect("train plan serializes"));
    m.add_input(&plan.data).map_err(io_err(&plan.data))?;
    m.artifacts.insert("checkpoint".into(), ckpt_path.clone());
    m.artifacts.insert("metrics".into(), metrics_path);
    let manifest_path = dir.join("manifest.json");
    m.save(&manifest_path).map_err(io_err(&manifest_path))?;

    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs, final loss {:.6}, checkpoint {}",
            plan.config.epochs,
            last.loss.unwrap_or(f64::NAN),
            ckpt_path.display()
        );
    }
    Ok(())
}

fn write_jsonl(path: &Path, log: &[MetricsRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in log {
        serde_json::to_writer(&mut w, record)?;
        writeln!(w)?;
    }
    w.flush()
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = split_dataset(&a.data, a.train_fraction, a.seed)?;
    if ds.dim() != ckpt.model.input_dim() {
        return Err(Failure::Usage(format!(
            "checkpoint expects {} input features but {} has {}",
            ckpt.model.input_dim(),
            a.data.display(),
            ds.dim()
        )));
    }
    let subset = match a.split {
        SplitArg::Train => ds.subset(Split::Train)?,
        SplitArg::Test => ds.subset(Split::Test)?,
        SplitArg::All => ds,
    };
    let embs = trainer::embed(&ckpt.model, &subset.features)?;
    let ks: Vec<usize> = DEFAULT_KS.iter().copied().filter(|k| *k < subset.len()).collect();
    let metrics = eval::evaluate(&embs, &subset.labels, &ks, a.seed)?;
    let record = MetricsRecord {
        epoch: None,
        loss: None,
        lr_model: None,
        lr_centers: None,
        recall_at: metrics.recall_at,
        nmi: Some(metrics.nmi),
        unique_centers_per_class: eval::count_unique_centers(&ckpt.centers, DEFAULT_MERGE_EPS)?,
    };
    println!("{}", serde_json::to_string(&record).expect("metrics serialize"));
    Ok(())
}

#[derive(Debug, Serialize)]
struct CenterReport {
    merge_eps: f64,
    counts: Vec<usize>,
    /// Unique-center count -> number of classes with that count.
    histogram: BTreeMap<usize, usize>,
    mean: f64,
}

fn cmd_analyze_centers(a: &AnalyzeArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let counts = eval::count_unique_centers(&ckpt.centers, a.merge_eps)?;
    let mut histogram = BTreeMap::new();
    for c in &counts {
        *histogram.entry(*c).or_insert(0) += 1;
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let report = CenterReport {
        merge_eps: a.merge_eps,
        counts,
        histogram,
        mean,
    };
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let fault = match a.inject_fault {
        FaultArg::None => Fault::None,
        FaultArg::GradientSign => Fault::GradientSign,
    };
    let reports = verify::run_all(&VerifyConfig { seed: a.seed, fault });
    for r in &reports {
        println!(
            "{:<22} {} trials={} max_error={:.3e}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.trials,
            r.max_error
        );
    }
    match reports.iter().find(|r| !r.passed) {
        None => Ok(()),
        Some(r) => {
            let detail = r.counterexample.as_deref().unwrap_or("no counterexample recorded");
            println!("first counterexample ({}): {detail}", r.name);
            Err(Failure::Verification(format!("suite {} failed", r.name)))
        }
    }
}

fn cmd_rerun(a: &RerunArgs) -> CmdResult {
    let m = RunManifest::load(&a.manifest).map_err(|e| Failure::Io(format!("{}: {e}", a.manifest.display())))?;
    m.check_inputs().map_err(Failure::Usage)?;
    let bad = |e: serde_json::Error| Failure::Usage(format!("manifest config: {e}"));
    match m.command.as_str() {
        "gen" => {
            let mut args: GenArgs = serde_json::from_value(m.config).map_err(bad)?;
            if let Some(out) = &a.out {
                args.out = out.clone();
            }
            cmd_gen(&args)
        }
        "train" => {
            let mut plan: TrainPlan = serde_json::from_value(m.config).map_err(bad)?;
            if let Some(out) = &a.out {
                plan.out_dir = out.clone();
            }
            cmd_train(&plan)
        }
        other => Err(Failure::Usage(format!("cannot rerun command '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_train(extra: &[&str]) -> Result<TrainPlan, Failure> {
        let mut argv = vec!["softtriple", "train", "--data", "d.csv", "--out-dir", "o"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => resolve_train(&a),
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_follow_the_loss() {
        let plan = parse_train(&[]).unwrap();
        assert_eq!(plan.config.hp.centers_per_class, 10);
        assert_eq!(plan.config.hp.tau, 0.2);
        assert_eq!(plan.config.lr_decay_epochs, vec![20, 40]);
        let plan = parse_train(&["--loss", "softmax"]).unwrap();
        assert_eq!(plan.config.hp.centers_per_class, 1);
        assert_eq!(plan.config.hp.tau, 0.0);
    }

    #[test]
    fn single_center_with_regularizer_is_rejected() {
        let err = parse_train(&["--K", "1", "--tau", "0.2"]).unwrap_err();
        assert!(matches!(&err, Failure::Usage(m) if m.contains("--K 1") && m.contains("--tau")));
        assert!(matches!(parse_train(&["--loss", "softmax", "--K", "3"]), Err(Failure::Usage(_))));
        assert!(parse_train(&["--K", "1"]).is_ok());
    }

    #[test]
    fn loss_names_agree_with_core() {
        for l in LossArg::value_variants() {
            let name = l.to_possible_value().unwrap().get_name().to_string();
            assert_eq!(LossKind::from(*l).name(), name);
            assert_eq!(serde_json::to_value(LossKind::from(*l)).unwrap(), name);
        }
    }

    #[test]
    fn zero_classes_is_a_usage_error() {
        let err = Cli::try_parse_from(["softtriple", "gen", "--classes", "0", "--out", "x.csv"]).unwrap_err();
        assert!(err.use_stderr());
    }
}
