//! The `protohier` command line.
//!
//! Exit codes: 0 on success, 1 for runtime errors (printed with their
//! category), 2 for usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::config::{parse_usize_list, TrainConfig};
use crate::data_io::{
    atomic_write, read_embeddings, read_labels, write_embeddings, write_labels, EmbeddingSet,
    Format,
};
use crate::error::{Error, Result};
use crate::eval::{cluster_eval, knn_eval, DEFAULT_K_LIST};
use crate::hkmeans::{hierarchical_kmeans_with, Init, KMeansParams};
use crate::model::{Mode, TrainState};
use crate::prototree::validate_tree;
use crate::spd::{spd_grad_check, GradCheckDims};
use crate::synth::{generate, HierarchySpec, DEFAULT_MAX_SAMPLES};
use crate::trainer::{self, TrainOptions};

#[derive(Debug, Parser)]
#[command(
    name = "protohier",
    version,
    about = "Hierarchical prototype learning over embeddings"
)]
struct Cli {
    /// Worker threads. 1 runs everything single-threaded and bit-reproducible.
    #[arg(long, global = true, env = "PROTOHIER_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-hierarchy dataset.
    Gen(GenArgs),
    /// Build a prototype tree with hierarchical K-means.
    Cluster(ClusterArgs),
    /// Two-stage training.
    Train(TrainArgs),
    /// Weighted KNN accuracy of learned (or raw) representations.
    EvalKnn(EvalKnnArgs),
    /// K-means clustering accuracy, NMI and AMI against labels.
    EvalCluster(EvalClusterArgs),
    /// Write encoder representations in the embedding binary format.
    Export(ExportArgs),
    /// Finite-difference check of the SPD gradients.
    GradCheck(GradCheckArgs),
    /// Sweep prototype levels and negative-path counts.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of planted levels; must match the length of --branching.
    #[arg(long)]
    depth: Option<usize>,
    /// Children per node, coarse to fine.
    #[arg(long, value_delimiter = ',', required = true)]
    branching: Vec<usize>,
    #[arg(long = "per-leaf")]
    per_leaf: usize,
    #[arg(long)]
    dim: usize,
    /// Center spread per level, coarse to fine. Defaults to 4, 2, 1, ...
    #[arg(long, value_delimiter = ',')]
    separation: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "max-samples", default_value_t = DEFAULT_MAX_SAMPLES)]
    max_samples: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Embedding file; `.csv` files are parsed as CSV.
    #[arg(long)]
    data: PathBuf,
    /// CSV rows end with an integer label column.
    #[arg(long = "csv-has-labels")]
    csv_has_labels: bool,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Prototype counts per level, finest first.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "max-iter", default_value_t = crate::hkmeans::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = crate::hkmeans::DEFAULT_TOL)]
    tol: f64,
    /// Skip L2 normalization of the embeddings.
    #[arg(long = "no-normalize")]
    no_normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "csv-has-labels")]
    csv_has_labels: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t1: Option<usize>,
    #[arg(long)]
    t2: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long = "n-neg")]
    n_neg: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Disable batch normalization in the projection heads.
    #[arg(long = "no-norm")]
    no_norm: bool,
    /// Continue from this checkpoint; its config snapshot is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long = "stop-after")]
    stop_after: Option<usize>,
}

#[derive(Debug, Args)]
struct RepArgs {
    /// Checkpoint whose encoder produces the representations. Without it the
    /// raw embeddings are evaluated.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Representation level: 0 is the encoder output, l >= 1 the l-th head.
    #[arg(long, default_value_t = 0)]
    level: usize,
    #[arg(long = "csv-has-labels")]
    csv_has_labels: bool,
}

#[derive(Debug, Args)]
struct EvalKnnArgs {
    #[command(flatten)]
    reps: RepArgs,
    #[arg(long = "train-data")]
    train_data: PathBuf,
    #[arg(long = "train-labels")]
    train_labels: Option<PathBuf>,
    #[arg(long = "test-data")]
    test_data: PathBuf,
    #[arg(long = "test-labels")]
    test_labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_LIST)]
    k: Vec<usize>,
    /// CSV output for the per-k table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalClusterArgs {
    #[command(flatten)]
    reps: RepArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Cluster count; defaults to the number of distinct labels.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, default_value_t = 0)]
    level: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
    levels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
    dims: Vec<usize>,
    #[arg(long = "n-neg", value_delimiter = ',', default_values_t = [1usize, 8])]
    n_neg: Vec<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Base config; each variant overrides level_sizes or n_neg.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long = "test-data")]
    test_data: Option<PathBuf>,
    #[arg(long = "test-labels")]
    test_labels: Option<PathBuf>,
    /// Level-size variants separated by ';', e.g. "24;24,8;24,8,4".
    #[arg(long = "levels-sweep", default_value = "24;24,8;24,8,4")]
    levels_sweep: String,
    #[arg(long = "n-neg-sweep", value_delimiter = ',', default_values_t = [1usize, 4, 16])]
    n_neg_sweep: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20])]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    // A second initialization (e.g. repeated runs in one process) keeps the
    // existing pool, which is fine.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    let parallel = cli.threads > 1;
    eprintln!("threads={}", cli.threads);
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Cluster(a) => cluster(a, parallel),
        Command::Train(a) => train(a, parallel),
        Command::EvalKnn(a) => eval_knn(a),
        Command::EvalCluster(a) => eval_cluster(a, parallel),
        Command::Export(a) => export(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Ablate(a) => ablate(a, parallel),
    }
}

fn load_set(path: &Path, csv_has_labels: bool) -> Result<EmbeddingSet> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_embeddings(
            path,
            Format::Csv {
                has_labels: csv_has_labels,
            },
        )
    } else {
        read_embeddings(path, Format::Binary)
    }
}

/// Labels from an explicit label file, else those carried by the set.
fn labels_for(set: &EmbeddingSet, path: Option<&Path>) -> Result<Vec<u32>> {
    let labels = match path {
        Some(p) => read_labels(p)?,
        None => set
            .labels()
            .map(<[u32]>::to_vec)
            .ok_or_else(|| Error::Config("no labels: pass a label file or CSV labels".into()))?,
    };
    if labels.len() != set.n() {
        return Err(Error::Data(format!(
            "{} labels for {} samples",
            labels.len(),
            set.n()
        )));
    }
    Ok(labels)
}

/// Representations at `level` (0 = encoder output, l = head l in eval mode).
pub fn representations(
    state: &TrainState,
    set: &EmbeddingSet,
    level: usize,
) -> Result<Array2<f64>> {
    let z0 = trainer::encode(state, set)?;
    if level == 0 {
        return Ok(z0);
    }
    let mut head = state.heads.get(level - 1).cloned().ok_or_else(|| {
        Error::Index(format!(
            "model has {} levels, asked for {level}",
            state.heads.len()
        ))
    })?;
    head.forward(z0.view(), Mode::Eval)
}

fn reps_for(args: &RepArgs, set: &EmbeddingSet, state: Option<&TrainState>) -> Result<Array2<f64>> {
    match state {
        Some(s) => representations(s, set, args.level),
        None if args.level == 0 => Ok(set.to_matrix()),
        None => Err(Error::Config("--level needs --ckpt".into())),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn gen(a: GenArgs) -> Result<()> {
    if let Some(depth) = a.depth {
        if depth != a.branching.len() {
            return Err(Error::Config(format!(
                "--depth {depth} does not match {} branching factors",
                a.branching.len()
            )));
        }
    }
    let separation = a.separation.unwrap_or_else(|| {
        (0..a.branching.len())
            .map(|l| 4.0 / f64::powi(2.0, l as i32))
            .collect()
    });
    let spec = HierarchySpec {
        branching: a.branching,
        samples_per_leaf: a.per_leaf,
        d: a.dim,
        separation,
        noise_sigma: a.noise,
        seed: a.seed,
        max_samples: a.max_samples,
    };
    eprintln!("{spec:?}");
    let data = generate(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    write_embeddings(&data.set, &a.out.join("embeddings.bin"))?;
    for (k, labels) in data.level_labels.iter().enumerate() {
        write_labels(labels, &a.out.join(format!("labels_level{}.bin", k + 1)))?;
    }
    println!(
        "wrote {} samples of dim {} and {} label files to {}",
        data.set.n(),
        data.set.d(),
        data.level_labels.len(),
        a.out.display()
    );
    Ok(())
}

fn cluster(a: ClusterArgs, parallel: bool) -> Result<()> {
    eprintln!("{a:?}");
    let set = load_set(&a.input.data, a.input.csv_has_labels)?;
    let mut points = set.to_matrix();
    if !a.no_normalize {
        crate::hkmeans::l2_normalize_rows(&mut points);
    }
    let params = KMeansParams {
        max_iter: a.max_iter,
        tol: a.tol,
        init: Init::KMeansPlusPlus,
        parallel,
    };
    let tree = hierarchical_kmeans_with(points.view(), &a.levels, a.seed, &params)?;
    tree.write(&a.out)?;
    let diag = validate_tree(&tree);
    println!(
        "levels={:?} paths={} edges={}",
        tree.level_sizes(),
        diag.paths,
        diag.edges
    );
    for (name, ok) in &diag.checks {
        println!("{name}: {}", if *ok { "pass" } else { "FAIL" });
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(v) = &a.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &a.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = &a.log {
        cfg.log = Some(v.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.t1 {
        cfg.t1_epochs = v;
    }
    if let Some(v) = a.t2 {
        cfg.t2_epochs = v;
    }
    if let Some(v) = &a.levels {
        cfg.level_sizes = v.clone();
    }
    if let Some(v) = a.n_neg {
        cfg.n_neg = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if a.no_norm {
        cfg.use_norm = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, parallel: bool) -> Result<()> {
    let options = TrainOptions {
        parallel,
        stop_after_epoch: a.stop_after,
    };
    let (outcome, cfg) = if let Some(path) = &a.resume {
        let mut state = TrainState::load(path)?;
        // Output locations may move between sessions; the schedule may not.
        if let Some(v) = &a.checkpoint {
            state.config.checkpoint = Some(v.clone());
        }
        if let Some(v) = &a.log {
            state.config.log = Some(v.clone());
        }
        if let Some(v) = &a.data {
            state.config.data = Some(v.clone());
        }
        let cfg = state.config.clone();
        eprint!("{}", cfg.to_text());
        let data_path = cfg
            .data
            .clone()
            .ok_or_else(|| Error::Config("no data path in checkpoint or flags".into()))?;
        let set = load_set(&data_path, a.csv_has_labels)?;
        (trainer::resume(state, &set, &options)?, cfg)
    } else {
        let cfg = resolve_train_config(&a)?;
        eprint!("{}", cfg.to_text());
        let data_path = cfg.data.clone().ok_or_else(|| {
            Error::Config("no data path: use --data or data= in the config".into())
        })?;
        let set = load_set(&data_path, a.csv_has_labels)?;
        (trainer::train_with(&cfg, &set, &options)?, cfg)
    };
    println!("epoch,stage,img_loss,spd_loss,total,refresh_wall_ms");
    for m in &outcome.metrics {
        println!(
            "{},{},{:.6},{:.6},{:.6},{}",
            m.epoch,
            m.stage,
            m.img_loss,
            m.spd_loss,
            m.total,
            m.refresh_wall_ms
                .map_or(String::new(), |ms| format!("{ms:.1}"))
        );
    }
    println!("refreshes={}", outcome.refreshes);
    if cfg.checkpoint.is_none() {
        eprintln!("note: no checkpoint path configured, trained model was not saved");
    }
    Ok(())
}

fn load_state(path: Option<&PathBuf>) -> Result<Option<TrainState>> {
    path.map(|p| TrainState::load(p)).transpose()
}

fn eval_knn(a: EvalKnnArgs) -> Result<()> {
    eprintln!("{a:?}");
    let state = load_state(a.reps.ckpt.as_ref())?;
    let train = load_set(&a.train_data, a.reps.csv_has_labels)?;
    let test = load_set(&a.test_data, a.reps.csv_has_labels)?;
    let train_labels = labels_for(&train, a.train_labels.as_deref())?;
    let test_labels = labels_for(&test, a.test_labels.as_deref())?;
    let tr = reps_for(&a.reps, &train, state.as_ref())?;
    let te = reps_for(&a.reps, &test, state.as_ref())?;
    let report = knn_eval(tr.view(), &train_labels, te.view(), &test_labels, &a.k)?;
    let mut csv = String::from("k,accuracy\n");
    for (k, acc) in &report.per_k {
        let _ = writeln!(csv, "{k},{acc}");
    }
    print!("{csv}");
    println!(
        "best k={} accuracy={:.4}",
        report.best_k, report.best_accuracy
    );
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

fn eval_cluster(a: EvalClusterArgs, parallel: bool) -> Result<()> {
    eprintln!("{a:?}");
    let state = load_state(a.reps.ckpt.as_ref())?;
    let set = load_set(&a.data, a.reps.csv_has_labels)?;
    let labels = labels_for(&set, a.labels.as_deref())?;
    let k = a.k.unwrap_or_else(|| {
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.len()
    });
    let reps = reps_for(&a.reps, &set, state.as_ref())?;
    let params = KMeansParams {
        parallel,
        ..KMeansParams::default()
    };
    let r = cluster_eval(reps.view(), &labels, k, a.seed, &params)?;
    let csv = format!(
        "k,accuracy,nmi,ami\n{k},{},{},{}\n",
        r.accuracy, r.nmi, r.ami
    );
    print!("{csv}");
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    eprintln!("{a:?}");
    let state = TrainState::load(&a.ckpt)?;
    let set = load_set(&a.input.data, a.input.csv_has_labels)?;
    let reps = representations(&state, &set, a.level)?;
    let out = EmbeddingSet::from_matrix(&reps, None)?;
    write_embeddings(&out, &a.out)?;
    println!(
        "wrote {} x {} representations to {}",
        out.n(),
        out.d(),
        a.out.display()
    );
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    eprintln!("{a:?}");
    let dims = GradCheckDims {
        levels: a.levels,
        dims: a.dims,
        n_neg: a.n_neg,
        ..GradCheckDims::default()
    };
    let report = spd_grad_check(a.trials, &dims, a.tol, a.seed)?;
    println!(
        "trials={} max_rel_error={:.3e} tolerance={:e} result={}",
        report.trials,
        report.max_rel_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(Error::Math(format!(
            "gradient check failed: {:.3e} > {:e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn ablate(a: AblateArgs, parallel: bool) -> Result<()> {
    let mut base = TrainConfig::default();
    if let Some(path) = &a.config {
        base.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        base.set(k, v)?;
    }
    base.checkpoint = None;
    base.log = None;
    eprint!("{}", base.to_text());

    let set = load_set(&a.data, false)?;
    let labels = labels_for(&set, a.labels.as_deref())?;
    let test = match (&a.test_data, &a.test_labels) {
        (Some(d), l) => {
            let t = load_set(d, false)?;
            let tl = labels_for(&t, l.as_deref())?;
            Some((t, tl))
        }
        (None, Some(_)) => return Err(Error::Config("--test-labels needs --test-data".into())),
        (None, None) => None,
    };
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();

    let mut variants = Vec::new();
    for spec in a.levels_sweep.split(';').filter(|s| !s.trim().is_empty()) {
        let mut cfg = base.clone();
        cfg.level_sizes = parse_usize_list("levels-sweep", spec)?;
        variants.push(("levels", cfg));
    }
    for &n in &a.n_neg_sweep {
        let mut cfg = base.clone();
        cfg.n_neg = n;
        variants.push(("n_neg", cfg));
    }

    let options = TrainOptions {
        parallel,
        stop_after_epoch: None,
    };
    let mut csv = String::from("axis,level_sizes,n_neg,knn_best,cluster_acc,nmi,ami\n");
    for (axis, cfg) in variants {
        let outcome = trainer::train_with(&cfg, &set, &options)?;
        let reps = trainer::encode(&outcome.state, &set)?;
        let knn = match &test {
            Some((t, tl)) => {
                let te = trainer::encode(&outcome.state, t)?;
                let r = knn_eval(reps.view(), &labels, te.view(), tl, &a.k)?;
                format!("{}", r.best_accuracy)
            }
            None => String::new(),
        };
        let params = KMeansParams {
            parallel,
            ..KMeansParams::default()
        };
        let c = cluster_eval(reps.view(), &labels, distinct.len(), cfg.seed, &params)?;
        let sizes: Vec<String> = cfg.level_sizes.iter().map(usize::to_string).collect();
        let row = format!(
            "{axis},{},{},{knn},{},{},{}\n",
            sizes.join(" "),
            cfg.n_neg,
            c.accuracy,
            c.nmi,
            c.ami
        );
        print!("{row}");
        csv.push_str(&row);
    }
    write_text(&a.out, &csv)
}
