use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sbmoe::data_io::{
    generate_synthetic, load_qrels, load_run, load_store, pairs_from_qrels, save_store,
    split_qrels, write_qrels, write_run, EmbeddingStore, Qrels, SyntheticSpec,
};
use sbmoe::moe_head::{head_forward, load_model, save_model, HeadParams, Pooling};
use sbmoe::retrieval_eval::{compare_runs, evaluate, retrieve, Metric, MetricReport};
use sbmoe::training::{
    grad_check, train_with_progress, EpochReport, GradCheckConfig, Similarity, TrainConfig,
};

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sbmoe::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    NumericCheck(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use sbmoe::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::Numeric(_) | E::DegenerateVariance) => 3,
            CliError::Core(_) => 2,
            CliError::File { .. } | CliError::Json(_) => 2,
            CliError::NumericCheck(_) => 3,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Single-block mixture-of-experts retrieval head: training and evaluation toolkit.
#[derive(Parser, Debug)]
#[command(name = "sbmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain rotation task.
    GenSynthetic(GenSyntheticArgs),
    /// Split qrels into train and held-out query sets.
    SplitQrels(SplitQrelsArgs),
    /// Train a head on frozen embeddings and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Apply a trained head to every vector of an embedding store.
    Apply(ApplyArgs),
    /// Exhaustive retrieval, written as a TREC run.
    Search(SearchArgs),
    /// Evaluate a TREC run against qrels.
    Eval(EvalArgs),
    /// Paired t-test between two runs with Bonferroni correction.
    Compare(CompareArgs),
    /// Train and evaluate one head per expert count.
    Sweep(SweepArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    /// JSON spec file; explicit flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Embedding dimension (required unless given by --spec).
    #[arg(long)]
    dim: Option<usize>,
    /// Number of domains [default: 4]
    #[arg(long)]
    domains: Option<usize>,
    /// Documents per domain [default: 1250]
    #[arg(long)]
    docs_per_domain: Option<usize>,
    /// Queries per domain [default: 625]
    #[arg(long)]
    queries_per_domain: Option<usize>,
    /// Query noise standard deviation [default: 0.05]
    #[arg(long)]
    noise: Option<f64>,
    /// Random seed [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Rotate only a random subspace of this dimension [default: full space]
    #[arg(long)]
    rotation_dim: Option<usize>,
    /// Norm of the per-domain document offset [default: 0]
    #[arg(long)]
    domain_offset: Option<f64>,
    /// Output prefix: writes PREFIX.queries.sbmv, PREFIX.docs.sbmv, PREFIX.qrels, PREFIX.spec.json
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args, Debug)]
struct SplitQrelsArgs {
    #[arg(long)]
    qrels: PathBuf,
    /// Fraction of queries held out
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Writes PREFIX.train.qrels and PREFIX.test.qrels
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Query embedding store (SBMV)
    #[arg(long)]
    queries: PathBuf,
    /// Document embedding store (SBMV)
    #[arg(long)]
    docs: PathBuf,
    /// Training qrels; every relevant (query, doc) pair is a positive
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "all")]
    pooling: Pooling,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    temperature: f64,
    /// Fraction of pairs held out for validation
    #[arg(long, default_value_t = 0.05)]
    val_frac: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "cosine")]
    similarity: Similarity,
}

impl TrainFlags {
    fn config(&self, n_experts: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            temperature: self.temperature,
            val_fraction: self.val_frac,
            seed: self.seed,
            pooling: self.pooling,
            n_experts,
            similarity: self.similarity,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Number of experts
    #[arg(long, default_value_t = 6)]
    experts: usize,
    /// Model output path; the sidecar goes next to it with extension .meta.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    /// Trained head; omit to rank raw embeddings
    #[arg(long)]
    model: Option<PathBuf>,
    /// Only search queries that appear in these qrels
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Retrieval depth
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value = "cosine")]
    similarity: Similarity,
    /// Run tag written in the last column
    #[arg(long, default_value = "sbmoe")]
    tag: String,
    /// Output run file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated metrics, e.g. ndcg@10,recall@100,ndcg_exp@10
    #[arg(long, default_value = "ndcg@10,recall@100")]
    metrics: String,
    /// Include per-query values in the report
    #[arg(long)]
    per_query: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    run_a: PathBuf,
    #[arg(long)]
    run_b: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "ndcg@10,recall@100")]
    metrics: String,
    /// Number of comparisons for Bonferroni correction
    #[arg(long, default_value_t = 1)]
    num_comparisons: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated expert counts
    #[arg(long, default_value = "3,6,9,12")]
    experts_list: String,
    /// Evaluation qrels (e.g. held-out queries); defaults to the training qrels
    #[arg(long)]
    eval_qrels: Option<PathBuf>,
    /// Retrieval depth for evaluation
    #[arg(long, default_value_t = 100)]
    k: usize,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    experts: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value = "all")]
    pooling: Pooling,
    #[arg(long, default_value = "cosine")]
    similarity: Similarity,
    #[arg(long, default_value_t = 0.05)]
    temperature: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Check the noise-free (inference) gate instead of fixed training noise
    #[arg(long)]
    no_noise: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("SBMOE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "SBMOE_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::SplitQrels(a) => cmd_split_qrels(a),
        Command::Train(a) => cmd_train(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Search(a) => cmd_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::File {
            path: path.to_owned(),
            source,
        })
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|source| CliError::File {
            path: path.to_owned(),
            source,
        })
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out).map_err(|e| CliError::Core(e.into()))
}

fn sha256_hex(path: &Path) -> CliResult<String> {
    let digest = Sha256::digest(read_bytes(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn parse_metrics(list: &str) -> CliResult<Vec<Metric>> {
    let metrics = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Metric>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if metrics.is_empty() {
        return Err(CliError::Usage("no metrics given".into()));
    }
    Ok(metrics)
}

fn load_training_qrels(path: &Path) -> CliResult<Qrels> {
    let parsed = load_qrels(path)?;
    if parsed.duplicates > 0 {
        eprintln!(
            "warning: {}: {} duplicate judgements (last one kept)",
            path.display(),
            parsed.duplicates
        );
    }
    Ok(parsed.qrels)
}

fn cmd_gen_synthetic(a: GenSyntheticArgs) -> CliResult {
    let base: Option<SyntheticSpec> = match &a.spec {
        Some(path) => Some(serde_json::from_slice(&read_bytes(path)?)?),
        None => None,
    };
    let dim = a
        .dim
        .or(base.as_ref().map(|s| s.dim))
        .ok_or_else(|| CliError::Usage("--dim is required (or supply it through --spec)".into()))?;
    let spec = SyntheticSpec {
        dim,
        domains: a.domains.or(base.as_ref().map(|s| s.domains)).unwrap_or(4),
        docs_per_domain: a
            .docs_per_domain
            .or(base.as_ref().map(|s| s.docs_per_domain))
            .unwrap_or(1250),
        queries_per_domain: a
            .queries_per_domain
            .or(base.as_ref().map(|s| s.queries_per_domain))
            .unwrap_or(625),
        noise: a.noise.or(base.as_ref().map(|s| s.noise)).unwrap_or(0.05),
        seed: a.seed.or(base.as_ref().map(|s| s.seed)).unwrap_or(42),
        rotation_dim: a
            .rotation_dim
            .or(base.as_ref().and_then(|s| s.rotation_dim)),
        domain_offset: a
            .domain_offset
            .or(base.as_ref().map(|s| s.domain_offset))
            .unwrap_or(0.0),
    };
    let data = generate_synthetic(&spec)?;

    let files = [
        with_suffix(&a.out_prefix, ".queries.sbmv"),
        with_suffix(&a.out_prefix, ".docs.sbmv"),
        with_suffix(&a.out_prefix, ".qrels"),
        with_suffix(&a.out_prefix, ".spec.json"),
    ];
    save_store(&data.queries, &files[0])?;
    save_store(&data.docs, &files[1])?;
    let mut w = create(&files[2])?;
    write_qrels(&data.qrels, &mut w)?;
    w.flush().map_err(|source| CliError::File {
        path: files[2].clone(),
        source,
    })?;
    write_json(&files[3], &spec)?;

    print_json(&serde_json::json!({
        "queries": files[0],
        "docs": files[1],
        "qrels": files[2],
        "spec": files[3],
        "num_queries": data.queries.len(),
        "num_docs": data.docs.len(),
    }))
}

fn cmd_split_qrels(a: SplitQrelsArgs) -> CliResult {
    let qrels = load_training_qrels(&a.qrels)?;
    let (train, test) = split_qrels(&qrels, a.test_frac, a.seed)?;
    let train_path = with_suffix(&a.out_prefix, ".train.qrels");
    let test_path = with_suffix(&a.out_prefix, ".test.qrels");
    for (path, q) in [(&train_path, &train), (&test_path, &test)] {
        let mut w = create(path)?;
        write_qrels(q, &mut w)?;
        w.flush().map_err(|source| CliError::File {
            path: path.clone(),
            source,
        })?;
    }
    print_json(&serde_json::json!({
        "train": train_path,
        "test": test_path,
        "train_queries": train.len(),
        "test_queries": test.len(),
    }))
}

#[derive(Serialize)]
struct EpochLine<'a> {
    event: &'static str,
    #[serde(flatten)]
    report: &'a EpochReport,
}

#[derive(Serialize)]
struct DataDigests {
    queries: String,
    docs: String,
    qrels: String,
}

#[derive(Serialize)]
struct MetaSidecar<'a> {
    train_config: &'a TrainConfig,
    epoch: usize,
    val_loss: f64,
    train_pairs: usize,
    val_pairs: usize,
    data_sha256: DataDigests,
}

struct TrainInputs {
    queries: EmbeddingStore,
    docs: EmbeddingStore,
    qrels: Qrels,
}

fn load_train_inputs(f: &TrainFlags) -> CliResult<TrainInputs> {
    Ok(TrainInputs {
        queries: load_store(&f.queries)?,
        docs: load_store(&f.docs)?,
        qrels: load_training_qrels(&f.qrels)?,
    })
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = a.flags.config(a.experts);
    cfg.validate()?;
    let inputs = load_train_inputs(&a.flags)?;
    let pairs = pairs_from_qrels(&inputs.qrels);

    let stdout = io::stdout();
    let mut progress_err = None;
    let outcome = train_with_progress(&pairs, &cfg, &inputs.queries, &inputs.docs, |report| {
        let line = EpochLine {
            event: "epoch",
            report,
        };
        let mut out = stdout.lock();
        if let Err(e) = serde_json::to_writer(&mut out, &line)
            .map_err(CliError::from)
            .and_then(|_| writeln!(out).map_err(|e| CliError::Core(e.into())))
        {
            progress_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = progress_err {
        return Err(e);
    }

    let ckpt = &outcome.checkpoint;
    save_model(&ckpt.head, &a.out)?;
    let meta_path = a.out.with_extension("meta.json");
    write_json(
        &meta_path,
        &MetaSidecar {
            train_config: &ckpt.train_config,
            epoch: ckpt.epoch,
            val_loss: ckpt.val_loss,
            train_pairs: outcome.train_pairs,
            val_pairs: outcome.val_pairs,
            data_sha256: DataDigests {
                queries: sha256_hex(&a.flags.queries)?,
                docs: sha256_hex(&a.flags.docs)?,
                qrels: sha256_hex(&a.flags.qrels)?,
            },
        },
    )?;
    print_json(&serde_json::json!({
        "event": "done",
        "best_epoch": ckpt.epoch,
        "best_val_loss": ckpt.val_loss,
        "model": a.out,
        "meta": meta_path,
    }))
}

fn apply_head(head: &HeadParams, store: &EmbeddingStore) -> CliResult<EmbeddingStore> {
    let mut out = EmbeddingStore::new(store.dim());
    for (id, v) in store.iter() {
        let (y, _) = head_forward(head, v, None)?;
        out.push(id.to_string(), &y)?;
    }
    Ok(out)
}

fn cmd_apply(a: ApplyArgs) -> CliResult {
    let head = load_model(&a.model)?;
    let store = load_store(&a.input)?;
    let out = apply_head(&head, &store)?;
    save_store(&out, &a.output)?;
    print_json(&serde_json::json!({ "output": a.output, "count": out.len(), "dim": out.dim() }))
}

/// Restricts a store to the queries judged in `qrels`, keeping store order.
fn judged_queries(store: &EmbeddingStore, qrels: &Qrels) -> CliResult<EmbeddingStore> {
    let mut out = EmbeddingStore::new(store.dim());
    for (id, v) in store.iter() {
        if qrels.contains_key(id) {
            out.push(id.to_string(), v)?;
        }
    }
    Ok(out)
}

fn cmd_search(a: SearchArgs) -> CliResult {
    let mut queries = load_store(&a.queries)?;
    let docs = load_store(&a.docs)?;
    if let Some(path) = &a.qrels {
        queries = judged_queries(&queries, &load_training_qrels(path)?)?;
    }
    let head = a.model.as_deref().map(load_model).transpose()?;
    let run = retrieve(&queries, &docs, head.as_ref(), a.k, a.similarity)?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_run(&run, &a.tag, &mut w)?;
            w.flush().map_err(|source| CliError::File {
                path: path.clone(),
                source,
            })?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_run(&run, &a.tag, &mut w)?;
            w.flush().map_err(|e| CliError::Core(e.into()))?;
        }
    }
    Ok(())
}

fn strip_per_query(mut report: MetricReport) -> MetricReport {
    for m in &mut report.metrics {
        m.per_query.clear();
    }
    report
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let metrics = parse_metrics(&a.metrics)?;
    let run = load_run(&a.run)?;
    let qrels = load_training_qrels(&a.qrels)?;
    let report = evaluate(&run, &qrels, &metrics);
    print_json(&if a.per_query {
        report
    } else {
        strip_per_query(report)
    })
}

fn cmd_compare(a: CompareArgs) -> CliResult {
    let metrics = parse_metrics(&a.metrics)?;
    let run_a = load_run(&a.run_a)?;
    let run_b = load_run(&a.run_b)?;
    let qrels = load_training_qrels(&a.qrels)?;
    let reports = compare_runs(&run_a, &run_b, &qrels, &metrics, a.num_comparisons)?;
    print_json(&reports)
}

#[derive(Serialize)]
struct SweepRow {
    /// `None` is the no-head baseline.
    experts: Option<usize>,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    metrics: BTreeMap<String, f64>,
}

fn sweep_row(
    experts: Option<usize>,
    head: Option<&HeadParams>,
    eval_queries: &EmbeddingStore,
    docs: &EmbeddingStore,
    qrels: &Qrels,
    k: usize,
    similarity: Similarity,
) -> CliResult<SweepRow> {
    let metrics = [Metric::NDCG_10, Metric::RECALL_100];
    let run = retrieve(eval_queries, docs, head, k, similarity)?;
    let report = evaluate(&run, qrels, &metrics);
    Ok(SweepRow {
        experts,
        best_epoch: None,
        best_val_loss: None,
        metrics: report
            .metrics
            .into_iter()
            .map(|m| (m.metric, m.mean))
            .collect(),
    })
}

/// The head as `train` would write it (f32 parameters), so sweep rows match
/// a separate train + search + eval.
fn as_stored(head: &HeadParams) -> CliResult<HeadParams> {
    let mut stored = head.clone();
    let rounded: Vec<f64> = head.to_flat().iter().map(|&x| x as f32 as f64).collect();
    stored.copy_from_flat(&rounded)?;
    Ok(stored)
}

fn parse_expert_list(list: &str) -> CliResult<Vec<usize>> {
    let counts = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("invalid expert count '{s}'")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if counts.is_empty() {
        return Err(CliError::Usage("--experts-list is empty".into()));
    }
    Ok(counts)
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let counts = parse_expert_list(&a.experts_list)?;
    for &n in &counts {
        a.flags.config(n).validate()?;
    }
    let inputs = load_train_inputs(&a.flags)?;
    let eval_qrels = match &a.eval_qrels {
        Some(path) => load_training_qrels(path)?,
        None => inputs.qrels.clone(),
    };
    let eval_queries = judged_queries(&inputs.queries, &eval_qrels)?;
    let pairs = pairs_from_qrels(&inputs.qrels);

    let mut rows = vec![sweep_row(
        None,
        None,
        &eval_queries,
        &inputs.docs,
        &eval_qrels,
        a.k,
        a.flags.similarity,
    )?];
    for &n in &counts {
        let cfg = a.flags.config(n);
        let outcome = train_with_progress(&pairs, &cfg, &inputs.queries, &inputs.docs, |_| {})?;
        let ckpt = outcome.checkpoint;
        let head = as_stored(&ckpt.head)?;
        let mut row = sweep_row(
            Some(n),
            Some(&head),
            &eval_queries,
            &inputs.docs,
            &eval_qrels,
            a.k,
            a.flags.similarity,
        )?;
        row.best_epoch = Some(ckpt.epoch);
        row.best_val_loss = Some(ckpt.val_loss);
        rows.push(row);
    }
    print_json(&serde_json::json!({
        "eval_queries": eval_queries.len(),
        "rows": rows,
    }))
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult {
    let cfg = GradCheckConfig {
        dim: a.dim,
        n_experts: a.experts,
        batch_size: a.batch_size,
        pooling: a.pooling,
        similarity: a.similarity,
        temperature: a.temperature,
        seed: a.seed,
        step: a.step,
        noise: !a.no_noise,
    };
    let report = grad_check(&cfg)?;
    print_json(&report)?;
    if report.max_rel_error > GRAD_CHECK_TOLERANCE {
        return Err(CliError::NumericCheck(format!(
            "max relative gradient error {:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}
