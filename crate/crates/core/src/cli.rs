//! Command-line entry point. [`run`] returns the process exit code:
//! 0 on success, 1 for usage and validation errors, 2 for runtime failures.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dependency::simplex_project;
use crate::eval::{dump_dependencies, evaluate, predict_scores, EvalError};
use crate::ingest::{
    build_schema, encode_table, read_cache, read_csv, split_and_batch, write_cache, FieldDecl, FieldKind, FieldSchema,
    IngestError, RawTable, SparseInstance,
};
use crate::parallel::default_threads;
use crate::trainer::{train, EpochLog, ModelCheckpoint, TrainConfig, TrainError, CHECKPOINT_VERSION};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1)");

#[derive(Parser, Debug)]
#[command(name = "mdl", version = VERSION, about = "Train and apply dependency-refined field models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a feature vocabulary from a CSV file.
    BuildSchema(BuildSchemaArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Report metrics of a checkpoint on labelled data.
    Evaluate(EvalArgs),
    /// Write `row_id,score` predictions.
    Predict(PredictArgs),
    /// Export the shared and the refined dependency matrix of one row.
    DumpDeps(DumpArgs),
    /// Project whitespace-separated numbers from stdin onto the scaled simplex.
    ProjectSimplex(ProjectArgs),
}

#[derive(Args, Debug)]
struct BuildSchemaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "label")]
    label: String,
    /// `name:kind[:min_count]`, repeatable or comma separated. Columns not
    /// listed use `--default-kind`.
    #[arg(long = "field", value_delimiter = ',')]
    fields: Vec<String>,
    #[arg(long, default_value = "categorical")]
    default_kind: String,
    #[arg(long, default_value_t = 1)]
    min_count: u64,
}

#[derive(Args, Debug, Default)]
struct ConfigFlags {
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    zeta: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    first_order: Option<String>,
    #[arg(long)]
    shards: Option<String>,
    #[arg(long)]
    mu_init: Option<String>,
    #[arg(long)]
    init_scale: Option<String>,
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    train_ratio: Option<String>,
    #[arg(long)]
    val_ratio: Option<String>,
    #[arg(long)]
    test_ratio: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("k", &self.k),
            ("t", &self.t),
            ("eta", &self.eta),
            ("gamma", &self.gamma),
            ("lambda", &self.lambda),
            ("batch_size", &self.batch_size),
            ("optimizer", &self.optimizer),
            ("epochs", &self.epochs),
            ("patience", &self.patience),
            ("seed", &self.seed),
            ("task", &self.task),
            ("mode", &self.mode),
            ("zeta", &self.zeta),
            ("first_order", &self.first_order),
            ("shards", &self.shards),
            ("mu_init", &self.mu_init),
            ("init_scale", &self.init_scale),
            ("clip_norm", &self.clip_norm),
            ("hidden", &self.hidden),
            ("train_ratio", &self.train_ratio),
            ("val_ratio", &self.val_ratio),
            ("test_ratio", &self.test_ratio),
        ]
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log file; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for encoded-data caches keyed by schema hash.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Refinement steps at test time; defaults to the trained value.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 1-based data row.
    #[arg(long, default_value_t = 1)]
    row: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    lambda: f64,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Label(_) | TrainError::EmptyTrain => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) | EvalError::Model(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::BuildSchema(a) => cmd_build_schema(a),
        Command::Train(a) => cmd_train(*a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::DumpDeps(a) => cmd_dump(a),
        Command::ProjectSimplex(a) => cmd_project(a),
    }
}

fn print_resolved(pairs: &[(&str, String)]) {
    let mut err = std::io::stderr().lock();
    for (k, v) in pairs {
        let _ = writeln!(err, "# {k}={v}");
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn parse_field(spec: &str, default_min: u64) -> Result<FieldDecl, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Validation(format!("bad field spec {spec:?}, expected name:kind[:min_count]"));
    if parts.len() < 2 || parts.len() > 3 || parts[0].is_empty() {
        return Err(bad());
    }
    let kind = FieldKind::parse(parts[1]).ok_or_else(bad)?;
    let min = match parts.get(2) {
        Some(v) => v.parse().map_err(|_| bad())?,
        None => default_min,
    };
    Ok(FieldDecl::new(parts[0], kind, min))
}

fn cmd_build_schema(a: BuildSchemaArgs) -> Result<(), CliError> {
    let default_kind = FieldKind::parse(&a.default_kind)
        .ok_or_else(|| CliError::Validation(format!("unknown kind {:?}", a.default_kind)))?;
    print_resolved(&[
        ("command", "build-schema".into()),
        ("data", path_str(&a.data)),
        ("out", path_str(&a.out)),
        ("label", a.label.clone()),
        ("default_kind", default_kind.as_str().into()),
        ("min_count", a.min_count.to_string()),
    ]);
    let table = read_csv(&a.data)?;
    let explicit: Vec<FieldDecl> = a
        .fields
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| parse_field(s, a.min_count))
        .collect::<Result<_, _>>()?;
    let mut decls = Vec::new();
    for col in &table.columns {
        if *col == a.label {
            continue;
        }
        match explicit.iter().find(|d| &d.name == col) {
            Some(d) => decls.push(d.clone()),
            None => decls.push(FieldDecl::new(col.clone(), default_kind, a.min_count)),
        }
    }
    if let Some(d) = explicit.iter().find(|d| !table.columns.contains(&d.name)) {
        return Err(CliError::Validation(format!("field {:?} is not a column of the data", d.name)));
    }
    if !table.columns.contains(&a.label) {
        return Err(CliError::Validation(format!("label column {:?} not found", a.label)));
    }
    let schema = build_schema(table.records(), &decls, &a.label)?;
    std::fs::write(&a.out, schema.to_text())?;
    println!(
        "fields={} features={} hash={}",
        schema.num_fields(),
        schema.total_features(),
        schema.content_hash()
    );
    Ok(())
}

fn load_schema(path: &Path) -> Result<FieldSchema, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(FieldSchema::from_text(&text)?)
}

/// Reads and encodes `path`, adding a zero label column when the data has none.
fn load_data(path: &Path, schema: &FieldSchema, threads: usize, allow_unlabelled: bool) -> Result<Vec<SparseInstance>, CliError> {
    let mut table: RawTable = read_csv(path)?;
    if allow_unlabelled && !table.columns.contains(&schema.label) {
        table.columns.push(schema.label.clone());
        for r in &mut table.rows {
            r.push("0".into());
        }
    }
    Ok(encode_table(&table, schema, threads)?)
}

fn load_data_cached(path: &Path, schema: &FieldSchema, threads: usize, cache_dir: Option<&Path>) -> Result<Vec<SparseInstance>, CliError> {
    let Some(dir) = cache_dir else {
        return load_data(path, schema, threads, false);
    };
    let stem = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    let cache = dir.join(format!("{stem}-{}.bin", &schema.content_hash()[..16]));
    if cache.exists() {
        if let Ok(data) = read_cache(&cache, schema) {
            return Ok(data);
        }
    }
    let data = load_data(path, schema, threads, false)?;
    std::fs::create_dir_all(dir)?;
    write_cache(&cache, schema, &data)?;
    Ok(data)
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p)?;
        config.apply_text(&text)?;
    }
    for (key, value) in a.flags.pairs() {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let config = resolve_config(&a)?;
    let threads = a.threads.unwrap_or_else(default_threads);
    let mut resolved = vec![
        ("command", "train".to_string()),
        ("data", path_str(&a.data)),
        ("schema", path_str(&a.schema)),
        ("out", path_str(&a.out)),
        ("threads", threads.to_string()),
    ];
    let config_text = config.to_text();
    for line in config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            resolved.push((k, v.to_string()));
        }
    }
    print_resolved(&resolved);

    let schema = load_schema(&a.schema)?;
    let data = load_data_cached(&a.data, &schema, threads, a.cache_dir.as_deref())?;
    let split = split_and_batch(&data, config.split, config.batch_size, config.seed)?;

    let mut log_file = match &a.log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut write_log = |line: &str| -> std::io::Result<()> {
        match log_file.as_mut() {
            Some(f) => {
                writeln!(f, "{line}")?;
                f.flush()
            }
            None => writeln!(std::io::stdout(), "{line}"),
        }
    };
    write_log(EpochLog::HEADER)?;
    let mut io_error = None;
    let outcome = train(&split, &schema, &config, threads, &mut |e: &EpochLog| {
        if let Err(err) = write_log(&e.to_line()) {
            io_error.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    outcome.checkpoint.save(&a.out)?;
    if !split.test.is_empty() {
        let spec = outcome.checkpoint.config.graph_spec();
        let report = evaluate(&outcome.checkpoint.model, &spec, &split.test, threads)?;
        println!("test {}", report.summary_line());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CliError> {
    ModelCheckpoint::load(path).map_err(|e| match e {
        TrainError::Io(io) => CliError::Runtime(io.to_string()),
        other => CliError::Validation(other.to_string()),
    })
}

fn cmd_evaluate(a: EvalArgs) -> Result<(), CliError> {
    let threads = a.threads.unwrap_or_else(default_threads);
    let mut ckpt = load_checkpoint(&a.model)?;
    if let Some(t) = a.t {
        ckpt.config.t = t;
    }
    print_resolved(&[
        ("command", "evaluate".into()),
        ("model", path_str(&a.model)),
        ("data", path_str(&a.data)),
        ("t", ckpt.config.t.to_string()),
        ("threads", threads.to_string()),
    ]);
    let data = load_data(&a.data, &ckpt.schema, threads, false)?;
    let report = evaluate(&ckpt.model, &ckpt.config.graph_spec(), &data, threads)?;
    println!("{}", report.summary_line());
    print!("{}", report.key_values());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let threads = a.threads.unwrap_or_else(default_threads);
    let mut ckpt = load_checkpoint(&a.model)?;
    if let Some(t) = a.t {
        ckpt.config.t = t;
    }
    print_resolved(&[
        ("command", "predict".into()),
        ("model", path_str(&a.model)),
        ("data", path_str(&a.data)),
        ("out", path_str(&a.out)),
        ("t", ckpt.config.t.to_string()),
        ("threads", threads.to_string()),
    ]);
    let data = load_data(&a.data, &ckpt.schema, threads, true)?;
    let scores = predict_scores(&ckpt.model, &ckpt.config.graph_spec(), &data, threads)?;
    let mut out = String::from("row_id,score\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{},{s}\n", i + 1));
    }
    std::fs::write(&a.out, out)?;
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    print_resolved(&[
        ("command", "dump-deps".into()),
        ("model", path_str(&a.model)),
        ("data", path_str(&a.data)),
        ("row", a.row.to_string()),
        ("out", path_str(&a.out)),
    ]);
    let data = load_data(&a.data, &ckpt.schema, 1, true)?;
    let inst = a
        .row
        .checked_sub(1)
        .and_then(|i| data.get(i))
        .ok_or_else(|| CliError::Validation(format!("row {} not in 1..={}", a.row, data.len())))?;
    dump_dependencies(inst, &ckpt, &a.out)?;
    Ok(())
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn cmd_project(a: ProjectArgs) -> Result<(), CliError> {
    print_resolved(&[("command", "project-simplex".into()), ("lambda", a.lambda.to_string())]);
    let mut values = Vec::new();
    for line in std::io::stdin().lock().lines() {
        for tok in line?.split_whitespace() {
            values.push(
                tok.parse::<f64>()
                    .map_err(|_| CliError::Validation(format!("not a number: {tok:?}")))?,
            );
        }
    }
    let r = simplex_project(&values, a.lambda).map_err(|e| CliError::Validation(e.to_string()))?;
    println!("mu={} K={} beta={}", join(&r.mu), r.k, r.beta);
    Ok(())
}

/// Checkpoint format version reported by `--version`.
pub fn checkpoint_version() -> u32 {
    CHECKPOINT_VERSION
}
