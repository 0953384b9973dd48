//! Command-line driver: `generate`, `train`, `evaluate`, `ablate`, `gradcheck`, `report`.
//!
//! [`run`] parses an argument vector and returns the process exit code:
//! 0 success, 1 usage error, 2 validation error, 3 numerical divergence.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use helo::data::{
    generate_synthetic, load_dataset, save_dataset, split_loso, split_subject_dependent, DatasetSchema, Sample,
    SplitMode, SplitPlan,
};
use helo::labels::correlation_csv;
use helo::metrics::{average_rank, format_metric_table, MetricVector, METRIC_COLUMNS, METRIC_DIRECTIONS};
use helo::training::{
    ablation_grid, build_ablated, check_gradients, evaluate_indices, train, AblationSpec, AdamState, Checkpoint,
    HeloModel, SplitInfo, TrainConfig,
};
use helo::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Tolerance the `gradcheck` command enforces.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "helo", version, about = "Multi-modal emotion distribution learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate(GenerateArgs),
    /// Train a model and write history, checkpoint and learned correlation.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Train every component and modality ablation and write the metric grid.
    Ablate(AblateArgs),
    /// Finite-difference check of the full pipeline on a 4-sample batch.
    Gradcheck(GradcheckArgs),
    /// Rank methods from evaluation or ablation CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Built-in schema name (dmer, wesad) or path to a schema JSON file.
    #[arg(long, default_value = "dmer")]
    schema: String,
    #[arg(long)]
    subjects: usize,
    #[arg(long)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Built-in schema name (dmer, wesad) or path to a schema JSON file.
    #[arg(long, default_value = "dmer")]
    schema: String,
    /// JSON file with `TrainConfig` fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds model initialization, shuffling and the split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_cc: Option<f64>,
    /// Use the whole training set's label correlation instead of each batch's.
    #[arg(long)]
    dataset_correlation: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long, default_value = "subject-dependent")]
    split: SplitMode,
    /// Per-subject training fraction for the subject-dependent split.
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// LOSO fold to run (index into subjects in ascending order).
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    disable_capf: bool,
    #[arg(long)]
    disable_othm: bool,
    #[arg(long)]
    disable_lcdca: bool,
    /// Modality to drop; repeatable.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
    /// Write the Sinkhorn marginal-violation trace of the first evaluated sample.
    #[arg(long)]
    sinkhorn_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score every sample instead of the checkpoint's test indices.
    #[arg(long)]
    all: bool,
    /// Also write a one-row evaluation CSV for `report`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method name for the CSV row.
    #[arg(long, default_value = "helo")]
    name: String,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dmer")]
    schema: String,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation or ablation CSVs; their rows are ranked together.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the rank table as CSV (method rows).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Maps a library error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::Numerical(_) => EXIT_DIVERGENCE,
        _ => EXIT_VALIDATION,
    }
}

/// `# config_hash=<hash>,seed=<seed>` provenance line for CSV outputs.
pub fn metadata_line(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash},seed={seed}\n")
}

fn load_schema(spec: &str) -> helo::Result<DatasetSchema> {
    match spec {
        "dmer" | "wesad" => DatasetSchema::builtin(spec),
        path => DatasetSchema::load(path),
    }
}

fn build_config(args: &ModelArgs) -> helo::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lambda_cc {
        cfg.lambda_cc = v;
    }
    if args.dataset_correlation {
        cfg.dataset_correlation = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_split(samples: &[Sample], args: &SplitArgs, seed: u64) -> helo::Result<(SplitPlan, usize)> {
    let plan = match args.split {
        SplitMode::SubjectDependent => split_subject_dependent(samples, args.ratio, seed)?,
        SplitMode::Loso => split_loso(samples)?,
    };
    if args.fold >= plan.folds.len() {
        return Err(Error::Split(format!(
            "fold {} requested but the split has {} folds",
            args.fold,
            plan.folds.len()
        )));
    }
    Ok((plan, args.fold))
}

fn write_file(path: &Path, contents: &str) -> helo::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn metrics_csv(meta: &str, first_column: &str, rows: &[(String, MetricVector)]) -> String {
    let mut out = String::from(meta);
    let _ = writeln!(out, "{first_column},{}", METRIC_COLUMNS.join(","));
    for (name, m) in rows {
        let _ = write!(out, "{name}");
        for v in m.to_array() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn generate(a: GenerateArgs) -> helo::Result<i32> {
    let schema = load_schema(&a.schema)?;
    let samples = generate_synthetic(&schema, a.subjects, a.trials, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(EXIT_OK)
}

fn train_cmd(a: TrainArgs) -> helo::Result<i32> {
    let schema = load_schema(&a.model.schema)?;
    let cfg = build_config(&a.model)?;
    let ablation = AblationSpec {
        disable_capf: a.disable_capf,
        disable_othm: a.disable_othm,
        disable_lcdca: a.disable_lcdca,
        excluded_modalities: a.exclude.iter().cloned().collect::<BTreeSet<_>>(),
    };
    let samples = load_dataset(&a.data, &schema)?;
    let (plan, index) = make_split(&samples, &a.split, cfg.seed)?;
    let fold = &plan.folds[index];
    let mut model = build_ablated(&schema, &cfg, &ablation)?;
    let mut adam = AdamState::new(&model.store);
    let history = train(&mut model, &mut adam, &samples, fold)?;

    fs::create_dir_all(&a.out_dir)?;
    let meta = metadata_line(&cfg.hash(), cfg.seed);
    write_file(&a.out_dir.join("history.csv"), &format!("{meta}{}", history.to_csv()))?;
    let split = SplitInfo::new(plan.mode, cfg.seed, index, fold);
    Checkpoint::capture(&model, Some(&adam), Some(split)).save(a.out_dir.join("checkpoint.json"))?;
    if let Some(m) = model.learned_correlation() {
        write_file(&a.out_dir.join("correlation.csv"), &format!("{meta}{}", correlation_csv(&schema.labels, &m)))?;
    }
    if let Some(path) = &a.sinkhorn_trace {
        let probe = fold.test.first().or(fold.train.first()).copied();
        let transport = match probe {
            Some(i) => model.forward(&model.store, &samples[i], None)?.transport,
            None => None,
        };
        match transport {
            Some(t) => write_file(path, &format!("{meta}{}", t.trace_csv()))?,
            None => log::warn!("variant {} does not run Sinkhorn; no trace written", ablation.label()),
        }
    }
    match history.last() {
        Some(r) => {
            println!("epoch {}: train loss {:.6}", r.epoch, r.train_loss);
            if let Some(m) = &r.test {
                print!("{}", format_metric_table(m));
            }
        }
        None => println!("no epochs run"),
    }
    Ok(EXIT_OK)
}

fn evaluate(a: EvaluateArgs) -> helo::Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (model, _) = ck.restore()?;
    let samples = load_dataset(&a.data, &model.schema)?;
    let idx: Vec<usize> = match (&ck.split, a.all) {
        (Some(s), false) => s.test.clone(),
        _ => (0..samples.len()).collect(),
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::Validation(format!(
            "checkpoint refers to sample {bad} but the dataset has {}",
            samples.len()
        )));
    }
    let m = evaluate_indices(&model, &samples, &idx)?;
    print!("{}", format_metric_table(&m));
    if let Some(out) = &a.out {
        let meta = metadata_line(&ck.config_hash, ck.config.seed);
        write_file(out, &metrics_csv(&meta, "method", &[(a.name.clone(), m)]))?;
    }
    Ok(EXIT_OK)
}

fn train_variant(
    schema: &DatasetSchema,
    cfg: &TrainConfig,
    ablation: &AblationSpec,
    samples: &[Sample],
    plan: &SplitPlan,
    folds: &[usize],
) -> helo::Result<MetricVector> {
    let mut sum = [0.0; 6];
    for &f in folds {
        let mut model: HeloModel = build_ablated(schema, cfg, ablation)?;
        let mut adam = AdamState::new(&model.store);
        let fold = &plan.folds[f];
        train(&mut model, &mut adam, samples, fold)?;
        let m = evaluate_indices(&model, samples, &fold.test)?;
        for (s, v) in sum.iter_mut().zip(m.to_array()) {
            *s += v;
        }
    }
    Ok(MetricVector::from_array(sum.map(|s| s / folds.len() as f64)))
}

fn ablate(a: AblateArgs) -> helo::Result<i32> {
    let schema = load_schema(&a.model.schema)?;
    let cfg = build_config(&a.model)?;
    let samples = load_dataset(&a.data, &schema)?;
    let (plan, index) = make_split(&samples, &a.split, cfg.seed)?;
    let folds: Vec<usize> = match plan.mode {
        SplitMode::SubjectDependent => vec![index],
        SplitMode::Loso => (0..plan.folds.len()).collect(),
    };
    let mut rows = Vec::new();
    for spec in ablation_grid(&schema) {
        let label = spec.label();
        log::info!("ablation variant {label}");
        let m = train_variant(&schema, &cfg, &spec, &samples, &plan, &folds)?;
        println!("{label}: kl {:.6}", m.kl);
        rows.push((label, m));
    }
    let meta = metadata_line(&cfg.hash(), cfg.seed);
    write_file(&a.out, &metrics_csv(&meta, "variant", &rows))?;
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> helo::Result<i32> {
    let schema = load_schema(&a.schema)?;
    let data = generate_synthetic(&schema, 2, 2, a.seed)?;
    let batch: Vec<&Sample> = data.iter().collect();
    let cfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::gradcheck()
    };
    let model = HeloModel::new(&schema, &cfg)?;
    let r = check_gradients(&model, &batch, a.eps)?;
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}; {} entries)",
        r.max_relative_error, r.worst_param, r.worst_index, r.analytic, r.numeric, r.entries_checked
    );
    if r.max_relative_error <= GRADCHECK_TOLERANCE {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: gradient check exceeds {GRADCHECK_TOLERANCE:e}");
        Ok(EXIT_DIVERGENCE)
    }
}

/// Reads `name,<metric columns>` rows, skipping `#` comment lines.
pub fn read_metric_rows(path: &Path) -> helo::Result<Vec<(String, MetricVector)>> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |msg: String| Error::Validation(format!("{}: {msg}", path.display()));
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().skip(1).collect();
    if cols != METRIC_COLUMNS {
        return Err(bad(format!(
            "expected columns {}, found {}",
            METRIC_COLUMNS.join(","),
            cols.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut vals = [0.0; 6];
        for (v, field) in vals.iter_mut().zip(rec.iter().skip(1)) {
            *v = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad number {field:?}")))?;
        }
        rows.push((rec[0].to_string(), MetricVector::from_array(vals)));
    }
    Ok(rows)
}

fn report(a: ReportArgs) -> helo::Result<i32> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(read_metric_rows(p)?);
    }
    let methods: Vec<String> = rows.iter().map(|(n, _)| n.clone()).collect();
    let metrics: Vec<String> = METRIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    let scores: Vec<Vec<Option<f64>>> = rows
        .iter()
        .map(|(_, m)| m.to_array().iter().map(|&v| Some(v)).collect())
        .collect();
    let table = average_rank(&methods, &metrics, &METRIC_DIRECTIONS, &scores)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        write_file(out, &table.to_csv())?;
    }
    Ok(EXIT_OK)
}
