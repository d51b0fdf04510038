//! The `anamnesis` command line: thin wrappers over the core crate plus the
//! HTTP inference service.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use anamnesis_core::app::{
    classifier_dir, extractor_dir, load_classifier, load_extractor, save_classifier, save_extractor, AppConfig,
    AppError, EncoderKind, Pipeline, QuerySelection,
};
use anamnesis_core::corpus::{augment_descriptions, corpus_stats, split_corpus, Corpus, Split};
use anamnesis_core::decoding::ExtractionMethod;
use anamnesis_core::metrics::{
    per_symptom_report, render_classification_row, render_extraction_table, render_symptom_rows,
};
use anamnesis_core::models::{EncoderBackend, Scope};
use anamnesis_core::ontology::{SymptomId, SymptomOntology};
use anamnesis_core::synthetic::generate_synthetic_corpus;
use anamnesis_core::training::{
    evaluate_classifier, evaluate_extractor, extraction_instances, train_classifier, train_extractor,
    ClassifierRunOptions, ClassifierVariant,
};
use anamnesis_core::AnnotatedPost;

pub mod server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Validation(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// Configuration problems, bad inputs and incompatible artifacts are
/// validation errors; everything else happens at run time.
impl From<AppError> for CliError {
    fn from(e: AppError) -> Self {
        match e {
            AppError::Config(_)
            | AppError::Incompatible { .. }
            | AppError::Artifact { .. }
            | AppError::EmptyText
            | AppError::TextTooLong { .. }
            | AppError::Ontology(_)
            | AppError::Corpus(_) => CliError::Validation(e.into()),
            AppError::Decode(anamnesis_core::decoding::DecodeError::Config(_)) => CliError::Validation(e.into()),
            AppError::Training(ref t) if is_validation(t) => CliError::Validation(e.into()),
            _ => CliError::Runtime(e.into()),
        }
    }
}

fn is_validation(e: &anamnesis_core::training::TrainingError) -> bool {
    use anamnesis_core::training::TrainingError as T;
    matches!(
        e,
        T::Config(_) | T::VariantMismatch(_) | T::EmptyTrainSplit | T::Ontology(_) | T::Corpus(_)
    )
}

fn validation(e: impl Into<AppError>) -> CliError {
    CliError::from(e.into())
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "anamnesis",
    version,
    about = "German symptom classification and attribute extraction"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Configuration file (TOML); flags override its values.
    #[arg(long, global = true, env = "ANAMNESIS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (splits, sampling, initialization, dropout).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ontology document; the bundled ontology is used when absent.
    #[arg(long, global = true, env = "ANAMNESIS_ONTOLOGY")]
    pub ontology: Option<PathBuf>,
    /// Annotated corpus (JSONL).
    #[arg(long, global = true, env = "ANAMNESIS_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Directory holding model artifacts.
    #[arg(long, global = true, env = "ANAMNESIS_ARTIFACTS")]
    pub artifacts: Option<PathBuf>,
    /// Cache directory with pretrained encoders; selects the pretrained encoder.
    #[arg(long, global = true, env = "ANAMNESIS_CACHE")]
    pub cache_dir: Option<PathBuf>,
    /// Detection threshold of the classifier.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub threshold_start_end: Option<f64>,
    #[arg(long, global = true)]
    pub threshold_contiguous: Option<f64>,
    #[arg(long, global = true)]
    pub interior_factor: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub micro_batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ontology utilities.
    #[command(subcommand)]
    Ontology(OntologyCommand),
    /// Corpus utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a classifier or an extraction model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Evaluate a trained model on a corpus split.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the two-stage pipeline on a text and print the structured summary.
    Extract(ExtractArgs),
    /// Start the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum OntologyCommand {
    /// Parse and validate the ontology, then print a short summary.
    Validate,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Corpus statistics per attribute type.
    Stats,
    /// Assign train/validation/test splits and write the corpus.
    Split {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic annotated corpus.
    Synth {
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also assign splits.
        #[arg(long)]
        split: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ModelSelection {
    /// Classifier variant: tfidf_mlp, encoder_sigmoid, sq, sq+cl, sq+ad, sq+cl+ad.
    #[arg(long)]
    pub variant: Option<ClassifierVariant>,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractorSelection {
    /// `start_end` or `contiguous`.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<ExtractionMethod>,
    /// `general` or one attribute type (location, description, time, frequency, action).
    #[arg(long, value_parser = parse_scope, default_value = "general")]
    pub scope: Scope,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    Classify {
        #[command(flatten)]
        model: ModelSelection,
        /// Symptoms withheld from training entirely.
        #[arg(long = "hold-out")]
        hold_out: Vec<String>,
        /// Output directory (default: the artifact directory for the variant).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Extract {
        #[command(flatten)]
        model: ExtractorSelection,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    Classify {
        #[command(flatten)]
        model: ModelSelection,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Second variant for a per-symptom comparison.
        #[arg(long)]
        compare: Option<ClassifierVariant>,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    Extract {
        #[command(flatten)]
        model: ExtractorSelection,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Input text; read from --file or stdin when absent.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, conflicts_with = "text")]
    pub file: Option<PathBuf>,
    /// Which detections are queried for attributes.
    #[arg(long, value_parser = parse_queries)]
    pub queries: Option<QuerySelection>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ANAMNESIS_BIND")]
    pub bind: Option<String>,
}

fn parse_method(s: &str) -> Result<ExtractionMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("unknown method `{s}`"))
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown scope `{s}`"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|_| format!("unknown split `{s}`"))
}

fn parse_queries(s: &str) -> Result<QuerySelection, String> {
    s.parse().map_err(|e: AppError| e.to_string())
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolved configuration and inputs shared by the commands.
struct Workspace {
    config: AppConfig,
    ontology: SymptomOntology,
}

impl Workspace {
    fn new(global: &GlobalArgs) -> CliResult<Self> {
        let config = resolve_config(global)?;
        let ontology = match &config.data.ontology {
            Some(p) => SymptomOntology::load(p).map_err(validation)?,
            None => anamnesis_core::fixtures::ontology(),
        };
        Ok(Workspace { config, ontology })
    }

    fn corpus(&self) -> CliResult<Corpus> {
        let path = self
            .config
            .data
            .corpus
            .as_ref()
            .ok_or_else(|| CliError::Usage("no corpus given (--corpus or data.corpus)".into()))?;
        let mut corpus = Corpus::load(path, Some(&self.ontology)).map_err(validation)?;
        corpus.augmentation = augment_descriptions(&corpus, &self.ontology);
        Ok(corpus)
    }

    fn variant(&self, selection: &ModelSelection) -> ClassifierVariant {
        selection.variant.unwrap_or(self.config.model.classifier)
    }

    fn method(&self, selection: &ExtractorSelection) -> ExtractionMethod {
        selection.method.unwrap_or(self.config.model.extraction_method)
    }

    fn artifacts(&self) -> &Path {
        &self.config.data.artifacts_dir
    }
}

/// Loads the configuration file (if any) and applies flag overrides.
pub fn resolve_config(global: &GlobalArgs) -> CliResult<AppConfig> {
    let mut cfg = match &global.config {
        Some(p) => AppConfig::load(p).map_err(validation)?,
        None => AppConfig::default(),
    };
    let d = &mut cfg.data;
    if let Some(p) = &global.ontology {
        d.ontology = Some(p.clone());
    }
    if let Some(p) = &global.corpus {
        d.corpus = Some(p.clone());
    }
    if let Some(p) = &global.artifacts {
        d.artifacts_dir = p.clone();
    }
    if let Some(p) = &global.cache_dir {
        d.cache_dir = Some(p.clone());
        cfg.model.encoder = EncoderKind::Pretrained;
    }
    let t = &mut cfg.training;
    if let Some(s) = global.seed {
        t.seed = s;
    }
    if let Some(v) = global.threshold {
        t.threshold = v;
    }
    if let Some(v) = global.epochs {
        t.epochs = v;
    }
    if let Some(v) = global.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = global.batch_size {
        t.batch_size = v;
        t.micro_batch_size = t.micro_batch_size.min(v);
    }
    if let Some(v) = global.micro_batch_size {
        t.micro_batch_size = v;
    }
    if let Some(v) = global.eval_every {
        t.eval_every = v;
    }
    let dc = &mut cfg.decoder;
    if let Some(v) = global.threshold_start_end {
        dc.threshold_start_end = v;
    }
    if let Some(v) = global.threshold_contiguous {
        dc.threshold_contiguous = v;
    }
    if let Some(v) = global.interior_factor {
        dc.interior_factor = v;
    }
    cfg.validate().map_err(validation)?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> CliResult {
    let ctx = Workspace::new(&cli.global)?;
    match cli.command {
        Command::Ontology(OntologyCommand::Validate) => ontology_validate(&ctx),
        Command::Data(cmd) => data(&ctx, cmd),
        Command::Train(cmd) => train(&ctx, cmd),
        Command::Eval(cmd) => eval(&ctx, cmd),
        Command::Extract(args) => extract(&ctx, args),
        Command::Serve(args) => {
            let mut config = ctx.config;
            if let Some(bind) = args.bind {
                config.service.bind = bind;
            }
            server::serve_blocking(config, ctx.ontology).map_err(CliError::Runtime)
        }
    }
}

fn ontology_validate(ctx: &Workspace) -> CliResult {
    let o = &ctx.ontology;
    println!(
        "ontology ok: {} symptoms, {} leaves, root {}, hash {}",
        o.nodes().count(),
        o.leaves().len(),
        o.root().as_str(),
        o.content_hash()
    );
    Ok(())
}

fn data(ctx: &Workspace, cmd: DataCommand) -> CliResult {
    let seed = ctx.config.training.seed;
    match cmd {
        DataCommand::Stats => {
            let corpus = ctx.corpus()?;
            print!("{}", corpus_stats(&corpus).render_table());
        }
        DataCommand::Split { out } => {
            let corpus = split_corpus(&ctx.corpus()?, seed).map_err(validation)?;
            corpus.save(&out).map_err(validation)?;
            for split in [Split::Train, Split::Validation, Split::Test] {
                println!("{split:?}: {}", corpus.posts_in(split).count());
            }
        }
        DataCommand::Synth { size, out, split } => {
            let mut corpus = generate_synthetic_corpus(&ctx.ontology, size, seed).map_err(validation)?;
            if split {
                corpus = split_corpus(&corpus, seed).map_err(validation)?;
            }
            corpus.save(&out).map_err(validation)?;
            println!("wrote {} posts to {}", corpus.len(), out.display());
        }
    }
    Ok(())
}

fn train(ctx: &Workspace, cmd: TrainCommand) -> CliResult {
    let corpus = ctx.corpus()?;
    let cfg = ctx.config.training_config();
    let source = ctx.config.encoder_source().map_err(validation)?;
    match cmd {
        TrainCommand::Classify { model, hold_out, out } => {
            let variant = ctx.variant(&model);
            let mut exclude = BTreeSet::new();
            for id in hold_out {
                let id = SymptomId::new(id);
                ctx.ontology.node(&id).map_err(validation)?;
                exclude.insert(id);
            }
            let dir = out.unwrap_or_else(|| classifier_dir(ctx.artifacts(), variant));
            let options = ClassifierRunOptions {
                exclude,
                checkpoint_dir: Some(dir.join("checkpoints")),
            };
            tracing::info!(%variant, dir = %dir.display(), "training classifier");
            let (trained, record) =
                train_classifier(&cfg, &corpus, &ctx.ontology, variant, &source, &options).map_err(validation)?;
            save_classifier(&dir, &trained, variant, &cfg, &ctx.ontology, &record).map_err(validation)?;
            println!(
                "{variant}: best validation micro-F1 {:.3} after {} optimizer steps ({:?}); saved to {}",
                record.best_metric,
                record.optimizer_steps,
                record.stop_reason,
                dir.display()
            );
        }
        TrainCommand::Extract { model, out } => {
            let method = ctx.method(&model);
            let dir = out.unwrap_or_else(|| extractor_dir(ctx.artifacts(), method, model.scope));
            tracing::info!(
                method = method.as_str(),
                scope = model.scope.as_str(),
                "training extractor"
            );
            let (trained, record) = train_extractor(
                &cfg,
                &corpus,
                &ctx.ontology,
                method,
                model.scope,
                &source,
                &ctx.config.decoder,
                Some(&dir.join("checkpoints")),
            )
            .map_err(validation)?;
            save_extractor(&dir, &trained, &cfg, &ctx.ontology, &record).map_err(validation)?;
            println!(
                "{}/{}: best validation F1 sum {:.3} after {} optimizer steps; saved to {}",
                method.as_str(),
                model.scope.as_str(),
                record.best_metric,
                record.optimizer_steps,
                dir.display()
            );
        }
    }
    Ok(())
}

fn write_report(path: Option<&Path>, report: &impl serde::Serialize) -> CliResult {
    if let Some(path) = path {
        let json = serde_json::to_string_pretty(report).expect("reports serialize");
        std::fs::write(path, json)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::Runtime)?;
    }
    Ok(())
}

fn eval(ctx: &Workspace, cmd: EvalCommand) -> CliResult {
    let corpus = ctx.corpus()?;
    match cmd {
        EvalCommand::Classify {
            model,
            split,
            compare,
            json,
        } => {
            let posts: Vec<&AnnotatedPost> = corpus.posts_in(split).collect();
            let threshold = ctx.config.training.threshold;
            let variant = ctx.variant(&model);
            let report = classifier_report(ctx, variant, &posts, threshold)?;
            print!("{}", render_classification_row(&variant.to_string(), &report));
            if let Some(other) = compare {
                let other_report = classifier_report(ctx, other, &posts, threshold)?;
                print!("{}", render_classification_row(&other.to_string(), &other_report));
                let freq = corpus.train_frequencies(&ctx.ontology).map_err(validation)?;
                let rows = per_symptom_report(&report, &other_report, &freq, true);
                print!(
                    "{}",
                    render_symptom_rows(&rows, &variant.to_string(), &other.to_string())
                );
            }
            write_report(json.as_deref(), &report)
        }
        EvalCommand::Extract { model, split, json } => {
            let method = ctx.method(&model);
            let (extractor, _) = load_extractor(extractor_dir(ctx.artifacts(), method, model.scope), &ctx.ontology)
                .map_err(validation)?;
            let posts: Vec<&AnnotatedPost> = corpus.posts_in(split).collect();
            let instances = extraction_instances(
                &posts,
                &ctx.ontology,
                extractor.encoder.tokenizer(),
                extractor.encoder.max_len(),
            )
            .map_err(validation)?;
            let report = evaluate_extractor(&extractor, &instances, &ctx.config.decoder).map_err(validation)?;
            let name = format!("{} ({})", method.as_str(), model.scope.as_str());
            print!("{}", render_extraction_table(&name, &report));
            write_report(json.as_deref(), &report)
        }
    }
}

fn classifier_report(
    ctx: &Workspace,
    variant: ClassifierVariant,
    posts: &[&AnnotatedPost],
    threshold: f64,
) -> CliResult<anamnesis_core::EvalReport> {
    let (model, _) = load_classifier(classifier_dir(ctx.artifacts(), variant), &ctx.ontology).map_err(validation)?;
    evaluate_classifier(&model, &ctx.ontology, posts, threshold).map_err(validation)
}

fn extract(ctx: &Workspace, args: ExtractArgs) -> CliResult {
    let text = match (args.text, args.file) {
        (Some(t), _) => t,
        (None, Some(p)) => std::fs::read_to_string(&p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(CliError::Validation)?,
        (None, None) => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .context("reading stdin")
                .map_err(CliError::Runtime)?;
            s
        }
    };
    let mut config = ctx.config.clone();
    if let Some(q) = args.queries {
        config.model.queries = q;
    }
    let pipeline = Pipeline::load(&config, ctx.ontology.clone()).map_err(validation)?;
    let summary = pipeline.extract(&text).map_err(validation)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

/// Installs a stderr log subscriber honouring `RUST_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
