//! `crfix` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crfix_core::backend::{write_replay_store, Backend, HttpBackend, HttpBackendConfig, ReplayBackend};
use crfix_core::classify::{
    eval_classifier, ActionabilityClassifier, Exemplar, LabeledComment, LabeledPair, ModelActionability,
    ModelPairQuality, PairLabel, PairQualityClassifier, RuleActionability, RulePairQuality,
};
use crfix_core::curation::{curate, export_sft, ingest_pairs, write_pairs};
use crfix_core::eval::{ground_truth_replay, load_corpus, render_report, run_eval, ReportFormat};
use crfix_core::experiment::{analyze_experiment, render_experiment_table, ExperimentSpec, MetricSample};
use crfix_core::funnel::FunnelEvent;
use crfix_core::patch::{apply_patch, detect_applied, diff_files, parse_patch, serialize_patch, DetectMode, SourceFile};
use crfix_core::stats::{assign_arm, fisher_exact_two_sided, welch_t_test, Arm, ContingencyTable};
use serde::de::DeserializeOwned;

use crate::config::PipelineConfig;
use crate::service::Service;

#[derive(Debug, Parser)]
#[command(name = "crfix", version, about = "Turn code review comments into validated patch suggestions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Score a backend on a benchmark corpus (Exact Match and SPG).
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Replay store utilities.
    #[command(subcommand)]
    Replay(ReplayCmd),
    /// Line-diff patch utilities.
    #[command(subcommand)]
    Patch(PatchCmd),
    /// Classifier evaluation.
    #[command(subcommand)]
    Classify(ClassifyCmd),
    /// Training-pair curation.
    #[command(subcommand)]
    Curate(CurateCmd),
    /// A/B experiment analysis.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Standalone significance tests.
    #[command(subcommand)]
    Stats(StatsCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Replay,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierKind {
    Rule,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Actionability,
    PairQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Strict,
    Content,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Replay)]
    pub backend: BackendKind,
    #[arg(long)]
    pub replay_file: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable that holds the bearer token.
    #[arg(long)]
    pub auth_token_env: Option<String>,
    #[arg(long, default_value_t = 60)]
    pub timeout_s: u64,
    #[arg(long, default_value_t = 0)]
    pub max_retries: u32,
}

impl BackendArgs {
    fn build(&self) -> Result<Arc<dyn Backend>> {
        Ok(match self.backend {
            BackendKind::Replay => {
                let path = self.replay_file.as_ref().context("--replay-file is required")?;
                Arc::new(ReplayBackend::load(path).with_context(|| format!("loading {}", path.display()))?)
            }
            BackendKind::Http => Arc::new(HttpBackend::new(HttpBackendConfig {
                endpoint: self.endpoint.clone().context("--endpoint is required")?,
                model: self.model.clone().context("--model is required")?,
                auth_token_env: self.auth_token_env.clone(),
                timeout_s: self.timeout_s,
                max_retries: self.max_retries,
            })?),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum ReplayCmd {
    /// Write a replay store answering every corpus case with its ground truth.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PatchCmd {
    /// Apply a patch file to a source file.
    Apply {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check whether a patch appears in a committed file.
    CheckApplied {
        #[arg(long)]
        committed: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Strict)]
        mode: Mode,
    },
    /// Print the patch that turns one file into another.
    Diff {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClassifyCmd {
    /// Score a classifier against a labeled JSONL set.
    Eval {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Actionability)]
        task: Task,
        #[arg(long, value_enum, default_value_t = ClassifierKind::Rule)]
        classifier: ClassifierKind,
        /// Few-shot exemplars for the model actionability classifier.
        #[arg(long)]
        exemplars: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum CurateCmd {
    /// Validate candidate pairs and report what was rejected.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Where to write the pairs that passed ingest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep pairs accepted by annotation or by the pair-quality classifier.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejected_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ClassifierKind::Rule)]
        classifier: ClassifierKind,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Write prompt/completion records for fine-tuning.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCmd {
    Analyze {
        /// Experiment spec, TOML or JSON by extension.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Debug, Subcommand)]
pub enum StatsCmd {
    /// Two-sided Fisher exact test on `a,b,c,d` (test row first).
    Fisher {
        #[arg(long)]
        table: String,
    },
    /// Welch t-test; each side is a file of numbers or an inline comma list.
    Ttest {
        /// Control sample.
        #[arg(long)]
        a: String,
        /// Test sample.
        #[arg(long)]
        b: String,
    },
    /// Print the experiment arm of each unit.
    Assign {
        #[arg(long)]
        salt: String,
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        /// Also assign `<prefix>0` .. `<prefix><count-1>`.
        #[arg(long, default_value = "")]
        prefix: String,
        #[arg(long, default_value_t = 0)]
        count: usize,
        units: Vec<String>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn load_source(path: &Path) -> Result<SourceFile> {
    Ok(SourceFile::from_content(path.display().to_string(), &read(path)?)?)
}

fn parse_numbers(arg: &str) -> Result<Vec<f64>> {
    let text = if Path::new(arg).is_file() {
        read(Path::new(arg))?
    } else {
        arg.to_owned()
    };
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("not a number: {t:?}")))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve { config, port, host } => serve(&config, &host, port),
        Command::Eval {
            corpus,
            backend,
            parallelism,
            out,
            format,
        } => {
            if parallelism == 0 {
                bail!("--parallelism must be at least 1");
            }
            let cases = load_corpus(&corpus)?;
            let backend = backend.build()?;
            let report = run_eval(backend.as_ref(), &cases, parallelism)?;
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Json => ReportFormat::Json,
            };
            emit(out.as_deref(), &render_report(&report, format))
        }
        Command::Replay(ReplayCmd::Build { corpus, out }) => {
            let cases = load_corpus(&corpus)?;
            emit(Some(&out), &write_replay_store(&ground_truth_replay(&cases)))
        }
        Command::Patch(cmd) => patch_cmd(cmd),
        Command::Classify(ClassifyCmd::Eval {
            labeled,
            task,
            classifier,
            exemplars,
            backend,
        }) => {
            let (predictions, gold) = match task {
                Task::Actionability => {
                    let items: Vec<LabeledComment> = read_jsonl(&labeled)?;
                    let clf: Box<dyn ActionabilityClassifier> = match classifier {
                        ClassifierKind::Rule => Box::new(RuleActionability),
                        ClassifierKind::Model => {
                            let path = exemplars.context("--exemplars is required for the model classifier")?;
                            let ex: Vec<Exemplar> = read_jsonl(&path)?;
                            Box::new(ModelActionability::new(backend.build()?, ex)?)
                        }
                    };
                    let mut preds = Vec::with_capacity(items.len());
                    for item in &items {
                        let context: Vec<String> = item.context.lines().map(str::to_owned).collect();
                        preds.push(clf.classify(&item.comment, &context)?.actionable);
                    }
                    (preds, items.iter().map(|i| i.label).collect::<Vec<_>>())
                }
                Task::PairQuality => {
                    let items: Vec<LabeledPair> = read_jsonl(&labeled)?;
                    let clf = pair_classifier(classifier, &backend)?;
                    let mut preds = Vec::with_capacity(items.len());
                    for item in &items {
                        let ctx = SourceFile::from_content(&item.comment.file_path, &item.context)?;
                        preds.push(clf.classify(&item.comment, &item.patch, &ctx)? == PairLabel::Good);
                    }
                    (preds, items.iter().map(|i| i.label == PairLabel::Good).collect())
                }
            };
            emit(None, &pretty(&eval_classifier(&predictions, &gold)?))
        }
        Command::Curate(cmd) => curate_cmd(cmd),
        Command::Experiment(ExperimentCmd::Analyze {
            spec,
            events,
            samples,
            format,
        }) => {
            let text = read(&spec)?;
            let spec: ExperimentSpec = if spec.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text)?
            } else {
                serde_json::from_str(&text)?
            };
            let events: Vec<FunnelEvent> = read_jsonl(&events)?;
            let samples: Vec<MetricSample> = read_jsonl(&samples)?;
            let report = analyze_experiment(&spec, &events, &samples)?;
            match format {
                Format::Table => emit(None, &render_experiment_table(&report)),
                Format::Json => emit(None, &pretty(&report)),
            }
        }
        Command::Stats(StatsCmd::Fisher { table }) => {
            let v: Vec<u64> = table
                .split(',')
                .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad count {t:?}")))
                .collect::<Result<_>>()?;
            let [a, b, c, d] = v[..] else {
                bail!("--table needs four counts a,b,c,d");
            };
            emit(None, &pretty(&fisher_exact_two_sided(&ContingencyTable::new(a, b, c, d))?))
        }
        Command::Stats(StatsCmd::Ttest { a, b }) => {
            let result = welch_t_test(&parse_numbers(&a)?, &parse_numbers(&b)?)?;
            emit(None, &pretty(&result))
        }
        Command::Stats(StatsCmd::Assign {
            salt,
            split,
            prefix,
            count,
            units,
        }) => {
            let generated = (0..count).map(|i| format!("{prefix}{i}"));
            let mut out = String::new();
            for unit in units.into_iter().chain(generated) {
                let arm = match assign_arm(&unit, &salt, split)? {
                    Arm::Control => "control",
                    Arm::Test => "test",
                };
                out.push_str(&format!("{unit}\t{arm}\n"));
            }
            emit(None, &out)
        }
    }
}

fn pair_classifier(kind: ClassifierKind, backend: &BackendArgs) -> Result<Box<dyn PairQualityClassifier>> {
    Ok(match kind {
        ClassifierKind::Rule => Box::new(RulePairQuality::default()),
        ClassifierKind::Model => Box::new(ModelPairQuality::new(backend.build()?)),
    })
}

fn patch_cmd(cmd: PatchCmd) -> Result<()> {
    match cmd {
        PatchCmd::Apply { file, patch, out } => {
            let source = load_source(&file)?;
            let p = parse_patch(&read(&patch)?, source.len())?;
            emit(out.as_deref(), &apply_patch(&source, &p)?.content())
        }
        PatchCmd::CheckApplied { committed, patch, mode } => {
            let source = load_source(&committed)?;
            let p = crfix_core::patch::parse_patch_unbounded(&read(&patch)?)?;
            let mode = match mode {
                Mode::Strict => DetectMode::Strict,
                Mode::Content => DetectMode::Content,
            };
            emit(None, &pretty(&detect_applied(&source, &p, mode)))
        }
        PatchCmd::Diff { from, to } => {
            let a = load_source(&from)?;
            let b = load_source(&to)?;
            emit(None, &serialize_patch(&diff_files(&a, &b)))
        }
    }
}

fn curate_cmd(cmd: CurateCmd) -> Result<()> {
    match cmd {
        CurateCmd::Ingest { input, out } => {
            let ingested = ingest_pairs(&input)?;
            if let Some(out) = out {
                emit(Some(&out), &write_pairs(&ingested.pairs))?;
            }
            let summary = serde_json::json!({
                "ingested": ingested.ingested(),
                "valid": ingested.pairs.len(),
                "rejected": ingested.rejected,
            });
            emit(None, &pretty(&summary))
        }
        CurateCmd::Filter {
            input,
            out,
            rejected_out,
            classifier,
            backend,
        } => {
            let ingested = ingest_pairs(&input)?;
            let clf = pair_classifier(classifier, &backend)?;
            let partition = curate(&ingested, clf.as_ref())?;
            emit(Some(&out), &write_pairs(&partition.accepted))?;
            if let Some(path) = rejected_out {
                emit(Some(&path), &write_pairs(&partition.rejected))?;
            }
            emit(None, &pretty(&partition.stats))
        }
        CurateCmd::Export { input, out } => {
            let ingested = ingest_pairs(&input)?;
            if !ingested.rejected.is_empty() {
                bail!("{} pairs failed ingest; run `curate ingest` first", ingested.rejected.len());
            }
            emit(None, &pretty(&export_sft(&ingested.pairs, &out)?))
        }
    }
}

fn serve(config_path: &Path, host: &str, port: u16) -> Result<()> {
    let config = PipelineConfig::load(config_path)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let (service, corruption) = Service::open(&config)?;
        if let Some(c) = corruption {
            tracing::warn!("{c}; state rebuilt from the valid prefix");
        }
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        let app = crate::http::router(service.clone());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        service.settle().await;
        Ok(())
    })
}
