//! Command line: one subcommand per pipeline stage over a shared run config.
//!
//! Exit status is 0 on success, 1 when the config or inputs fail validation,
//! 2 when a stage fails at runtime and 64 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use log::warn;
use rewrite_forge_core::mixture::build_condition;
use rewrite_forge_core::{classify_tier, ConditionSpec, Document, QualityTier, TokenCounter};
use serde_json::{json, Value};

use crate::analyze::{analyze, write_analysis, ScaleCurves};
use crate::client::ChatClient;
use crate::config::{RunConfig, Seeds};
use crate::eval::{load_catalog, load_category_file, load_curve_file, load_results, run_eval};
use crate::job::{input_digest, read_rewrite_corpus, run_rewrite_job, JobError, JobOptions, LedgerStore};
use crate::manifest::{file_sha256, InputChecksum};
use crate::mix::{condition_dir, write_condition, ConditionInputs, RewriteInputs};
use crate::records::{load_counter, read_corpus};
use crate::subset::{self, partition, read_subset, tier_dir, write_subset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const LOCK_FILE: &str = ".rewrite-forge.lock";

#[derive(Debug, Parser)]
#[command(
    name = "rewrite-forge",
    version,
    about = "Quality-tier partitioning, style rewriting, budget-matched mixing and NPM analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every stage seed (partition = N, rewrite = N+1, mixture = N+2).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Print the summary as JSON.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TierArg {
    High,
    Low,
}

impl From<TierArg> for QualityTier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::High => QualityTier::High,
            TierArg::Low => QualityTier::Low,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the config and every corpus record.
    Validate,
    /// Select each quality tier's subset under the token budget.
    Partition,
    /// Rewrite each tier subset into the configured styles.
    Rewrite {
        /// Only this tier (default: every configured tier).
        #[arg(long, value_enum)]
        tier: Option<TierArg>,
        /// Stop after starting this many new tasks; rerun to continue.
        #[arg(long)]
        max_tasks: Option<usize>,
    },
    /// Build the budget-matched training conditions.
    Mix {
        /// Only these conditions, e.g. `edu+rewrites` (repeatable).
        #[arg(long = "condition")]
        conditions: Vec<String>,
    },
    /// Score checkpoint results and derive training curves.
    Eval,
    /// Summarize training curves: peaks, gaps, saturation and plot tables.
    Analyze {
        /// Overall curve files (default: the config's list).
        #[arg(long = "curves")]
        curves: Vec<PathBuf>,
        /// Per-category curve files (default: the config's list).
        #[arg(long = "categories")]
        categories: Vec<PathBuf>,
    },
    /// `eval` followed by `analyze` over the freshly derived curves (written to `report/`).
    Report,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// What a subcommand prints on success.
#[derive(Debug, Clone)]
pub struct Summary {
    pub line: String,
    pub json: Value,
}

/// Parses `args`, runs the subcommand and prints its summary. Returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            let mut out = io::stdout().lock();
            let _ = if cli.json {
                writeln!(out, "{}", summary.json)
            } else {
                writeln!(out, "{}", summary.line)
            };
            EXIT_OK
        }
        Err(failure) => {
            let (label, detail) = match &failure {
                Failure::Usage(m) => ("usage error", m.clone()),
                Failure::Validation(e) => ("validation error", format!("{e:#}")),
                Failure::Runtime(e) => ("error", format!("{e:#}")),
            };
            eprintln!("rewrite-forge: {label}: {detail}");
            failure.exit_code()
        }
    }
}

struct Stage {
    config: RunConfig,
    counter: TokenCounter,
    out: PathBuf,
    dry_run: bool,
}

fn load_context(cli: &Cli) -> Result<Stage, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config <path> is required".into()))?;
    let mut config = RunConfig::load(path).map_err(invalid)?;
    if let Some(seed) = cli.seed {
        config.seeds = Seeds::from_one(seed);
    }
    if let Some(out) = &cli.output {
        config.output_dir = if out.is_absolute() {
            out.clone()
        } else {
            std::env::current_dir().map_err(runtime)?.join(out)
        };
    }
    config.validate().map_err(invalid)?;
    let counter = load_counter(&config.counting_scheme, &config.base_dir).map_err(invalid)?;
    Ok(Stage {
        out: config.output(),
        config,
        counter,
        dry_run: cli.dry_run,
    })
}

/// Held for the duration of a subcommand that writes to the output directory.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(runtime(anyhow!(
                "{} exists: another run is using this output directory (delete the file if that run is gone)",
                path.display()
            ))),
            Err(e) => Err(runtime(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn lock(ctx: &Stage) -> Result<Option<OutputLock>, Failure> {
    if ctx.dry_run {
        Ok(None)
    } else {
        OutputLock::acquire(&ctx.out).map(Some)
    }
}

pub fn execute(cli: &Cli) -> Result<Summary, Failure> {
    let ctx = load_context(cli)?;
    match &cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::Partition => {
            let _lock = lock(&ctx)?;
            cmd_partition(&ctx)
        }
        Command::Rewrite { tier, max_tasks } => {
            let _lock = lock(&ctx)?;
            cmd_rewrite(&ctx, tier.map(Into::into), *max_tasks)
        }
        Command::Mix { conditions } => {
            let _lock = lock(&ctx)?;
            cmd_mix(&ctx, conditions)
        }
        Command::Eval => {
            let _lock = lock(&ctx)?;
            cmd_eval(&ctx).map(|(s, _)| s)
        }
        Command::Analyze { curves, categories } => {
            let _lock = lock(&ctx)?;
            let curves = if curves.is_empty() {
                ctx.config
                    .evaluation
                    .curves
                    .iter()
                    .map(|p| ctx.config.resolve(p))
                    .collect()
            } else {
                curves.clone()
            };
            let categories = if categories.is_empty() {
                ctx.config
                    .evaluation
                    .category_curves
                    .iter()
                    .map(|p| ctx.config.resolve(p))
                    .collect()
            } else {
                categories.clone()
            };
            cmd_analyze(&ctx, &curves, &categories, "analysis")
        }
        Command::Report => {
            let _lock = lock(&ctx)?;
            let (eval, paths) = cmd_eval(&ctx)?;
            if ctx.dry_run {
                return Ok(eval);
            }
            let analysis = cmd_analyze(&ctx, &paths.0, &paths.1, "report")?;
            Ok(Summary {
                line: format!("report: {}; {}", eval.line, analysis.line),
                json: json!({"command": "report", "eval": eval.json, "analyze": analysis.json}),
            })
        }
    }
}

fn tier_counts(docs: &[Document], ctx: &Stage) -> BTreeMap<&'static str, (u64, u64)> {
    let mut counts = BTreeMap::new();
    for d in docs {
        let e = counts
            .entry(classify_tier(&d.scores, &ctx.config.tier_policy).as_str())
            .or_insert((0, 0));
        e.0 += 1;
        e.1 += d.token_count;
    }
    counts
}

fn cmd_validate(ctx: &Stage) -> Result<Summary, Failure> {
    let corpus_path = ctx.config.corpus();
    let loaded = read_corpus(&corpus_path, &ctx.counter)
        .with_context(|| corpus_path.display().to_string())
        .map_err(runtime)?;
    if !loaded.errors.is_empty() {
        let shown: Vec<String> = loaded.errors.iter().take(5).map(ToString::to_string).collect();
        return Err(invalid(anyhow!(
            "{}: {} invalid records ({}{})",
            corpus_path.display(),
            loaded.errors.len(),
            shown.join("; "),
            if loaded.errors.len() > shown.len() { "; ..." } else { "" }
        )));
    }
    let counts = tier_counts(&loaded.documents, ctx);
    let total: u64 = loaded.documents.iter().map(|d| d.token_count).sum();
    let get = |t: &str| counts.get(t).copied().unwrap_or_default();
    Ok(Summary {
        line: format!(
            "validate: ok, {} documents, {total} tokens (high {}, low {}, unassigned {})",
            loaded.documents.len(),
            get("high").0,
            get("low").0,
            get("unassigned").0
        ),
        json: json!({
            "command": "validate",
            "ok": true,
            "documents": loaded.documents.len(),
            "tokens": total,
            "tiers": counts.iter().map(|(k, (n, t))| (k.to_string(), json!({"documents": n, "tokens": t}))).collect::<serde_json::Map<_, _>>(),
        }),
    })
}

fn cmd_partition(ctx: &Stage) -> Result<Summary, Failure> {
    let corpus_path = ctx.config.corpus();
    let loaded = read_corpus(&corpus_path, &ctx.counter)
        .with_context(|| corpus_path.display().to_string())
        .map_err(runtime)?;
    for e in &loaded.errors {
        warn!("{}: skipping {e}", corpus_path.display());
    }
    let input = if ctx.dry_run {
        None
    } else {
        Some(InputChecksum::of(&corpus_path).map_err(runtime)?)
    };
    let budget = ctx.config.budgets.subset_budget;
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for &tier in &ctx.config.tiers {
        let (manifest, selected) = partition(
            &loaded.documents,
            tier,
            budget,
            ctx.config.seeds.partition,
            &ctx.config.tier_policy,
            &ctx.config.counting_scheme,
        )
        .map_err(invalid)?;
        if manifest.supply_shortfall {
            warn!(
                "tier {}: only {} of the {budget}-token budget available",
                tier.as_str(),
                manifest.total_tokens
            );
        }
        let dir = tier_dir(&ctx.out, tier);
        parts.push(format!(
            "{} {} docs/{} tokens",
            tier.as_str(),
            selected.len(),
            manifest.total_tokens
        ));
        rows.push(json!({
            "tier": tier.as_str(),
            "documents": selected.len(),
            "total_tokens": manifest.total_tokens,
            "budget": budget,
            "supply_shortfall": manifest.supply_shortfall,
            "seed": manifest.seed,
            "dir": dir,
        }));
        if let Some(input) = &input {
            write_subset(&dir, manifest, &selected, input.clone(), loaded.errors.len() as u64).map_err(runtime)?;
        }
    }
    Ok(Summary {
        line: format!(
            "partition{}: {} (budget {budget}, seed {}, {} records skipped)",
            if ctx.dry_run { " (dry run)" } else { "" },
            parts.join(", "),
            ctx.config.seeds.partition,
            loaded.errors.len()
        ),
        json: json!({"command": "partition", "dry_run": ctx.dry_run, "skipped_records": loaded.errors.len(), "tiers": rows}),
    })
}

fn rewrite_dir(root: &Path, tier: QualityTier) -> PathBuf {
    root.join("rewrite").join(tier.as_str())
}

fn cmd_rewrite(ctx: &Stage, only: Option<QualityTier>, max_tasks: Option<usize>) -> Result<Summary, Failure> {
    let settings = ctx.config.rewrite_settings().map_err(invalid)?;
    let tiers: Vec<QualityTier> = ctx
        .config
        .tiers
        .iter()
        .copied()
        .filter(|t| only.is_none_or(|o| o == *t))
        .collect();
    if tiers.is_empty() {
        return Err(invalid(anyhow!("--tier is not among the configured tiers")));
    }
    let mut inputs = Vec::new();
    for &tier in &tiers {
        let (_, docs) = read_subset(&tier_dir(&ctx.out, tier), &ctx.counter).map_err(invalid)?;
        inputs.push((tier, docs));
    }

    if ctx.dry_run {
        let mut rows = Vec::new();
        for (tier, docs) in &inputs {
            let store = LedgerStore::new(rewrite_dir(&ctx.out, *tier));
            let ids = docs.iter().map(|d| d.id.as_str()).collect();
            let state = store.load(&ids, &ctx.counter).map_err(runtime)?;
            let total = docs.len() * settings.styles.len();
            let done = docs
                .iter()
                .flat_map(|d| settings.styles.iter().map(move |&s| (d, s)))
                .filter(|(d, s)| state.is_succeeded(&d.id, *s))
                .count();
            rows.push(json!({"tier": tier.as_str(), "tasks": total, "succeeded": done, "pending": total - done}));
        }
        let line = rows
            .iter()
            .map(|r| {
                format!(
                    "{} {} of {} tasks pending",
                    r["tier"].as_str().unwrap_or_default(),
                    r["pending"],
                    r["tasks"]
                )
            })
            .collect::<Vec<_>>()
            .join(", ");
        return Ok(Summary {
            line: format!("rewrite (dry run): {line}; endpoint {}", ctx.config.rewrite.endpoint),
            json: json!({"command": "rewrite", "dry_run": true, "tiers": rows}),
        });
    }

    let client = ChatClient::new(ctx.config.client_config()).map_err(invalid)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    let options = JobOptions {
        max_new_tasks: max_tasks,
    };
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for (tier, docs) in &inputs {
        let store = LedgerStore::new(rewrite_dir(&ctx.out, *tier));
        let outcome = rt
            .block_on(run_rewrite_job(
                docs,
                &settings,
                Arc::clone(&client),
                &ctx.counter,
                &store,
                &options,
            ))
            .map_err(|e| match e {
                JobError::Settings(_) => invalid(e),
                other => runtime(other),
            })?;
        let r = &outcome.report;
        parts.push(format!(
            "{} {} succeeded, {} failed, {} pending, expansion {}",
            tier.as_str(),
            r.succeeded,
            r.failed,
            r.pending,
            r.expansion_ratio.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
        ));
        rows.push(json!({"tier": tier.as_str(), "report": r, "complete": outcome.manifest.complete}));
    }
    Ok(Summary {
        line: format!("rewrite: {}", parts.join("; ")),
        json: json!({"command": "rewrite", "dry_run": false, "tiers": rows}),
    })
}

fn cmd_mix(ctx: &Stage, only: &[String]) -> Result<Summary, Failure> {
    let target = ctx.config.budgets.target();
    let tolerance = ctx.config.budgets.tolerance;
    let mut specs = Vec::new();
    for &tier in &ctx.config.tiers {
        for rewrites in [true, false] {
            let mut spec = ConditionSpec::new(tier, rewrites, target, ctx.config.seeds.mixture);
            spec.reshuffle_epochs = ctx.config.mixture.reshuffle_epochs;
            specs.push(spec);
        }
    }
    for name in only {
        if !specs.iter().any(|s| &s.name() == name) {
            return Err(invalid(anyhow!("unknown condition {name}")));
        }
    }
    specs.retain(|s| only.is_empty() || only.contains(&s.name()));

    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for spec in &specs {
        let subset_path = tier_dir(&ctx.out, spec.tier);
        let (subset_file, originals) = read_subset(&subset_path, &ctx.counter).map_err(invalid)?;
        let mut inputs = ConditionInputs {
            subset_seed: subset_file.manifest.seed,
            subset_manifest_sha256: file_sha256(&subset_path.join(subset::MANIFEST_FILE)).map_err(runtime)?,
            subset_tokens: subset_file.manifest.total_tokens,
            rewrite: None,
        };
        let mut synthetic: Vec<Document> = Vec::new();
        if spec.rewrites {
            let store = LedgerStore::new(rewrite_dir(&ctx.out, spec.tier));
            let (manifest, corpus) = read_rewrite_corpus(&store, &ctx.counter)
                .with_context(|| format!("loading rewrites for {} (run `rewrite` first)", spec.name()))
                .map_err(invalid)?;
            let refs: Vec<&Document> = originals.iter().collect();
            if manifest.input_digest != input_digest(&refs) {
                return Err(invalid(anyhow!(
                    "{}: rewrites in {} were made from a different subset",
                    spec.name(),
                    store.dir().display()
                )));
            }
            if !manifest.complete {
                warn!(
                    "{}: rewrite job incomplete ({} succeeded, {} failed); mixing what exists",
                    spec.name(),
                    manifest.succeeded,
                    manifest.failed
                );
            }
            inputs.rewrite = Some(RewriteInputs {
                model: manifest.model.clone(),
                attempt_seed: manifest.attempt_seed,
                sampling_digest: manifest.sampling_digest.clone(),
                template_digest: manifest.template_digest.clone(),
                rewrite_manifest_sha256: file_sha256(&store.manifest_path()).map_err(runtime)?,
                synthetic_tokens: manifest.synthetic_tokens,
            });
            synthetic = corpus.all().cloned().collect();
        }
        let rewrites = spec.rewrites.then_some(synthetic.as_slice());
        let dataset = build_condition(spec, &originals, rewrites, tolerance).map_err(runtime)?;
        let dir = condition_dir(&ctx.out, spec);
        parts.push(format!(
            "{} {} tokens ({} unique, {} epochs)",
            spec.name(),
            dataset.total_tokens,
            dataset.unique_tokens,
            dataset.epochs
        ));
        let mut row = json!({
            "condition": spec.name(),
            "total_tokens": dataset.total_tokens,
            "unique_tokens": dataset.unique_tokens,
            "epochs": dataset.epochs,
            "target": target,
            "seed": spec.seed,
            "dir": dir,
        });
        if !ctx.dry_run {
            let manifest =
                write_condition(&dir, &dataset, tolerance, ctx.config.mixture.shard_tokens, inputs).map_err(runtime)?;
            row["shards"] = json!(manifest.shards.len());
        }
        rows.push(row);
    }
    Ok(Summary {
        line: format!(
            "mix{}: target {target}; {}",
            if ctx.dry_run { " (dry run)" } else { "" },
            parts.join(", ")
        ),
        json: json!({"command": "mix", "dry_run": ctx.dry_run, "conditions": rows}),
    })
}

type CurvePaths = (Vec<PathBuf>, Vec<PathBuf>);

fn cmd_eval(ctx: &Stage) -> Result<(Summary, CurvePaths), Failure> {
    let eval = &ctx.config.evaluation;
    let specs = eval
        .task_specs
        .as_ref()
        .ok_or_else(|| invalid(anyhow!("evaluation.task_specs is not set")))?;
    let results = eval
        .results
        .as_ref()
        .ok_or_else(|| invalid(anyhow!("evaluation.results is not set")))?;
    let catalog = load_catalog(&ctx.config.resolve(specs)).map_err(invalid)?;
    let results = load_results(&ctx.config.resolve(results)).map_err(invalid)?;
    let dir = ctx.out.join("eval");
    let out = run_eval(&results, &catalog, &dir, !ctx.dry_run).map_err(invalid)?;
    let partial = out.reports.iter().filter(|r| r.coverage < r.expected_tasks).count();
    let summary = Summary {
        line: format!(
            "eval{}: {} results, {} checkpoint reports ({partial} partial), {} curve files",
            if ctx.dry_run { " (dry run)" } else { "" },
            results.len(),
            out.reports.len(),
            out.curve_files.len() + out.category_files.len()
        ),
        json: json!({
            "command": "eval",
            "dry_run": ctx.dry_run,
            "results": results.len(),
            "reports": out.reports.len(),
            "partial_reports": partial,
            "curve_files": out.curve_files,
            "category_files": out.category_files,
        }),
    };
    Ok((summary, (out.curve_files, out.category_files)))
}

fn cmd_analyze(
    ctx: &Stage,
    curve_files: &[PathBuf],
    category_files: &[PathBuf],
    out_name: &str,
) -> Result<Summary, Failure> {
    if curve_files.is_empty() {
        return Err(invalid(anyhow!(
            "no curve files (set evaluation.curves or pass --curves)"
        )));
    }
    let mut scales: BTreeMap<String, ScaleCurves> = BTreeMap::new();
    let mut order = Vec::new();
    for path in curve_files {
        let file = load_curve_file(path).map_err(invalid)?;
        let curves = file.to_curves().map_err(invalid)?;
        if !order.contains(&file.model_scale) {
            order.push(file.model_scale.clone());
        }
        scales.entry(file.model_scale).or_default().overall.extend(curves);
    }
    for path in category_files {
        let file = load_category_file(path).map_err(invalid)?;
        let curves = file.to_curves().map_err(invalid)?;
        let entry = scales.entry(file.model_scale).or_default();
        for (cat, list) in curves {
            entry.categories.entry(cat).or_default().extend(list);
        }
    }
    let eval = &ctx.config.evaluation;
    let analysis = analyze(&scales, &order, eval.saturation, eval.gap_at_tokens).map_err(invalid)?;
    let dir = ctx.out.join(out_name);
    let plots = if ctx.dry_run {
        0
    } else {
        write_analysis(&dir, &analysis, &scales).map_err(runtime)?.len()
    };
    let best: Vec<String> = analysis
        .table
        .rows
        .iter()
        .filter(|r| r.scale_max)
        .map(|r| format!("{} {} {:.1}", r.model_scale, r.condition, r.peak_npm))
        .collect();
    Ok(Summary {
        line: format!(
            "analyze{}: {} curves over {} scales; best {}; {plots} plot tables",
            if ctx.dry_run { " (dry run)" } else { "" },
            analysis.table.rows.len(),
            order.len(),
            best.join(", ")
        ),
        json: json!({"command": "analyze", "dry_run": ctx.dry_run, "dir": dir, "analysis": analysis, "plot_tables": plots}),
    })
}
