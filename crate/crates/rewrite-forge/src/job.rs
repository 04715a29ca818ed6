//! Resumable rewrite job.
//!
//! Every (document, style) pair is one task. Outcomes are appended to a
//! ledger as they complete, and successful rewrites are appended to a staging
//! file before their ledger line, so a Succeeded record always has its
//! document on disk. A rerun skips pairs already Succeeded and retries the
//! rest. The per-style corpora are rebuilt from the ledger at the end of
//! every run, sorted by parent id, so they do not depend on completion order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rewrite_forge_core::digest::Checksum;
use rewrite_forge_core::rewrite::{build_prompt, join_chunks, make_synthetic, split_for_context, RewriteError};
use rewrite_forge_core::tokens::expansion_ratio;
use rewrite_forge_core::{
    CountingScheme, Document, Origin, RetryPolicy, RewriteRecord, RewriteStyle, SamplingParams, TemplateSet,
    TokenCounter,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinSet;

use crate::client::{ChatClient, ClientError};
use crate::manifest::{file_sha256, write_json, ARTIFACT_VERSION};
use crate::records::{read_documents_strict, write_document, write_documents_to, LoadError};

#[derive(Debug, Error)]
pub enum JobError {
    #[error(
        "rewrite ledger {path} is corrupt at line {line}: {detail}. \
         To recover, remove the offending line (a truncated last line is safe to drop) and rerun; \
         to start over, delete {path} and the staging file next to it"
    )]
    LedgerCorrupt { path: String, line: u64, detail: String },
    #[error("rewrite job aborted: {failed} of {total} tasks failed, above the {ceiling} failure ceiling; the ledger keeps every completed task")]
    FailureCeiling { failed: u64, total: u64, ceiling: f64 },
    #[error("invalid rewrite settings: {0}")]
    Settings(String),
    #[error("rewrite job I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct RewriteSettings {
    pub model: String,
    pub styles: Vec<RewriteStyle>,
    pub sampling: SamplingParams,
    pub templates: TemplateSet,
    pub retry: RetryPolicy,
    pub max_input_tokens: u64,
    /// Largest tolerated fraction of failed tasks.
    pub failure_ceiling: f64,
    pub attempt_seed: u64,
    /// Tasks in flight at once.
    pub concurrency: usize,
    pub counting_scheme: CountingScheme,
}

impl RewriteSettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            styles: RewriteStyle::ALL.to_vec(),
            sampling: SamplingParams::default(),
            templates: TemplateSet::default(),
            retry: RetryPolicy::default(),
            max_input_tokens: 8192,
            failure_ceiling: 0.05,
            attempt_seed: 0,
            concurrency: 16,
            counting_scheme: CountingScheme::WhitespaceWords,
        }
    }

    pub fn validate(&self) -> Result<(), JobError> {
        let bad = |m: String| Err(JobError::Settings(m));
        if self.model.is_empty() {
            return bad("model name is empty".into());
        }
        if self.styles.is_empty() {
            return bad("no styles selected".into());
        }
        let unique: HashSet<_> = self.styles.iter().collect();
        if unique.len() != self.styles.len() {
            return bad("styles listed more than once".into());
        }
        self.sampling
            .validate()
            .map_err(|e| JobError::Settings(e.to_string()))?;
        self.retry.validate().map_err(|e| JobError::Settings(e.to_string()))?;
        if self.max_input_tokens == 0 {
            return bad("max_input_tokens must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.failure_ceiling) {
            return bad(format!(
                "failure_ceiling must be within [0, 1], got {}",
                self.failure_ceiling
            ));
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct JobOptions {
    /// Stop after starting this many new tasks. The ledger makes the next
    /// run continue where this one stopped.
    pub max_new_tasks: Option<usize>,
}

/// Files of one rewrite job directory.
#[derive(Debug, Clone)]
pub struct LedgerStore {
    dir: PathBuf,
}

impl LedgerStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.dir.join("ledger.jsonl")
    }

    pub fn staging_path(&self) -> PathBuf {
        self.dir.join("staging.jsonl")
    }

    pub fn style_file(style: RewriteStyle) -> String {
        format!("synthetic-{style}.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("rewrite-manifest.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("job-report.json")
    }

    /// Latest record per pair plus the staged rewrites.
    pub fn load(&self, originals: &HashSet<&str>, counter: &TokenCounter) -> Result<LedgerState, JobError> {
        let path = self.ledger_path();
        let display = path.display().to_string();
        let mut latest = BTreeMap::new();
        match File::open(&path) {
            Ok(file) => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line_no = i as u64 + 1;
                    let corrupt = |detail: String| JobError::LedgerCorrupt {
                        path: display.clone(),
                        line: line_no,
                        detail,
                    };
                    let line = line.map_err(|e| corrupt(e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: RewriteRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                    if !record.is_consistent() {
                        return Err(corrupt("status and output_doc_id disagree".into()));
                    }
                    if !originals.contains(record.parent_id.as_str()) {
                        return Err(corrupt(format!(
                            "record for unknown document {}; this ledger belongs to a different subset",
                            record.parent_id
                        )));
                    }
                    latest.insert((record.parent_id.clone(), record.style), record);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }

        let mut staged = HashMap::new();
        let staging = self.staging_path();
        if staging.exists() {
            let docs = read_documents_strict(&staging, counter, true).map_err(|e| match e {
                LoadError::Io(e) => JobError::Io(e),
                LoadError::Record(r) => JobError::LedgerCorrupt {
                    path: staging.display().to_string(),
                    line: r.line,
                    detail: r.cause,
                },
            })?;
            for doc in docs {
                staged.insert(doc.id.clone(), doc);
            }
        }
        for record in latest.values().filter(|r| r.is_succeeded()) {
            let id = record.output_doc_id.as_deref().unwrap_or_default();
            let ok = staged.get(id).is_some_and(|d| {
                d.origin
                    == Origin::Synthetic {
                        style: record.style,
                        parent_id: record.parent_id.clone(),
                    }
            });
            if !ok {
                return Err(JobError::LedgerCorrupt {
                    path: display.clone(),
                    line: 0,
                    detail: format!(
                        "succeeded record for {}/{} has no staged document {id}",
                        record.parent_id, record.style
                    ),
                });
            }
        }
        Ok(LedgerState { latest, staged })
    }
}

#[derive(Debug, Default)]
pub struct LedgerState {
    pub latest: BTreeMap<(String, RewriteStyle), RewriteRecord>,
    pub staged: HashMap<String, Document>,
}

impl LedgerState {
    pub fn is_succeeded(&self, parent_id: &str, style: RewriteStyle) -> bool {
        self.latest
            .get(&(parent_id.to_string(), style))
            .is_some_and(RewriteRecord::is_succeeded)
    }
}

/// Single writer for ledger and staging appends.
struct LedgerWriter {
    ledger: File,
    staging: File,
}

impl LedgerWriter {
    fn open(store: &LedgerStore) -> io::Result<Self> {
        let open = |p: PathBuf| OpenOptions::new().create(true).append(true).open(p);
        Ok(Self {
            ledger: open(store.ledger_path())?,
            staging: open(store.staging_path())?,
        })
    }

    fn append(&mut self, record: &RewriteRecord, doc: Option<&Document>) -> io::Result<()> {
        if let Some(doc) = doc {
            let mut buf = Vec::new();
            write_document(doc, &mut buf)?;
            self.staging.write_all(&buf)?;
            self.staging.sync_data()?;
        }
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.ledger.write_all(&line)?;
        self.ledger.sync_data()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleCounts {
    pub succeeded: u64,
    pub failed: u64,
    pub pending: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub per_style: BTreeMap<RewriteStyle, StyleCounts>,
    pub succeeded: u64,
    pub failed: u64,
    pub pending: u64,
    /// Tasks started by this run.
    pub tasks_started: u64,
    /// HTTP attempts made by this run, retries included.
    pub http_attempts: u64,
    pub original_tokens: u64,
    pub synthetic_tokens: u64,
    pub expansion_ratio: Option<f64>,
    pub aborted: bool,
    pub wall_time_secs: f64,
    pub sampling_digest: String,
    pub template_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleOutput {
    pub style: RewriteStyle,
    pub file: String,
    pub sha256: String,
    pub documents: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteManifest {
    pub artifact_version: String,
    pub model: String,
    pub styles: Vec<RewriteStyle>,
    pub attempt_seed: u64,
    pub sampling: SamplingParams,
    pub sampling_digest: String,
    pub template_digest: String,
    pub counting_scheme: CountingScheme,
    /// Digest of the original subset's ids and token counts.
    pub input_digest: String,
    pub original_documents: u64,
    pub original_tokens: u64,
    pub outputs: Vec<StyleOutput>,
    pub synthetic_tokens: u64,
    pub expansion_ratio: Option<f64>,
    pub succeeded: u64,
    pub failed: u64,
    pub complete: bool,
}

/// Synthetic documents grouped by style, each sorted by parent id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewriteCorpus {
    pub by_style: BTreeMap<RewriteStyle, Vec<Document>>,
}

impl RewriteCorpus {
    pub fn all(&self) -> impl Iterator<Item = &Document> {
        self.by_style.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_style.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
pub struct JobOutcome {
    pub corpus: RewriteCorpus,
    pub report: JobReport,
    pub manifest: RewriteManifest,
}

struct TaskOutcome {
    parent_id: String,
    style: RewriteStyle,
    attempts: u32,
    result: Result<Document, String>,
}

fn describe(err: &ClientError) -> String {
    match err {
        ClientError::Permanent { status, .. } => format!("permanent request error (status {status})"),
        ClientError::Transient {
            last_status, attempts, ..
        } => match last_status {
            Some(s) => format!("transient failure after {attempts} attempts (status {s})"),
            None => format!("transient failure after {attempts} attempts (network)"),
        },
        ClientError::Malformed { detail, .. } => format!("malformed response: {detail}"),
        ClientError::Config(m) => format!("client configuration: {m}"),
    }
}

async fn rewrite_task(
    client: Arc<ChatClient>,
    settings: Arc<RewriteSettings>,
    counter: Arc<TokenCounter>,
    doc: Arc<Document>,
    style: RewriteStyle,
) -> TaskOutcome {
    let mut attempts = 0;
    let result = async {
        let chunks = split_for_context(&doc, &counter, settings.max_input_tokens).map_err(|e| e.to_string())?;
        let template = settings.templates.get(style);
        let mut parts = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            let request = build_prompt(
                template,
                chunk,
                counter.count(chunk),
                &settings.sampling,
                &settings.model,
            )
            .map_err(|e| e.to_string())?;
            match client.send_chat(&request, &settings.retry).await {
                Ok(c) => {
                    attempts += c.attempts;
                    if c.content.trim().is_empty() {
                        return Err(RewriteError::EmptyRewrite.to_string());
                    }
                    parts.push(c.content);
                }
                Err(e) => {
                    attempts += e.attempts();
                    return Err(describe(&e));
                }
            }
        }
        let text = if parts.len() == 1 {
            parts.pop().unwrap_or_default()
        } else {
            join_chunks(&parts)
        };
        make_synthetic(&doc, style, &text, settings.attempt_seed, &counter).map_err(|e| e.to_string())
    }
    .await;
    TaskOutcome {
        parent_id: doc.id.clone(),
        style,
        attempts,
        result,
    }
}

/// Digest of a subset's ids and token counts, taken in id order.
pub fn input_digest(originals: &[&Document]) -> String {
    let mut sorted = originals.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut c = Checksum::new();
    for d in sorted {
        c.update(d.id.as_bytes());
        c.update(&[0]);
        c.update(&d.token_count.to_le_bytes());
    }
    c.finish_hex()
}

/// Runs (or resumes) the rewrite job over `originals`.
pub async fn run_rewrite_job(
    originals: &[Document],
    settings: &RewriteSettings,
    client: Arc<ChatClient>,
    counter: &TokenCounter,
    store: &LedgerStore,
    options: &JobOptions,
) -> Result<JobOutcome, JobError> {
    settings.validate()?;
    let started = Instant::now();
    fs::create_dir_all(store.dir())?;
    if let Some(doc) = originals.iter().find(|d| d.origin.is_synthetic()) {
        return Err(JobError::Settings(format!(
            "input document {} is already synthetic",
            doc.id
        )));
    }
    let ids: HashSet<&str> = originals.iter().map(|d| d.id.as_str()).collect();
    if ids.len() != originals.len() {
        return Err(JobError::Settings("input documents have duplicate ids".into()));
    }
    let mut state = store.load(&ids, counter)?;

    let mut sorted: Vec<&Document> = originals.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut pending: Vec<(Arc<Document>, RewriteStyle)> = Vec::new();
    for doc in &sorted {
        let shared = Arc::new((*doc).clone());
        for &style in &settings.styles {
            if !state.is_succeeded(&doc.id, style) {
                pending.push((Arc::clone(&shared), style));
            }
        }
    }
    let total_pairs = (originals.len() * settings.styles.len()) as u64;
    if let Some(limit) = options.max_new_tasks {
        pending.truncate(limit);
    }
    info!(
        "rewrite job: {} pairs, {} already succeeded, {} to run now",
        total_pairs,
        total_pairs as usize
            - state
                .latest
                .values()
                .filter(|r| r.is_succeeded())
                .count()
                .min(total_pairs as usize),
        pending.len()
    );

    let shared_settings = Arc::new(settings.clone());
    let shared_counter = Arc::new(counter.clone());
    let mut writer = LedgerWriter::open(store)?;
    let mut running = JoinSet::new();
    let mut queue = pending.into_iter();
    let mut tasks_started = 0u64;
    let mut http_attempts = 0u64;
    let mut failed_now = 0u64;
    let mut aborted = false;

    let mut spawn_next = |running: &mut JoinSet<TaskOutcome>, started: &mut u64| -> bool {
        match queue.next() {
            Some((doc, style)) => {
                running.spawn(rewrite_task(
                    Arc::clone(&client),
                    Arc::clone(&shared_settings),
                    Arc::clone(&shared_counter),
                    doc,
                    style,
                ));
                *started += 1;
                true
            }
            None => false,
        }
    };
    for _ in 0..settings.concurrency {
        if !spawn_next(&mut running, &mut tasks_started) {
            break;
        }
    }
    while let Some(joined) = running.join_next().await {
        let outcome = joined.map_err(|e| io::Error::other(format!("rewrite task panicked: {e}")))?;
        http_attempts += u64::from(outcome.attempts);
        let record = match &outcome.result {
            Ok(doc) => RewriteRecord::succeeded(&outcome.parent_id, outcome.style, outcome.attempts, &doc.id),
            Err(reason) => {
                failed_now += 1;
                warn!("rewrite {}/{} failed: {reason}", outcome.parent_id, outcome.style);
                RewriteRecord::failed(&outcome.parent_id, outcome.style, outcome.attempts, reason.clone())
            }
        };
        writer.append(&record, outcome.result.as_ref().ok())?;
        if let Ok(doc) = outcome.result {
            state.staged.insert(doc.id.clone(), doc);
        }
        state.latest.insert((outcome.parent_id, outcome.style), record);

        if failed_now as f64 > settings.failure_ceiling * total_pairs as f64 {
            aborted = true;
            running.abort_all();
            while running.join_next().await.is_some() {}
            break;
        }
        spawn_next(&mut running, &mut tasks_started);
    }
    drop(writer);

    // Assemble outputs from the full ledger state.
    let mut corpus = RewriteCorpus::default();
    let mut per_style: BTreeMap<RewriteStyle, StyleCounts> =
        settings.styles.iter().map(|&s| (s, StyleCounts::default())).collect();
    for doc in &sorted {
        for &style in &settings.styles {
            let counts = per_style.get_mut(&style).expect("style present");
            match state.latest.get(&(doc.id.clone(), style)) {
                Some(r) if r.is_succeeded() => {
                    let id = r.output_doc_id.as_deref().unwrap_or_default();
                    let synthetic = state.staged[id].clone();
                    counts.succeeded += 1;
                    counts.tokens += synthetic.token_count;
                    corpus.by_style.entry(style).or_default().push(synthetic);
                }
                Some(_) => counts.failed += 1,
                None => counts.pending += 1,
            }
        }
    }
    let original_tokens: u64 = originals.iter().map(|d| d.token_count).sum();
    let synthetic_tokens: u64 = per_style.values().map(|c| c.tokens).sum();
    let succeeded: u64 = per_style.values().map(|c| c.succeeded).sum();
    let failed: u64 = per_style.values().map(|c| c.failed).sum();
    let pending: u64 = per_style.values().map(|c| c.pending).sum();
    let ratio = expansion_ratio(original_tokens, synthetic_tokens);

    let report = JobReport {
        per_style: per_style.clone(),
        succeeded,
        failed,
        pending,
        tasks_started,
        http_attempts,
        original_tokens,
        synthetic_tokens,
        expansion_ratio: ratio,
        aborted,
        wall_time_secs: started.elapsed().as_secs_f64(),
        sampling_digest: settings.sampling.digest(),
        template_digest: settings.templates.digest(),
    };
    write_json(&store.report_path(), &report)?;
    if aborted {
        return Err(JobError::FailureCeiling {
            failed: failed_now,
            total: total_pairs,
            ceiling: settings.failure_ceiling,
        });
    }

    let mut outputs = Vec::new();
    for &style in &settings.styles {
        let docs: Vec<&Document> = corpus
            .by_style
            .get(&style)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        let file = LedgerStore::style_file(style);
        let path = store.dir().join(&file);
        write_documents_to(&path, &docs).map_err(|e| e.source)?;
        outputs.push(StyleOutput {
            style,
            sha256: file_sha256(&path)?,
            file,
            documents: docs.len() as u64,
            tokens: per_style[&style].tokens,
        });
    }
    let manifest = RewriteManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        model: settings.model.clone(),
        styles: settings.styles.clone(),
        attempt_seed: settings.attempt_seed,
        sampling: settings.sampling.clone(),
        sampling_digest: report.sampling_digest.clone(),
        template_digest: report.template_digest.clone(),
        counting_scheme: settings.counting_scheme.clone(),
        input_digest: input_digest(&sorted),
        original_documents: originals.len() as u64,
        original_tokens,
        outputs,
        synthetic_tokens,
        expansion_ratio: ratio,
        succeeded,
        failed,
        complete: pending == 0 && failed == 0,
    };
    write_json(&store.manifest_path(), &manifest)?;
    Ok(JobOutcome {
        corpus,
        report,
        manifest,
    })
}

/// Loads the per-style corpora written by a finished job.
pub fn read_rewrite_corpus(
    store: &LedgerStore,
    counter: &TokenCounter,
) -> Result<(RewriteManifest, RewriteCorpus), JobError> {
    let text = fs::read_to_string(store.manifest_path())?;
    let manifest: RewriteManifest =
        serde_json::from_str(&text).map_err(|e| JobError::Settings(format!("rewrite manifest: {e}")))?;
    let mut corpus = RewriteCorpus::default();
    for out in &manifest.outputs {
        let path = store.dir().join(&out.file);
        let digest = file_sha256(&path)?;
        if digest != out.sha256 {
            return Err(JobError::Settings(format!(
                "{} does not match its manifest checksum",
                path.display()
            )));
        }
        let docs = read_documents_strict(&path, counter, false).map_err(|e| match e {
            LoadError::Io(e) => JobError::Io(e),
            LoadError::Record(r) => JobError::Settings(format!("{}: {r}", path.display())),
        })?;
        if let Some(d) = docs.iter().find(|d| d.origin.style() != Some(out.style)) {
            return Err(JobError::Settings(format!(
                "{} holds {} which is not a {} rewrite",
                out.file, d.id, out.style
            )));
        }
        corpus.by_style.insert(out.style, docs);
    }
    Ok((manifest, corpus))
}
