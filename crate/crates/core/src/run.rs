//! Starting, resuming and reporting on runs stored in a run directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::collab::{Engine, EngineError, EngineOptions, LoopConfig, ProgressHook, RunOutcome};
use crate::dataset::{self, DatasetError, QuestionSet};
use crate::gateway::{BackendSpec, BehaviorSource, BehaviorTable, Gateway, ModelProfile, RetryPolicy, Role};
use crate::prompt::{Dialect, DialectRegistry, PromptError, PromptForge, Templates};
use crate::report::{self, MetricsReport, ReportError};
use crate::sc::SummarizeScope;
use crate::store::{self, FileLog, Recorder, RunDir, RunEvent, RunManifest, StoreError, TimingLog};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset {path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("run directory {0} already holds a run; use resume")]
    AlreadyExists(PathBuf),
}

/// Everything needed to start a run. Scalars here end up in the manifest.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub dataset_path: PathBuf,
    pub participants: Vec<ModelProfile>,
    pub summarizer: ModelProfile,
    pub loop_config: LoopConfig,
    pub seed: u64,
    pub summarize_scope: SummarizeScope,
    pub templates_dir: Option<PathBuf>,
    pub dialects: Vec<Dialect>,
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.participants.len() < 2 {
            return bad(format!(
                "at least 2 participants are required, got {}",
                self.participants.len()
            ));
        }
        for p in &self.participants {
            p.validate().map_err(RunError::Config)?;
            if p.role != Role::Participant {
                return bad(format!(
                    "`{}` is listed as a participant but has role summarizer",
                    p.model_id
                ));
            }
        }
        self.summarizer.validate().map_err(RunError::Config)?;
        if self.summarizer.role != Role::Summarizer {
            return bad(format!("`{}` must have the summarizer role", self.summarizer.model_id));
        }
        let mut ids: Vec<&str> = self.participants.iter().map(|p| p.model_id.as_str()).collect();
        ids.push(&self.summarizer.model_id);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("model ids must be unique across participants and summarizer".into());
        }
        self.loop_config.validate().map_err(RunError::Config)?;
        let registry = registry(&self.dialects)?;
        for p in self.participants.iter().chain([&self.summarizer]) {
            if registry.get(&p.dialect).is_none() {
                return bad(format!("`{}` uses unknown dialect `{}`", p.model_id, p.dialect));
            }
        }
        Ok(())
    }
}

/// Runtime knobs that do not affect results.
#[derive(Clone, Default)]
pub struct ExecOptions {
    /// Cap on concurrent generations; 0 means 1.
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub cancel: Option<Arc<AtomicBool>>,
    pub progress: Option<ProgressHook>,
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub outcome: RunOutcome,
    pub report: MetricsReport,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn registry(extra: &[Dialect]) -> Result<DialectRegistry, RunError> {
    let mut registry = DialectRegistry::default();
    for d in extra {
        registry.register(d.clone()).map_err(RunError::Config)?;
    }
    Ok(registry)
}

/// Reads, parses and keeps only text-only questions.
pub fn load_dataset(path: &Path) -> Result<(QuestionSet, Vec<u8>), RunError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| io_err(path, e))?;
    let qs = dataset::load_question_set(&text).map_err(|source| RunError::Dataset {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((dataset::filter_text_only(&qs), bytes))
}

/// Inlines behavior tables so the manifest alone describes the run.
fn inline_behavior(profile: &ModelProfile) -> Result<ModelProfile, RunError> {
    let mut profile = profile.clone();
    if let BackendSpec::Scripted { behavior, .. } = &mut profile.backend {
        if let BehaviorSource::Path(path) = behavior {
            let table = BehaviorTable::load(path).map_err(RunError::Config)?;
            *behavior = BehaviorSource::Inline(table);
        }
    }
    Ok(profile)
}

/// Run id derived from the run's content, so the same configuration and
/// dataset always map to the same directory.
fn run_id(manifest: &RunManifest) -> String {
    let mut m = manifest.clone();
    m.run_id = String::new();
    m.created_unix = 0;
    let digest = Sha256::digest(serde_json::to_vec(&m).expect("manifest serializes"));
    format!("run-{}", &hex::encode(digest)[..12])
}

/// Writes a fresh manifest under `out_root/<run id>` and returns the run
/// directory. Fails if that directory already holds a run.
pub fn create_run(spec: &RunSpec, out_root: &Path) -> Result<RunDir, RunError> {
    spec.validate()?;
    let dataset_path = std::path::absolute(&spec.dataset_path).map_err(|e| io_err(&spec.dataset_path, e))?;
    let (qs, bytes) = load_dataset(&dataset_path)?;
    if qs.is_empty() {
        return Err(RunError::Config("no text-only questions in the dataset".into()));
    }
    let templates_dir = spec
        .templates_dir
        .as_ref()
        .map(|d| std::path::absolute(d).map_err(|e| io_err(d, e)))
        .transpose()?;
    let mut manifest = RunManifest {
        run_id: String::new(),
        dataset_path,
        dataset_digest: dataset::digest(&bytes),
        participants: spec
            .participants
            .iter()
            .map(inline_behavior)
            .collect::<Result<_, _>>()?,
        summarizer: inline_behavior(&spec.summarizer)?,
        loop_config: spec.loop_config,
        seed: spec.seed,
        summarize_scope: spec.summarize_scope,
        templates_dir,
        dialects: spec.dialects.clone(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    manifest.run_id = run_id(&manifest);
    let dir = RunDir::new(out_root.join(&manifest.run_id));
    if dir.manifest_path().exists() {
        return Err(RunError::AlreadyExists(dir.root));
    }
    dir.write_manifest(&manifest)?;
    Ok(dir)
}

/// Loads the manifest and the dataset it names, checking the digest.
pub fn open_run(dir: &RunDir) -> Result<(RunManifest, QuestionSet), RunError> {
    let manifest = dir.read_manifest()?;
    let (qs, bytes) = load_dataset(&manifest.dataset_path)?;
    manifest.verify_dataset(&bytes)?;
    Ok((manifest, qs))
}

/// Runs (or continues) the run in `dir`, then writes its reports. Logged
/// generations are reused, so a resumed run issues only missing calls and
/// ends with the same log an uninterrupted run would have written.
pub async fn execute(dir: &RunDir, options: ExecOptions) -> Result<RunSummary, RunError> {
    let (manifest, qs) = open_run(dir)?;
    let templates = match &manifest.templates_dir {
        Some(d) => Templates::from_dir(d)?,
        None => Templates::default(),
    };
    let forge = PromptForge::new(templates, registry(&manifest.dialects)?);
    let parallelism = options.parallelism.max(1);
    let gateway = Gateway::from_profiles(
        manifest.participants.iter().chain([&manifest.summarizer]),
        manifest.seed,
        options.retry,
        parallelism,
    )
    .map_err(|e| RunError::Config(e.to_string()))?;

    let (log, existing) = FileLog::open(&dir.events_path())?;
    let (_, cache) = store::replay(&existing, manifest.participant_ids());
    let timing = TimingLog::open(&dir.timing_path())?;
    let mut recorder = Recorder::new(Box::new(log), &existing, Some(timing));

    let engine = Engine {
        questions: &qs,
        participants: &manifest.participants,
        summarizer: &manifest.summarizer,
        gateway: &gateway,
        forge: &forge,
        config: manifest.loop_config,
        options: EngineOptions {
            scope: manifest.summarize_scope,
            unit_parallelism: parallelism,
            cancel: options.cancel,
            progress: options.progress,
        },
    };
    let outcome = engine.run_collaboration(&cache, &mut recorder).await?;
    let report = report::emit_reports(&dir.reports_dir(), &outcome, &qs)?;
    Ok(RunSummary {
        dir: dir.root.clone(),
        outcome,
        report,
    })
}

/// Creates the run directory and runs it to completion.
pub async fn start_run(spec: &RunSpec, out_root: &Path, options: ExecOptions) -> Result<RunSummary, RunError> {
    let dir = create_run(spec, out_root)?;
    execute(&dir, options).await
}

/// Replays the log of `dir` without issuing any generation.
pub fn load_outcome(dir: &RunDir) -> Result<(RunManifest, QuestionSet, RunOutcome, Vec<RunEvent>), RunError> {
    let (manifest, qs) = open_run(dir)?;
    let events = store::read_events(&dir.events_path())?;
    let (outcome, _) = store::replay(&events, manifest.participant_ids());
    Ok((manifest, qs, outcome, events))
}

/// Re-emits reports from the log alone.
pub fn report(dir: &RunDir) -> Result<MetricsReport, RunError> {
    let (_, qs, outcome, _) = load_outcome(dir)?;
    Ok(report::emit_reports(&dir.reports_dir(), &outcome, &qs)?)
}
