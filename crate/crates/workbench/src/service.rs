use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use adaptnmt_core::corpus::{tokenize, DomainTag, ParallelCorpus, SentencePair};
use adaptnmt_core::eval::{evaluate_model, EvalReport};
use adaptnmt_core::exec::Exec;
use adaptnmt_core::model::ModelConfig;
use adaptnmt_core::pipeline::{DecodeStrategy, Preprocessing, TranslationSystem, Translator};
use adaptnmt_core::train::{specialize, Checkpoint, LrPolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] adaptnmt_core::Error),
    #[error("event log: {0}")]
    Log(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    Pending,
    MachineTranslated,
    PostEdited,
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u64,
    pub document_id: u64,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub machine_translation: Option<String>,
    /// Checkpoint that produced `machine_translation`.
    pub provenance: Option<String>,
    pub post_edit: Option<String>,
    pub status: SegmentStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationJob {
    pub id: u64,
    pub segment_ids: Vec<u64>,
    pub extra_epochs: usize,
    pub state: JobState,
    pub provenance_before: String,
    pub provenance_after: Option<String>,
    pub before: Option<EvalReport>,
    pub after: Option<EvalReport>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Document {
        id: u64,
        first_segment: u64,
        sources: Vec<String>,
        references: Option<Vec<String>>,
    },
    Translated {
        segment: u64,
        output: String,
        provenance: String,
    },
    PostEdited {
        segment: u64,
        post_edit: String,
    },
    JobQueued {
        id: u64,
        segments: Vec<u64>,
        extra_epochs: usize,
        provenance: String,
    },
    JobStarted {
        id: u64,
    },
    JobDone {
        id: u64,
        checkpoint: PathBuf,
        provenance: String,
        before: Option<EvalReport>,
        after: Option<EvalReport>,
    },
    JobFailed {
        id: u64,
        message: String,
    },
}

#[derive(Debug, Default)]
struct Book {
    documents: u64,
    segments: BTreeMap<u64, Segment>,
    jobs: BTreeMap<u64, AdaptationJob>,
    /// Checkpoint file of the most recent completed job.
    latest_checkpoint: Option<PathBuf>,
}

impl Book {
    fn apply(&mut self, ev: &Event) {
        match ev {
            Event::Document {
                id,
                first_segment,
                sources,
                references,
            } => {
                self.documents = self.documents.max(*id);
                for (k, src) in sources.iter().enumerate() {
                    let sid = first_segment + k as u64;
                    self.segments.insert(
                        sid,
                        Segment {
                            id: sid,
                            document_id: *id,
                            source: src.clone(),
                            reference: references.as_ref().map(|r| r[k].clone()),
                            machine_translation: None,
                            provenance: None,
                            post_edit: None,
                            status: SegmentStatus::Pending,
                        },
                    );
                }
            }
            Event::Translated {
                segment,
                output,
                provenance,
            } => {
                if let Some(s) = self.segments.get_mut(segment) {
                    s.machine_translation = Some(output.clone());
                    s.provenance = Some(provenance.clone());
                    s.status = SegmentStatus::MachineTranslated;
                }
            }
            Event::PostEdited { segment, post_edit } => {
                if let Some(s) = self.segments.get_mut(segment) {
                    s.post_edit = Some(post_edit.clone());
                    s.status = SegmentStatus::PostEdited;
                }
            }
            Event::JobQueued {
                id,
                segments,
                extra_epochs,
                provenance,
            } => {
                self.jobs.insert(
                    *id,
                    AdaptationJob {
                        id: *id,
                        segment_ids: segments.clone(),
                        extra_epochs: *extra_epochs,
                        state: JobState::Queued,
                        provenance_before: provenance.clone(),
                        provenance_after: None,
                        before: None,
                        after: None,
                        message: None,
                    },
                );
            }
            Event::JobStarted { id } => {
                if let Some(j) = self.jobs.get_mut(id) {
                    j.state = JobState::Running;
                }
            }
            Event::JobDone {
                id,
                checkpoint,
                provenance,
                before,
                after,
            } => {
                if let Some(j) = self.jobs.get_mut(id) {
                    j.state = JobState::Done;
                    j.provenance_after = Some(provenance.clone());
                    j.before = before.clone();
                    j.after = after.clone();
                    for sid in &j.segment_ids {
                        if let Some(s) = self.segments.get_mut(sid) {
                            s.status = SegmentStatus::Accepted;
                        }
                    }
                }
                self.latest_checkpoint = Some(checkpoint.clone());
            }
            Event::JobFailed { id, message } => {
                if let Some(j) = self.jobs.get_mut(id) {
                    j.state = JobState::Failed;
                    j.message = Some(message.clone());
                }
            }
        }
    }

    fn next_segment_id(&self) -> u64 {
        self.segments.keys().next_back().map_or(1, |k| k + 1)
    }

    fn active_job(&self) -> Option<&AdaptationJob> {
        self.jobs.values().find(|j| !j.state.is_terminal())
    }

    /// Post-edited segments not already claimed by a queued or running job.
    fn pending(&self) -> Vec<u64> {
        let claimed: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .flat_map(|j| j.segment_ids.iter().copied())
            .collect();
        self.segments
            .values()
            .filter(|s| s.status == SegmentStatus::PostEdited && !claimed.contains(&s.id))
            .map(|s| s.id)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory holding `codes.bpe`, `vocab.src`, `vocab.tgt`.
    pub prep_dir: PathBuf,
    pub base_checkpoint: PathBuf,
    /// Event log and adapted checkpoints live here.
    pub data_dir: PathBuf,
    /// Held-out in-domain pairs scored before and after every job.
    pub probe: Option<(PathBuf, PathBuf)>,
    pub min_pairs: usize,
    pub max_body_bytes: usize,
    pub ui_dir: Option<PathBuf>,
    pub decode: DecodeStrategy,
}

impl ServiceConfig {
    pub fn new(prep_dir: impl Into<PathBuf>, base_checkpoint: impl Into<PathBuf>, data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            prep_dir: prep_dir.into(),
            base_checkpoint: base_checkpoint.into(),
            data_dir: data_dir.into(),
            probe: None,
            min_pairs: 50,
            max_body_bytes: 1 << 20,
            ui_dir: None,
            decode: DecodeStrategy::Greedy,
        }
    }
}

pub struct Serving {
    pub translator: Translator,
    pub provenance: String,
}

pub struct Service {
    pub config: ServiceConfig,
    prep: Preprocessing,
    probe: Option<ParallelCorpus>,
    book: Mutex<Book>,
    log: Mutex<File>,
    serving: RwLock<Arc<Serving>>,
    swapping: AtomicBool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Status {
    pub provenance: String,
    pub pending_pairs: usize,
    pub min_pairs: usize,
    pub segments: usize,
    pub model: ModelConfig,
    pub active_job: Option<AdaptationJob>,
    pub last_job: Option<AdaptationJob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pending {
    pub count: usize,
    pub segment_ids: Vec<u64>,
}

const EVENTS_FILE: &str = "events.jsonl";

fn log_err(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Log(e.to_string())
}

fn without_detail(mut r: EvalReport) -> EvalReport {
    r.ter_detail.clear();
    r
}

impl Service {
    /// Loads artifacts, replays the event log, and resumes serving the most
    /// recently adapted checkpoint. Jobs interrupted by a shutdown are
    /// marked failed.
    pub fn open(config: ServiceConfig) -> Result<Arc<Service>> {
        let prep = Preprocessing::load_dir(&config.prep_dir)?;
        let probe = match &config.probe {
            Some((s, t)) => Some(adaptnmt_core::corpus::load_parallel(s, t)?),
            None => None,
        };
        fs::create_dir_all(config.data_dir.join("checkpoints")).map_err(log_err)?;
        let path = config.data_dir.join(EVENTS_FILE);
        let mut book = Book::default();
        if path.exists() {
            let f = File::open(&path).map_err(log_err)?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(log_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: Event = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::Log(format!("{}:{}: {e}", path.display(), n + 1)))?;
                book.apply(&ev);
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path).map_err(log_err)?;
        let ckpt_path = book.latest_checkpoint.clone().unwrap_or_else(|| config.base_checkpoint.clone());
        let serving = Self::load_serving(&prep, &ckpt_path, config.decode)?;
        let svc = Service {
            config,
            prep,
            probe,
            book: Mutex::new(book),
            log: Mutex::new(log),
            serving: RwLock::new(Arc::new(serving)),
            swapping: AtomicBool::new(false),
        };
        let stale: Vec<u64> = svc.book().jobs.values().filter(|j| !j.state.is_terminal()).map(|j| j.id).collect();
        for id in stale {
            svc.record(Event::JobFailed {
                id,
                message: "interrupted by service restart".into(),
            })?;
        }
        Ok(Arc::new(svc))
    }

    fn load_serving(prep: &Preprocessing, path: &Path, decode: DecodeStrategy) -> Result<Serving> {
        let ckpt = Checkpoint::load(path)?;
        let provenance = ckpt.provenance_hash();
        Ok(Serving {
            translator: Translator::new(prep.clone(), ckpt, decode)?,
            provenance,
        })
    }

    fn book(&self) -> MutexGuard<'_, Book> {
        self.book.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends to the log first, then applies; a failed write changes nothing.
    fn record_locked(&self, book: &mut Book, ev: Event) -> Result<()> {
        let mut line = serde_json::to_string(&ev).map_err(log_err)?;
        line.push('\n');
        {
            let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
            log.write_all(line.as_bytes()).map_err(log_err)?;
            log.flush().map_err(log_err)?;
        }
        book.apply(&ev);
        Ok(())
    }

    fn record(&self, ev: Event) -> Result<()> {
        let mut book = self.book();
        self.record_locked(&mut book, ev)
    }

    pub fn serving(&self) -> Arc<Serving> {
        self.serving.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn create_document(&self, source: &str, target: Option<&str>) -> Result<(u64, Vec<Segment>)> {
        let norm = |text: &str| -> Vec<String> { text.lines().map(|l| tokenize(l).join(" ")).collect() };
        let mut sources = norm(source);
        while sources.last().is_some_and(|s| s.is_empty()) {
            sources.pop();
        }
        if sources.is_empty() {
            return Err(ServiceError::BadRequest("document has no lines".into()));
        }
        if let Some(i) = sources.iter().position(String::is_empty) {
            return Err(ServiceError::BadRequest(format!("line {} is empty", i + 1)));
        }
        let references = match target {
            Some(t) => {
                let mut refs = norm(t);
                while refs.last().is_some_and(|s| s.is_empty()) {
                    refs.pop();
                }
                if refs.len() != sources.len() {
                    return Err(ServiceError::BadRequest(format!(
                        "source has {} lines but target has {}",
                        sources.len(),
                        refs.len()
                    )));
                }
                Some(refs)
            }
            None => None,
        };
        let mut book = self.book();
        let id = book.documents + 1;
        let first = book.next_segment_id();
        let n = sources.len() as u64;
        self.record_locked(
            &mut book,
            Event::Document {
                id,
                first_segment: first,
                sources,
                references,
            },
        )?;
        let segs = (first..first + n).map(|k| book.segments[&k].clone()).collect();
        Ok((id, segs))
    }

    pub fn segment(&self, id: u64) -> Result<Segment> {
        self.book()
            .segments
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no segment {id}")))
    }

    pub fn translate(&self, id: u64) -> Result<Segment> {
        if self.swapping.load(Ordering::SeqCst) {
            return Err(ServiceError::Conflict("model swap in progress, retry".into()));
        }
        let seg = self.segment(id)?;
        if matches!(seg.status, SegmentStatus::PostEdited | SegmentStatus::Accepted) {
            return Err(ServiceError::Conflict(format!("segment {id} is already {:?}", seg.status)));
        }
        let serving = self.serving();
        let out = serving.translator.translate(&tokenize(&seg.source))?.join(" ");
        let mut book = self.book();
        let status = book.segments[&id].status;
        if matches!(status, SegmentStatus::PostEdited | SegmentStatus::Accepted) {
            return Err(ServiceError::Conflict(format!("segment {id} changed while translating")));
        }
        self.record_locked(
            &mut book,
            Event::Translated {
                segment: id,
                output: out,
                provenance: serving.provenance.clone(),
            },
        )?;
        Ok(book.segments[&id].clone())
    }

    pub fn post_edit(&self, id: u64, text: &str) -> Result<Segment> {
        let edit = tokenize(text).join(" ");
        let mut book = self.book();
        let seg = book
            .segments
            .get(&id)
            .ok_or_else(|| ServiceError::NotFound(format!("no segment {id}")))?;
        if seg.status != SegmentStatus::MachineTranslated {
            return Err(ServiceError::Conflict(format!(
                "segment {id} is {:?}; only machine-translated segments take post-edits",
                seg.status
            )));
        }
        if edit.is_empty() {
            return Err(ServiceError::BadRequest("post-edit is empty".into()));
        }
        self.record_locked(&mut book, Event::PostEdited { segment: id, post_edit: edit })?;
        Ok(book.segments[&id].clone())
    }

    pub fn pending(&self) -> Pending {
        let ids = self.book().pending();
        Pending {
            count: ids.len(),
            segment_ids: ids,
        }
    }

    pub fn job(&self, id: u64) -> Result<AdaptationJob> {
        self.book()
            .jobs
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no job {id}")))
    }

    pub fn status(&self) -> Status {
        let serving = self.serving();
        let book = self.book();
        Status {
            provenance: serving.provenance.clone(),
            pending_pairs: book.pending().len(),
            min_pairs: self.config.min_pairs,
            segments: book.segments.len(),
            model: serving.translator.checkpoint.config,
            active_job: book.active_job().cloned(),
            last_job: book.jobs.values().rev().find(|j| j.state.is_terminal()).cloned(),
        }
    }

    /// Queues a job over every pending post-edit and starts it on a worker
    /// thread. Translation keeps using the current checkpoint until the
    /// job swaps in its result.
    pub fn start_job(self: &Arc<Self>, extra_epochs: usize, min_pairs: Option<usize>) -> Result<AdaptationJob> {
        if extra_epochs == 0 {
            return Err(ServiceError::BadRequest("extra_epochs must be at least 1".into()));
        }
        let min_pairs = min_pairs.unwrap_or(self.config.min_pairs);
        let job = {
            let mut book = self.book();
            if let Some(active) = book.active_job() {
                return Err(ServiceError::Conflict(format!("job {} is still {:?}", active.id, active.state)));
            }
            let pending = book.pending();
            if pending.len() < min_pairs || pending.is_empty() {
                return Err(ServiceError::Precondition(format!(
                    "{} post-edited pairs pending, {} required",
                    pending.len(),
                    min_pairs.max(1)
                )));
            }
            let id = book.jobs.keys().next_back().map_or(1, |k| k + 1);
            self.record_locked(
                &mut book,
                Event::JobQueued {
                    id,
                    segments: pending,
                    extra_epochs,
                    provenance: self.serving().provenance.clone(),
                },
            )?;
            book.jobs[&id].clone()
        };
        let svc = Arc::clone(self);
        let id = job.id;
        std::thread::spawn(move || {
            if let Err(e) = svc.run_job(id) {
                log::warn!("adaptation job {id} failed: {e}");
                if let Err(e2) = svc.record(Event::JobFailed { id, message: e.to_string() }) {
                    log::error!("could not record failure of job {id}: {e2}");
                }
            }
        });
        Ok(job)
    }

    fn run_job(&self, id: u64) -> Result<()> {
        self.record(Event::JobStarted { id })?;
        let (segment_ids, epochs, pairs) = {
            let book = self.book();
            let job = &book.jobs[&id];
            let pairs: Vec<SentencePair> = job
                .segment_ids
                .iter()
                .filter_map(|sid| book.segments.get(sid))
                .filter_map(|s| Some(SentencePair::new(&s.source, s.post_edit.as_deref()?)))
                .collect();
            (job.segment_ids.clone(), job.extra_epochs, pairs)
        };
        if pairs.len() != segment_ids.len() {
            return Err(ServiceError::Conflict("a claimed segment lost its post-edit".into()));
        }
        let corpus = ParallelCorpus::new(format!("post-edits-job-{id}"), DomainTag::InDomain, pairs);
        let data = self.prep.prepare(&corpus);
        let base = self.serving();
        let before = self.score_probe(&base.translator)?;
        let (adapted, _) = specialize(&base.translator.checkpoint, &data, epochs, LrPolicy::Resume)?;
        let translator = Translator::new(self.prep.clone(), adapted, self.config.decode)?;
        let after = self.score_probe(&translator)?;
        let provenance = translator.checkpoint.provenance_hash();
        let path = self.config.data_dir.join("checkpoints").join(format!("job-{id}.ckpt"));
        translator.checkpoint.save(&path)?;

        let mut book = self.book();
        self.swapping.store(true, Ordering::SeqCst);
        let swapped = (|| {
            self.record_locked(
                &mut book,
                Event::JobDone {
                    id,
                    checkpoint: path,
                    provenance: provenance.clone(),
                    before,
                    after,
                },
            )?;
            *self.serving.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(Serving { translator, provenance });
            Ok(())
        })();
        self.swapping.store(false, Ordering::SeqCst);
        swapped
    }

    fn score_probe(&self, t: &Translator) -> Result<Option<EvalReport>> {
        match &self.probe {
            Some(p) => Ok(Some(without_detail(evaluate_model(t, p, Exec::default())?))),
            None => Ok(None),
        }
    }
}
