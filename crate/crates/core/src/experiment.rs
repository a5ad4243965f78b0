//! The three adaptation studies at desk scale: full-retrain baselines,
//! the specialization epoch curve, the data-size matrix, and the timing
//! table built from their wall clocks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_parallel, size_label, synth_two_domain, DomainTag, ParallelCorpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::exec::Exec;
use crate::model::ModelConfig;
use crate::pipeline::{DecodeStrategy, PreparedCorpus, Preprocessing, Translator};
use crate::train::{specialize_with, train_model_with, Checkpoint, LrPolicy, TrainOptions, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSource {
    Synth {
        generic_lines: usize,
        indomain_lines: usize,
    },
    Files {
        generic_src: PathBuf,
        generic_tgt: PathBuf,
        indomain_src: PathBuf,
        indomain_tgt: PathBuf,
        indomain_test_src: PathBuf,
        indomain_test_tgt: PathBuf,
        generic_test_src: Option<PathBuf>,
        generic_test_tgt: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub source: CorpusSource,
    /// In-domain slice sizes in lines, ascending. Empty means 1%, 10%
    /// and 100% of the in-domain training set.
    pub slice_sizes: Vec<usize>,
    /// Cumulative extra epochs on the curve: 1..=curve_epochs.
    pub curve_epochs: usize,
    /// Vocabulary sizes are filled in from the fitted preprocessing.
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub bpe_merges: usize,
    pub max_vocab: usize,
    pub lr_policy: LrPolicy,
    pub decode: DecodeStrategy,
    /// When false, only generic+full is retrained for the baselines.
    pub retrain_every_slice: bool,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    /// Desk preset over the seeded synthetic task.
    pub fn desk(seed: u64, generic_lines: usize, indomain_lines: usize, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentPlan {
            seed,
            source: CorpusSource::Synth {
                generic_lines,
                indomain_lines,
            },
            slice_sizes: Vec::new(),
            curve_epochs: 5,
            model: ModelConfig::desk(0, 0),
            schedule: desk_schedule(seed),
            bpe_merges: 400,
            max_vocab: 32_000,
            lr_policy: LrPolicy::Resume,
            decode: DecodeStrategy::Greedy,
            retrain_every_slice: true,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slice_sizes.windows(2).any(|w| w[0] >= w[1]) || self.slice_sizes.contains(&0) {
            return Err(Error::Invalid(format!(
                "slice sizes must be positive and ascending: {:?}",
                self.slice_sizes
            )));
        }
        if self.curve_epochs == 0 {
            return Err(Error::Invalid("the epoch sweep must not be empty".into()));
        }
        self.schedule.validate()
    }
}

/// Schedule used for desk-scale runs: the published recipe, compressed to
/// fit the toy corpus.
pub fn desk_schedule(seed: u64) -> TrainSchedule {
    TrainSchedule {
        base_lr: 1.0,
        decay_factor: 0.5,
        decay_start_epoch: 8,
        total_epochs: 10,
        batch_size: 32,
        clip_norm: 5.0,
        seed,
    }
}

/// Raw and id-encoded corpora for one plan.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub prep: Preprocessing,
    pub generic_train: ParallelCorpus,
    pub generic_test: Option<ParallelCorpus>,
    pub indomain_train: ParallelCorpus,
    pub indomain_test: ParallelCorpus,
    pub generic: PreparedCorpus,
    pub indomain: PreparedCorpus,
    /// `(label, lines, prepared)` per slice, ascending.
    pub slices: Vec<(String, usize, PreparedCorpus)>,
    pub model: ModelConfig,
}

fn renamed(mut c: ParallelCorpus, name: &str) -> ParallelCorpus {
    c.name = name.to_string();
    c
}

impl ExperimentData {
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let (generic_train, generic_test, indomain_train, indomain_test) = match &plan.source {
            CorpusSource::Synth {
                generic_lines,
                indomain_lines,
            } => {
                let d = synth_two_domain(plan.seed, *generic_lines, *indomain_lines)?;
                (d.generic_train, Some(d.generic_test), d.indomain_train, d.indomain_test)
            }
            CorpusSource::Files {
                generic_src,
                generic_tgt,
                indomain_src,
                indomain_tgt,
                indomain_test_src,
                indomain_test_tgt,
                generic_test_src,
                generic_test_tgt,
            } => {
                let mut it = load_parallel(indomain_src, indomain_tgt)?;
                it.domain = DomainTag::InDomain;
                let mut itest = load_parallel(indomain_test_src, indomain_test_tgt)?;
                itest.domain = DomainTag::InDomain;
                let gtest = match (generic_test_src, generic_test_tgt) {
                    (Some(s), Some(t)) => Some(load_parallel(s, t)?),
                    _ => None,
                };
                (load_parallel(generic_src, generic_tgt)?, gtest, it, itest)
            }
        };
        let generic_train = renamed(generic_train, "generic");
        let indomain_train = renamed(indomain_train, "indomain");
        let prep = Preprocessing::fit(&[&generic_train, &indomain_train], plan.bpe_merges, plan.max_vocab)?;
        let generic = prep.prepare(&generic_train);
        let indomain = prep.prepare(&indomain_train);
        let n = indomain.len();
        let sizes = if plan.slice_sizes.is_empty() {
            let mut s: Vec<usize> = [n / 100, n / 10, n].into_iter().filter(|&k| k > 0).collect();
            s.dedup();
            s
        } else {
            plan.slice_sizes.clone()
        };
        if let Some(&big) = sizes.last().filter(|&&b| b > n) {
            return Err(Error::Range(format!("slice of {big} lines exceeds in-domain corpus of {n} lines")));
        }
        let slices = sizes
            .into_iter()
            .map(|k| {
                let label = if k == n { "indomain-full".to_string() } else { format!("indomain-{}", size_label(k)) };
                let mut p = indomain.prefix(k);
                p.name = label.clone();
                (label, k, p)
            })
            .collect();
        let model = ModelConfig {
            src_vocab_size: prep.src_vocab.len(),
            tgt_vocab_size: prep.tgt_vocab.len(),
            ..plan.model
        };
        model.validate()?;
        Ok(ExperimentData {
            prep,
            generic_train,
            generic_test,
            indomain_train,
            indomain_test,
            generic,
            indomain,
            slices,
            model,
        })
    }

    pub fn translator(&self, ckpt: &Checkpoint, decode: DecodeStrategy) -> Result<Translator> {
        Translator::new(self.prep.clone(), ckpt.clone(), decode)
    }

    pub fn eval_indomain(&self, ckpt: &Checkpoint, plan: &ExperimentPlan, exec: Exec) -> Result<EvalReport> {
        evaluate_model(&self.translator(ckpt, plan.decode)?, &self.indomain_test, exec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub training_corpus: String,
    /// None for fully trained systems.
    pub specialization_corpus: Option<String>,
    pub bleu: f64,
    pub ter: f64,
    pub train_seconds: Option<f64>,
    pub specialize_seconds: Option<f64>,
}

pub const RESULT_HEADER: &str = "training_corpus,specialization_corpus,bleu,ter,train_seconds,specialize_seconds";

fn opt_secs(v: Option<f64>) -> String {
    v.map(|s| format!("{s:.3}")).unwrap_or_default()
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{},{}",
            self.training_corpus,
            self.specialization_corpus.as_deref().unwrap_or("N/A"),
            self.bleu,
            self.ter,
            opt_secs(self.train_seconds),
            opt_secs(self.specialize_seconds)
        )
    }
}

pub fn rows_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULT_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// A fully trained system kept for later stages.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub label: String,
    pub checkpoint: Checkpoint,
    pub seconds: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub rows: Vec<ResultRow>,
    pub generic: TrainedSystem,
    /// generic + the largest slice, when it was retrained.
    pub full: Option<TrainedSystem>,
    pub retrained: Vec<TrainedSystem>,
}

fn train_system(
    plan: &ExperimentPlan,
    data: &ExperimentData,
    label: &str,
    corpus: &PreparedCorpus,
    opts: &TrainOptions,
) -> Result<TrainedSystem> {
    log::info!("training {label} on {} pairs", corpus.len());
    let (checkpoint, report) = train_model_with(corpus, data.model, plan.schedule, None, opts)?;
    let eval = data.eval_indomain(&checkpoint, plan, opts.exec)?;
    Ok(TrainedSystem {
        label: label.to_string(),
        checkpoint,
        seconds: report.total_seconds(),
        eval,
    })
}

fn baseline_row(s: &TrainedSystem) -> ResultRow {
    ResultRow {
        training_corpus: s.label.clone(),
        specialization_corpus: None,
        bleu: s.eval.bleu,
        ter: s.eval.ter,
        train_seconds: Some(s.seconds),
        specialize_seconds: None,
    }
}

/// Trains only the generic system and scores it on the in-domain test.
pub fn train_generic(plan: &ExperimentPlan, data: &ExperimentData, opts: &TrainOptions) -> Result<TrainedSystem> {
    train_system(plan, data, "generic", &data.generic, opts)
}

/// Generic, then generic+slice for each slice (or only the largest, when
/// `retrain_every_slice` is off), each trained from scratch.
pub fn run_baselines(plan: &ExperimentPlan, data: &ExperimentData, opts: &TrainOptions) -> Result<Baselines> {
    let generic = train_generic(plan, data, opts)?;
    let chosen: Vec<&(String, usize, PreparedCorpus)> = if plan.retrain_every_slice {
        data.slices.iter().collect()
    } else {
        data.slices.last().into_iter().collect()
    };
    let mut retrained = Vec::new();
    for (label, _, slice) in chosen {
        let name = format!("generic+{label}");
        let corpus = data.generic.concat(slice, name.clone())?;
        retrained.push(train_system(plan, data, &name, &corpus, opts)?);
    }
    let full = match (retrained.last(), data.slices.last()) {
        (Some(s), Some((label, _, _))) if s.label == format!("generic+{label}") => Some(s.clone()),
        _ => None,
    };
    let mut rows = vec![baseline_row(&generic)];
    rows.extend(retrained.iter().map(baseline_row));
    Ok(Baselines {
        rows,
        generic,
        full,
        retrained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub bleu: f64,
    pub ter: f64,
    pub seconds: f64,
}

pub const CURVE_HEADER: &str = "epoch,bleu,ter,baseline_low,baseline_high";

/// Epoch 0 is the base model itself; `baseline_high` is blank when no
/// generic+full system was trained.
pub fn curve_csv(points: &[CurvePoint], baseline_low: f64, baseline_high: Option<f64>) -> String {
    let high = baseline_high.map(|b| format!("{b:.4}")).unwrap_or_default();
    let mut s = format!("{CURVE_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{:.4},{:.4},{baseline_low:.4},{high}\n", p.epoch, p.bleu, p.ter));
    }
    s
}

/// Specializes `base` on the full in-domain set for 1..=curve_epochs
/// cumulative epochs, scoring after each. The first point is epoch 0.
pub fn run_epoch_curve(
    plan: &ExperimentPlan,
    data: &ExperimentData,
    base: &TrainedSystem,
    opts: &TrainOptions,
) -> Result<(Vec<CurvePoint>, Checkpoint)> {
    let mut points = vec![CurvePoint {
        epoch: 0,
        bleu: base.eval.bleu,
        ter: base.eval.ter,
        seconds: 0.0,
    }];
    let mut cur = base.checkpoint.clone();
    for epoch in 1..=plan.curve_epochs {
        let (next, report) = specialize_with(&cur, &data.indomain, 1, plan.lr_policy, opts)?;
        let eval = data.eval_indomain(&next, plan, opts.exec)?;
        log::info!("curve epoch {epoch}: BLEU {:.2} TER {:.2}", eval.bleu, eval.ter);
        points.push(CurvePoint {
            epoch,
            bleu: eval.bleu,
            ter: eval.ter,
            seconds: report.total_seconds(),
        });
        cur = next;
    }
    Ok((points, cur))
}

/// One specialization epoch of `base` per slice.
pub fn run_data_size_matrix(
    plan: &ExperimentPlan,
    data: &ExperimentData,
    base: &TrainedSystem,
    opts: &TrainOptions,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (label, _, slice) in &data.slices {
        let (ck, report) = specialize_with(&base.checkpoint, slice, 1, plan.lr_policy, opts)?;
        let eval = data.eval_indomain(&ck, plan, opts.exec)?;
        log::info!("specialized on {label}: BLEU {:.2} TER {:.2}", eval.bleu, eval.ter);
        rows.push(ResultRow {
            training_corpus: base.label.clone(),
            specialization_corpus: Some(label.clone()),
            bleu: eval.bleu,
            ter: eval.ter,
            train_seconds: None,
            specialize_seconds: Some(report.total_seconds()),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub process: String,
    pub corpus: String,
    pub lines: usize,
    pub source_tokens: usize,
    pub target_tokens: usize,
    pub seconds: f64,
    /// seconds / full-retrain seconds.
    pub ratio_to_full_retrain: Option<f64>,
}

pub const TIMING_HEADER: &str = "process,corpus,lines,source_tokens,target_tokens,seconds,ratio_to_full_retrain";

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = format!("{TIMING_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3},{}\n",
            r.process,
            r.corpus,
            r.lines,
            r.source_tokens,
            r.target_tokens,
            r.seconds,
            r.ratio_to_full_retrain.map(|x| format!("{x:.5}")).unwrap_or_default()
        ));
    }
    s
}

fn token_counts(c: &PreparedCorpus) -> (usize, usize) {
    c.examples.iter().fold((0, 0), |(s, t), (a, b)| (s + a.len(), t + b.len()))
}

/// Training vs specialization wall clock per corpus. Ratios are relative
/// to retraining generic+full from scratch.
pub fn timing_report(data: &ExperimentData, baselines: &Baselines, matrix: &[ResultRow]) -> Vec<TimingRow> {
    let full_secs = baselines.full.as_ref().map(|f| f.seconds);
    let ratio = |s: f64| full_secs.filter(|&f| f > 0.0).map(|f| s / f);
    let mut rows = Vec::new();
    let (gs, gt) = token_counts(&data.generic);
    rows.push(TimingRow {
        process: "train".into(),
        corpus: "generic".into(),
        lines: data.generic.len(),
        source_tokens: gs,
        target_tokens: gt,
        seconds: baselines.generic.seconds,
        ratio_to_full_retrain: ratio(baselines.generic.seconds),
    });
    for sys in &baselines.retrained {
        let label = sys.label.trim_start_matches("generic+");
        if let Some((_, lines, slice)) = data.slices.iter().find(|(l, _, _)| l == label) {
            let (s, t) = token_counts(slice);
            rows.push(TimingRow {
                process: "retrain".into(),
                corpus: sys.label.clone(),
                lines: data.generic.len() + lines,
                source_tokens: gs + s,
                target_tokens: gt + t,
                seconds: sys.seconds,
                ratio_to_full_retrain: ratio(sys.seconds),
            });
        }
    }
    for row in matrix {
        let Some(label) = row.specialization_corpus.as_deref() else { continue };
        if let Some((_, lines, slice)) = data.slices.iter().find(|(l, _, _)| l == label) {
            let (s, t) = token_counts(slice);
            let secs = row.specialize_seconds.unwrap_or(0.0);
            rows.push(TimingRow {
                process: "specialize".into(),
                corpus: label.to_string(),
                lines: *lines,
                source_tokens: s,
                target_tokens: t,
                seconds: secs,
                ratio_to_full_retrain: ratio(secs),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub plan: ExperimentPlan,
    pub codes_hash: String,
    pub src_vocab_hash: String,
    pub tgt_vocab_hash: String,
    /// corpus name -> content hash
    pub corpora: Vec<(String, String)>,
    /// system label -> checkpoint provenance hash
    pub checkpoints: Vec<(String, String)>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutputs {
    pub baselines: Baselines,
    pub curve: Vec<CurvePoint>,
    pub matrix: Vec<ResultRow>,
    pub timing: Vec<TimingRow>,
    pub manifest: Manifest,
    pub files: Vec<PathBuf>,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Which studies to run. Every selection trains the systems it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Baselines,
    EpochCurve,
    DataSize,
    Timing,
    All,
}

/// Runs `study` and writes its files (plus `manifest.json`) to `plan.out_dir`.
pub fn run_study(plan: &ExperimentPlan, study: Study, opts: &TrainOptions) -> Result<ExperimentOutputs> {
    let data = ExperimentData::load(plan)?;
    let dir = &plan.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<&str> = Vec::new();
    let mut checkpoints = Vec::new();

    let needs_all_retrains = matches!(study, Study::Baselines | Study::Timing | Study::All);
    let local_plan = ExperimentPlan {
        retrain_every_slice: plan.retrain_every_slice && needs_all_retrains,
        ..plan.clone()
    };
    let baselines = if matches!(study, Study::DataSize) {
        let generic = train_generic(plan, &data, opts)?;
        Baselines {
            rows: vec![baseline_row(&generic)],
            generic,
            full: None,
            retrained: Vec::new(),
        }
    } else {
        run_baselines(&local_plan, &data, opts)?
    };
    checkpoints.push(("generic".to_string(), baselines.generic.checkpoint.provenance_hash()));
    for s in &baselines.retrained {
        checkpoints.push((s.label.clone(), s.checkpoint.provenance_hash()));
    }
    if matches!(study, Study::Baselines | Study::All) {
        write(dir, "table2.csv", &rows_csv(&baselines.rows))?;
        files.push("table2.csv");
    }

    let mut curve = Vec::new();
    if matches!(study, Study::EpochCurve | Study::All) {
        let (points, last) = run_epoch_curve(plan, &data, &baselines.generic, opts)?;
        let high = baselines.full.as_ref().map(|f| f.eval.bleu);
        write(dir, "fig2.csv", &curve_csv(&points, baselines.generic.eval.bleu, high))?;
        files.push("fig2.csv");
        checkpoints.push((format!("generic>indomain-full x{}", plan.curve_epochs), last.provenance_hash()));
        curve = points;
    }

    let mut matrix = Vec::new();
    if matches!(study, Study::DataSize | Study::Timing | Study::All) {
        matrix = run_data_size_matrix(plan, &data, &baselines.generic, opts)?;
        if !matches!(study, Study::Timing) {
            let mut rows = baselines.rows.clone();
            rows.extend(matrix.iter().cloned());
            write(dir, "table3.csv", &rows_csv(&rows))?;
            files.push("table3.csv");
        }
    }

    let mut timing = Vec::new();
    if matches!(study, Study::Timing | Study::All) {
        timing = timing_report(&data, &baselines, &matrix);
        write(dir, "table4.csv", &timing_csv(&timing))?;
        files.push("table4.csv");
    }

    let hashes = data.prep.hashes();
    let mut corpora = vec![
        (data.generic.name.clone(), data.generic.content_hash.clone()),
        (data.indomain.name.clone(), data.indomain.content_hash.clone()),
        (data.indomain_test.name.clone(), data.indomain_test.content_hash()),
    ];
    if let Some(t) = &data.generic_test {
        corpora.push((t.name.clone(), t.content_hash()));
    }
    let manifest = Manifest {
        seed: plan.seed,
        plan: plan.clone(),
        codes_hash: hashes.codes,
        src_vocab_hash: hashes.src_vocab,
        tgt_vocab_hash: hashes.tgt_vocab,
        corpora,
        checkpoints,
        files: files.iter().map(|s| s.to_string()).collect(),
    };
    write(dir, "manifest.json", &serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    let mut paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).collect();
    paths.push(dir.join("manifest.json"));
    Ok(ExperimentOutputs {
        baselines,
        curve,
        matrix,
        timing,
        manifest,
        files: paths,
    })
}
