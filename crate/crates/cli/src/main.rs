mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptnmt_core::corpus::{load_parallel, read_sentences, synth_two_domain, DomainTag, ParallelCorpus};
use adaptnmt_core::eval::score;
use adaptnmt_core::exec::Exec;
use adaptnmt_core::experiment::{desk_schedule, run_study, CorpusSource, ExperimentPlan, Study};
use adaptnmt_core::model::ModelConfig;
use adaptnmt_core::pipeline::{DecodeStrategy, Preprocessing, TranslationSystem, Translator, CODES_FILE};
use adaptnmt_core::subword::{learn_bpe_from, BpeCodes, DEFAULT_EOW};
use adaptnmt_core::train::{specialize_with, train_model_with, Checkpoint, EpochRow, LrPolicy, TrainOptions, TrainReport, TrainSchedule};
use adaptnmt_core::vocab::build_vocab;
use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Domain adaptation of neural machine translation by specialization.
#[derive(Parser, Debug)]
#[command(name = "adaptnmt", version, about, propagate_version = true)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// key=value defaults; falls back to $ADAPTNMT_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the seeded two-domain toy task under DIR/{generic,indomain}.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        generic: usize,
        #[arg(long, default_value_t = 15_000)]
        indomain: usize,
    },
    /// Learn joint BPE merges over one or more tokenized text files.
    LearnBpe {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 400)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment a text file with learned codes.
    ApplyBpe {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a vocabulary over BPE-segmented text.
    BuildVocab {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 32_000)]
        max_size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model from scratch on DATA/train.{src,tgt}.
    Train(TrainArgs),
    /// Continue training a saved model on in-domain data only.
    Specialize(SpecializeArgs),
    /// Translate one tokenized sentence per line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with codes.bpe, vocab.src, vocab.tgt.
        #[arg(long)]
        prep: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Corpus BLEU and TER of hypotheses against references.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run the adaptation studies and write their CSV tables.
    Experiment(ExperimentArgs),
    /// Serve the post-editing workbench.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Beam size; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Length normalization exponent for beam search.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
}

impl DecodeArgs {
    fn strategy(&self) -> Result<DecodeStrategy> {
        match self.beam {
            0 => bail!("--beam must be at least 1"),
            1 => Ok(DecodeStrategy::Greedy),
            size => Ok(DecodeStrategy::Beam { size, alpha: self.alpha }),
        }
    }
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_start: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Published sizes instead of the desk preset.
    #[arg(long)]
    paper: bool,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory with train.src and train.tgt.
    #[arg(long)]
    data: PathBuf,
    /// Directory with codes.bpe, vocab.src, vocab.tgt [default: DATA or its parent].
    #[arg(long)]
    prep: Option<PathBuf>,
    /// Optional dev directory scored after every epoch.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint path; the report goes next to it as .csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Resume,
    Schedule,
}

#[derive(Args, Debug)]
struct SpecializeArgs {
    #[arg(long)]
    base: PathBuf,
    /// Directory with train.src and train.tgt of the in-domain corpus.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    prep: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "resume")]
    lr_policy: PolicyArg,
    /// Constant learning rate; overrides --lr-policy.
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint path [default: DATA/specialized.ckpt]; report as .csv beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StudyArg {
    Baselines,
    EpochCurve,
    DataSize,
    Timing,
    All,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(value_enum)]
    study: StudyArg,
    #[arg(long)]
    out: PathBuf,
    /// Synth layout directory to read corpora from instead of generating them.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    generic: usize,
    #[arg(long, default_value_t = 15_000)]
    indomain: usize,
    /// Comma-separated slice sizes in lines [default: 1%,10%,100%].
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    curve_epochs: usize,
    #[arg(long, default_value_t = 400)]
    merges: usize,
    /// Retrain only generic+full for the baselines.
    #[arg(long)]
    no_slice_retrain: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    prep: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// Event log and adapted checkpoints.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, requires = "probe_tgt")]
    probe_src: Option<PathBuf>,
    #[arg(long, requires = "probe_src")]
    probe_tgt: Option<PathBuf>,
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    min_pairs: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse_args(args) {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn usage(e: clap::Error) -> ExitCode {
    let code = if e.use_stderr() { 1 } else { 0 };
    let _ = e.print();
    ExitCode::from(code)
}

fn parse_args(mut args: Vec<OsString>) -> std::result::Result<Cli, ExitCode> {
    let mut cmd = Cli::command();
    cmd.build();
    let matches = cmd.clone().try_get_matches_from(&args).map_err(usage)?;
    if let Some(path) = config::locate(&args) {
        let entries = config::read(&path).map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                config::ConfigError::Read(..) => 2,
                config::ConfigError::Syntax(_) => 1,
            })
        })?;
        let extra = config::defaults(&cmd, &matches, &entries).map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(1)
        })?;
        if !extra.is_empty() {
            args.extend(extra);
            let merged = cmd.try_get_matches_from(&args).map_err(usage)?;
            return Cli::from_arg_matches(&merged).map_err(usage);
        }
    }
    Cli::from_arg_matches(&matches).map_err(usage)
}

fn exec(cli: &Cli) -> Exec {
    if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = exec(&cli);
    match &cli.cmd {
        Cmd::Synth { out, generic, indomain } => synth(&cli, out, *generic, *indomain),
        Cmd::LearnBpe { inputs, merges, output } => {
            let mut sentences = Vec::new();
            for p in inputs {
                sentences.extend(read_sentences(p)?);
            }
            let codes = learn_bpe_from(sentences.iter().map(Vec::as_slice), *merges, DEFAULT_EOW)?;
            codes.save(output)?;
            report(&cli, json!({"merges": codes.num_merges(), "output": output}), || {
                format!("learned {} merges -> {}", codes.num_merges(), output.display())
            })
        }
        Cmd::ApplyBpe { codes, input, output } => {
            let codes = BpeCodes::load(codes)?;
            let text: String = read_sentences(input)?
                .iter()
                .map(|s| codes.apply(s).join(" ") + "\n")
                .collect();
            write_file(output, &text)
        }
        Cmd::BuildVocab {
            codes,
            inputs,
            max_size,
            output,
        } => {
            let codes = BpeCodes::load(codes)?;
            let mut segmented = Vec::new();
            for p in inputs {
                segmented.extend(read_sentences(p)?.iter().map(|s| codes.apply(s)));
            }
            let vocab = build_vocab(segmented.iter().map(Vec::as_slice), *max_size)?;
            vocab.save(output)?;
            report(&cli, json!({"size": vocab.len(), "output": output}), || {
                format!("{} symbols -> {}", vocab.len(), output.display())
            })
        }
        Cmd::Train(a) => train(&cli, a, exec),
        Cmd::Specialize(a) => specialize(&cli, a, exec),
        Cmd::Translate {
            checkpoint,
            prep,
            input,
            output,
            decode,
        } => {
            let t = Translator::new(Preprocessing::load_dir(prep)?, Checkpoint::load(checkpoint)?, decode.strategy()?)?;
            let outs = t.translate_all(&read_sentences(input)?, exec)?;
            let text: String = outs.iter().map(|s| s.join(" ") + "\n").collect();
            match output {
                Some(p) => write_file(p, &text),
                None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
            }
        }
        Cmd::Score { hyp, reference } => {
            let r = score(&read_sentences(hyp)?, &read_sentences(reference)?, exec)?;
            if cli.json {
                let mut r = r;
                r.ter_detail.clear();
                println!("{}", r.to_json());
            } else {
                println!("BLEU {:.2}", r.bleu);
                println!("TER {:.2}", r.ter);
            }
            Ok(())
        }
        Cmd::Experiment(a) => experiment(&cli, a, exec),
        Cmd::Serve(a) => serve(a),
    }
}

fn report(cli: &Cli, value: serde_json::Value, text: impl FnOnce() -> String) -> Result<()> {
    if cli.json {
        println!("{value}");
    } else {
        println!("{}", text());
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_corpus(c: &ParallelCorpus, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    c.save(&dir.join(format!("{stem}.src")), &dir.join(format!("{stem}.tgt")))?;
    Ok(())
}

fn synth(cli: &Cli, out: &Path, generic: usize, indomain: usize) -> Result<()> {
    let d = synth_two_domain(cli.seed, generic, indomain)?;
    save_corpus(&d.generic_train, &out.join("generic"), "train")?;
    save_corpus(&d.generic_test, &out.join("generic"), "test")?;
    save_corpus(&d.indomain_train, &out.join("indomain"), "train")?;
    save_corpus(&d.indomain_test, &out.join("indomain"), "test")?;
    report(
        cli,
        json!({
            "generic_train": d.generic_train.len(), "generic_test": d.generic_test.len(),
            "indomain_train": d.indomain_train.len(), "indomain_test": d.indomain_test.len(),
        }),
        || {
            format!(
                "generic {}+{} and in-domain {}+{} pairs -> {}",
                d.generic_train.len(),
                d.generic_test.len(),
                d.indomain_train.len(),
                d.indomain_test.len(),
                out.display()
            )
        },
    )
}

fn load_dir_corpus(dir: &Path, stem: &str, domain: DomainTag) -> Result<ParallelCorpus> {
    let mut c = load_parallel(&dir.join(format!("{stem}.src")), &dir.join(format!("{stem}.tgt")))
        .with_context(|| format!("loading {stem}.src/{stem}.tgt from {}", dir.display()))?;
    if let Some(name) = dir.file_name() {
        c.name = name.to_string_lossy().into_owned();
    }
    c.domain = domain;
    Ok(c)
}

fn prep_dir(explicit: Option<&PathBuf>, data: &Path) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let candidates = [Some(data), data.parent()];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join(CODES_FILE).exists())
        .map(Path::to_path_buf)
        .with_context(|| format!("no {CODES_FILE} in {} or its parent; pass --prep", data.display()))
}

fn model_config(a: &ModelArgs, prep: &Preprocessing) -> ModelConfig {
    let (s, t) = (prep.src_vocab.len(), prep.tgt_vocab.len());
    let base = if a.paper { ModelConfig::paper(s, t) } else { ModelConfig::desk(s, t) };
    ModelConfig {
        emb_dim: a.emb_dim.unwrap_or(base.emb_dim),
        hidden_dim: a.hidden_dim.unwrap_or(base.hidden_dim),
        num_layers: a.layers.unwrap_or(base.num_layers),
        dropout_p: a.dropout.unwrap_or(base.dropout_p),
        ..base
    }
}

fn schedule(a: &ScheduleArgs, base: TrainSchedule) -> TrainSchedule {
    TrainSchedule {
        base_lr: a.lr.unwrap_or(base.base_lr),
        decay_factor: a.decay_factor.unwrap_or(base.decay_factor),
        decay_start_epoch: a.decay_start.unwrap_or(base.decay_start_epoch),
        total_epochs: a.epochs.unwrap_or(base.total_epochs),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        clip_norm: a.clip_norm.unwrap_or(base.clip_norm),
        seed: base.seed,
    }
}

fn report_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("csv")
}

fn on_epoch(row: &EpochRow) {
    log::info!("epoch {} lr {} loss {:.4}", row.epoch, row.lr, row.train_loss);
}

fn finish_training(cli: &Cli, ckpt: &Checkpoint, rep: &TrainReport, out: &Path) -> Result<()> {
    ckpt.save(out)?;
    let csv = report_path(out);
    write_file(&csv, &rep.to_csv())?;
    report(
        cli,
        json!({
            "checkpoint": out, "report": csv, "epochs_completed": ckpt.epochs_completed,
            "seconds": rep.total_seconds(), "steps": rep.total_steps(), "losses": rep.losses(),
            "provenance_hash": ckpt.provenance_hash(),
        }),
        || {
            format!(
                "{} epochs ({} steps, {:.1}s), final loss {:.4} -> {}",
                rep.rows.len(),
                rep.total_steps(),
                rep.total_seconds(),
                rep.losses().last().copied().unwrap_or(f64::NAN),
                out.display()
            )
        },
    )
}

fn train(cli: &Cli, a: &TrainArgs, exec: Exec) -> Result<()> {
    let prep = Preprocessing::load_dir(&prep_dir(a.prep.as_ref(), &a.data)?)?;
    let data = prep.prepare(&load_dir_corpus(&a.data, "train", DomainTag::Generic)?);
    let dev = match &a.dev {
        Some(d) => Some(prep.prepare(&load_dir_corpus(d, "train", DomainTag::Generic)?)),
        None => None,
    };
    let base = if a.model.paper { TrainSchedule::paper(cli.seed) } else { desk_schedule(cli.seed) };
    let sched = schedule(&a.schedule, base);
    let cb = on_epoch;
    let opts = TrainOptions { exec, on_epoch: Some(&cb) };
    let (ckpt, rep) = train_model_with(&data, model_config(&a.model, &prep), sched, dev.as_ref(), &opts)?;
    finish_training(cli, &ckpt, &rep, &a.out)
}

fn specialize(cli: &Cli, a: &SpecializeArgs, exec: Exec) -> Result<()> {
    let base = Checkpoint::load(&a.base)?;
    let prep = Preprocessing::load_dir(&prep_dir(a.prep.as_ref(), &a.data)?)?;
    let data = prep.prepare(&load_dir_corpus(&a.data, "train", DomainTag::InDomain)?);
    let policy = match (a.lr, a.lr_policy) {
        (Some(lr), _) => LrPolicy::Override(lr),
        (None, PolicyArg::Resume) => LrPolicy::Resume,
        (None, PolicyArg::Schedule) => LrPolicy::Schedule,
    };
    let cb = on_epoch;
    let opts = TrainOptions { exec, on_epoch: Some(&cb) };
    let (ckpt, rep) = specialize_with(&base, &data, a.epochs, policy, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join("specialized.ckpt"));
    finish_training(cli, &ckpt, &rep, &out)
}

fn experiment(cli: &Cli, a: &ExperimentArgs, exec: Exec) -> Result<()> {
    let mut plan = ExperimentPlan::desk(cli.seed, a.generic, a.indomain, &a.out);
    if let Some(d) = &a.data {
        let (g, i) = (d.join("generic"), d.join("indomain"));
        let gt = g.join("test.src").exists();
        plan.source = CorpusSource::Files {
            generic_src: g.join("train.src"),
            generic_tgt: g.join("train.tgt"),
            indomain_src: i.join("train.src"),
            indomain_tgt: i.join("train.tgt"),
            indomain_test_src: i.join("test.src"),
            indomain_test_tgt: i.join("test.tgt"),
            generic_test_src: gt.then(|| g.join("test.src")),
            generic_test_tgt: gt.then(|| g.join("test.tgt")),
        };
    }
    plan.slice_sizes = a.sizes.clone();
    plan.curve_epochs = a.curve_epochs;
    plan.bpe_merges = a.merges;
    plan.retrain_every_slice = !a.no_slice_retrain;
    plan.decode = a.decode.strategy()?;
    plan.schedule = schedule(&a.schedule, plan.schedule);
    if a.model.paper {
        plan.model = ModelConfig::paper(0, 0);
    }
    plan.model = ModelConfig {
        emb_dim: a.model.emb_dim.unwrap_or(plan.model.emb_dim),
        hidden_dim: a.model.hidden_dim.unwrap_or(plan.model.hidden_dim),
        num_layers: a.model.layers.unwrap_or(plan.model.num_layers),
        dropout_p: a.model.dropout.unwrap_or(plan.model.dropout_p),
        ..plan.model
    };
    let study = match a.study {
        StudyArg::Baselines => Study::Baselines,
        StudyArg::EpochCurve => Study::EpochCurve,
        StudyArg::DataSize => Study::DataSize,
        StudyArg::Timing => Study::Timing,
        StudyArg::All => Study::All,
    };
    let cb = on_epoch;
    let opts = TrainOptions { exec, on_epoch: Some(&cb) };
    let out = run_study(&plan, study, &opts)?;
    report(cli, serde_json::to_value(&out.manifest)?, || {
        out.files
            .iter()
            .map(|f| format!("wrote {}", f.display()))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = adaptnmt_workbench::ServiceConfig::new(&a.prep, &a.base, &a.data_dir);
    cfg.probe = a.probe_src.clone().zip(a.probe_tgt.clone());
    cfg.ui_dir = a.ui_dir.clone();
    cfg.min_pairs = a.min_pairs;
    cfg.decode = a.decode.strategy()?;
    let svc = adaptnmt_workbench::Service::open(cfg)?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(adaptnmt_workbench::serve(svc, a.addr))?;
    Ok(())
}
