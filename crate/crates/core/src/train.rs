//! Mini-batch SGD with a step-decay schedule, versioned checkpoints, and
//! specialization: continuing SGD from a saved model on in-domain data only.
//!
//! All randomness (init, batch order, dropout) is derived from the schedule
//! seed together with the epoch number and example index. That makes
//! "train k epochs, save, continue k' epochs" identical to "train k + k'
//! epochs" bit for bit, which is exactly what specialization builds on.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_backward_weighted, sequence_logprob, Dropout, ModelConfig, ModelParams};
use crate::nnet::{accumulate, ParamSet, Real, Tensor};
use crate::pipeline::{PrepHashes, PreparedCorpus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: Real,
    pub decay_factor: Real,
    pub decay_start_epoch: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; not part of the published recipe.
    pub clip_norm: Real,
    pub seed: u64,
}

impl TrainSchedule {
    /// lr 1, halved after epoch 10, 18 epochs, batches of 64.
    pub fn paper(seed: u64) -> Self {
        TrainSchedule {
            base_lr: 1.0,
            decay_factor: 0.5,
            decay_start_epoch: 10,
            total_epochs: 18,
            batch_size: 64,
            clip_norm: 5.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Invalid(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `base_lr` through `decay_start_epoch`, then multiplied by `decay_factor`
/// once per further epoch. Epochs are 1-based.
pub fn lr_schedule(s: &TrainSchedule, epoch: usize) -> Real {
    if epoch <= s.decay_start_epoch {
        s.base_lr
    } else {
        s.base_lr * s.decay_factor.powi((epoch - s.decay_start_epoch) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrPolicy {
    /// Hold the learning rate the checkpoint ended with.
    Resume,
    /// Keep following the checkpoint's decay schedule from where it stopped.
    Schedule,
    /// Constant learning rate for the extra epochs.
    Override(Real),
}

impl LrPolicy {
    pub fn lr(&self, base: &Checkpoint, epoch: usize) -> Real {
        match *self {
            LrPolicy::Resume => base.current_lr,
            LrPolicy::Schedule => lr_schedule(&base.schedule, epoch),
            LrPolicy::Override(lr) => lr,
        }
    }
}

/// Clips `grads` to `clip_norm` (global L2) and applies `p -= lr * g`.
/// Returns the pre-clip gradient norm. Nothing is applied when a gradient
/// is non-finite.
pub fn sgd_step<P: ParamSet>(params: &mut P, grads: &P, lr: Real, clip_norm: Real) -> Result<Real> {
    if !grads.all_finite() {
        return Err(Error::numeric("gradients"));
    }
    let norm = grads.sum_sq().sqrt();
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    let step = lr * scale;
    let src = grads.tensors();
    for (p, (_, g)) in params.tensors_mut().into_iter().zip(src) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= step * gv;
        }
    }
    Ok(norm)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Length-sorted buckets of `batch_size`, visited in a seeded per-epoch order.
pub fn make_batches(examples: &[(Vec<u32>, Vec<u32>)], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.sort_by_key(|&i| (examples[i].0.len(), examples[i].1.len(), i));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
    batches.shuffle(&mut rng);
    batches
}

/// Examples per gradient shard. Fixed so that the reduction order does not
/// depend on the thread count.
pub const SHARD_SIZE: usize = 8;

/// Mean per-token loss of the batch's pairs, and the gradient of the
/// batch objective: token-summed NLL per pair, averaged over pairs.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &PreparedCorpus,
    batch: &[usize],
    dropout_seed: Option<u64>,
    exec: Exec,
) -> Result<(Real, ModelParams)> {
    let weight = 1.0 / batch.len().max(1) as Real;
    let shards: Vec<&[usize]> = batch.chunks(SHARD_SIZE).collect();
    let parts = exec.map(&shards, |shard| -> Result<(Real, ModelParams)> {
        let mut grads = ModelParams::zeros(cfg);
        let mut loss = 0.0;
        for &i in shard.iter() {
            let (src, tgt) = &data.examples[i];
            loss += match dropout_seed {
                Some(seed) if cfg.dropout_p > 0.0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
                    let mut d = Dropout { p: cfg.dropout_p, rng: &mut rng };
                    forward_backward_weighted(params, cfg, src, tgt, Some(&mut d), weight, &mut grads)?
                }
                _ => forward_backward_weighted(params, cfg, src, tgt, None, weight, &mut grads)?,
            };
        }
        Ok((loss, grads))
    });
    let mut total_loss = 0.0;
    let mut total: Option<ModelParams> = None;
    for part in parts {
        let (l, g) = part?;
        total_loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => accumulate(t, &g),
        }
    }
    let grads = total.unwrap_or_else(|| ModelParams::zeros(cfg));
    Ok((total_loss * weight, grads))
}

/// Mean per-pair loss in eval mode (no dropout, no update).
pub fn corpus_loss(params: &ModelParams, cfg: &ModelConfig, data: &PreparedCorpus, exec: Exec) -> Result<Real> {
    if data.is_empty() {
        return Err(Error::Invalid(format!("corpus {} is empty", data.name)));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let shards: Vec<&[usize]> = idx.chunks(SHARD_SIZE * 4).collect();
    let parts = exec.map(&shards, |shard| -> Result<Real> {
        let mut loss = 0.0;
        for &i in shard.iter() {
            let (s, t) = &data.examples[i];
            loss -= sequence_logprob(params, cfg, s, t, true)? / (t.len() + 1) as Real;
        }
        Ok(loss)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / data.len() as Real)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub corpus: String,
    pub corpus_hash: String,
    /// Epoch numbers `first_epoch..=last_epoch` were run on this corpus.
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule: TrainSchedule,
    pub params: ModelParams,
    pub epochs_completed: usize,
    pub current_lr: Real,
    pub prep: PrepHashes,
    pub provenance: Vec<ProvenanceRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schedule: TrainSchedule,
    epochs_completed: usize,
    current_lr: Real,
    prep: PrepHashes,
}

const MAGIC: &[u8; 8] = b"ADNMTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let n = self.u32()? as usize;
        serde_json::from_slice(self.take(n)?).map_err(|e| Error::Format(format!("checkpoint json: {e}")))
    }
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, v: &T) {
    let bytes = serde_json::to_vec(v).expect("serializable");
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
}

impl Checkpoint {
    pub fn fresh(config: ModelConfig, schedule: TrainSchedule, prep: PrepHashes) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        Ok(Checkpoint {
            params: ModelParams::init(&config, schedule.seed),
            config,
            schedule,
            epochs_completed: 0,
            current_lr: schedule.base_lr,
            prep,
            provenance: Vec::new(),
        })
    }

    pub fn check_compatible(&self, prep: &PrepHashes) -> Result<()> {
        let mut diffs = Vec::new();
        if self.prep.codes != prep.codes {
            diffs.push("bpe codes");
        }
        if self.prep.src_vocab != prep.src_vocab {
            diffs.push("source vocabulary");
        }
        if self.prep.tgt_vocab != prep.tgt_vocab {
            diffs.push("target vocabulary");
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(format!("{} differ from the checkpoint's", diffs.join(", "))))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_json(
            &mut out,
            &Header {
                config: self.config,
                schedule: self.schedule,
                epochs_completed: self.epochs_completed,
                current_lr: self.current_lr,
                prep: self.prep.clone(),
            },
        );
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_json(&mut out, &self.provenance);
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 || &buf[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if buf.len() < 12 + 32 {
            return Err(Error::Checksum);
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let header: Header = r.json()?;
        header.config.validate()?;
        let mut params = ModelParams::zeros(&header.config);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", expected.len())));
        }
        for ((want_name, want_shape), slot) in expected.iter().zip(params.tensors_mut()) {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("tensor name".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != want_name || &shape != want_shape {
                return Err(Error::Format(format!(
                    "tensor {name} {shape:?} does not match {want_name} {want_shape:?}"
                )));
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *slot = Tensor::from_vec(&shape, data)?;
        }
        let provenance = r.json()?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            schedule: header.schedule,
            params,
            epochs_completed: header.epochs_completed,
            current_lr: header.current_lr,
            prep: header.prep,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Lowercase hex of the checkpoint file's trailing SHA-256.
    pub fn provenance_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub dev_loss: Option<Real>,
    pub seconds: Real,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,dev_loss,seconds\n");
        for r in &self.rows {
            let dev = r.dev_loss.map(|d| format!("{d:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:.6},{},{:.3}\n", r.epoch, r.lr, r.train_loss, dev, r.seconds));
        }
        s
    }

    pub fn total_seconds(&self) -> Real {
        self.rows.iter().map(|r| r.seconds).sum()
    }

    pub fn total_steps(&self) -> usize {
        self.rows.iter().map(|r| r.steps).sum()
    }

    pub fn losses(&self) -> Vec<Real> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
}

/// Knobs that do not change results: where the work runs and who hears
/// about finished epochs.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub exec: Exec,
    pub on_epoch: Option<&'a (dyn Fn(&EpochRow) + Sync)>,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs `extra_epochs` more epochs of SGD over `data`, starting from `base`.
pub fn continue_training(
    base: &Checkpoint,
    data: &PreparedCorpus,
    extra_epochs: usize,
    policy: LrPolicy,
    dev: Option<&PreparedCorpus>,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport)> {
    base.check_compatible(&data.prep)?;
    if let Some(d) = dev {
        base.check_compatible(&d.prep)?;
    }
    if data.is_empty() {
        return Err(Error::Invalid(format!("training corpus {} is empty", data.name)));
    }
    let mut ckpt = base.clone();
    let mut report = TrainReport::default();
    let sched = base.schedule;
    let first = base.epochs_completed + 1;
    for epoch in first..first + extra_epochs {
        let lr = policy.lr(base, epoch);
        let start = Instant::now();
        let last_good = ckpt.clone();
        let diverged = || Error::Diverged {
            epoch,
            last_good: Box::new(last_good.clone()),
        };
        let epoch_seed = mix(sched.seed, epoch as u64);
        let batches = make_batches(&data.examples, sched.batch_size, sched.seed, epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = mix(epoch_seed, b as u64);
            let (loss, grads) = match batch_gradient(&ckpt.params, &ckpt.config, data, batch, Some(dropout_seed), opts.exec) {
                Ok(x) => x,
                Err(Error::Numeric { .. }) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            loss_sum += loss * batch.len() as Real;
            if sgd_step(&mut ckpt.params, &grads, lr, sched.clip_norm).is_err() {
                return Err(diverged());
            }
        }
        let dev_loss = dev.map(|d| corpus_loss(&ckpt.params, &ckpt.config, d, opts.exec)).transpose()?;
        ckpt.epochs_completed = epoch;
        ckpt.current_lr = lr;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as Real,
            dev_loss,
            seconds: start.elapsed().as_secs_f64(),
            steps: batches.len(),
        };
        log::info!(
            "{} epoch {epoch}: lr {lr} loss {:.4}{} ({:.1}s)",
            data.name,
            row.train_loss,
            dev_loss.map(|d| format!(" dev {d:.4}")).unwrap_or_default(),
            row.seconds
        );
        if let Some(cb) = opts.on_epoch {
            cb(&row);
        }
        report.rows.push(row);
    }
    if extra_epochs > 0 {
        ckpt.provenance.push(ProvenanceRecord {
            corpus: data.name.clone(),
            corpus_hash: data.content_hash.clone(),
            first_epoch: first,
            last_epoch: first + extra_epochs - 1,
            timestamp: now_secs(),
        });
    }
    Ok((ckpt, report))
}

/// Trains from a seeded initialization for `sched.total_epochs` epochs.
pub fn train_model(
    corpus: &PreparedCorpus,
    config: ModelConfig,
    sched: TrainSchedule,
    dev: Option<&PreparedCorpus>,
) -> Result<(Checkpoint, TrainReport)> {
    train_model_with(corpus, config, sched, dev, &TrainOptions::default())
}

pub fn train_model_with(
    corpus: &PreparedCorpus,
    config: ModelConfig,
    sched: TrainSchedule,
    dev: Option<&PreparedCorpus>,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport)> {
    let base = Checkpoint::fresh(config, sched, corpus.prep.clone())?;
    continue_training(&base, corpus, sched.total_epochs, LrPolicy::Schedule, dev, opts)
}

/// Continues training `base` on in-domain data only, for `extra_epochs`.
/// Parameters are carried over as they are; the data must have been
/// preprocessed with the base model's codes and vocabularies.
pub fn specialize(
    base: &Checkpoint,
    indomain: &PreparedCorpus,
    extra_epochs: usize,
    lr_policy: LrPolicy,
) -> Result<(Checkpoint, TrainReport)> {
    specialize_with(base, indomain, extra_epochs, lr_policy, &TrainOptions::default())
}

pub fn specialize_with(
    base: &Checkpoint,
    indomain: &PreparedCorpus,
    extra_epochs: usize,
    lr_policy: LrPolicy,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport)> {
    if extra_epochs == 0 {
        return Err(Error::Invalid("specialization needs at least one extra epoch".into()));
    }
    continue_training(base, indomain, extra_epochs, lr_policy, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_two_domain;
    use crate::pipeline::Preprocessing;

    fn tiny_setup(lines: usize) -> (Preprocessing, PreparedCorpus, PreparedCorpus, ModelConfig) {
        let d = synth_two_domain(21, lines, 100).unwrap();
        let prep = Preprocessing::fit(&[&d.generic_train, &d.indomain_train], 150, 1000).unwrap();
        let g = prep.prepare(&d.generic_train);
        let i = prep.prepare(&d.indomain_train);
        let cfg = ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            num_layers: 1,
            src_vocab_size: prep.src_vocab.len(),
            tgt_vocab_size: prep.tgt_vocab.len(),
            dropout_p: 0.3,
            max_decode_len: 20,
        };
        (prep, g, i, cfg)
    }

    fn sched(epochs: usize) -> TrainSchedule {
        TrainSchedule {
            total_epochs: epochs,
            batch_size: 16,
            decay_start_epoch: 1,
            ..TrainSchedule::paper(5)
        }
    }

    #[test]
    fn paper_schedule_values() {
        let s = TrainSchedule::paper(0);
        assert_eq!(lr_schedule(&s, 1), 1.0);
        assert_eq!(lr_schedule(&s, 10), 1.0);
        assert_eq!(lr_schedule(&s, 11), 0.5);
        assert_eq!(lr_schedule(&s, 12), 0.25);
        let flat = TrainSchedule { decay_factor: 1.0, ..s };
        assert!((1..40).all(|e| lr_schedule(&flat, e) == 1.0));
        assert!((1..40).all(|e| lr_schedule(&s, e + 1) <= lr_schedule(&s, e)));
    }

    #[test]
    fn schedule_validation() {
        let s = TrainSchedule::paper(0);
        assert!(TrainSchedule { base_lr: 0.0, ..s }.validate().is_err());
        assert!(TrainSchedule { decay_factor: 1.5, ..s }.validate().is_err());
        assert!(TrainSchedule { batch_size: 0, ..s }.validate().is_err());
    }

    #[derive(Clone)]
    struct One(Tensor);
    impl ParamSet for One {
        fn tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn sgd_step_definition_and_clipping() {
        let mut p = One(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let g = One(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        sgd_step(&mut p, &g, 1.0, 0.0).unwrap();
        assert_eq!(p.0.data(), &[0.5]);

        let mut p = One(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let g = One(Tensor::from_vec(&[2], vec![6.0, 8.0]).unwrap());
        let norm = sgd_step(&mut p, &g, 1.0, 5.0).unwrap();
        assert_eq!(norm, 10.0);
        assert_eq!(p.0.data(), &[-3.0, -4.0]);

        let before = p.clone();
        sgd_step(&mut p, &One(Tensor::zeros(&[2])), 1.0, 5.0).unwrap();
        assert_eq!(p.0, before.0);

        let bad = One(Tensor::from_vec(&[2], vec![Real::NAN, 0.0]).unwrap());
        assert!(sgd_step(&mut p, &bad, 1.0, 5.0).is_err());
        assert_eq!(p.0, before.0);
    }

    #[test]
    fn batches_cover_every_example_once() {
        let ex: Vec<(Vec<u32>, Vec<u32>)> = (0..50).map(|i| (vec![0; 1 + i % 7], vec![0; 2])).collect();
        let b = make_batches(&ex, 8, 3, 1);
        assert_eq!(b.len(), 7);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(b, make_batches(&ex, 8, 3, 1));
        assert_ne!(b, make_batches(&ex, 8, 3, 2));
    }

    #[test]
    fn parallel_and_sequential_gradients_are_bit_identical() {
        let (_, g, _, cfg) = tiny_setup(200);
        let p = ModelParams::init(&cfg, 1);
        let batch: Vec<usize> = (0..40).collect();
        let (la, ga) = batch_gradient(&p, &cfg, &g, &batch, Some(9), Exec::Sequential).unwrap();
        let (lb, gb) = batch_gradient(&p, &cfg, &g, &batch, Some(9), Exec::Parallel).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn resume_is_continuity() {
        let (_, g, _, cfg) = tiny_setup(200);
        let (full, full_report) = train_model(&g, cfg, sched(3), None).unwrap();
        let (head, head_report) = train_model(&g, cfg, sched(2), None).unwrap();
        let bytes = head.to_bytes();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
        let (tail, tail_report) = continue_training(&reloaded, &g, 1, LrPolicy::Schedule, None, &TrainOptions::default()).unwrap();
        let mut joined = head_report.losses();
        joined.extend(tail_report.losses());
        let bits = |v: Vec<Real>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(joined), bits(full_report.losses()));
        assert_eq!(tail.params, full.params);
        assert_eq!(tail.epochs_completed, 3);
        assert_eq!(tail.current_lr, lr_schedule(&tail.schedule, 3));
    }

    #[test]
    fn specialization_counts_steps_and_appends_provenance() {
        let (_, g, i, cfg) = tiny_setup(200);
        let (base, _) = train_model(&g, cfg, sched(1), None).unwrap();
        let (spec, report) = specialize(&base, &i, 1, LrPolicy::Resume).unwrap();
        assert_eq!(report.total_steps(), i.len().div_ceil(16));
        assert_eq!(spec.provenance.len(), 2);
        assert_eq!(spec.provenance[0], base.provenance[0]);
        assert_eq!(spec.provenance[1].corpus, i.name);
        assert_eq!(spec.epochs_completed, base.epochs_completed + 1);
        assert!(specialize(&base, &i, 0, LrPolicy::Resume).is_err());
        assert!(specialize(&base, &i.prefix(0), 1, LrPolicy::Resume).is_err());
    }

    #[test]
    fn zero_lr_specialization_is_a_no_op() {
        let (_, g, i, cfg) = tiny_setup(200);
        let (base, _) = train_model(&g, cfg, sched(1), None).unwrap();
        let (spec, _) = specialize(&base, &i, 2, LrPolicy::Override(0.0)).unwrap();
        assert_eq!(spec.params, base.params);
    }

    #[test]
    fn mismatched_preprocessing_is_refused() {
        let (_, g, _, cfg) = tiny_setup(200);
        let d = synth_two_domain(99, 200, 100).unwrap();
        let other = Preprocessing::fit(&[&d.generic_train], 10, 1000).unwrap();
        let (base, _) = train_model(&g, cfg, sched(1), None).unwrap();
        let foreign = other.prepare(&d.indomain_train);
        assert!(matches!(specialize(&base, &foreign, 1, LrPolicy::Resume), Err(Error::Incompatible(_))));
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let (_, g, _, cfg) = tiny_setup(150);
        let (ck, _) = train_model(&g, cfg, sched(1), None).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]), Err(Error::Checksum)));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, .. })));
        assert_eq!(ck.provenance_hash().len(), 64);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let (_, g, _, cfg) = tiny_setup(150);
        let mut base = Checkpoint::fresh(cfg, sched(1), g.prep.clone()).unwrap();
        base.params.w_s.data_mut()[0] = Real::INFINITY;
        match specialize(&base, &g, 1, LrPolicy::Resume) {
            Err(Error::Diverged { epoch, last_good }) => {
                assert_eq!(epoch, 1);
                assert_eq!(last_good.epochs_completed, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn report_csv_header() {
        let r = TrainReport {
            rows: vec![EpochRow { epoch: 1, lr: 1.0, train_loss: 2.0, dev_loss: None, seconds: 0.5, steps: 3 }],
        };
        assert_eq!(r.to_csv(), "epoch,lr,train_loss,dev_loss,seconds\n1,1,2.000000,,0.500\n");
    }
}
