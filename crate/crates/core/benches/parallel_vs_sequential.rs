use adaptnmt_core::corpus::synth_two_domain;
use adaptnmt_core::eval::{evaluate_model, score};
use adaptnmt_core::exec::Exec;
use adaptnmt_core::model::{ModelConfig, ModelParams};
use adaptnmt_core::pipeline::{DecodeStrategy, Preprocessing, Translator};
use adaptnmt_core::train::{batch_gradient, Checkpoint, TrainSchedule};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gradient(c: &mut Criterion) {
    let d = synth_two_domain(1, 400, 200).unwrap();
    let prep = Preprocessing::fit(&[&d.generic_train, &d.indomain_train], 200, 32_000).unwrap();
    let data = prep.prepare(&d.generic_train);
    let cfg = ModelConfig::desk(prep.src_vocab.len(), prep.tgt_vocab.len());
    let params = ModelParams::init(&cfg, 1);
    let batch: Vec<usize> = (0..64).collect();
    let mut g = c.benchmark_group("batch_gradient_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradient(black_box(&params), &cfg, &data, &batch, Some(7), exec).unwrap())
        });
    }
    g.finish();

    let ckpt = Checkpoint {
        params,
        ..Checkpoint::fresh(cfg, TrainSchedule::paper(1), prep.hashes()).unwrap()
    };
    let t = Translator::new(prep, ckpt, DecodeStrategy::Greedy).unwrap();
    let mut g = c.benchmark_group("evaluate_greedy");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_model(&t, black_box(&d.indomain_test), exec).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let d = synth_two_domain(2, 2000, 100).unwrap();
    let refs = d.generic_train.targets().map(<[String]>::to_vec).collect::<Vec<_>>();
    let hyps: Vec<Vec<String>> = refs.iter().map(|r| r.iter().rev().cloned().collect()).collect();
    let mut g = c.benchmark_group("score_2000");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| score(black_box(&hyps), &refs, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradient, metrics);
criterion_main!(benches);
