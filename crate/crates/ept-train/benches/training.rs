//! Training-step benchmarks on the desk-scale configuration. The per-sample
//! pass is inherently sequential; the full batch uses the rayon partition
//! under the default `parallel` feature. Rerun with `--no-default-features`
//! to benchmark the sequential batch fallback.

use criterion::{criterion_group, criterion_main, Criterion};
use ept_core::numeric::Tape;
use ept_core::tasks::contrastive_term_on_tape;
use ept_train::backbone::EptModel;
use ept_train::config::EptConfig;
use ept_train::data::{batch_for_step, make_tasks};
use ept_train::optim::AdamWState;
use ept_train::trainer::{train_from, TrainOptions};
use std::hint::black_box;

fn sample_forward_backward(model: &EptModel, tokens: &[u32], task: usize, label: usize) {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape).unwrap();
    let fwd = model.forward_sample(&mut tape, &staged, tokens, task, true).unwrap();
    let l_gen = tape.cross_entropy(fwd.logits, label).unwrap();
    let l_con = contrastive_term_on_tape(
        &mut tape,
        model.task_table(),
        staged.table_node,
        fwd.pooled_feature,
        task,
    )
    .unwrap();
    let weighted = tape.scale(l_con, model.cfg().lambda_con);
    let total = tape.add(l_gen, weighted).unwrap();
    tape.backward(total).unwrap();
    black_box(tape.grad(staged.param_nodes[0]));
}

fn bench_training(c: &mut Criterion) {
    let cfg = EptConfig::toy();
    let model = EptModel::new(cfg.clone()).unwrap();
    let datasets = make_tasks(&cfg).unwrap();
    let batch = batch_for_step(&cfg, &datasets, 1).unwrap();

    c.bench_function("sample_forward_backward", |b| {
        let (task, idx) = batch[0];
        let ds = &datasets[task];
        b.iter(|| sample_forward_backward(&model, &ds.train.tokens[idx], task, ds.train.labels[idx]))
    });

    let mut group = c.benchmark_group("optimizer_step_batch32");
    group.sample_size(10);
    group.bench_function("one_training_step", |b| {
        b.iter(|| {
            let model = EptModel::new(cfg.clone()).unwrap();
            let opt = AdamWState::new(&model.params());
            black_box(train_from(model, opt, TrainOptions { stop_after: Some(1) }).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, bench_training);
criterion_main!(benches);
