use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use thct_bench::{batch, synthetic, wave};
use thct_core::model::positional_encoding;
use thct_core::train::{two_stream_loss, SgdNesterov};
use thct_core::{Mode, ModelConfig, Tape, ThctNet};

fn attention(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let net = ThctNet::<f32>::new(cfg.clone(), 0).unwrap();
    let block = &net.transformer.blocks[0];
    let grid = net.transformer.grid;
    let (d, u) = (cfg.transformer.d_model, grid.iter().product::<usize>());
    let x = wave::<f32>(&[4, d, grid[0], grid[1], grid[2]]);
    let pe = positional_encoding::<f32>(u, d)
        .unwrap()
        .permute(&[1, 0])
        .unwrap()
        .reshape([d, grid[0], grid[1], grid[2]])
        .unwrap();
    c.bench_function("attention_block_default_u75_d64_n4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(black_box(x.clone()));
            let pv = tape.constant(pe.clone());
            let pv = tape.repeat(pv, 4).unwrap();
            let y = block.forward(&mut tape, &net.store, xv, pv).unwrap();
            black_box(tape.value(y).numel())
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, cfg, n) in [("micro_n32", ModelConfig::micro(4), 32usize), ("default_n4", ModelConfig::default(), 4)] {
        let data = synthetic(&cfg, n.div_ceil(cfg.num_classes));
        let input = batch(&data, &cfg, n);
        let mut net = ThctNet::<f32>::new(cfg.clone(), 0).unwrap();
        let mut opt = SgdNesterov::new(&net.store, cfg.train.momentum);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let logits = net.forward(&mut tape, &input, Mode::Train).unwrap();
                let loss = two_stream_loss(&mut tape, logits, &input.labels, &cfg.train).unwrap();
                tape.backward(loss).unwrap();
                // lr 0 keeps the benchmarked point fixed.
                opt.step(&mut net.store, &tape.param_grads(), 0.0).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, attention, train_step);
criterion_main!(benches);
