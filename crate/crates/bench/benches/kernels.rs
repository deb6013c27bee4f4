use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use downscale_bench::field;
use downscale_core::evaluation::{ssim, SsimOptions};
use downscale_core::numerics::{Padding, Tape, Tensor};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(ch, hw) in &[(16usize, 64usize), (64, 32)] {
        let x = field(ch, hw, hw);
        let k = Tensor::from_fn(&[ch, ch, 3, 3], |i| (i as f32 * 0.01).sin() * 0.1);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{hw}x{hw}")), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let kv = tape.constant(k.clone());
                black_box(tape.conv2d(xv, kv, None, Padding::Same).unwrap());
            })
        });
    }
    group.finish();
}

fn conv_backward(c: &mut Criterion) {
    let x = field(32, 32, 32);
    let k = Tensor::from_fn(&[32, 32, 3, 3], |i| (i as f32 * 0.01).sin() * 0.1);
    c.bench_function("conv2d_3x3_backward/32x32x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, None, Padding::Same).unwrap();
            let s = tape.sum(y);
            black_box(tape.gradients(s).unwrap());
        })
    });
}

fn ssim_bench(c: &mut Criterion) {
    let a = field(1, 64, 64).reshape(&[64, 64]).unwrap();
    let b2 = a.map(|v| v * 0.9 + 0.05);
    let opts = SsimOptions::default();
    c.bench_function("ssim/64x64", |b| b.iter(|| black_box(ssim(&a, &b2, &opts).unwrap())));
}

criterion_group!(benches, conv, conv_backward, ssim_bench);
criterion_main!(benches);
