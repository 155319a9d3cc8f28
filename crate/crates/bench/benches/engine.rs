use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use m2xfp::dse::{synth_tensor, Dist};
use m2xfp::engine::{self, GemmOptions};
use m2xfp::packing::{self, QuantizeOptions};
use m2xfp::GroupConfig;

fn pe(c: &mut Criterion) {
    let w = [0x3u8, 0xa, 0x6, 0x1, 0xf, 0x2, 0x5, 0xc];
    let x = [0x7u8, 0x2, 0x9, 0x4, 0x1, 0xe, 0x3, 0x0];
    c.bench_function("top1_decode", |b| b.iter(|| engine::top1_decode(black_box(&x), 0b10)));
    let top = engine::top1_decode(&x, 0b10);
    c.bench_function("pe_subgroup_mac", |b| b.iter(|| engine::pe_subgroup_mac(black_box(&w), black_box(&x), top, 0b11)));
}

fn gemm(c: &mut Criterion) {
    let (m, k, n) = (64u64, 512u64, 64u64);
    let opts = QuantizeOptions::default();
    let a = synth_tensor(Dist::StudentT(3.0), &[m, k], 1, 1.0).unwrap();
    let w = synth_tensor(Dist::Gaussian, &[n, k], 2, 1.0).unwrap();
    let qa = packing::quantize_tensor(&a, &[m, k], &GroupConfig::elem_em(1), &opts).unwrap();
    let qw = packing::quantize_tensor(&w, &[n, k], &GroupConfig::sg_em(2, true), &opts).unwrap();
    c.bench_function("gemm_64x512x64", |b| {
        b.iter(|| engine::gemm(black_box(&qa), black_box(&qw), GemmOptions::default()).unwrap())
    });
}

fn streaming(c: &mut Criterion) {
    let cfg = GroupConfig::elem_em(1);
    let values = synth_tensor(Dist::StudentT(3.0), &[4096, 32], 4, 1.0).unwrap();
    let rows: Vec<Vec<f64>> = values.chunks(32).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    c.bench_function("streaming_quantize_4096", |b| {
        b.iter(|| engine::streaming_quantize(black_box(&rows), &cfg).unwrap().map(Result::unwrap).count())
    });
    c.bench_function("streaming_quantize_threaded_4096", |b| {
        b.iter(|| engine::streaming_quantize_threaded(black_box(&rows), &cfg).unwrap().len())
    });
}

criterion_group!(benches, pe, gemm, streaming);
criterion_main!(benches);
