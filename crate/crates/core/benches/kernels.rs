//! Parallel against sequential execution of the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lesionsynth::evaluator::{batch_metrics, kde_estimate};
use lesionsynth::exec;
use lesionsynth::fixtures::synthetic_pairs;
use lesionsynth::nn::{Graph, Tensor};
use lesionsynth::segmenter::{build_segmenter, predict_masks, SegmenterConfig};
use lesionsynth::translator::{build_translator, synthesize, Checkpoint, RngState, TranslatorConfig, CHECKPOINT_VERSION};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn bench_modes(c: &mut Criterion, group: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (name, on) in MODES {
        exec::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(&mut f));
    }
    exec::set_parallel(true);
    g.finish();
}

fn ramp(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 * scale - scale / 2.0).collect()
}

fn conv(c: &mut Criterion) {
    let (n, cin, cout, side) = (8, 16, 32, 64);
    let x = Tensor::new(vec![n, cin, side, side], ramp(n * cin * side * side, 2.0));
    let w = Tensor::new(vec![cout, cin, 3, 3], ramp(cout * cin * 9, 0.2));
    bench_modes(c, "conv2d_forward_backward", || {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.param(0, w.clone());
        let y = g.conv2d(xv, wv, None, 1, 1);
        let loss = g.mean(y);
        std::hint::black_box(g.backward(loss));
    });
}

fn metrics(c: &mut Criterion) {
    let a = synthetic_pairs(64, 128, 1, "a");
    let b = synthetic_pairs(64, 128, 2, "b");
    let items: Vec<_> = a.iter().zip(&b).map(|(p, q)| (p.id.clone(), p.mask.clone(), q.mask.clone())).collect();
    bench_modes(c, "batch_metrics_64x128", || {
        std::hint::black_box(batch_metrics(&items).unwrap());
    });
}

fn kde(c: &mut Criterion) {
    let values: Vec<f64> = ramp(2000, 1.0).into_iter().map(|v| v + 0.5).collect();
    bench_modes(c, "kde_2000", || {
        std::hint::black_box(kde_estimate(&values, (0.0, 1.0), None).unwrap());
    });
}

fn translator(c: &mut Criterion) {
    let mut cfg = TranslatorConfig::default().with_side(64);
    cfg.base_channels = 8;
    let model = build_translator(&cfg).unwrap();
    let ck = Checkpoint {
        model,
        optimizer_state: Vec::new(),
        epoch: 0,
        rng_state: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
        format_version: CHECKPOINT_VERSION,
    };
    let masks: Vec<_> = synthetic_pairs(8, 64, 3, "m").into_iter().map(|p| (p.id, p.mask)).collect();
    bench_modes(c, "synthesize_8x64", || {
        std::hint::black_box(synthesize(&ck, &masks, 5));
    });
}

fn segmenter(c: &mut Criterion) {
    let cfg = SegmenterConfig {
        side: 64,
        base_channels: 8,
        depth: 3,
        ..SegmenterConfig::default()
    };
    let model = build_segmenter(&cfg).unwrap();
    let pairs = synthetic_pairs(8, 64, 4, "s");
    let images: Vec<_> = pairs.iter().map(|p| &p.image).collect();
    bench_modes(c, "segmenter_predict_8x64", || {
        std::hint::black_box(predict_masks(&model, &images, 0.5));
    });
}

criterion_group!(benches, conv, metrics, kde, translator, segmenter);
criterion_main!(benches);
