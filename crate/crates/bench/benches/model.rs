//! Whole-segmenter inference: toy LI model against its LI-free baseline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use liconv::autodiff::ParamGroup;
use liconv::models::{Segmenter, SegmenterConfig};
use liconv::Shape4;
use liconv_bench::pattern;

fn inference(c: &mut Criterion) {
    let cfg = SegmenterConfig::toy(4);
    let base = Segmenter::<f32>::new(cfg.baseline(), 0).unwrap();
    let mut li = Segmenter::<f32>::new(cfg, 0).unwrap();
    let ids: Vec<_> = li.params.ids().filter(|&id| li.params.param(id).group == ParamGroup::LiWeights).collect();
    for id in ids {
        li.params.value_mut(id).fill(0.5);
    }
    let mut group = c.benchmark_group("segmenter_inference");
    group.sample_size(30);
    for side in [65, 129] {
        let x = pattern(Shape4::new(1, 3, side, side)).map(|v| v + 0.25);
        group.bench_with_input(BenchmarkId::new("baseline", side), &x, |b, x| b.iter(|| base.infer(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("li", side), &x, |b, x| b.iter(|| li.infer(x).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
