use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sedkit::audiofeat::{FeatureConfig, LogMelExtractor};
use sedkit::crnn::{Crnn, CrnnConfig};
use sedkit::sedeval::{psds, thresholds, PsdsParams};
use sedkit::tensor::Tape;
use sedkit_bench::{array, clip_16k, scored_corpus};

fn conv2d(c: &mut Criterion) {
    let x = array(&[8, 16, 64, 32], 1);
    let w = array(&[16, 16, 3, 3], 2);
    let b = array(&[16], 3);
    c.bench_function("conv2d 8x16x64x32 k3 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xt, wt, bt) = (tape.constant(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
            let y = tape.conv2d(xt, wt, Some(bt)).unwrap();
            let l = tape.sum(y);
            tape.backward(l).unwrap();
        })
    });
}

fn logmel(c: &mut Criterion) {
    let ex = LogMelExtractor::new(&FeatureConfig::default()).unwrap();
    let clip = clip_16k();
    c.bench_function("log-mel 10 s clip (628x128)", |bench| bench.iter(|| ex.extract(&clip).unwrap()));
}

fn crnn(c: &mut Criterion) {
    let model = Crnn::new(CrnnConfig::toy()).unwrap();
    let params = model.init_params();
    let x = array(&[8, 64, 32], 4);
    c.bench_function("toy crnn train step b=8", |bench| {
        bench.iter_batched(
            || x.clone(),
            |x| {
                let mut tape = Tape::new();
                let p = params.bind(&mut tape, true);
                let xt = tape.constant(x);
                let y = model.forward(&mut tape, &p, xt, None).unwrap();
                let l = tape.sum(y);
                tape.backward(l).unwrap();
                p.grads(&tape)
            },
            BatchSize::SmallInput,
        )
    });
    let full = Crnn::new(CrnnConfig::default()).unwrap();
    let fp = full.init_params();
    let clip = array(&[628, 128], 5);
    let mut group = c.benchmark_group("full crnn");
    group.sample_size(10);
    group.bench_function("predict one 10 s clip", |bench| bench.iter(|| full.predict(&fp, &[&clip]).unwrap()));
    group.finish();
}

fn psds_bench(c: &mut Criterion) {
    let (refs, posts) = scored_corpus(50, 10);
    let ts = thresholds(50);
    c.bench_function("psds 50 clips x 50 thresholds", |bench| {
        bench.iter(|| psds(&refs, &posts, 10.0 / 157.0, 10.0, &PsdsParams::cross_trigger(), &ts).unwrap())
    });
}

criterion_group!(benches, conv2d, logmel, crnn, psds_bench);
criterion_main!(benches);
