use brnlab::data::{annotations_as_detections, Detection, DetectionSet, Interval};
use brnlab::inference::{nms_per_class, Preset};
use brnlab::metrics::evaluate;
use brnlab::synth::{generate, SynthConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..0.95);
            let len: f64 = rng.random_range(0.01..0.3);
            Detection {
                video_id: "v".into(),
                interval: Interval::new(a, (a + len).min(1.0)).unwrap(),
                label: rng.random_range(1..=3),
                score: rng.random_range(0.0..1.0),
            }
        })
        .collect()
}

fn nms(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [100, 1000] {
        let dets = random_detections(n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &dets, |b, d| b.iter(|| nms_per_class(d, 0.65)));
    }
    group.finish();
}

fn eval(c: &mut Criterion) {
    let data = generate(&SynthConfig::default()).unwrap();
    let mut dets: DetectionSet = annotations_as_detections(&data.annotations);
    for (k, (id, list)) in dets.iter_mut().enumerate() {
        list.extend(random_detections(50, k as u64).into_iter().map(|d| Detection { video_id: id.clone(), ..d }));
    }
    c.bench_function("evaluate/anet_250_videos", |b| b.iter(|| evaluate(&dets, &data.annotations, Preset::Anet).unwrap()));
}

criterion_group!(benches, nms, eval);
criterion_main!(benches);
