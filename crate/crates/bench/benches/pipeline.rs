use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forkfield::decoder::optics::cluster_points;
use forkfield::engine::{example_gradients, Example, LossConfig, MergeStrategy, Network, NetworkConfig};
use forkfield::metrics::average_precision_scored;
use forkfield::synth::{self, GenConfig};
use forkfield::{decode, encode_targets, ideal_fields, DecodeParams, GridGeometry, TaskRegistry};

fn optics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points: Vec<[f64; 2]> = (0..400)
        .map(|i| {
            let center = [10.0 * (i % 5) as f64, 10.0 * (i / 100) as f64];
            [
                center[0] + rng.gen_range(-1.0..1.0),
                center[1] + rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let p = DecodeParams::default();
    c.bench_function("optics/400 points", |b| {
        b.iter(|| {
            cluster_points(
                black_box(&points),
                p.optics_min_cluster,
                p.optics_max_radius,
                p.optics_cluster_threshold,
            )
        })
    });
}

fn decoding(c: &mut Criterion) {
    let gen = GenConfig::default();
    let registry = TaskRegistry::canonical(gen.attributes).unwrap();
    let scene = synth::generate_indexed(&gen, 0).unwrap();
    let geom = GridGeometry::for_image(scene.image_size[0], scene.image_size[1], 4).unwrap();
    let fields = ideal_fields(&encode_targets(&scene, &registry, &geom).unwrap(), &registry, 8.0);
    let params = DecodeParams::default();
    c.bench_function("decode/ideal fields A=32", |b| {
        b.iter(|| decode(black_box(&fields), &registry, &params).unwrap())
    });
}

fn average_precision(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items: Vec<(f64, bool)> = (0..10_000).map(|_| (rng.gen(), rng.gen_bool(0.3))).collect();
    c.bench_function("ap/10k items", |b| {
        b.iter(|| average_precision_scored(black_box(&items), 4000))
    });
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("example gradients");
    group.sample_size(10);
    for a in [1, 32] {
        let gen = GenConfig {
            attributes: a,
            ..Default::default()
        };
        let registry = TaskRegistry::canonical(a).unwrap();
        let net = Network::new(NetworkConfig::default(), gen.input_channels().unwrap(), &registry, 0).unwrap();
        let example = Example::from_scene(&synth::generate_indexed(&gen, 0).unwrap(), &net, &registry).unwrap();
        let weights = LossConfig::default().weights(&registry).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", a), &a, |b, _| {
            b.iter(|| net.forward(black_box(&example.input)).unwrap())
        });
        for strategy in [
            MergeStrategy::Accumulation,
            MergeStrategy::fork_power(),
            MergeStrategy::PcGrad,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            group.bench_with_input(BenchmarkId::new(strategy.to_string(), a), &a, |b, _| {
                b.iter(|| {
                    let rng = strategy.needs_rng().then_some(&mut rng);
                    example_gradients(&net, &registry, &example, &weights, &strategy, 2.0, rng).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, optics, decoding, average_precision, gradients);
criterion_main!(benches);
