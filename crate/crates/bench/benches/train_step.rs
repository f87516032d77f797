use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pchvae::model::Variant;
use pchvae::train::{TrainConfig, Trainer};
use pchvae::{SeedStream, Tensor};

fn train_step(c: &mut Criterion) {
    let mut rng = SeedStream::new(3);
    let batch = Tensor::from_fn(&[64, 1, 32, 32], |_| rng.normal());
    let mut group = c.benchmark_group("train_step_b64_s32");
    group.sample_size(10);
    for variant in Variant::ALL {
        let mut cfg = TrainConfig::default();
        cfg.arch.variant = variant;
        let mut trainer = Trainer::new(cfg).unwrap();
        group.bench_function(BenchmarkId::from_parameter(variant), |bench| {
            bench.iter(|| trainer.run_epoch(&batch).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
