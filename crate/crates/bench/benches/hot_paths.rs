use criterion::{black_box, criterion_group, criterion_main, Criterion};
use egfl_bench::desk_client;
use egfl_core::explain;
use egfl_core::fairness::{self, TrainConfig};
use egfl_core::federation::Variant;
use egfl_core::{MaskSize, Objective};

fn model_passes(c: &mut Criterion) {
    let (model, client, _) = desk_client(1).unwrap();
    let x = client.train.features.row(0).to_vec();
    c.bench_function("forward", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    c.bench_function("grad_input", |b| b.iter(|| model.grad_input(black_box(&x)).unwrap()));
    c.bench_function("bce_value_and_grad_400", |b| {
        b.iter(|| model.value_and_grad(&Objective::bce(), black_box(&client.train)).unwrap())
    });
}

fn attributions(c: &mut Criterion) {
    let (model, client, _) = desk_client(1).unwrap();
    c.bench_function("integrated_gradients_100x50", |b| {
        b.iter(|| explain::attribution_matrix(&model, black_box(&client.test.features), &[0.0; 3], 50).unwrap())
    });
    c.bench_function("masked_tester_100x50", |b| {
        b.iter(|| fairness::masked_tester(&model, black_box(&client.test.features), 50, MaskSize::Count(1)).unwrap())
    });
}

fn local_epoch(c: &mut Criterion) {
    let (model, client, cfg) = desk_client(1).unwrap();
    for variant in [Variant::EgflJs, Variant::FlVanilla] {
        let tc = TrainConfig {
            epochs: 1,
            ..cfg.train_config(variant, 0)
        };
        c.bench_function(&format!("local_epoch_{}", variant.dir_name()), |b| {
            b.iter(|| fairness::local_train(&model, black_box(&client), &tc).unwrap())
        });
    }
}

criterion_group!(benches, model_passes, attributions, local_epoch);
criterion_main!(benches);
