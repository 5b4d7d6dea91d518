use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use miaudit_core::boundary::hsja_walk;
use miaudit_core::data::ImageShape;
use miaudit_core::model::{train_classifier, Activation};
use miaudit_core::{
    Architecture, Classifier, ExampleRecord, FeatureBox, HsjaConfig, LabelOracle, Matrix, RngStream,
};

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0);
    let a = random_matrix(32, 784, &mut rng);
    let w = random_matrix(128, 784, &mut rng);
    c.bench_function("matmul_t 32x784 * 784x128", |b| {
        b.iter(|| black_box(a.matmul_t(&w)))
    });
}

fn forward(c: &mut Criterion) {
    let mut rng = RngStream::new(2, 0);
    let mlp = Classifier::init(&Architecture::mlp(784, 10, vec![128], Activation::Tanh), &mut rng).unwrap();
    let shape = ImageShape {
        height: 28,
        width: 28,
        channels: 1,
    };
    let cnn = Classifier::init(&Architecture::cnn(shape, 10, vec![8, 16], 1, vec![64]), &mut rng).unwrap();
    let x = random_matrix(64, 784, &mut rng);
    let one = x.row(0).to_vec();
    c.bench_function("mlp forward batch 64", |b| {
        b.iter(|| black_box(mlp.logits_batch(&x).unwrap()))
    });
    c.bench_function("mlp forward single", |b| {
        b.iter(|| black_box(mlp.predict_label(&one).unwrap()))
    });
    c.bench_function("cnn forward batch 64", |b| {
        b.iter(|| black_box(cnn.logits_batch(&x).unwrap()))
    });
}

fn walk(c: &mut Criterion) {
    let mut rng = RngStream::new(3, 0);
    let dim = 20;
    let records: Vec<ExampleRecord> = (0..400)
        .map(|i| {
            let x: Vec<f64> = (0..dim).map(|_| rng.uniform()).collect();
            let y = usize::from(x[0] + x[1] > 1.0);
            ExampleRecord { id: i, x, y }
        })
        .collect();
    let arch = Architecture::mlp(dim, 2, vec![32], Activation::Tanh);
    let model = train_classifier(&arch, &records, &Default::default(), &mut rng).unwrap();
    let oracle = LabelOracle::new(Arc::new(model));
    let bounds = FeatureBox::unit(dim);
    let cfg = HsjaConfig {
        budget: 500,
        ..Default::default()
    };
    let r = &records[0];
    c.bench_function("boundary walk budget 500, d=20", |b| {
        b.iter_batched(
            || RngStream::new(4, 0),
            |mut walk_rng| black_box(hsja_walk(&oracle, r.id, &r.x, r.y, &cfg, &bounds, &mut walk_rng).ok()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matmul, forward, walk);
criterion_main!(benches);
