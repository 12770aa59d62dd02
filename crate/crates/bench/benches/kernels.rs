use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use edgeml_core::datagen::{gen_blobs, partition_label_skew};
use edgeml_core::evt::{self, GpdParams, GridConfig, WassersteinProblem};
use edgeml_core::federation::{init_devices, run_round, Lossless, NnTask, ProtocolKind};
use edgeml_core::netsim::{price_round, quantize_uniform, Split};
use edgeml_core::nn::{self, Activation, Batch, ModelSpec, ParamVector};
use edgeml_core::rng::stream;
use edgeml_core::{ComputeModel, HyperParams, LinkModel};
use rand::Rng;

fn mlp(c: &mut Criterion) {
    let mut g = c.benchmark_group("mlp");
    for width in [16usize, 64, 256] {
        let spec = ModelSpec::new(vec![32, width, 10], Activation::Relu).unwrap();
        let mut rng = stream(0, "bench");
        let params = ParamVector::glorot(spec, &mut rng);
        let inputs: Vec<f64> = (0..64 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
        let batch = Batch::new(inputs, 32, labels).unwrap();
        g.bench_with_input(BenchmarkId::new("loss_and_grad_b64", width), &width, |b, _| {
            b.iter(|| nn::loss_and_grad(black_box(&params), black_box(&batch)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("input_jacobian", width), &width, |b, _| {
            b.iter(|| nn::input_jacobian(black_box(&params), black_box(batch.input(0)), Some(2.0)).unwrap())
        });
    }
    g.finish();
}

fn protocol_rounds(c: &mut Criterion) {
    let ds = Arc::new(gen_blobs(10, 40, 32, 3.0, 1).unwrap());
    let plan = partition_label_skew(&ds, 10, 1, 1).unwrap();
    let spec = ModelSpec::new(vec![32, 32, 10], Activation::Relu).unwrap();
    let init = ParamVector::glorot(spec.clone(), &mut stream(1, "init")).into_values();
    let task = NnTask::new(spec, ds, plan.assignments, 0, 1).unwrap();
    let hp = HyperParams { eta: 0.3, ..HyperParams::default() };
    let mut g = c.benchmark_group("round_10_devices");
    for kind in [ProtocolKind::Favg, ProtocolKind::Fd, ProtocolKind::Fjd] {
        g.bench_function(kind.name(), |b| {
            b.iter_batched(
                || init_devices(kind, &task, &init).unwrap(),
                |mut devs| run_round(kind, &task, &mut devs, None, &hp, 1, &mut Lossless).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();

    let mut devs = init_devices(ProtocolKind::Favg, &task, &init).unwrap();
    let msi = run_round(ProtocolKind::Favg, &task, &mut devs, None, &hp, 1, &mut Lossless).unwrap();
    let links = LinkModel { loss_prob: 0.1, ..LinkModel::default() };
    let compute = ComputeModel::default();
    let mut rng = stream(2, "pricing");
    c.bench_function("price_round_favg", |b| {
        b.iter(|| price_round(Split::HelperDevice, 10, black_box(&msi), &links, &compute, &mut rng))
    });
}

fn tails(c: &mut Criterion) {
    let samples = evt::sample_gpd(&GpdParams::new(2.0, 0.3).unwrap(), 5000, &mut stream(3, "s"));
    let p = GpdParams::new(1.5, 0.2).unwrap();
    c.bench_function("gpd_loglik_grad_5000", |b| b.iter(|| evt::gpd_loglik_grad(black_box(&samples), &p).unwrap()));
    let prob = WassersteinProblem::new(&samples, &GridConfig::default()).unwrap();
    c.bench_function("wasserstein_value_grad_256", |b| b.iter(|| prob.value_grad(black_box(&p)).unwrap()));

    let mut rng = stream(4, "sinkhorn");
    let n = 64;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let cost: Vec<f64> = xs.iter().flat_map(|x| ys.iter().map(move |y| (x - y).abs())).collect();
    let a = vec![1.0 / n as f64; n];
    c.bench_function("sinkhorn_dense_64", |b| b.iter(|| evt::sinkhorn(&a, &a, black_box(&cost), 0.01, 10_000).unwrap()));

    let values: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("quantize_100k_l16", |b| b.iter(|| quantize_uniform(black_box(&values), 16).unwrap()));
}

criterion_group!(benches, mlp, protocol_rounds, tails);
criterion_main!(benches);
