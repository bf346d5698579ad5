//! Hot-path benchmarks: convolution forward/backward, a full training step
//! of the reference model, flow evaluation, calibration and sampled Shapley.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use voxbayes::autodiff::kernels::{conv3d_backward, conv3d_forward, Padding};
use voxbayes::autodiff::Tape;
use voxbayes::calibration::calibration_report;
use voxbayes::flows::{flow_forward, flow_inverse, FlowStack};
use voxbayes::layers::{build_reference_model, BayesVariant, HeadKind};
use voxbayes::network::{Mode, Network};
use voxbayes::rng::Rng;
use voxbayes::shap::{partition_volume, sampled_shapley};
use voxbayes::tensor::Tensor;
use voxbayes::train::loss_graph;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal();
    }
    t
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    // the middle block of the reference model at desk scale
    let x = random_tensor(&[2, 128, 16, 16, 8], &mut rng);
    let k = random_tensor(&[128, 128, 3, 3, 3], &mut rng);
    c.bench_function("conv3d_forward_block2", |b| {
        b.iter(|| conv3d_forward(black_box(&x), black_box(&k), 1, Padding::Same).unwrap())
    });
    let go = random_tensor(&[2, 128, 16, 16, 8], &mut rng);
    c.bench_function("conv3d_backward_block2", |b| {
        b.iter(|| {
            conv3d_backward(black_box(&x), black_box(&k), black_box(&go), 1, Padding::Same, true, true)
                .unwrap()
        })
    });
}

fn bench_training_step(c: &mut Criterion) {
    let spec = build_reference_model([32, 32, 16], BayesVariant::Mnf, HeadKind::Sigmoid, false)
        .unwrap();
    let net = Network::init(spec, 3).unwrap();
    let mut rng = Rng::new(2);
    let mut input = Tensor::zeros(&[2, 1, 32, 32, 16]);
    for v in input.data_mut() {
        *v = rng.uniform();
    }
    let labels = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
    let mut group = c.benchmark_group("training_step");
    group.sample_size(10);
    group.bench_function("mnf_reference_model", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let pass = net.forward(&tape, &input, Mode::Train, &mut rng).unwrap();
            let loss = loss_graph(&tape, pass.probs, &labels, &pass.kl_nodes, 200).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.grad(pass.probs));
        })
    });
    group.finish();
}

fn bench_flows(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let flow = FlowStack::random(128, 2, 0.3, &mut rng);
    let z: Vec<f64> = (0..128).map(|_| rng.normal()).collect();
    c.bench_function("flow_forward_dim128", |b| {
        b.iter(|| flow_forward(black_box(&z), black_box(&flow)).unwrap())
    });
    c.bench_function("flow_inverse_dim128", |b| {
        b.iter(|| flow_inverse(black_box(&z), black_box(&flow)).unwrap())
    });
}

fn bench_calibration(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let probs: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
    let labels: Vec<u8> = (0..10_000).map(|_| rng.bernoulli(0.5) as u8).collect();
    c.bench_function("calibration_report_10k", |b| {
        b.iter(|| calibration_report(black_box(&probs), black_box(&labels), 0.5, 10).unwrap())
    });
}

fn bench_shapley(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let shape = [16usize, 16, 8];
    let partition = partition_volume(shape, [2, 2, 2]).unwrap();
    let volume = {
        let mut t = Tensor::zeros(&shape);
        for v in t.data_mut() {
            *v = rng.uniform();
        }
        t
    };
    let baseline = Tensor::zeros(&shape);
    let model = |t: &Tensor| -> voxbayes::Result<f64> {
        Ok(t.data().iter().sum::<f64>() / t.numel() as f64)
    };
    c.bench_function("sampled_shapley_8patches_64perms", |b| {
        b.iter(|| {
            sampled_shapley(
                black_box(&model),
                black_box(&volume),
                &partition,
                &baseline,
                64,
                9,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_conv,
    bench_training_step,
    bench_flows,
    bench_calibration,
    bench_shapley
);
criterion_main!(benches);
