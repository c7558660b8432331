use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sv2p_core::autodiff::{Exec, Tape, Tensor};
use sv2p_core::config::{ModelConfig, TrainConfig};
use sv2p_core::dataset::{generate_dataset, ShapesConfig};
use sv2p_core::eval::{evaluate_suite, Method, MethodKind, Predictor, Protocol};
use sv2p_core::model::init_params;
use sv2p_core::trainer::Trainer;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn model() -> ModelConfig {
    ModelConfig {
        resolution: 32,
        enc_channels: vec![8, 16],
        inf_channels: vec![32, 64],
        ..ModelConfig::default()
    }
}

fn shapes() -> ShapesConfig {
    ShapesConfig {
        displacement: 1,
        ..ShapesConfig::for_resolution(32)
    }
}

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset_500x64");
    let cfg = ShapesConfig::for_resolution(64);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_dataset(500, 0, &cfg, exec).unwrap()));
    }
    g.finish();
}

fn depthwise_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("depthwise_kernels_b16");
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let frame = Tensor::from_fn(vec![16, 64, 64, 3], |_| r.random::<f32>());
    let kernels = Tensor::from_fn(vec![16, 10, 5, 5], |_| r.random::<f32>() / 25.0);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut t = Tape::with_exec(exec);
                let f = t.param(frame.clone());
                let k = t.param(kernels.clone());
                let out = t.depthwise_kernels(f, k).unwrap();
                let s = t.reduce_sum(out);
                t.backward(s).unwrap();
            })
        });
    }
    g.finish();
}

fn train_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_32px_b8");
    g.sample_size(10);
    let ds = generate_dataset(64, 0, &shapes(), Exec::default()).unwrap();
    let train = TrainConfig {
        batch: 8,
        phase1: 0,
        phase2: 1_000,
        phase3: 0,
        ..TrainConfig::default()
    };
    for (name, exec) in MODES {
        let mut t = Trainer::new(model(), train.clone(), &ds).unwrap();
        t.exec = exec;
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| t.step().unwrap()));
    }
    g.finish();
}

fn best_of_n(c: &mut Criterion) {
    let mut g = c.benchmark_group("best_of_20_on_8_videos");
    g.sample_size(10);
    let test = generate_dataset(8, 1_000_000, &shapes(), Exec::default()).unwrap();
    let pred = Predictor {
        model: model(),
        params: init_params::<f32>(&model(), 1).unwrap(),
        deterministic: false,
        exec: Exec::Sequential,
    };
    let methods = [Method {
        name: "sv2p".into(),
        kind: MethodKind::Model(Box::new(pred)),
        trained_frames: 4,
    }];
    for (name, exec) in MODES {
        let protocol = Protocol {
            n: 20,
            horizon: 3,
            context: 1,
            seed: 0,
            exec,
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate_suite(&methods, &test, &protocol).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, dataset_generation, depthwise_kernels, train_steps, best_of_n);
criterion_main!(benches);
