use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rkv_core::harness::{
    generate_workload, run_session, Generator, Method, MethodConfig, WorkloadSpec,
};
use rkv_core::{hsa_step, make_plan, pool1d, GroupLayout, HsaConfig, KvStore, Matrix, PoolMode};
use rkv_core::{select_stage1, window_scores, Stage1Config};

const D: usize = 64;
const H: usize = 4;

fn store(len: usize, page_len: usize, rng: &mut ChaCha8Rng) -> KvStore {
    let mut s = KvStore::new(D, page_len).unwrap();
    for _ in 0..len {
        let k: Vec<f32> = (0..D).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f32> = (0..D).map(|_| rng.sample(StandardNormal)).collect();
        s.append(&k, &v).unwrap();
    }
    s
}

fn query(rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(
        H,
        D,
        (0..H * D).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn bench_hsa(c: &mut Criterion) {
    let mut group = c.benchmark_group("hsa_step");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in [4096usize, 16384] {
        let plan = make_plan(len, 256, D, 32).unwrap();
        let s = store(plan.stage1_tokens, plan.page_len, &mut rng);
        let cfg: HsaConfig = plan.hsa_config();
        let q = query(&mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| hsa_step(black_box(&q), &s, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_append(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let keys: Vec<Vec<f32>> = (0..4096)
        .map(|_| (0..D).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    c.bench_function("append_4096_page3", |b| {
        b.iter(|| {
            let mut s = KvStore::new(D, 3).unwrap();
            for k in &keys {
                s.append(k, k).unwrap();
            }
            s
        })
    });
}

fn bench_stage1(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = store(8192, 1, &mut rng);
    let layout = GroupLayout::new(1, H, D).unwrap();
    let window: Vec<Matrix> = (0..32).map(|_| query(&mut rng)).collect();
    let cfg = Stage1Config {
        window: 32,
        kernel: 63,
        pool: PoolMode::Max,
        budget: 2048,
    };
    c.bench_function("stage1_8192", |b| {
        b.iter(|| {
            let scores = window_scores(black_box(&window), &s, &layout).unwrap();
            select_stage1(&scores, &cfg).unwrap()
        })
    });
    let x: Vec<f32> = (0..65536).map(|_| rng.sample(StandardNormal)).collect();
    c.bench_function("max_pool_65536_k63", |b| {
        b.iter(|| pool1d(black_box(&x), 63, PoolMode::Max).unwrap())
    });
}

fn bench_session(c: &mut Criterion) {
    let spec = WorkloadSpec {
        generator: Generator::PlantedNeedles,
        seq_len: 4096,
        decode_steps: 8,
        groups: 1,
        heads_per_group: H,
        head_dim: D,
        ..WorkloadSpec::default()
    };
    let session = generate_workload(&spec).unwrap();
    let mut group = c.benchmark_group("session");
    group.sample_size(10);
    for m in [Method::RocketKv, Method::ExactTopK] {
        let cfg = MethodConfig::new(m, 256);
        group.bench_function(m.name(), |b| {
            b.iter(|| run_session(&session, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_hsa,
    bench_append,
    bench_stage1,
    bench_session
);
criterion_main!(benches);
