use criterion::{criterion_group, criterion_main, Criterion};
use deca_core::capsules::{vb_routing, RoutingConfig};
use deca_core::model::{Deca, DecaConfig, Variant};
use deca_core::nn::Mode;
use deca_core::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn routing(c: &mut Criterion) {
    let (b, ni, nj) = (16, 32, 15);
    let a: Vec<f32> = uniform(1, b * ni).iter().map(|v| 0.5 + 0.4 * v).collect();
    let v = uniform(2, b * ni * nj * 16);
    let cfg = RoutingConfig::default();
    c.bench_function("vb_routing 16x32x15", |bench| {
        bench.iter(|| {
            let g = Graph::<f32>::new();
            let av = g.input(&[b, ni], a.clone()).unwrap();
            let vv = g.input(&[b, ni, nj, 16], v.clone()).unwrap();
            vb_routing(av, vv, &cfg, g.scalar(0.0), g.scalar(1.0)).unwrap().poses.to_vec()
        })
    });
}

fn model(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let m = Deca::new(DecaConfig::for_variant(Variant::D3), &mut store, 0).unwrap();
    let x = uniform(3, 32 * 64 * 64);
    let mut group = c.benchmark_group("deca_d3_64px");
    group.sample_size(10);
    group.bench_function("eval forward batch 32", |bench| {
        bench.iter(|| {
            let g = Graph::<f32>::new();
            let xv = g.input(&[32, 1, 64, 64], x.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            m.forward(&g, &store, xv, Mode::Eval, &mut rng).unwrap().predictions.y3d.to_vec()
        })
    });
    group.bench_function("forward+backward batch 16", |bench| {
        bench.iter(|| {
            let g = Graph::<f32>::new();
            let xv = g.input(&[16, 1, 64, 64], x[..16 * 4096].to_vec()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward(&g, &store, xv, Mode::Train, &mut rng).unwrap();
            let loss = out.predictions.y3d.square().mean();
            g.backward(loss, &mut store).unwrap();
            store.zero_grad();
        })
    });
    group.finish();
}

criterion_group!(benches, routing, model);
criterion_main!(benches);
