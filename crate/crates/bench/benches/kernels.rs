use std::hint::black_box;

use cascade_core::brw::{self, BrwConfig};
use cascade_core::fragmentation::SimConfig;
use cascade_core::rng::replica_rng;
use cascade_core::{levy, DislocationSpec, FieldSampler, Fragmentation, Grid, Kernel, OffspringLaw};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn critical_parameter(c: &mut Criterion) {
    let spec = DislocationSpec::binary();
    c.bench_function("critical_p/binary", |b| b.iter(|| black_box(&spec).critical_p(1e-12).unwrap()));
}

fn fragmentation(c: &mut Criterion) {
    let spec = DislocationSpec::binary();
    let frag = Fragmentation::new(spec.clone(), spec.critical_p(1e-12).unwrap());
    let cfg = SimConfig::new(vec![8.0]);
    let mut seed = 0;
    c.bench_function("fragmentation/simulate_t8", |b| {
        b.iter(|| {
            seed += 1;
            frag.simulate(&cfg, &mut replica_rng(1, seed)).unwrap()
        })
    });
    let tilted = levy::tilt(&spec, frag.critical().p_bar).unwrap();
    c.bench_function("levy/sample_xi_t100", |b| {
        let mut rng = replica_rng(2, 0);
        b.iter(|| tilted.sample_xi(&mut rng, 100.0))
    });
}

fn branching_walk(c: &mut Criterion) {
    let law = OffspringLaw::canonical();
    let cfg = BrwConfig::new(vec![12]);
    let mut seed = 0;
    c.bench_function("brw/simulate_n12", |b| {
        b.iter(|| {
            seed += 1;
            brw::simulate(&law, &cfg, None, &mut replica_rng(3, seed)).unwrap()
        })
    });
}

fn chaos(c: &mut Criterion) {
    let grid = Grid::unit(1100).unwrap();
    let sampler = FieldSampler::new(Kernel::Wendland, grid, 7.0, 0.05).unwrap();
    let mut group = c.benchmark_group("gmc");
    group.sample_size(10);
    group.bench_function("simulate_n1100_t7", |b| {
        let mut rng = replica_rng(4, 0);
        b.iter(|| sampler.simulate(&[7.0], &mut rng).unwrap())
    });
    group.bench_function("sampler_setup_n1100", |b| {
        b.iter_batched(
            || grid,
            |g| FieldSampler::new(Kernel::Wendland, g, 7.0, 0.05).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, critical_parameter, fragmentation, branching_walk, chaos);
criterion_main!(benches);
