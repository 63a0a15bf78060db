use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use frglab::cascade::bare_sample;
use frglab::correlators::estimate_gamma_mc;
use frglab::flow::{initial_state, integrate_flow};
use frglab::lattice::dft_forward;
use frglab::legendre::legendre_transform;
use frglab::lsz_fock::check_unitary;
use frglab::{
    BareActionParams, ConvexFunctionTable, CorrelatorRequest, FieldConfig, FlowSettings, GateMatrix, LatticeSpec,
    MomentumVector, Representation, SamplerSettings,
};
use nalgebra::DMatrix;

fn flow_bench(c: &mut Criterion) {
    let p = BareActionParams::zero_dimensional(1.0, 1.0).unwrap();
    let s = FlowSettings {
        representation: Representation::Grid,
        ..FlowSettings::for_params(&p)
    };
    c.bench_function("flow 0d quartic grid", |b| {
        b.iter_batched(
            || initial_state(&p, &s).unwrap(),
            |init| integrate_flow(&p, init, &s).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn sampling_bench(c: &mut Criterion) {
    let p0 = BareActionParams::zero_dimensional(1.0, 1.0).unwrap();
    let l = LatticeSpec::new(1, 8, 1.0).unwrap();
    let p1 = BareActionParams::new(l, 1.0, 0.5, true).unwrap();
    let settings = SamplerSettings::default();
    let mut g = c.benchmark_group("sampling");
    g.sample_size(20);
    g.bench_function("0d inverse cdf 1e4", |b| b.iter(|| bare_sample(&p0, 10_000, 1, &settings).unwrap()));
    g.bench_function("1d N=8 metropolis 1e3", |b| b.iter(|| bare_sample(&p1, 1_000, 1, &settings).unwrap()));
    g.finish();
}

fn correlator_bench(c: &mut Criterion) {
    let l = LatticeSpec::new(1, 8, 1.0).unwrap();
    let p = BareActionParams::new(l, 1.0, 0.5, true).unwrap();
    let batch = bare_sample(&p, 5_000, 3, &SamplerSettings::default()).unwrap();
    let m = |k: usize| MomentumVector::new(vec![k]);
    let req = CorrelatorRequest::new(&l, vec![m(1), m(7), m(2), m(6)], true).unwrap();
    c.bench_function("connected 4-point mc", |b| b.iter(|| estimate_gamma_mc(black_box(&batch), &req).unwrap()));
}

fn kernels_bench(c: &mut Criterion) {
    let l = LatticeSpec::new(2, 16, 1.0).unwrap();
    let f = FieldConfig::new(l, (0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    c.bench_function("dft 16x16", |b| b.iter(|| dft_forward(black_box(&f))));

    let grid: Vec<f64> = (0..801).map(|i| -8.0 + 0.02 * i as f64).collect();
    let t = ConvexFunctionTable::from_fn(grid, |x| 0.5 * x * x + x.powi(4) / 24.0).unwrap();
    c.bench_function("legendre transform 801", |b| b.iter(|| legendre_transform(black_box(&t), None).unwrap()));

    let gate = GateMatrix::new(DMatrix::identity(64, 64), Vec::new()).unwrap();
    c.bench_function("check unitary 64", |b| b.iter(|| check_unitary(black_box(&gate), 1e-12)));
}

criterion_group!(benches, flow_bench, sampling_bench, correlator_bench, kernels_bench);
criterion_main!(benches);
