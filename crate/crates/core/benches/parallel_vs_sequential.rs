//! Ray batches and Monte-Carlo audits on one worker versus the full pool.
//! Build with `--no-default-features` to time the sequential fallback.

use bounded_atlas::boundary::{learn_surface, RadialSurface, SurfaceConfig};
use bounded_atlas::library::{ControlRegion, Provenance, SolutionRecord, TrioConfig};
use bounded_atlas::oracle::mc_audit;
use bounded_atlas::plant::{make_ellipsoidal_plant, make_network_analog, ControlOffset, EvalCounter, Plant};
use bounded_atlas::spaces::{AxisBox, NormalizedFrame, OutputBox};
use criterion::{criterion_group, criterion_main, Criterion};

fn surface_batch() {
    let p = make_ellipsoidal_plant(
        vec![0.0, 0.0, 0.0],
        vec![4.0, 1.0, 2.0],
        ControlOffset::default(),
        AxisBox::cube(3, -1.5, 1.5).unwrap(),
        AxisBox::cube(1, -1.0, 1.0).unwrap(),
    )
    .unwrap();
    let frame = NormalizedFrame::with_default_scales(vec![0.0; 3], &p.signature().input_domain).unwrap();
    let b = OutputBox::new(vec![0.0], vec![1.0], vec![0.0]).unwrap();
    let cfg = SurfaceConfig {
        batch_size: Some(512),
        max_batches: 2,
        ..Default::default()
    };
    learn_surface(&p, &EvalCounter::unlimited(), &[0.0], &frame, &b, &cfg).unwrap();
}

fn network_record() -> SolutionRecord {
    let frame = NormalizedFrame::new(vec![0.0; 31], vec![0.02; 31]).unwrap();
    SolutionRecord {
        id: "bench".into(),
        surfaces: vec![RadialSurface::constant(frame, 30.0, 0.95).unwrap()],
        control_region: ControlRegion::single(vec![0.5; 43]),
        output_box: OutputBox::new(vec![0.0], vec![0.6], vec![0.0]).unwrap(),
        provenance: Provenance {
            plant_id: "network-analog-seed-1".into(),
            master_seed: 0,
            config: TrioConfig::default(),
            eval_counts: vec![],
            best_losses: vec![],
            fit_traces: vec![],
            expansion_log: vec![],
            validation: None,
            adapted_from: None,
            hypothesis_flags: vec![],
        },
    }
}

fn bench(c: &mut Criterion) {
    let plant = make_network_analog(1);
    let rec = network_record();
    let audit = || mc_audit(&plant, &EvalCounter::unlimited(), &rec, 4000, 3).unwrap();

    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let all = rayon::ThreadPoolBuilder::new().build().unwrap();
        for (name, pool) in [("1-worker", &one), ("pool", &all)] {
            c.bench_function(&format!("surface_batch/{name}"), |b| b.iter(|| pool.install(surface_batch)));
            c.bench_function(&format!("mc_audit_31d/{name}"), |b| b.iter(|| pool.install(audit)));
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        c.bench_function("surface_batch/sequential", |b| b.iter(surface_batch));
        c.bench_function("mc_audit_31d/sequential", |b| b.iter(audit));
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
