use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rtfgo::par::Exec;
use rtfgo::sim::Scenario;
use rtfgo::{Engine, EngineConfig};

/// Full-history graph over the first `seconds` of the urban scenario.
fn urban_engine(seconds: f64) -> Engine {
    let data = Scenario::builtin("urban").unwrap().simulate(1).unwrap();
    let config = EngineConfig { imu_noise: data.imu_params, ..Default::default() }.batch();
    let mut engine = Engine::new(config).unwrap();
    let t0 = data.imu[0].t;
    let (mut i, mut g) = (0, 0);
    while i < data.imu.len() && data.imu[i].t - t0 < seconds {
        if g < data.gnss.len() && data.gnss[g].t <= data.imu[i].t {
            engine.push_gnss(data.gnss[g]).unwrap();
            g += 1;
        } else {
            engine.push_imu(data.imu[i]).unwrap();
            i += 1;
        }
    }
    engine
}

fn linearize(c: &mut Criterion) {
    let engine = urban_engine(600.0);
    let (graph, values) = (engine.graph(), engine.values());
    let mut group = c.benchmark_group("linearize");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_function(name, |b| b.iter(|| black_box(graph.linearize_with(values, exec).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, linearize);
criterion_main!(benches);
