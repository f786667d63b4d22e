use ail_bench::fixture;
use ail_core::{
    acquire_range_shared, run_client, ColumnId, CrackerIndex, Engine, ExecOptions, LatchMode, LatchTable,
    LatchTarget, Latching, Method, Policy,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn uncontended(c: &mut Criterion) {
    let table = LatchTable::new();
    let target = LatchTarget::Piece(ColumnId(0), 0);
    let mut g = c.benchmark_group("latch");
    g.bench_function("exclusive acquire+release", |b| {
        b.iter(|| table.acquire(target, LatchMode::Exclusive, Some(7)).release())
    });
    g.bench_function("shared acquire+release", |b| {
        b.iter(|| table.acquire(target, LatchMode::Shared, None).release())
    });

    let (column, queries) = fixture(1_000_000, 1000, 0.0005);
    let mut idx = CrackerIndex::new(&column);
    for q in &queries {
        idx.crack_select(q.low, q.high).unwrap();
    }
    let whole = ail_core::PositionRange::new(0, column.len());
    g.bench_function(BenchmarkId::new("range shared", idx.piece_count()), |b| {
        b.iter(|| acquire_range_shared(&table, &idx, whole).release_all())
    });
    g.finish();
}

fn latching_modes(c: &mut Criterion) {
    let (column, queries) = fixture(1_000_000, 256, 0.001);
    let mut g = c.benchmark_group("256 cracked queries, one client");
    g.sample_size(10);
    for latching in [Latching::None, Latching::Column, Latching::Piece] {
        g.bench_function(latching.to_string(), |b| {
            b.iter(|| {
                let engine = Engine::new(None);
                let id = engine.add_column(column.clone()).unwrap();
                let opts = ExecOptions {
                    method: Method::Crack,
                    latching,
                    policy: Policy::Block,
                };
                run_client(&engine, 0, id, &queries, opts).unwrap().len()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, uncontended, latching_modes);
criterion_main!(benches);
