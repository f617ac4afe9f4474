use std::sync::Arc;

use parlog::device::MemStore;
use parlog::verify::props::{ssn_properties, SsnProperties};
use parlog::verify::sim::{self, ProgramShape, SimConfig, SimCrash};
use parlog::verify::stress;
use parlog::verify::trace::TraceRecorder;
use parlog::{Engine, EngineOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sim_properties(
    seed: u64,
    buffers: usize,
    workers: usize,
    txns: usize,
    keys: u64,
) -> SsnProperties {
    let cfg = SimConfig::small(buffers, keys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let program = sim::random_program(
        &mut rng,
        ProgramShape {
            workers,
            txns,
            keys,
            value_len: cfg.value_len,
        },
    );
    let out = sim::run(&cfg, &program, seed, SimCrash::None).unwrap();
    ssn_properties(&out.trace, &out.store, out.num_buffers)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulated_schedules_keep_ssn_order(
        seed in any::<u64>(),
        buffers in 1usize..=4,
        workers in 1usize..=8,
        txns in 1usize..=120,
        keys in 2u64..=32,
    ) {
        let p = sim_properties(seed, buffers, workers, txns, keys);
        prop_assert!(p.clean(), "{p:?}");
    }
}

#[test]
fn twenty_thousand_simulated_transactions() {
    let mut total = SsnProperties::default();
    let mut seed = 0;
    while total.transactions < 20_000 {
        let p = sim_properties(seed, 1 + (seed as usize % 4), 8, 200, 8 + seed % 56);
        total.add(&p);
        seed += 1;
    }
    assert!(total.clean(), "{total:?}");
    assert!(
        total.war_ties > 0,
        "read-only readers tie with later writers"
    );
}

#[test]
fn threaded_run_keeps_ssn_order() {
    let store = MemStore::new();
    let trace = Arc::new(TraceRecorder::new());
    let engine = Arc::new(
        Engine::open(
            stress::small_config(3),
            stress::key_table(32),
            Arc::new(store.clone()),
            EngineOptions {
                trace: Some(trace.clone()),
                ..EngineOptions::default()
            },
        )
        .unwrap(),
    );
    engine.start_loggers();
    let committed = stress::run_load(
        &engine,
        stress::Load {
            workers: 6,
            txns_per_worker: 500,
            keys: 32,
            seed: 11,
        },
    );
    engine.stop_loggers();
    assert_eq!(committed, 3000);
    let p = ssn_properties(&trace.snapshot(), &store, 3);
    assert_eq!(p.transactions, 3000);
    assert!(p.clean(), "{p:?}");
}

#[test]
fn dropping_waw_tracking_shows_up() {
    let mut total = SsnProperties::default();
    for seed in 0..50 {
        let mut cfg = SimConfig::small(2, 8);
        cfg.fault = parlog::FaultMode::SkipWawTracking;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let program = sim::random_program(
            &mut rng,
            ProgramShape {
                workers: 4,
                txns: 80,
                keys: 8,
                value_len: cfg.value_len,
            },
        );
        let out = sim::run(&cfg, &program, seed, SimCrash::None).unwrap();
        total.add(&ssn_properties(&out.trace, &out.store, out.num_buffers));
    }
    assert!(total.waw_violations > 0, "{total:?}");
}
