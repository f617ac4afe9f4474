use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parlog::checkpoint::{self, begin_checkpoint, run_checkpoint};
use parlog::device::MemStore;
use parlog::recovery;
use parlog::verify::stress;
use parlog::verify::trace::TraceRecorder;
use parlog::{Engine, EngineOptions};

const KEYS: u64 = 64;

fn traced_engine(buffers: usize) -> (Arc<Engine>, MemStore, Arc<TraceRecorder>) {
    let store = MemStore::new();
    let trace = Arc::new(TraceRecorder::new());
    let engine = Engine::open(
        stress::small_config(buffers),
        stress::key_table(KEYS),
        Arc::new(store.clone()),
        EngineOptions {
            trace: Some(trace.clone()),
            ..EngineOptions::default()
        },
    )
    .unwrap();
    (Arc::new(engine), store, trace)
}

#[test]
fn checkpoint_under_load_then_crash() {
    for seed in 0..10 {
        let r = stress::checkpoint_crash_trial(stress::CheckpointTrial {
            keys: KEYS,
            workers: 4,
            txns: 2000,
            seed,
        })
        .unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

#[test]
fn checkpoint_during_ten_thousand_transactions() {
    let (engine, store, _trace) = traced_engine(2);
    engine.start_loggers();
    let loader = {
        let engine = engine.clone();
        thread::spawn(move || {
            stress::run_load(
                &engine,
                stress::Load {
                    workers: 4,
                    txns_per_worker: 2500,
                    keys: KEYS,
                    seed: 99,
                },
            )
        })
    };
    let meta = run_checkpoint(&engine, 3, 2, Duration::from_secs(20)).unwrap();
    assert_eq!(loader.join().unwrap(), 10_000);
    engine.flush_all().unwrap();
    let expected = engine.table().snapshot();
    engine.stop_loggers();

    let latest = checkpoint::latest_valid(&store).unwrap().unwrap();
    assert_eq!(latest.epoch, meta.epoch);
    let recovered = recovery::recover(&store, stress::key_table(KEYS), 4).unwrap();
    assert_eq!(recovered.table.snapshot(), expected);
}

#[test]
fn dirty_early_release_blocks_validation() {
    stress::dirty_release_check().unwrap();
}

#[test]
fn newer_valid_checkpoint_wins() {
    let (engine, store, _trace) = traced_engine(2);
    engine.start_loggers();
    let load = |seed| stress::Load {
        workers: 2,
        txns_per_worker: 300,
        keys: KEYS,
        seed,
    };
    stress::run_load(&engine, load(1));
    let first = run_checkpoint(&engine, 2, 1, Duration::from_secs(10)).unwrap();
    stress::run_load(&engine, load(2));
    let second = run_checkpoint(&engine, 1, 3, Duration::from_secs(10)).unwrap();
    assert!(second.epoch > first.epoch);
    assert!(second.rsn > first.rsn);
    // An unfinished third one is ignored.
    stress::run_load(&engine, load(3));
    let _pending = begin_checkpoint(&engine, 2, 2).unwrap();
    engine.flush_all().unwrap();
    let expected = engine.table().snapshot();
    engine.stop_loggers();

    let r = recovery::recover(&store, stress::key_table(KEYS), 2).unwrap();
    assert_eq!(r.plan.checkpoint.as_ref().unwrap().epoch, second.epoch);
    assert_eq!(r.table.snapshot(), expected);
}
