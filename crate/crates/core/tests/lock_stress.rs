use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parlog::device::NullStore;
use parlog::engine::Precommit;
use parlog::verify::stress;
use parlog::{Engine, EngineOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THREADS: usize = 8;
const TXNS_PER_THREAD: u64 = 100_000;
const HOT_KEYS: u64 = 8;
const STALL: Duration = Duration::from_secs(20);

/// Eight workers hammer eight keys with multi-key read-modify-writes whose
/// keys are touched in random order. A watchdog fails the test if the
/// commit count stops moving.
#[test]
fn hot_keys_never_stall() {
    let engine = Arc::new(
        Engine::open(
            stress::small_config(4),
            stress::key_table(HOT_KEYS),
            Arc::new(NullStore),
            EngineOptions::default(),
        )
        .unwrap(),
    );
    engine.start_loggers();
    let progress = Arc::new(AtomicU64::new(0));
    let finished = Arc::new(AtomicBool::new(false));

    let watchdog = {
        let progress = progress.clone();
        let finished = finished.clone();
        thread::spawn(move || {
            let mut last = 0;
            let mut since = Instant::now();
            while !finished.load(Ordering::Acquire) {
                thread::sleep(Duration::from_millis(50));
                let now = progress.load(Ordering::Relaxed);
                if now != last {
                    last = now;
                    since = Instant::now();
                } else if since.elapsed() > STALL {
                    return Err(format!("no progress for {STALL:?} at {now} transactions"));
                }
            }
            Ok(())
        })
    };

    let per_worker = TXNS_PER_THREAD;
    let handles: Vec<_> = (0..THREADS)
        .map(|i| {
            let engine = engine.clone();
            let progress = progress.clone();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let mut w = engine.worker(i);
                let mut keys: Vec<u64> = (0..HOT_KEYS).collect();
                let mut done = 0;
                let mut aborts = 0u64;
                while done < per_worker {
                    keys.shuffle(&mut rng);
                    let n = rng.gen_range(1..=4);
                    let mut t = w.begin();
                    for &k in &keys[..n] {
                        let mut v = w.read(&mut t, k).unwrap();
                        v[0] = v[0].wrapping_add(1);
                        w.write(&mut t, k, v).unwrap();
                    }
                    match w.finish(&mut t).unwrap() {
                        Precommit::Queued => {
                            done += 1;
                            progress.fetch_add(1, Ordering::Relaxed);
                        }
                        Precommit::Aborted => aborts += 1,
                    }
                    w.try_commit();
                }
                w.drain().unwrap();
                aborts
            })
        })
        .collect();
    let aborts: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
    finished.store(true, Ordering::Release);
    watchdog.join().unwrap().unwrap();
    engine.stop_loggers();

    assert_eq!(
        progress.load(Ordering::Relaxed),
        TXNS_PER_THREAD * THREADS as u64
    );
    for k in 0..HOT_KEYS {
        assert!(engine.table().tuple(k).unwrap().holder().is_none());
    }
    eprintln!(
        "{} transactions, {aborts} aborts",
        TXNS_PER_THREAD * THREADS as u64
    );
}
