use std::sync::Arc;

use parlog::device::MemStore;
use parlog::engine::Precommit;
use parlog::recovery;
use parlog::txn::Table;
use parlog::{Config, Engine, EngineOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = || Table::from_values((0..100u64).map(|k| k.to_le_bytes().to_vec()));
    let store = MemStore::new();
    let engine = Engine::open(
        Config::default(),
        table(),
        Arc::new(store.clone()),
        EngineOptions::default(),
    )?;
    engine.start_loggers();

    let mut w = engine.worker(0);
    let mut t = w.begin();
    let old = w.read(&mut t, 7)?;
    w.write(&mut t, 7, [old, b"!".to_vec()].concat())?;
    assert_eq!(w.finish(&mut t)?, Precommit::Queued);
    let committed = w.drain()?;
    println!(
        "committed {} transaction(s) at SSN {}",
        committed.len(),
        t.ssn
    );

    engine.stop_loggers();
    let r = recovery::recover(&store, table(), 2)?;
    println!("recovered key 7 = {:?}", r.table.get(7)?.value);
    Ok(())
}
