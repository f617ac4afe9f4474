//! Workload generators and the database loader.

use std::fmt;
use std::str::FromStr;

use parlog::engine::{Precommit, Worker};
use parlog::txn::{Table, TxnError};
use parlog::{EngineError, Key};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    /// Each transaction overwrites one whole tuple.
    YcsbWrite,
    /// One full-value write plus a fixed-length range scan.
    YcsbHybrid,
    /// 50% payment, 50% new-order over a flattened warehouse key space.
    OrderEntry,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::YcsbWrite => "ycsb-write",
            WorkloadKind::YcsbHybrid => "ycsb-hybrid",
            WorkloadKind::OrderEntry => "order-entry",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ycsb-write" => Ok(WorkloadKind::YcsbWrite),
            "ycsb-hybrid" => Ok(WorkloadKind::YcsbHybrid),
            "order-entry" => Ok(WorkloadKind::OrderEntry),
            other => Err(format!(
                "unknown workload {other:?} (ycsb-write, ycsb-hybrid, order-entry)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// YCSB table size; order-entry derives its size from `warehouses`.
    pub records: u64,
    pub value_len: usize,
    pub scan_len: u64,
    pub warehouses: u64,
    /// Total transactions over all workers.
    pub txns: u64,
    pub threads: usize,
    /// Aborts tolerated per transaction before giving up; `None` retries
    /// forever.
    pub max_retries: Option<u64>,
    /// Per-worker arrival rate in transactions per second; `None` runs
    /// closed-loop as fast as possible.
    pub rate: Option<f64>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::YcsbWrite,
            records: 100_000,
            value_len: 1000,
            scan_len: 10,
            warehouses: 20,
            txns: 100_000,
            threads: 4,
            max_retries: None,
            rate: None,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn layout(&self) -> OrderLayout {
        OrderLayout::new(self.warehouses)
    }

    /// Number of tuples the loader creates.
    pub fn table_len(&self) -> u64 {
        match self.kind {
            WorkloadKind::OrderEntry => self.layout().len(),
            _ => self.records,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.threads == 0 {
            return Err("need at least one worker thread".into());
        }
        if self.value_len < 8 {
            return Err("values must be at least 8 bytes".into());
        }
        if self.rate.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err("arrival rate must be positive".into());
        }
        match self.kind {
            WorkloadKind::OrderEntry if self.warehouses == 0 => {
                Err("need at least one warehouse".into())
            }
            WorkloadKind::OrderEntry => Ok(()),
            _ if self.records == 0 => Err("need at least one record".into()),
            WorkloadKind::YcsbHybrid if self.scan_len > self.records => Err(format!(
                "scan length {} exceeds {} records",
                self.scan_len, self.records
            )),
            _ => Ok(()),
        }
    }
}

/// Initial contents of `key`: the key in the first eight bytes, zeros
/// after.
pub fn initial_value(key: Key, value_len: usize) -> Vec<u8> {
    let mut v = vec![0u8; value_len];
    v[..8].copy_from_slice(&key.to_le_bytes());
    v
}

/// Populates keys `0..table_len` with [`initial_value`]; every tuple starts
/// at SSN 0. Two loads of the same spec are identical.
pub fn load_database(spec: &WorkloadSpec) -> Result<Table, TxnError> {
    let len = spec.value_len;
    Table::load(spec.table_len(), len, |k| initial_value(k, len))
}

pub const DISTRICTS: u64 = 10;
pub const CUSTOMERS: u64 = 300;
pub const ITEMS: u64 = 1000;
/// Order slots per district, reused round-robin.
pub const ORDER_SLOTS: u64 = 32;

/// Flattened order-entry key space: warehouses, districts, customers,
/// items, stock and order slots, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderLayout {
    pub warehouses: u64,
    district_base: u64,
    customer_base: u64,
    item_base: u64,
    stock_base: u64,
    order_base: u64,
    len: u64,
}

impl OrderLayout {
    pub fn new(warehouses: u64) -> OrderLayout {
        let district_base = warehouses;
        let customer_base = district_base + warehouses * DISTRICTS;
        let item_base = customer_base + warehouses * DISTRICTS * CUSTOMERS;
        let stock_base = item_base + ITEMS;
        let order_base = stock_base + warehouses * ITEMS;
        let len = order_base + warehouses * DISTRICTS * ORDER_SLOTS;
        OrderLayout {
            warehouses,
            district_base,
            customer_base,
            item_base,
            stock_base,
            order_base,
            len,
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn warehouse(&self, w: u64) -> Key {
        w
    }

    pub fn district(&self, w: u64, d: u64) -> Key {
        self.district_base + w * DISTRICTS + d
    }

    pub fn customer(&self, w: u64, d: u64, c: u64) -> Key {
        self.customer_base + (w * DISTRICTS + d) * CUSTOMERS + c
    }

    pub fn item(&self, i: u64) -> Key {
        self.item_base + i
    }

    pub fn stock(&self, w: u64, i: u64) -> Key {
        self.stock_base + w * ITEMS + i
    }

    pub fn order(&self, w: u64, d: u64, slot: u64) -> Key {
        self.order_base + (w * DISTRICTS + d) * ORDER_SLOTS + slot % ORDER_SLOTS
    }
}

fn counter(v: &[u8]) -> u64 {
    u64::from_le_bytes(v[..8].try_into().expect("values hold at least 8 bytes"))
}

fn bump(mut v: Vec<u8>, by: u64) -> Vec<u8> {
    let n = counter(&v).wrapping_add(by);
    v[..8].copy_from_slice(&n.to_le_bytes());
    v
}

/// Per-worker transaction generator.
pub struct TxnGen {
    spec: WorkloadSpec,
    layout: OrderLayout,
    fill: u8,
}

impl TxnGen {
    pub fn new(spec: &WorkloadSpec) -> TxnGen {
        TxnGen {
            spec: spec.clone(),
            layout: spec.layout(),
            fill: 0,
        }
    }

    fn value(&mut self, key: Key) -> Vec<u8> {
        self.fill = self.fill.wrapping_add(1);
        let mut v = vec![self.fill; self.spec.value_len];
        v[..8].copy_from_slice(&key.to_le_bytes());
        v
    }

    /// Draws the parameters of the next transaction; retries after an
    /// abort reuse them.
    pub fn params(&self, rng: &mut impl Rng) -> Params {
        match self.spec.kind {
            WorkloadKind::YcsbWrite => Params::Write {
                key: rng.gen_range(0..self.spec.records),
            },
            WorkloadKind::YcsbHybrid => Params::Hybrid {
                key: rng.gen_range(0..self.spec.records),
                scan_start: rng.gen_range(0..=self.spec.records - self.spec.scan_len),
            },
            WorkloadKind::OrderEntry => {
                let w = rng.gen_range(0..self.layout.warehouses);
                let d = rng.gen_range(0..DISTRICTS);
                let c = rng.gen_range(0..CUSTOMERS);
                if rng.gen_bool(0.5) {
                    Params::Payment {
                        w,
                        d,
                        c,
                        amount: rng.gen_range(1..5000),
                    }
                } else {
                    let lines = rng.gen_range(5..=15);
                    let items = (0..lines)
                        .map(|_| {
                            // 1% of lines are supplied by another warehouse.
                            let supply = if rng.gen_bool(0.01) {
                                rng.gen_range(0..self.layout.warehouses)
                            } else {
                                w
                            };
                            (rng.gen_range(0..ITEMS), supply, rng.gen_range(1..=10))
                        })
                        .collect();
                    Params::NewOrder { w, d, c, items }
                }
            }
        }
    }

    /// Runs one attempt up to precommit.
    pub fn execute(&mut self, worker: &mut Worker, p: &Params) -> Result<Precommit, EngineError> {
        let mut t = worker.begin();
        let l = self.layout;
        let r = (|| -> Result<(), TxnError> {
            match p {
                Params::Write { key } => {
                    let v = self.value(*key);
                    worker.write(&mut t, *key, v)
                }
                Params::Hybrid { key, scan_start } => {
                    if self.spec.scan_len > 0 {
                        worker.scan(&mut t, *scan_start, self.spec.scan_len)?;
                    }
                    let v = self.value(*key);
                    worker.write(&mut t, *key, v)
                }
                Params::Payment { w, d, c, amount } => {
                    for key in [l.warehouse(*w), l.district(*w, *d), l.customer(*w, *d, *c)] {
                        let v = worker.read(&mut t, key)?;
                        worker.write(&mut t, key, bump(v, *amount))?;
                    }
                    Ok(())
                }
                Params::NewOrder { w, d, c, items } => {
                    worker.read(&mut t, l.warehouse(*w))?;
                    worker.read(&mut t, l.customer(*w, *d, *c))?;
                    let dk = l.district(*w, *d);
                    let district = worker.read(&mut t, dk)?;
                    let order_id = counter(&district);
                    worker.write(&mut t, dk, bump(district, 1))?;
                    for (item, supply, qty) in items {
                        worker.read(&mut t, l.item(*item))?;
                        let sk = l.stock(*supply, *item);
                        let stock = worker.read(&mut t, sk)?;
                        worker.write(&mut t, sk, bump(stock, *qty))?;
                    }
                    let ok = l.order(*w, *d, order_id);
                    let v = self.value(ok);
                    worker.write(&mut t, ok, v)
                }
            }
        })();
        if let Err(e) = r {
            worker.abort(&mut t);
            return Err(e.into());
        }
        worker.finish(&mut t)
    }
}

/// Random draws of one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Params {
    Write {
        key: Key,
    },
    Hybrid {
        key: Key,
        scan_start: Key,
    },
    Payment {
        w: u64,
        d: u64,
        c: u64,
        amount: u64,
    },
    NewOrder {
        w: u64,
        d: u64,
        c: u64,
        /// (item, supplying warehouse, quantity)
        items: Vec<(u64, u64, u64)>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loader_fills_every_key_at_ssn_zero() {
        let spec = WorkloadSpec {
            records: 100,
            value_len: 16,
            ..WorkloadSpec::default()
        };
        let t = load_database(&spec).unwrap();
        assert_eq!(t.len(), 100);
        for k in 0..100 {
            let d = t.get(k).unwrap();
            assert!(d.ssn.is_zero());
            assert_eq!(d.value.len(), 16);
            assert_eq!(counter(&d.value), k);
        }
        assert_eq!(t.snapshot(), load_database(&spec).unwrap().snapshot());
    }

    #[test]
    fn order_layout_regions_are_disjoint() {
        let l = OrderLayout::new(3);
        let last_wh = l.warehouse(2);
        let first_d = l.district(0, 0);
        assert_eq!(first_d, last_wh + 1);
        assert_eq!(l.customer(0, 0, 0), l.district(2, DISTRICTS - 1) + 1);
        assert_eq!(l.item(0), l.customer(2, DISTRICTS - 1, CUSTOMERS - 1) + 1);
        assert_eq!(l.stock(0, 0), l.item(ITEMS - 1) + 1);
        assert_eq!(l.order(0, 0, 0), l.stock(2, ITEMS - 1) + 1);
        assert_eq!(l.len(), l.order(2, DISTRICTS - 1, ORDER_SLOTS - 1) + 1);
        assert_eq!(l.order(1, 4, 3), l.order(1, 4, 3 + ORDER_SLOTS));
    }

    #[test]
    fn kinds_parse_by_cli_name() {
        for k in [
            WorkloadKind::YcsbWrite,
            WorkloadKind::YcsbHybrid,
            WorkloadKind::OrderEntry,
        ] {
            assert_eq!(k.name().parse::<WorkloadKind>().unwrap(), k);
        }
        assert!("tpcc".parse::<WorkloadKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = WorkloadSpec::default();
        assert!(s.validate().is_ok());
        s.kind = WorkloadKind::YcsbHybrid;
        s.records = 5;
        s.scan_len = 6;
        assert!(s.validate().is_err());
        s.threads = 0;
        assert!(s.validate().is_err());
    }
}
