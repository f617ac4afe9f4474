//! Storage devices: where log buffers and checkpoints persist.
//!
//! A [`Store`] is a flat namespace of files. [`MemStore`] keeps them in
//! memory and survives a simulated crash (the engine is dropped, the store
//! is handed to recovery), [`DirStore`] maps them onto a directory with real
//! `fsync`, and [`NullStore`] discards appends for throughput runs.
//!
//! A [`Device`] is one log buffer's append stream on a store. It rotates
//! files, optionally paces writes through a bandwidth/latency model, and
//! consults a shared [`CrashSwitch`] that can cut a write short.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device i/o: {0}")]
    Io(#[from] io::Error),
    #[error("injected crash")]
    InjectedCrash,
}

pub trait AppendFile: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Durability barrier.
    fn sync(&mut self) -> io::Result<()>;
}

pub trait Store: Send + Sync + fmt::Debug {
    fn list(&self) -> io::Result<Vec<String>>;
    fn read(&self, name: &str) -> io::Result<Vec<u8>>;
    /// Replaces `name` as a whole; readers see the old or the new contents.
    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()>;
    /// Creates (truncating) `name` and opens it for appending.
    fn create_append(&self, name: &str) -> io::Result<Box<dyn AppendFile>>;
    fn remove(&self, name: &str) -> io::Result<()>;
}

#[derive(Debug, Clone, Default)]
pub struct MemStore {
    files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
}

impl MemStore {
    pub fn new() -> Self {
        MemStore::default()
    }

    /// Independent copy of the current contents.
    pub fn fork(&self) -> MemStore {
        MemStore {
            files: Arc::new(Mutex::new(self.files.lock().clone())),
        }
    }

    pub fn file_len(&self, name: &str) -> Option<usize> {
        self.files.lock().get(name).map(Vec::len)
    }

    pub fn truncate(&self, name: &str, len: usize) {
        if let Some(f) = self.files.lock().get_mut(name) {
            f.truncate(len);
        }
    }
}

struct MemAppend {
    files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
    name: String,
}

impl AppendFile for MemAppend {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.files
            .lock()
            .entry(self.name.clone())
            .or_default()
            .extend_from_slice(bytes);
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn not_found(name: &str) -> io::Error {
    io::Error::new(io::ErrorKind::NotFound, format!("{name}: no such file"))
}

impl Store for MemStore {
    fn list(&self) -> io::Result<Vec<String>> {
        Ok(self.files.lock().keys().cloned().collect())
    }

    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        self.files
            .lock()
            .get(name)
            .cloned()
            .ok_or_else(|| not_found(name))
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.files.lock().insert(name.to_string(), bytes.to_vec());
        Ok(())
    }

    fn create_append(&self, name: &str) -> io::Result<Box<dyn AppendFile>> {
        self.files.lock().insert(name.to_string(), Vec::new());
        Ok(Box::new(MemAppend {
            files: self.files.clone(),
            name: name.to_string(),
        }))
    }

    fn remove(&self, name: &str) -> io::Result<()> {
        self.files
            .lock()
            .remove(name)
            .map(|_| ())
            .ok_or_else(|| not_found(name))
    }
}

#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl AsRef<Path>) -> io::Result<DirStore> {
        fs::create_dir_all(root.as_ref())?;
        Ok(DirStore {
            root: root.as_ref().to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn sync_dir(&self) -> io::Result<()> {
        File::open(&self.root)?.sync_all()
    }
}

struct FileAppend {
    file: File,
}

impl AppendFile for FileAppend {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)
    }

    fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }
}

impl Store for DirStore {
    fn list(&self) -> io::Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    if !name.ends_with(".tmp") {
                        names.push(name.to_string());
                    }
                }
            }
        }
        names.sort();
        Ok(names)
    }

    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        fs::read(self.root.join(name))
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.root.join(format!("{name}.tmp"));
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, self.root.join(name))?;
        self.sync_dir()
    }

    fn create_append(&self, name: &str) -> io::Result<Box<dyn AppendFile>> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(self.root.join(name))?;
        self.sync_dir()?;
        Ok(Box::new(FileAppend { file }))
    }

    fn remove(&self, name: &str) -> io::Result<()> {
        fs::remove_file(self.root.join(name))
    }
}

/// Accepts everything, keeps nothing.
#[derive(Debug, Clone, Default)]
pub struct NullStore;

struct NullAppend;

impl AppendFile for NullAppend {
    fn append(&mut self, _bytes: &[u8]) -> io::Result<()> {
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Store for NullStore {
    fn list(&self) -> io::Result<Vec<String>> {
        Ok(Vec::new())
    }

    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        Err(not_found(name))
    }

    fn write_atomic(&self, _name: &str, _bytes: &[u8]) -> io::Result<()> {
        Ok(())
    }

    fn create_append(&self, _name: &str) -> io::Result<Box<dyn AppendFile>> {
        Ok(Box::new(NullAppend))
    }

    fn remove(&self, _name: &str) -> io::Result<()> {
        Ok(())
    }
}

/// Sequential-write cost model of a simulated device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceModel {
    pub bandwidth: f64,
    pub latency: Duration,
}

impl DeviceModel {
    /// 1.2 GB/s sequential bandwidth, 21.5 µs per write.
    pub const SSD: DeviceModel = DeviceModel {
        bandwidth: 1.2e9,
        latency: Duration::from_nanos(21_500),
    };

    pub fn write_time(&self, len: usize) -> Duration {
        Duration::from_secs_f64(len as f64 / self.bandwidth) + self.latency
    }
}

/// One line of a crash script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Only the first `bytes` bytes ever appended to `device` survive.
    AfterBytes { device: usize, bytes: u64 },
    /// The engine stops at global event `event` (zero based).
    AtEvent { event: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrashPlan {
    pub points: Vec<CrashPoint>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("crash script line {line}: {message}")]
pub struct CrashPlanError {
    pub line: usize,
    pub message: String,
}

impl CrashPlan {
    /// Parses lines of the form `crash after <n> bytes on <device>` and
    /// `crash at event <k>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<CrashPlan, CrashPlanError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| CrashPlanError {
                line: i + 1,
                message: message.to_string(),
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            let point = match words.as_slice() {
                ["crash", "after", n, "bytes", "on", dev] => CrashPoint::AfterBytes {
                    bytes: n.parse().map_err(|_| err("bad byte count"))?,
                    device: dev
                        .trim_start_matches("dev")
                        .parse()
                        .map_err(|_| err("bad device"))?,
                },
                ["crash", "at", "event", k] => CrashPoint::AtEvent {
                    event: k.parse().map_err(|_| err("bad event index"))?,
                },
                _ => {
                    return Err(err(
                        "expected `crash after <n> bytes on <device>` or `crash at event <k>`",
                    ))
                }
            };
            points.push(point);
        }
        Ok(CrashPlan { points })
    }
}

/// Shared crash trigger. Once tripped every device refuses further writes.
#[derive(Debug)]
pub struct CrashSwitch {
    plan: CrashPlan,
    tripped: AtomicBool,
    events: AtomicU64,
    tear_next: AtomicBool,
    rng: Mutex<ChaCha8Rng>,
}

impl CrashSwitch {
    pub fn new(plan: CrashPlan, seed: u64) -> Self {
        CrashSwitch {
            plan,
            tripped: AtomicBool::new(false),
            events: AtomicU64::new(0),
            tear_next: AtomicBool::new(false),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn disarmed() -> Self {
        CrashSwitch::new(CrashPlan::default(), 0)
    }

    pub fn is_tripped(&self) -> bool {
        self.tripped.load(Ordering::Acquire)
    }

    pub fn trip(&self) {
        self.tripped.store(true, Ordering::Release);
    }

    /// The next append on any device persists a uniformly random strict
    /// prefix of its bytes and then crashes.
    pub fn arm_tear(&self) {
        self.tear_next.store(true, Ordering::Release);
    }

    /// Counts one global event; trips if the plan crashes here.
    pub fn on_event(&self) -> bool {
        let k = self.events.fetch_add(1, Ordering::AcqRel);
        if self
            .plan
            .points
            .iter()
            .any(|p| matches!(p, CrashPoint::AtEvent { event } if *event == k))
        {
            self.trip();
        }
        self.is_tripped()
    }

    pub fn events(&self) -> u64 {
        self.events.load(Ordering::Acquire)
    }

    /// How many of `len` bytes, written at device offset `written`, survive.
    fn surviving(&self, device: usize, written: u64, len: usize) -> Option<usize> {
        if self.tear_next.swap(false, Ordering::AcqRel) {
            return Some(self.rng.lock().gen_range(0..len.max(1)));
        }
        self.plan.points.iter().find_map(|p| match *p {
            CrashPoint::AfterBytes { device: d, bytes }
                if d == device && written + len as u64 > bytes =>
            {
                Some(bytes.saturating_sub(written) as usize)
            }
            _ => None,
        })
    }
}

/// Log file name for `buffer`, rotation sequence `seq`.
pub fn log_file_name(buffer: usize, seq: u64) -> String {
    format!("wal-{buffer}-{seq:06}.log")
}

/// Inverse of [`log_file_name`].
pub fn parse_log_file_name(name: &str) -> Option<(usize, u64)> {
    let rest = name.strip_prefix("wal-")?.strip_suffix(".log")?;
    let (buffer, seq) = rest.split_once('-')?;
    Some((buffer.parse().ok()?, seq.parse().ok()?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub bytes: u64,
    pub writes: u64,
    pub busy: Duration,
}

/// The append stream of one log buffer. Owned by exactly one logger.
pub struct Device {
    id: usize,
    store: Arc<dyn Store>,
    file: Box<dyn AppendFile>,
    seq: u64,
    file_bytes: u64,
    rotate_bytes: u64,
    written: u64,
    model: Option<DeviceModel>,
    busy_until: Option<Instant>,
    crash: Arc<CrashSwitch>,
    stats: DeviceStats,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("id", &self.id)
            .field("seq", &self.seq)
            .field("written", &self.written)
            .field("model", &self.model)
            .finish()
    }
}

impl Device {
    /// Opens the stream, creating an empty first file so that recovery
    /// knows the buffer exists even if nothing reaches it.
    pub fn open(
        id: usize,
        store: Arc<dyn Store>,
        rotate_bytes: u64,
        model: Option<DeviceModel>,
        crash: Arc<CrashSwitch>,
    ) -> Result<Device, DeviceError> {
        let file = store.create_append(&log_file_name(id, 0))?;
        Ok(Device {
            id,
            store,
            file,
            seq: 0,
            file_bytes: 0,
            rotate_bytes: rotate_bytes.max(1),
            written: 0,
            model,
            busy_until: None,
            crash,
            stats: DeviceStats::default(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    /// Total bytes acknowledged so far.
    pub fn written(&self) -> u64 {
        self.written
    }

    /// Appends `bytes` and returns once they are durable.
    pub fn append_and_sync(&mut self, bytes: &[u8]) -> Result<usize, DeviceError> {
        if self.crash.is_tripped() {
            return Err(DeviceError::InjectedCrash);
        }
        if self.file_bytes > 0 && self.file_bytes + bytes.len() as u64 > self.rotate_bytes {
            self.seq += 1;
            self.file = self
                .store
                .create_append(&log_file_name(self.id, self.seq))?;
            self.file_bytes = 0;
        }
        if self.crash.on_event() {
            return Err(DeviceError::InjectedCrash);
        }
        if let Some(keep) = self.crash.surviving(self.id, self.written, bytes.len()) {
            let keep = keep.min(bytes.len());
            self.file.append(&bytes[..keep])?;
            self.file.sync()?;
            self.crash.trip();
            return Err(DeviceError::InjectedCrash);
        }
        let started = Instant::now();
        self.file.append(bytes)?;
        self.file.sync()?;
        self.pace(bytes.len());
        self.written += bytes.len() as u64;
        self.file_bytes += bytes.len() as u64;
        self.stats.bytes += bytes.len() as u64;
        self.stats.writes += 1;
        self.stats.busy += started.elapsed();
        Ok(bytes.len())
    }

    fn pace(&mut self, len: usize) {
        let Some(model) = self.model else { return };
        let now = Instant::now();
        let start = match self.busy_until {
            Some(t) if t > now => t,
            _ => now,
        };
        let done = start + model.write_time(len);
        self.busy_until = Some(done);
        let wait = done.saturating_duration_since(Instant::now());
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Device selection read from the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceOptions {
    pub real: bool,
    pub model: Option<DeviceModel>,
    pub crash_plan: CrashPlan,
}

impl Default for DeviceOptions {
    fn default() -> Self {
        DeviceOptions {
            real: false,
            model: Some(DeviceModel::SSD),
            crash_plan: CrashPlan::default(),
        }
    }
}

impl DeviceOptions {
    /// Reads `PARLOG_DEVICE` (`sim` or `real`), `PARLOG_BANDWIDTH` (bytes
    /// per second), `PARLOG_LATENCY_US` and `PARLOG_CRASH_SCRIPT` (path).
    pub fn from_env() -> Result<DeviceOptions, String> {
        let mut opts = DeviceOptions::default();
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(kind) = var("PARLOG_DEVICE") {
            match kind.as_str() {
                "sim" => {}
                "real" => {
                    opts.real = true;
                    opts.model = None;
                }
                other => return Err(format!("PARLOG_DEVICE: unknown kind {other:?}")),
            }
        }
        if let Some(model) = opts.model.as_mut() {
            if let Some(bw) = var("PARLOG_BANDWIDTH") {
                model.bandwidth = bw
                    .parse()
                    .ok()
                    .filter(|b: &f64| *b > 0.0)
                    .ok_or_else(|| format!("PARLOG_BANDWIDTH: bad value {bw:?}"))?;
            }
            if let Some(us) = var("PARLOG_LATENCY_US") {
                model.latency = Duration::from_secs_f64(
                    us.parse::<f64>()
                        .map_err(|_| format!("PARLOG_LATENCY_US: bad value {us:?}"))?
                        / 1e6,
                );
            }
        }
        if let Some(path) = var("PARLOG_CRASH_SCRIPT") {
            let text = fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
            opts.crash_plan = CrashPlan::parse(&text).map_err(|e| e.to_string())?;
        }
        Ok(opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_device(plan: CrashPlan) -> (MemStore, Device) {
        let store = MemStore::new();
        let dev = Device::open(
            0,
            Arc::new(store.clone()),
            1 << 20,
            None,
            Arc::new(CrashSwitch::new(plan, 1)),
        )
        .unwrap();
        (store, dev)
    }

    #[test]
    fn ssd_model_write_time() {
        let t = DeviceModel::SSD.write_time(16 * 1024);
        let oracle = 16384.0 / 1.2e9 + 21.5e-6;
        assert!((t.as_secs_f64() - oracle).abs() < 1e-9);
        assert!((t.as_secs_f64() - 34.8e-6).abs() < 0.5e-6);
    }

    #[test]
    fn open_creates_empty_first_file() {
        let (store, _dev) = mem_device(CrashPlan::default());
        assert_eq!(store.list().unwrap(), vec![log_file_name(0, 0)]);
        assert_eq!(store.file_len(&log_file_name(0, 0)), Some(0));
    }

    #[test]
    fn crash_between_appends_keeps_first() {
        let plan = CrashPlan {
            points: vec![CrashPoint::AtEvent { event: 1 }],
        };
        let (store, mut dev) = mem_device(plan);
        dev.append_and_sync(b"first").unwrap();
        assert!(matches!(
            dev.append_and_sync(b"second"),
            Err(DeviceError::InjectedCrash)
        ));
        assert!(matches!(
            dev.append_and_sync(b"third"),
            Err(DeviceError::InjectedCrash)
        ));
        assert_eq!(store.read(&log_file_name(0, 0)).unwrap(), b"first");
    }

    #[test]
    fn byte_budget_tears_the_write() {
        let plan = CrashPlan::parse("crash after 7 bytes on 0").unwrap();
        let (store, mut dev) = mem_device(plan);
        dev.append_and_sync(b"abcd").unwrap();
        assert!(dev.append_and_sync(b"efgh").is_err());
        assert_eq!(store.read(&log_file_name(0, 0)).unwrap(), b"abcdefg");
    }

    #[test]
    fn armed_tear_keeps_strict_prefix() {
        let (store, mut dev) = mem_device(CrashPlan::default());
        dev.append_and_sync(b"ok").unwrap();
        dev.crash.arm_tear();
        assert!(dev.append_and_sync(b"0123456789").is_err());
        let data = store.read(&log_file_name(0, 0)).unwrap();
        assert!(data.len() < 12 && data.starts_with(b"ok"));
        assert_eq!(&b"ok0123456789"[..data.len()], &data[..]);
    }

    #[test]
    fn files_rotate_with_increasing_names() {
        let store = MemStore::new();
        let mut dev = Device::open(
            3,
            Arc::new(store.clone()),
            10,
            None,
            Arc::new(CrashSwitch::disarmed()),
        )
        .unwrap();
        for _ in 0..3 {
            dev.append_and_sync(&[1; 6]).unwrap();
        }
        let names = store.list().unwrap();
        assert_eq!(
            names,
            vec![
                log_file_name(3, 0),
                log_file_name(3, 1),
                log_file_name(3, 2)
            ]
        );
        assert_eq!(parse_log_file_name(&names[2]), Some((3, 2)));
    }

    #[test]
    fn crash_script_parsing() {
        let plan = CrashPlan::parse(
            "# comment\ncrash after 4096 bytes on dev1\n\ncrash at event 17 # trailing\n",
        )
        .unwrap();
        assert_eq!(
            plan.points,
            vec![
                CrashPoint::AfterBytes {
                    device: 1,
                    bytes: 4096
                },
                CrashPoint::AtEvent { event: 17 }
            ]
        );
        let err = CrashPlan::parse("crash soon").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn dir_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirStore::open(dir.path()).unwrap();
        let mut f = store.create_append("wal-0-000000.log").unwrap();
        f.append(b"abc").unwrap();
        f.sync().unwrap();
        store.write_atomic("meta", b"m1").unwrap();
        store.write_atomic("meta", b"m2").unwrap();
        assert_eq!(store.read("wal-0-000000.log").unwrap(), b"abc");
        assert_eq!(store.read("meta").unwrap(), b"m2");
        assert_eq!(store.list().unwrap(), vec!["meta", "wal-0-000000.log"]);
    }

    #[test]
    fn pacing_respects_bandwidth() {
        let model = DeviceModel {
            bandwidth: 4.0e6,
            latency: Duration::ZERO,
        };
        let mut dev = Device::open(
            0,
            Arc::new(NullStore),
            u64::MAX,
            Some(model),
            Arc::new(CrashSwitch::disarmed()),
        )
        .unwrap();
        let start = Instant::now();
        let mut starts = Vec::new();
        for _ in 0..200 {
            starts.push(start.elapsed());
            dev.append_and_sync(&[0; 2000]).unwrap();
        }
        // 400 KB at 4 MB/s takes at least 100 ms.
        assert!(start.elapsed() >= Duration::from_millis(99));
        let window = Duration::from_millis(100);
        let cap = 4.0e6 * 0.1;
        for (i, t) in starts.iter().enumerate() {
            let bytes = starts[i..].iter().take_while(|s| **s < *t + window).count() * 2000;
            assert!(bytes as f64 <= cap * 1.05, "{bytes} B in one window");
        }
    }
}
