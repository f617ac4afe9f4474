//! Domain types shared by every layer of the engine.

use std::fmt;
use std::time::Duration;

use thiserror::Error;

/// Primary key. The key space is a dense range of 8-byte integers.
pub type Key = u64;

/// Scalable sequence number.
///
/// `Ssn::ZERO` marks the initial, never-written state; every allocated
/// sequence number is at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Ssn(pub u64);

impl Ssn {
    pub const ZERO: Ssn = Ssn(0);

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn next(self) -> Ssn {
        Ssn(self.0 + 1)
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Ssn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Transaction identifier. Zero is reserved: it marks a free lock word and
/// the synthetic records loggers emit to keep idle buffers moving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TxnId(pub u64);

impl TxnId {
    pub const NONE: TxnId = TxnId(0);

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

/// How a transaction participates in the commit stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnClass {
    /// Only writes: committed as soon as its own record is durable.
    WriteOnly,
    /// Reads and writes: may carry RAW dependencies.
    HasReads,
    /// No writes and therefore no log record.
    ReadOnly,
}

impl TxnClass {
    pub fn classify(reads: usize, writes: usize) -> TxnClass {
        if writes == 0 {
            TxnClass::ReadOnly
        } else if reads == 0 {
            TxnClass::WriteOnly
        } else {
            TxnClass::HasReads
        }
    }

    pub fn has_record(self) -> bool {
        !matches!(self, TxnClass::ReadOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Active,
    Validated,
    PreCommitted,
    Committed,
    Aborted,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("at least one log buffer is required")]
    NoBuffers,
    #[error("segment ring must hold at least two segments, got {0}")]
    RingTooSmall(usize),
    #[error("io unit {io_unit} B exceeds buffer capacity / ring size ({limit} B)")]
    IoUnitTooLarge { io_unit: usize, limit: usize },
    #[error("half-full threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("checkpoint thread and file counts must be positive")]
    BadCheckpointFanout,
    #[error("{0}")]
    Invalid(String),
}

/// Engine configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub num_buffers: usize,
    /// Bytes per log buffer.
    pub buffer_capacity: usize,
    /// Segment size at which a worker closes the generating segment.
    pub io_unit_size: usize,
    /// Group-commit timer.
    pub flush_interval: Duration,
    /// Fraction of the buffer that, once pending, forces an early flush.
    pub half_full_threshold: f64,
    pub segment_ring_size: usize,
    pub checkpoint_threads: usize,
    pub checkpoint_files_per_thread: usize,
    /// Log files rotate once they would grow past this many bytes.
    pub log_file_rotate_bytes: u64,
    /// Logger polling cadence.
    pub logger_poll: Duration,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            num_buffers: 2,
            buffer_capacity: 30 * 1024 * 1024,
            io_unit_size: 16 * 1024,
            flush_interval: Duration::from_millis(5),
            half_full_threshold: 0.5,
            segment_ring_size: 64,
            checkpoint_threads: 2,
            checkpoint_files_per_thread: 2,
            log_file_rotate_bytes: 256 * 1024 * 1024,
            logger_poll: Duration::from_micros(500),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_buffers == 0 {
            return Err(ConfigError::NoBuffers);
        }
        if self.segment_ring_size < 2 {
            return Err(ConfigError::RingTooSmall(self.segment_ring_size));
        }
        let limit = self.buffer_capacity / self.segment_ring_size;
        if self.io_unit_size == 0 || self.io_unit_size > limit {
            return Err(ConfigError::IoUnitTooLarge {
                io_unit: self.io_unit_size,
                limit,
            });
        }
        if !(self.half_full_threshold > 0.0 && self.half_full_threshold <= 1.0) {
            return Err(ConfigError::BadThreshold(self.half_full_threshold));
        }
        if self.checkpoint_threads == 0 || self.checkpoint_files_per_thread == 0 {
            return Err(ConfigError::BadCheckpointFanout);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_follows_set_shapes() {
        assert_eq!(TxnClass::classify(0, 1), TxnClass::WriteOnly);
        assert_eq!(TxnClass::classify(2, 1), TxnClass::HasReads);
        assert_eq!(TxnClass::classify(3, 0), TxnClass::ReadOnly);
        assert_eq!(TxnClass::classify(0, 0), TxnClass::ReadOnly);
    }

    #[test]
    fn default_config_is_valid() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.buffer_capacity, 30 * 1024 * 1024);
        assert_eq!(c.io_unit_size, 16 * 1024);
        assert_eq!(c.flush_interval, Duration::from_millis(5));
        assert_eq!(c.half_full_threshold, 0.5);
    }

    #[test]
    fn io_unit_must_fit_ring() {
        let c = Config {
            buffer_capacity: 1024,
            segment_ring_size: 8,
            io_unit_size: 256,
            ..Config::default()
        };
        assert_eq!(
            c.validate(),
            Err(ConfigError::IoUnitTooLarge {
                io_unit: 256,
                limit: 128
            })
        );
    }
}
