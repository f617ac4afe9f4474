//! Log record wire format.
//!
//! Every transaction with a non-empty write set produces exactly one record
//! holding all of its writes. Records are little-endian and self-delimiting:
//!
//! ```text
//! offset  size  field
//!      0     1  magic (0xA7)
//!      1     1  flags (bit 0: write-only transaction; other bits zero)
//!      2     2  reserved, zero
//!      4     4  total_len (whole record, header and checksum included)
//!      8     8  ssn
//!     16     8  txn_id
//!     24     4  entry_count
//!     28     .  entries: key u64, value_len u32, value bytes
//!  len-4     4  crc32 (IEEE) over bytes [0, len-4)
//! ```
//!
//! A record whose checksum does not validate, or which is cut short, decodes
//! to [`TornRecord`]. During recovery this marks the end of the durable
//! prefix of a log file rather than a fault.

use std::fmt;

use crate::types::{Key, Ssn, TxnId};

pub const RECORD_MAGIC: u8 = 0xA7;
pub const HEADER_LEN: usize = 28;
pub const TRAILER_LEN: usize = 4;
/// Key plus value length prefix.
pub const ENTRY_PREFIX_LEN: usize = 12;
pub const MIN_RECORD_LEN: usize = HEADER_LEN + TRAILER_LEN;

const FLAG_WRITE_ONLY: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub key: Key,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub ssn: Ssn,
    pub txn_id: TxnId,
    pub write_only: bool,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TornReason {
    Truncated,
    BadMagic,
    BadLength,
    Malformed,
    ChecksumMismatch,
}

/// The bytes at a record boundary do not hold a complete, intact record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TornRecord {
    pub reason: TornReason,
}

impl fmt::Display for TornRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "torn log record ({:?})", self.reason)
    }
}

impl std::error::Error for TornRecord {}

fn torn(reason: TornReason) -> TornRecord {
    TornRecord { reason }
}

/// Serialized length of a record with values of the given lengths.
pub fn encoded_len<I>(value_lens: I) -> usize
where
    I: IntoIterator<Item = usize>,
{
    MIN_RECORD_LEN
        + value_lens
            .into_iter()
            .map(|len| ENTRY_PREFIX_LEN + len)
            .sum::<usize>()
}

/// Encodes a record from borrowed parts; `out` must be exactly the encoded
/// length of `entries`.
pub fn encode_parts<'a, I>(out: &mut [u8], ssn: Ssn, txn_id: TxnId, write_only: bool, entries: I)
where
    I: IntoIterator<Item = (Key, &'a [u8])>,
{
    let total = out.len();
    assert!(total >= MIN_RECORD_LEN, "record slot too small");
    assert!(total <= u32::MAX as usize, "record exceeds u32 length");
    out[0] = RECORD_MAGIC;
    out[1] = if write_only { FLAG_WRITE_ONLY } else { 0 };
    out[2..4].copy_from_slice(&0u16.to_le_bytes());
    out[4..8].copy_from_slice(&(total as u32).to_le_bytes());
    out[8..16].copy_from_slice(&ssn.0.to_le_bytes());
    out[16..24].copy_from_slice(&txn_id.0.to_le_bytes());
    let mut pos = HEADER_LEN;
    let mut count = 0u32;
    for (key, value) in entries {
        out[pos..pos + 8].copy_from_slice(&key.to_le_bytes());
        out[pos + 8..pos + 12].copy_from_slice(&(value.len() as u32).to_le_bytes());
        pos += ENTRY_PREFIX_LEN;
        out[pos..pos + value.len()].copy_from_slice(value);
        pos += value.len();
        count += 1;
    }
    assert_eq!(pos + TRAILER_LEN, total, "record slot size mismatch");
    out[24..28].copy_from_slice(&count.to_le_bytes());
    let crc = crc32fast::hash(&out[..pos]);
    out[pos..pos + TRAILER_LEN].copy_from_slice(&crc.to_le_bytes());
}

impl LogRecord {
    /// Empty write-only record; loggers use these to push an idle buffer's
    /// sequence number forward.
    pub fn heartbeat(ssn: Ssn) -> LogRecord {
        LogRecord {
            ssn,
            txn_id: TxnId::NONE,
            write_only: true,
            entries: Vec::new(),
        }
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_heartbeat(&self) -> bool {
        self.txn_id == TxnId::NONE && self.entries.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.entries.iter().map(|e| e.value.len()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.encoded_len()];
        self.encode_into(&mut out);
        out
    }

    /// Writes the record into `out`, which must be exactly
    /// [`LogRecord::encoded_len`] bytes long.
    pub fn encode_into(&self, out: &mut [u8]) {
        encode_parts(
            out,
            self.ssn,
            self.txn_id,
            self.write_only,
            self.entries.iter().map(|e| (e.key, e.value.as_slice())),
        );
    }

    /// Decodes the record that starts at `bytes[0]`. Trailing bytes after the
    /// record are ignored; use [`LogRecord::encoded_len`] to step over it.
    pub fn decode(bytes: &[u8]) -> Result<LogRecord, TornRecord> {
        if bytes.len() < HEADER_LEN {
            return Err(torn(TornReason::Truncated));
        }
        if bytes[0] != RECORD_MAGIC {
            return Err(torn(TornReason::BadMagic));
        }
        let flags = bytes[1];
        if flags & !FLAG_WRITE_ONLY != 0 || bytes[2] != 0 || bytes[3] != 0 {
            return Err(torn(TornReason::Malformed));
        }
        let total = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if total < MIN_RECORD_LEN {
            return Err(torn(TornReason::BadLength));
        }
        if total > bytes.len() {
            return Err(torn(TornReason::Truncated));
        }
        let body_end = total - TRAILER_LEN;
        let stored = u32::from_le_bytes(bytes[body_end..total].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(torn(TornReason::ChecksumMismatch));
        }

        let ssn = Ssn(u64::from_le_bytes(bytes[8..16].try_into().unwrap()));
        let txn_id = TxnId(u64::from_le_bytes(bytes[16..24].try_into().unwrap()));
        let count = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        let mut pos = HEADER_LEN;
        for _ in 0..count {
            if pos + ENTRY_PREFIX_LEN > body_end {
                return Err(torn(TornReason::Malformed));
            }
            let key = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            let len = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize;
            pos += ENTRY_PREFIX_LEN;
            if pos + len > body_end {
                return Err(torn(TornReason::Malformed));
            }
            entries.push(LogEntry {
                key,
                value: bytes[pos..pos + len].to_vec(),
            });
            pos += len;
        }
        if pos != body_end {
            return Err(torn(TornReason::Malformed));
        }
        Ok(LogRecord {
            ssn,
            txn_id,
            write_only: flags & FLAG_WRITE_ONLY != 0,
            entries,
        })
    }
}

/// Result of scanning a log file from its first byte.
#[derive(Debug, Default)]
pub struct LogScan {
    pub records: Vec<LogRecord>,
    /// Length of the intact prefix.
    pub valid_len: usize,
    /// Set when bytes remain after the intact prefix.
    pub torn: Option<TornRecord>,
}

/// Decodes records back to back until the bytes run out or a torn record
/// is met.
pub fn scan_records(bytes: &[u8]) -> LogScan {
    let mut scan = LogScan::default();
    let mut pos = 0;
    while pos < bytes.len() {
        match LogRecord::decode(&bytes[pos..]) {
            Ok(record) => {
                pos += record.encoded_len();
                scan.records.push(record);
            }
            Err(t) => {
                scan.torn = Some(t);
                break;
            }
        }
    }
    scan.valid_len = pos;
    scan
}
