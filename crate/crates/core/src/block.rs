//! TargetedBlock: a proof-of-work header bound to one target key, plus the
//! payload it commits to.
//!
//! The block ID is the hash of the 136-byte header only, so mining cost is
//! independent of payload size. The work condition is that the block ID
//! agrees with the header's target key on at least `difficulty` leading bits.

use std::fmt;
use std::thread;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ident::{hash, KeyId, KEY_ID_BITS, KEY_ID_LEN};

/// nonce (8) || target_key (64) || block_hash (64)
pub const HEADER_LEN: usize = 8 + 2 * KEY_ID_LEN;
pub const DEFAULT_MAX_BLOCK_SIZE: usize = 32_768;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("difficulty {0} out of range [0, 512]")]
    InvalidDifficulty(u32),
    #[error("payload must not be empty")]
    EmptyPayload,
    #[error("payload of {len} bytes exceeds the {max}-byte block limit")]
    Oversize { len: usize, max: usize },
    #[error("mining budget exhausted after {attempts} attempts")]
    BudgetExhausted { attempts: u64 },
    #[error("malformed block encoding: {0}")]
    Malformed(&'static str),
}

/// Why a block failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockReject {
    BlockHashMismatch,
    InsufficientWork,
    TargetMismatch,
}

impl fmt::Display for BlockReject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockReject::BlockHashMismatch => "block-hash-mismatch",
            BlockReject::InsufficientWork => "insufficient-work",
            BlockReject::TargetMismatch => "target-mismatch",
        })
    }
}

/// Number of leading bits of the target key a block ID must match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Difficulty(u16);

impl Difficulty {
    pub const ZERO: Difficulty = Difficulty(0);

    pub fn new(bits: u32) -> Result<Self, BlockError> {
        if bits > KEY_ID_BITS {
            return Err(BlockError::InvalidDifficulty(bits));
        }
        Ok(Difficulty(bits as u16))
    }

    pub fn bits(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Difficulty {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.bits())
    }
}

impl<'de> Deserialize<'de> for Difficulty {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Difficulty::new(u32::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockHeader {
    pub nonce: u64,
    pub target_key: KeyId,
    pub block_hash: KeyId,
}

impl BlockHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.nonce.to_be_bytes());
        out[8..8 + KEY_ID_LEN].copy_from_slice(self.target_key.as_bytes());
        out[8 + KEY_ID_LEN..].copy_from_slice(self.block_hash.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BlockError> {
        if bytes.len() != HEADER_LEN {
            return Err(BlockError::Malformed("header must be 136 bytes"));
        }
        let nonce = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
        let target_key = KeyId::from_slice(&bytes[8..8 + KEY_ID_LEN]).expect("64 bytes");
        let block_hash = KeyId::from_slice(&bytes[8 + KEY_ID_LEN..]).expect("64 bytes");
        Ok(BlockHeader { nonce, target_key, block_hash })
    }

    /// The storage ID: hash of the encoded header alone.
    pub fn block_id(&self) -> KeyId {
        hash(&self.encode())
    }
}

pub fn matched_prefix_bits(a: &KeyId, b: &KeyId) -> u32 {
    a.xor(b).leading_zeros()
}

pub fn pow_valid(header: &BlockHeader, d: Difficulty) -> bool {
    matched_prefix_bits(&header.block_id(), &header.target_key) >= d.bits()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetedBlock {
    pub header: BlockHeader,
    pub data: Vec<u8>,
}

impl TargetedBlock {
    pub fn id(&self) -> KeyId {
        self.header.block_id()
    }

    /// header || u32 big-endian data length || data
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 + self.data.len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&(self.data.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, BlockError> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(BlockError::Malformed("truncated block"));
        }
        let header = BlockHeader::decode(&bytes[..HEADER_LEN])?;
        let len = u32::from_be_bytes(bytes[HEADER_LEN..HEADER_LEN + 4].try_into().expect("4 bytes")) as usize;
        let data = &bytes[HEADER_LEN + 4..];
        if data.len() != len {
            return Err(BlockError::Malformed("data length mismatch"));
        }
        Ok(TargetedBlock { header, data: data.to_vec() })
    }
}

/// Accept iff the payload matches `block_hash`, the work condition holds at
/// `d`, and (when given) the header names exactly `expected_target`.
pub fn verify_block(
    tb: &TargetedBlock,
    expected_target: Option<&KeyId>,
    d: Difficulty,
) -> Result<(), BlockReject> {
    if hash(&tb.data) != tb.header.block_hash {
        return Err(BlockReject::BlockHashMismatch);
    }
    if !pow_valid(&tb.header, d) {
        return Err(BlockReject::InsufficientWork);
    }
    if let Some(target) = expected_target {
        if &tb.header.target_key != target {
            return Err(BlockReject::TargetMismatch);
        }
    }
    Ok(())
}

pub fn check_payload(data: &[u8], max: usize) -> Result<(), BlockError> {
    if data.is_empty() {
        return Err(BlockError::EmptyPayload);
    }
    if data.len() > max {
        return Err(BlockError::Oversize { len: data.len(), max });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Mined {
    pub block: TargetedBlock,
    /// Header hashes performed.
    pub attempts: u64,
    /// Total bytes fed to the hash function inside the search loop.
    pub bytes_hashed: u64,
}

/// Search nonces `start_nonce, start_nonce + 1, ...` (wrapping) until the
/// header satisfies `d`. `max_attempts = None` searches without bound.
pub fn mine(
    target_key: KeyId,
    d: Difficulty,
    data: &[u8],
    start_nonce: u64,
    max_attempts: Option<u64>,
) -> Result<Mined, BlockError> {
    check_payload(data, DEFAULT_MAX_BLOCK_SIZE)?;
    let block_hash = hash(data);
    let header = BlockHeader { nonce: start_nonce, target_key, block_hash };
    match search(header, d, 1, max_attempts, None) {
        Search::Found { nonce, attempts } => Ok(Mined {
            block: TargetedBlock {
                header: BlockHeader { nonce, ..header },
                data: data.to_vec(),
            },
            attempts,
            bytes_hashed: attempts * HEADER_LEN as u64,
        }),
        Search::Exhausted { attempts } | Search::Cancelled { attempts } => {
            Err(BlockError::BudgetExhausted { attempts })
        }
    }
}

/// Mine with `workers` threads, worker `i` trying nonces
/// `start_nonce + i, start_nonce + i + workers, ...`. First valid header wins;
/// `attempts` sums the work of all workers.
pub fn mine_parallel(
    target_key: KeyId,
    d: Difficulty,
    data: &[u8],
    start_nonce: u64,
    workers: usize,
) -> Result<Mined, BlockError> {
    check_payload(data, DEFAULT_MAX_BLOCK_SIZE)?;
    let workers = workers.max(1);
    let block_hash = hash(data);
    let stop = AtomicBool::new(false);
    let results: Vec<Search> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|i| {
                let stop = &stop;
                let header = BlockHeader {
                    nonce: start_nonce.wrapping_add(i as u64),
                    target_key,
                    block_hash,
                };
                scope.spawn(move || {
                    let r = search(header, d, workers as u64, None, Some(stop));
                    if matches!(r, Search::Found { .. }) {
                        stop.store(true, Ordering::Relaxed);
                    }
                    r
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("mining worker panicked")).collect()
    });
    let attempts: u64 = results.iter().map(Search::attempts).sum();
    let nonce = results
        .iter()
        .find_map(|r| match r {
            Search::Found { nonce, .. } => Some(*nonce),
            _ => None,
        })
        .ok_or(BlockError::BudgetExhausted { attempts })?;
    Ok(Mined {
        block: TargetedBlock {
            header: BlockHeader { nonce, target_key, block_hash },
            data: data.to_vec(),
        },
        attempts,
        bytes_hashed: attempts * HEADER_LEN as u64,
    })
}

enum Search {
    Found { nonce: u64, attempts: u64 },
    Exhausted { attempts: u64 },
    Cancelled { attempts: u64 },
}

impl Search {
    fn attempts(&self) -> u64 {
        match self {
            Search::Found { attempts, .. }
            | Search::Exhausted { attempts }
            | Search::Cancelled { attempts } => *attempts,
        }
    }
}

fn search(
    header: BlockHeader,
    d: Difficulty,
    stride: u64,
    max_attempts: Option<u64>,
    stop: Option<&AtomicBool>,
) -> Search {
    let mut buf = header.encode();
    let mut nonce = header.nonce;
    let target = header.target_key;
    let mut attempts = 0u64;
    loop {
        if max_attempts.is_some_and(|m| attempts >= m) {
            return Search::Exhausted { attempts };
        }
        if attempts.is_multiple_of(4096) && stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            return Search::Cancelled { attempts };
        }
        buf[..8].copy_from_slice(&nonce.to_be_bytes());
        attempts += 1;
        if matched_prefix_bits(&hash(&buf), &target) >= d.bits() {
            return Search::Found { nonce, attempts };
        }
        nonce = nonce.wrapping_add(stride);
    }
}
