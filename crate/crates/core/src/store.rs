//! Node-local storage for static, updateable, and targeted records.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{verify_block, BlockReject, Difficulty, TargetedBlock, DEFAULT_MAX_BLOCK_SIZE};
use crate::ident::{hash, key_id, Keypair, KeyId, PublicKey};

pub const DEFAULT_NETWORK_FLOOR: u32 = 16;

/// Why a store refused a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reject {
    Block(BlockReject),
    EmptyPayload,
    Oversize,
    CapacityExceeded,
    BadSignature,
    StaleVersion,
    InvalidKey,
}

impl From<BlockReject> for Reject {
    fn from(r: BlockReject) -> Self {
        Reject::Block(r)
    }
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reject::Block(r) => r.fmt(f),
            Reject::EmptyPayload => f.write_str("empty-payload"),
            Reject::Oversize => f.write_str("oversize"),
            Reject::CapacityExceeded => f.write_str("capacity-exceeded"),
            Reject::BadSignature => f.write_str("bad-signature"),
            Reject::StaleVersion => f.write_str("stale-version"),
            Reject::InvalidKey => f.write_str("invalid-key"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stored {
    New,
    /// Identical record already present.
    Duplicate,
}

/// A signed, versioned record stored under `key_id(public_key)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateableRecord {
    pub public_key: PublicKey,
    pub version: u64,
    pub data: Vec<u8>,
    pub signature: Vec<u8>,
}

impl UpdateableRecord {
    pub fn signed(kp: &Keypair, version: u64, data: Vec<u8>) -> Self {
        let signature = kp.sign(&Self::signing_bytes(version, &data));
        UpdateableRecord { public_key: kp.public.clone(), version, data, signature }
    }

    /// version (8 bytes big-endian) || data
    pub fn signing_bytes(version: u64, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + data.len());
        out.extend_from_slice(&version.to_be_bytes());
        out.extend_from_slice(data);
        out
    }

    pub fn verify(&self) -> bool {
        self.public_key.verify(&Self::signing_bytes(self.version, &self.data), &self.signature)
    }

    pub fn id(&self) -> Option<KeyId> {
        key_id(&self.public_key).ok()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorePolicy {
    pub min_targeted_difficulty: Difficulty,
    pub max_block_size: usize,
    pub max_static: usize,
    pub max_updateable: usize,
    pub max_targeted: usize,
}

impl Default for StorePolicy {
    fn default() -> Self {
        StorePolicy {
            min_targeted_difficulty: Difficulty::new(DEFAULT_NETWORK_FLOOR).expect("valid"),
            max_block_size: DEFAULT_MAX_BLOCK_SIZE,
            max_static: 100_000,
            max_updateable: 100_000,
            max_targeted: 100_000,
        }
    }
}

/// Inclusive lower bound for the next scan page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanCursor {
    pub next_id: KeyId,
    /// Set once a page ended on [`KeyId::MAX`]; nothing can follow.
    #[serde(default)]
    pub exhausted: bool,
}

impl ScanCursor {
    pub fn start() -> Self {
        ScanCursor { next_id: KeyId::ZERO, exhausted: false }
    }

    pub fn after(id: &KeyId) -> Self {
        match id.checked_increment() {
            Some(next_id) => ScanCursor { next_id, exhausted: false },
            None => ScanCursor { next_id: KeyId::MAX, exhausted: true },
        }
    }
}

impl Default for ScanCursor {
    fn default() -> Self {
        Self::start()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPage {
    pub blocks: Vec<TargetedBlock>,
    pub next: ScanCursor,
}

impl ScanPage {
    /// Keep the `limit` lowest-ID blocks at or after `cursor` and derive the
    /// follow-on cursor.
    pub fn from_sorted(blocks: BTreeMap<KeyId, TargetedBlock>, cursor: &ScanCursor, limit: usize) -> Self {
        if cursor.exhausted {
            return ScanPage { blocks: Vec::new(), next: *cursor };
        }
        let blocks: Vec<TargetedBlock> = blocks
            .into_iter()
            .filter(|(id, _)| *id >= cursor.next_id)
            .take(limit)
            .map(|(_, b)| b)
            .collect();
        let next = blocks.last().map_or(*cursor, |b| ScanCursor::after(&b.id()));
        ScanPage { blocks, next }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupancy {
    pub statics: usize,
    pub updateables: usize,
    pub targeted: usize,
}

#[derive(Debug, Default, Clone)]
pub struct Store {
    policy: StorePolicy,
    statics: BTreeMap<KeyId, Vec<u8>>,
    updateables: BTreeMap<KeyId, UpdateableRecord>,
    targeted: BTreeMap<KeyId, TargetedBlock>,
}

impl Store {
    pub fn new(policy: StorePolicy) -> Self {
        Store { policy, ..Default::default() }
    }

    pub fn policy(&self) -> &StorePolicy {
        &self.policy
    }

    pub fn put_static(&mut self, data: &[u8]) -> Result<KeyId, Reject> {
        self.check_size(data)?;
        let id = hash(data);
        if !self.statics.contains_key(&id) {
            if self.statics.len() >= self.policy.max_static {
                return Err(Reject::CapacityExceeded);
            }
            self.statics.insert(id, data.to_vec());
        }
        Ok(id)
    }

    pub fn get_static(&self, id: &KeyId) -> Option<&[u8]> {
        self.statics.get(id).map(Vec::as_slice)
    }

    pub fn put_updateable(&mut self, rec: &UpdateableRecord) -> Result<Stored, Reject> {
        if rec.data.len() > self.policy.max_block_size {
            return Err(Reject::Oversize);
        }
        let id = rec.id().ok_or(Reject::InvalidKey)?;
        if !rec.verify() {
            return Err(Reject::BadSignature);
        }
        match self.updateables.get(&id) {
            Some(existing) if existing == rec => return Ok(Stored::Duplicate),
            Some(existing) if existing.version >= rec.version => return Err(Reject::StaleVersion),
            None if self.updateables.len() >= self.policy.max_updateable => {
                return Err(Reject::CapacityExceeded)
            }
            _ => {}
        }
        self.updateables.insert(id, rec.clone());
        Ok(Stored::New)
    }

    pub fn get_updateable(&self, id: &KeyId) -> Option<&UpdateableRecord> {
        self.updateables.get(id)
    }

    pub fn put_targeted(&mut self, tb: &TargetedBlock) -> Result<Stored, Reject> {
        self.check_size(&tb.data)?;
        verify_block(tb, None, self.policy.min_targeted_difficulty)?;
        let id = tb.id();
        if self.targeted.contains_key(&id) {
            return Ok(Stored::Duplicate);
        }
        if self.targeted.len() >= self.policy.max_targeted {
            return Err(Reject::CapacityExceeded);
        }
        self.targeted.insert(id, tb.clone());
        Ok(Stored::New)
    }

    pub fn get_targeted(&self, id: &KeyId) -> Option<&TargetedBlock> {
        self.targeted.get(id)
    }

    /// Blocks with ID ≥ cursor, ID within the `d`-bit prefix region of
    /// `target_key`, and header naming `target_key` exactly, ascending by ID.
    pub fn scan_targeted(&self, target_key: &KeyId, d: Difficulty, cursor: &ScanCursor, limit: usize) -> ScanPage {
        if cursor.exhausted || limit == 0 {
            return ScanPage { blocks: Vec::new(), next: *cursor };
        }
        let (low, high) = target_key.prefix_range(d.bits());
        let start = low.max(cursor.next_id);
        if start > high {
            return ScanPage { blocks: Vec::new(), next: *cursor };
        }
        let blocks: Vec<TargetedBlock> = self
            .targeted
            .range(start..=high)
            .filter(|(_, b)| &b.header.target_key == target_key)
            .take(limit)
            .map(|(_, b)| b.clone())
            .collect();
        let next = blocks.last().map_or(*cursor, |b| ScanCursor::after(&b.id()));
        ScanPage { blocks, next }
    }

    pub fn targeted_blocks(&self) -> impl Iterator<Item = &TargetedBlock> {
        self.targeted.values()
    }

    pub fn updateable_records(&self) -> impl Iterator<Item = &UpdateableRecord> {
        self.updateables.values()
    }

    pub fn static_values(&self) -> impl Iterator<Item = &[u8]> {
        self.statics.values().map(Vec::as_slice)
    }

    pub fn occupancy(&self) -> Occupancy {
        Occupancy {
            statics: self.statics.len(),
            updateables: self.updateables.len(),
            targeted: self.targeted.len(),
        }
    }

    fn check_size(&self, data: &[u8]) -> Result<(), Reject> {
        if data.is_empty() {
            return Err(Reject::EmptyPayload);
        }
        if data.len() > self.policy.max_block_size {
            return Err(Reject::Oversize);
        }
        Ok(())
    }

    /// Writes every record as `kind (1) || length (4, big-endian) || body`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        for data in self.statics.values() {
            write_record(&mut w, KIND_STATIC, data)?;
        }
        for rec in self.updateables.values() {
            write_record(&mut w, KIND_UPDATEABLE, &encode_updateable(rec))?;
        }
        for tb in self.targeted.values() {
            write_record(&mut w, KIND_TARGETED, &tb.to_wire())?;
        }
        Ok(())
    }

    /// Reloads a snapshot, re-validating every record against `policy`.
    pub fn read_snapshot<R: Read>(mut r: R, policy: StorePolicy) -> Result<Self, SnapshotError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(SnapshotError::Format("bad magic"));
        }
        let mut store = Store::new(policy);
        loop {
            let mut kind = [0u8; 1];
            match r.read_exact(&mut kind) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
            r.read_exact(&mut body)?;
            match kind[0] {
                KIND_STATIC => {
                    store.put_static(&body)?;
                }
                KIND_UPDATEABLE => {
                    store.put_updateable(&decode_updateable(&body)?)?;
                }
                KIND_TARGETED => {
                    let tb = TargetedBlock::from_wire(&body).map_err(|_| SnapshotError::Format("bad block"))?;
                    store.put_targeted(&tb)?;
                }
                _ => return Err(SnapshotError::Format("unknown record kind")),
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io: {0}")]
    Io(#[from] io::Error),
    #[error("snapshot format: {0}")]
    Format(&'static str),
    #[error("snapshot record rejected: {0}")]
    Rejected(#[from] Reject),
}

impl std::error::Error for Reject {}

const SNAPSHOT_MAGIC: &[u8; 5] = b"DPST1";
const KIND_STATIC: u8 = 1;
const KIND_UPDATEABLE: u8 = 2;
const KIND_TARGETED: u8 = 3;

fn write_record<W: Write>(w: &mut W, kind: u8, body: &[u8]) -> io::Result<()> {
    w.write_all(&[kind])?;
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)
}

fn encode_updateable(rec: &UpdateableRecord) -> Vec<u8> {
    let mut out = Vec::new();
    for field in [rec.public_key.as_bytes(), &rec.data, &rec.signature] {
        out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        out.extend_from_slice(field);
    }
    out.extend_from_slice(&rec.version.to_be_bytes());
    out
}

fn decode_updateable(mut bytes: &[u8]) -> Result<UpdateableRecord, SnapshotError> {
    let mut take = |n: usize| -> Result<Vec<u8>, SnapshotError> {
        if bytes.len() < n {
            return Err(SnapshotError::Format("truncated updateable record"));
        }
        let (head, tail) = bytes.split_at(n);
        bytes = tail;
        Ok(head.to_vec())
    };
    let mut field = || -> Result<Vec<u8>, SnapshotError> {
        let len = u32::from_be_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        take(len)
    };
    let public_key = PublicKey::from_bytes(field()?);
    let data = field()?;
    let signature = field()?;
    let version = u64::from_be_bytes(take(8)?.try_into().expect("8 bytes"));
    Ok(UpdateableRecord { public_key, version, data, signature })
}
