//! Dpush: receiver-published sites, unsolicited proof-of-work sends, inbox
//! scanning, target rotation, and zero-work follow channels.
//!
//! A receiver's address is the ID of an updateable record signed by their
//! keypair. The record holds a JSON [`DpushSite`] advertising one or more
//! `(target_key, difficulty)` pairs. Senders mine a [`TargetedBlock`] into
//! one of those regions; the receiver pages through the regions with the
//! DHT range scan.
//!
//! Everything here is written against the [`Dht`] trait, so the same code
//! drives the simulator and the single-node CLI world.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::block::{check_payload, mine, BlockError, Difficulty, DEFAULT_MAX_BLOCK_SIZE};
use crate::ident::{key_id, Keypair, KeyId};
use crate::routing::{Dht, DhtError};
use crate::store::{ScanCursor, UpdateableRecord};

pub const DPUSH_SITE_KIND: &str = "dpush/site";
pub const DMAIL_SITE_KIND: &str = "dmail/site";
/// Advertised difficulty for new addresses; above the default network floor.
pub const DEFAULT_DIFFICULTY: u32 = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DpushError {
    #[error("not found")]
    NotFound,
    #[error("address-mismatch: record key does not hash to {0:?}")]
    AddressMismatch(KeyId),
    #[error("bad-signature")]
    BadSignature,
    #[error("malformed-site: {0}")]
    MalformedSite(String),
    #[error("site has no target #{0}")]
    NoSuchTarget(usize),
    #[error("no retired target {0:?}")]
    NoSuchRetired(KeyId),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Dht(DhtError),
}

impl From<DhtError> for DpushError {
    fn from(e: DhtError) -> Self {
        match e {
            DhtError::NotFound => DpushError::NotFound,
            other => DpushError::Dht(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteTarget {
    pub target_key: KeyId,
    pub difficulty: Difficulty,
}

/// Receiver metadata published under the address.
///
/// Unknown top-level fields survive a parse/serialize round trip in
/// `other`; the Dmail layer keeps its `enc` object there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpushSite {
    pub kind: String,
    pub targets: Vec<SiteTarget>,
    #[serde(default)]
    pub ext: BTreeMap<String, Value>,
    #[serde(flatten)]
    pub other: BTreeMap<String, Value>,
}

impl DpushSite {
    pub fn new(kind: &str, targets: Vec<SiteTarget>) -> Self {
        DpushSite { kind: kind.to_string(), targets, ext: BTreeMap::new(), other: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<(), DpushError> {
        if self.kind != DPUSH_SITE_KIND && self.kind != DMAIL_SITE_KIND {
            return Err(DpushError::MalformedSite(format!("unknown kind {:?}", self.kind)));
        }
        if self.targets.is_empty() {
            return Err(DpushError::MalformedSite("no targets".into()));
        }
        if self.targets.iter().any(|t| t.difficulty.bits() == 0) {
            return Err(DpushError::MalformedSite("difficulty must be at least 1".into()));
        }
        Ok(())
    }

    /// Sorted keys, no insignificant whitespace.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        // serde_json's map type is ordered, so going through Value sorts
        // every object's keys.
        let value = serde_json::to_value(self).expect("site serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DpushError> {
        let site: DpushSite =
            serde_json::from_slice(bytes).map_err(|e| DpushError::MalformedSite(e.to_string()))?;
        site.validate()?;
        Ok(site)
    }
}

/// Scan progress for one advertised target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetState {
    pub target: SiteTarget,
    /// Position within the current pass over the target's region.
    pub cursor: ScanCursor,
    /// Block IDs already delivered from this target.
    #[serde(default)]
    pub seen: BTreeSet<KeyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retired_at: Option<u64>,
}

impl TargetState {
    fn fresh(target: SiteTarget) -> Self {
        TargetState { target, cursor: ScanCursor::start(), seen: BTreeSet::new(), retired_at: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Follow {
    pub id: KeyId,
    pub last_version: u64,
}

/// Persistable part of an inbox; holds no secrets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InboxSnapshot {
    pub address: KeyId,
    pub version: u64,
    pub site: DpushSite,
    pub active: Vec<TargetState>,
    pub retired: Vec<TargetState>,
    pub follows: Vec<Follow>,
}

/// Owner-side state for one address.
#[derive(Debug, Clone)]
pub struct InboxState {
    pub keypair: Keypair,
    pub address: KeyId,
    /// Version of the currently published site.
    pub version: u64,
    pub site: DpushSite,
    pub active: Vec<TargetState>,
    pub retired: Vec<TargetState>,
    pub follows: Vec<Follow>,
}

impl InboxState {
    pub fn snapshot(&self) -> InboxSnapshot {
        InboxSnapshot {
            address: self.address,
            version: self.version,
            site: self.site.clone(),
            active: self.active.clone(),
            retired: self.retired.clone(),
            follows: self.follows.clone(),
        }
    }

    pub fn restore(keypair: Keypair, snap: InboxSnapshot) -> Result<Self, DpushError> {
        if keypair.key_id() != snap.address {
            return Err(DpushError::AddressMismatch(snap.address));
        }
        Ok(InboxState {
            keypair,
            address: snap.address,
            version: snap.version,
            site: snap.site,
            active: snap.active,
            retired: snap.retired,
            follows: snap.follows,
        })
    }

    pub fn targets(&self) -> impl Iterator<Item = &TargetState> {
        self.active.iter().chain(&self.retired)
    }
}

fn random_target<R: RngCore + ?Sized>(difficulty: Difficulty, rng: &mut R) -> SiteTarget {
    SiteTarget { target_key: KeyId::random(rng), difficulty }
}

/// Sign and store `site` as version `version` of `kp`'s address.
pub fn publish_site<D: Dht>(dht: &mut D, kp: &Keypair, version: u64, site: &DpushSite) -> Result<usize, DpushError> {
    site.validate()?;
    let rec = UpdateableRecord::signed(kp, version, site.to_canonical_json());
    Ok(dht.put_updateable(&rec)?)
}

/// Publish version 1 of a one-target site and return the owner state.
pub fn create_address<D: Dht, R: RngCore + CryptoRng>(
    dht: &mut D,
    kp: Keypair,
    difficulty: Difficulty,
    rng: &mut R,
) -> Result<InboxState, DpushError> {
    let site = DpushSite::new(DPUSH_SITE_KIND, vec![random_target(difficulty, rng)]);
    create_address_with_site(dht, kp, site)
}

pub fn create_address_with_site<D: Dht>(dht: &mut D, kp: Keypair, site: DpushSite) -> Result<InboxState, DpushError> {
    publish_site(dht, &kp, 1, &site)?;
    Ok(InboxState {
        address: kp.key_id(),
        keypair: kp,
        version: 1,
        active: site.targets.iter().copied().map(TargetState::fresh).collect(),
        retired: Vec::new(),
        follows: Vec::new(),
        site,
    })
}

/// Check the record's binding to `address` and parse its site.
pub fn site_from_record(address: &KeyId, rec: &UpdateableRecord) -> Result<DpushSite, DpushError> {
    if key_id(&rec.public_key).ok().as_ref() != Some(address) {
        return Err(DpushError::AddressMismatch(*address));
    }
    if !rec.verify() {
        return Err(DpushError::BadSignature);
    }
    DpushSite::from_json(&rec.data)
}

/// Resolve the site and its version.
pub fn fetch_site<D: Dht>(dht: &mut D, address: &KeyId) -> Result<(DpushSite, u64), DpushError> {
    let rec = dht.get_updateable(address)?;
    Ok((site_from_record(address, &rec)?, rec.version))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendOptions {
    /// Which advertised target to mine toward; 0 is the first listed.
    pub target_index: usize,
    pub max_attempts: Option<u64>,
    pub max_block_size: usize,
}

impl Default for SendOptions {
    fn default() -> Self {
        SendOptions { target_index: 0, max_attempts: None, max_block_size: DEFAULT_MAX_BLOCK_SIZE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub block_id: KeyId,
    pub attempts: u64,
    pub target: SiteTarget,
    /// Nodes that accepted the block.
    pub replicas: usize,
}

pub fn send<D: Dht, R: RngCore>(
    dht: &mut D,
    address: &KeyId,
    payload: &[u8],
    opts: &SendOptions,
    rng: &mut R,
) -> Result<Receipt, DpushError> {
    check_payload(payload, opts.max_block_size)?;
    let (site, _) = fetch_site(dht, address)?;
    send_to_site(dht, &site, payload, opts, rng)
}

/// Mine toward an already-fetched site and store the block.
pub fn send_to_site<D: Dht, R: RngCore>(
    dht: &mut D,
    site: &DpushSite,
    payload: &[u8],
    opts: &SendOptions,
    rng: &mut R,
) -> Result<Receipt, DpushError> {
    check_payload(payload, opts.max_block_size)?;
    let target = *site.targets.get(opts.target_index).ok_or(DpushError::NoSuchTarget(opts.target_index))?;
    let mined = mine(target.target_key, target.difficulty, payload, rng.gen(), opts.max_attempts)?;
    let replicas = dht.store_targeted(&mined.block)?;
    Ok(Receipt { block_id: mined.block.id(), attempts: mined.attempts, target, replicas })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboxMessage {
    pub block_id: KeyId,
    pub target_key: KeyId,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub messages: Vec<InboxMessage>,
    /// Per-target failures; those targets keep their previous cursor.
    pub errors: Vec<(KeyId, DhtError)>,
}

/// Fetch one page of at most `limit` blocks per target, active targets
/// first, and return the ones not delivered before.
///
/// Block IDs carry no arrival order, so a block stored after the cursor
/// passed its ID would be skipped by a cursor that only moves forward. Each
/// target is therefore walked in passes: the cursor advances within a pass
/// and returns to the start of the region once a short page ends it, with
/// the seen-set keeping delivery exactly-once.
pub fn scan_inbox<D: Dht>(dht: &mut D, state: &mut InboxState, limit: usize) -> ScanReport {
    let limit = limit.max(1);
    let mut report = ScanReport::default();
    for ts in state.active.iter_mut().chain(state.retired.iter_mut()) {
        let t = ts.target;
        match dht.scan(&t.target_key, t.difficulty, &ts.cursor, limit) {
            Ok(page) => {
                let pass_done = page.blocks.len() < limit || page.next.exhausted;
                for b in page.blocks {
                    let id = b.id();
                    if ts.seen.insert(id) {
                        report.messages.push(InboxMessage { block_id: id, target_key: t.target_key, payload: b.data });
                    }
                }
                ts.cursor = if pass_done { ScanCursor::start() } else { page.next };
            }
            Err(e) => report.errors.push((t.target_key, e)),
        }
    }
    report
}

/// Scan repeatedly until a full pass over every target yields nothing new.
pub fn drain_inbox<D: Dht>(dht: &mut D, state: &mut InboxState, limit: usize) -> ScanReport {
    let at_start = |s: &InboxState| s.targets().all(|t| t.cursor == ScanCursor::start());
    let mut out = ScanReport::default();
    // A pass is clean if it began with every cursor at the start and
    // delivered nothing.
    let mut clean = at_start(state);
    loop {
        let r = scan_inbox(dht, state, limit);
        if !r.messages.is_empty() {
            clean = false;
        }
        out.messages.extend(r.messages);
        out.errors.extend(r.errors);
        if !out.errors.is_empty() {
            return out;
        }
        if at_start(state) {
            if clean {
                return out;
            }
            clean = true;
        }
    }
}

/// Replace the first target with a fresh random key at the same difficulty
/// and publish the next site version. The old target keeps being scanned
/// until [`drop_retired`]. On failure the local state is untouched.
pub fn rotate_target<D: Dht, R: RngCore>(
    dht: &mut D,
    state: &mut InboxState,
    now: u64,
    rng: &mut R,
) -> Result<SiteTarget, DpushError> {
    rotate_target_with(dht, state, now, rng, |_| {})
}

/// As [`rotate_target`], letting the caller edit the new site before it is
/// published.
pub fn rotate_target_with<D: Dht, R: RngCore, F: FnOnce(&mut DpushSite)>(
    dht: &mut D,
    state: &mut InboxState,
    now: u64,
    rng: &mut R,
    edit: F,
) -> Result<SiteTarget, DpushError> {
    let old = state.site.targets[0];
    let fresh = random_target(old.difficulty, rng);
    let mut site = state.site.clone();
    site.targets[0] = fresh;
    edit(&mut site);
    publish_site(dht, &state.keypair, state.version + 1, &site)?;

    state.version += 1;
    state.site = site;
    let mut retired = state.active.remove(0);
    retired.retired_at = Some(now);
    state.retired.push(retired);
    state.active.insert(0, TargetState::fresh(fresh));
    Ok(fresh)
}

/// Stop scanning a retired target.
pub fn drop_retired(state: &mut InboxState, target_key: &KeyId) -> Result<TargetState, DpushError> {
    let i = state
        .retired
        .iter()
        .position(|t| &t.target.target_key == target_key)
        .ok_or(DpushError::NoSuchRetired(*target_key))?;
    Ok(state.retired.remove(i))
}

/// Register an updateable-record ID to poll. Returns false if already followed.
pub fn follow(state: &mut InboxState, id: KeyId) -> bool {
    if state.follows.iter().any(|f| f.id == id) {
        return false;
    }
    state.follows.push(Follow { id, last_version: 0 });
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FollowMessage {
    pub from: KeyId,
    pub version: u64,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PollReport {
    pub messages: Vec<FollowMessage>,
    pub errors: Vec<(KeyId, DhtError)>,
}

/// Fetch every followed record; report those newer than last seen.
pub fn poll_followed<D: Dht>(dht: &mut D, state: &mut InboxState) -> PollReport {
    let mut report = PollReport::default();
    for f in &mut state.follows {
        match dht.get_updateable(&f.id) {
            Ok(rec) if rec.version > f.last_version => {
                f.last_version = rec.version;
                report.messages.push(FollowMessage { from: f.id, version: rec.version, data: rec.data });
            }
            Ok(_) => {}
            Err(e) => report.errors.push((f.id, e)),
        }
    }
    report
}

/// A sender's zero-work broadcast stream: one updateable record whose
/// successive versions are the messages.
#[derive(Debug, Clone)]
pub struct Channel {
    pub keypair: Keypair,
    pub version: u64,
}

impl Channel {
    pub fn new(keypair: Keypair) -> Self {
        Channel { keypair, version: 0 }
    }

    pub fn id(&self) -> KeyId {
        self.keypair.key_id()
    }

    pub fn publish<D: Dht>(&mut self, dht: &mut D, data: &[u8]) -> Result<usize, DpushError> {
        let rec = UpdateableRecord::signed(&self.keypair, self.version + 1, data.to_vec());
        let replicas = dht.put_updateable(&rec)?;
        self.version += 1;
        Ok(replicas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::verify_block;
    use crate::routing::{Client, DhtParams, Endpoint, NoPeers, Node, NodeInfo};
    use crate::store::StorePolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn d(bits: u32) -> Difficulty {
        Difficulty::new(bits).unwrap()
    }

    fn world(rng: &mut ChaCha20Rng) -> Node {
        let id = KeyId::random(rng);
        let policy = StorePolicy { min_targeted_difficulty: d(4), ..StorePolicy::default() };
        Node::new(NodeInfo { id, endpoint: Endpoint(0) }, DhtParams::default(), policy)
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let mut site = DpushSite::new(DPUSH_SITE_KIND, vec![SiteTarget { target_key: KeyId::ZERO, difficulty: d(8) }]);
        site.ext.insert("zeta".into(), Value::from(1));
        site.ext.insert("alpha".into(), Value::from(2));
        let json = String::from_utf8(site.to_canonical_json()).unwrap();
        let zeros = "0".repeat(128);
        assert_eq!(
            json,
            format!(
                r#"{{"ext":{{"alpha":2,"zeta":1}},"kind":"dpush/site","targets":[{{"difficulty":8,"target_key":"{zeros}"}}]}}"#
            )
        );
        assert_eq!(DpushSite::from_json(json.as_bytes()).unwrap(), site);
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let json = format!(
            r#"{{"enc":{{"scheme":"x"}},"ext":{{}},"kind":"dmail/site","targets":[{{"difficulty":3,"target_key":"{}"}}]}}"#,
            "ab".repeat(64)
        );
        let site = DpushSite::from_json(json.as_bytes()).unwrap();
        assert!(site.other.contains_key("enc"));
        assert_eq!(site.to_canonical_json(), json.as_bytes());
    }

    #[test]
    fn site_validation() {
        let t = |bits| SiteTarget { target_key: KeyId::ZERO, difficulty: d(bits) };
        assert!(DpushSite::new(DPUSH_SITE_KIND, vec![]).validate().is_err());
        assert!(DpushSite::new(DPUSH_SITE_KIND, vec![t(0)]).validate().is_err());
        assert!(DpushSite::new("other", vec![t(1)]).validate().is_err());
        assert!(DpushSite::new(DPUSH_SITE_KIND, vec![t(1)]).validate().is_ok());
        assert!(matches!(DpushSite::from_json(b"{\"kind\":\"dpush/site\",\"tar"), Err(DpushError::MalformedSite(_))));
    }

    #[test]
    fn address_is_hash_of_public_key_and_site_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let kp = Keypair::generate(&mut rng);
        let expected = crate::ident::hash(kp.public.as_bytes());
        let state = create_address(&mut dht, kp, d(6), &mut rng).unwrap();
        assert_eq!(state.address, expected);
        let (site, version) = fetch_site(&mut dht, &state.address).unwrap();
        assert_eq!(site, state.site);
        assert_eq!(version, 1);
    }

    #[test]
    fn forged_and_truncated_records() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let owner = Keypair::generate(&mut rng);
        let forger = Keypair::generate(&mut rng);
        let site = DpushSite::new(DPUSH_SITE_KIND, vec![random_target(d(8), &mut rng)]);
        let forged = UpdateableRecord::signed(&forger, 1, site.to_canonical_json());
        assert_eq!(
            site_from_record(&owner.key_id(), &forged),
            Err(DpushError::AddressMismatch(owner.key_id()))
        );
        let mut json = site.to_canonical_json();
        json.truncate(json.len() / 2);
        let truncated = UpdateableRecord::signed(&owner, 1, json);
        assert!(matches!(site_from_record(&owner.key_id(), &truncated), Err(DpushError::MalformedSite(_))));
        let mut bad_sig = UpdateableRecord::signed(&owner, 1, site.to_canonical_json());
        bad_sig.signature[0] ^= 1;
        assert_eq!(site_from_record(&owner.key_id(), &bad_sig), Err(DpushError::BadSignature));
    }

    #[test]
    fn send_to_unpublished_address() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let nobody = KeyId::random(&mut rng);
        assert_eq!(send(&mut dht, &nobody, b"hi", &SendOptions::default(), &mut rng), Err(DpushError::NotFound));
    }

    #[test]
    fn send_and_scan_with_pagination() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let mut inbox = create_address(&mut dht, Keypair::generate(&mut rng), d(6), &mut rng).unwrap();

        let empty = scan_inbox(&mut dht, &mut inbox, 2);
        assert!(empty.messages.is_empty());
        assert_eq!(inbox.active[0].cursor, ScanCursor::start());

        let mut sent = BTreeSet::new();
        for body in [&b"one"[..], b"two", b"three"] {
            let r = send(&mut dht, &inbox.address, body, &SendOptions::default(), &mut rng).unwrap();
            assert_eq!(r.target, inbox.site.targets[0]);
            sent.insert(r.block_id);
        }
        let first = scan_inbox(&mut dht, &mut inbox, 2);
        let second = scan_inbox(&mut dht, &mut inbox, 2);
        let third = scan_inbox(&mut dht, &mut inbox, 2);
        assert_eq!(first.messages.len(), 2);
        assert_eq!(second.messages.len(), 1);
        assert!(third.messages.is_empty());
        let got: BTreeSet<KeyId> = first.messages.iter().chain(&second.messages).map(|m| m.block_id).collect();
        assert_eq!(got, sent);
        // Traversal order within a page is ascending block ID.
        assert!(first.messages[0].block_id < first.messages[1].block_id);
    }

    #[test]
    fn late_block_below_cursor_is_still_delivered() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let mut inbox = create_address(&mut dht, Keypair::generate(&mut rng), d(6), &mut rng).unwrap();
        let opts = SendOptions::default();
        for i in 0..4u8 {
            send(&mut dht, &inbox.address, &[i], &opts, &mut rng).unwrap();
        }
        let first = scan_inbox(&mut dht, &mut inbox, 2);
        assert_eq!(first.messages.len(), 2);
        let cursor = inbox.active[0].cursor;
        // Keep sending until a block lands behind the cursor.
        let late = loop {
            let r = send(&mut dht, &inbox.address, b"late", &opts, &mut rng).unwrap();
            if r.block_id < cursor.next_id {
                break r.block_id;
            }
        };
        let rest = drain_inbox(&mut dht, &mut inbox, 2);
        assert!(rest.messages.iter().any(|m| m.block_id == late));
        let total = first.messages.len() + rest.messages.len();
        assert_eq!(total, dht.node.store.targeted_blocks().count());
    }

    #[test]
    fn below_advertised_difficulty_is_filtered() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let mut inbox = create_address(&mut dht, Keypair::generate(&mut rng), d(10), &mut rng).unwrap();
        let tk = inbox.site.targets[0].target_key;
        // Mine at the floor until the block falls short of the advertised 10 bits.
        let cheap = loop {
            let m = mine(tk, d(4), b"spam", rng.gen(), None).unwrap().block;
            if verify_block(&m, Some(&tk), d(10)).is_err() {
                break m;
            }
        };
        dht.store_targeted(&cheap).unwrap();
        assert!(drain_inbox(&mut dht, &mut inbox, 10).messages.is_empty());
    }

    #[test]
    fn rotation_keeps_address_and_old_mail() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let mut inbox = create_address(&mut dht, Keypair::generate(&mut rng), d(6), &mut rng).unwrap();
        let address = inbox.address;
        let (stale_site, _) = fetch_site(&mut dht, &address).unwrap();
        let old = rotate_target(&mut dht, &mut inbox, 100, &mut rng).unwrap();
        assert_ne!(old, stale_site.targets[0]);
        assert_eq!(inbox.address, address);
        assert_eq!(inbox.version, 2);
        assert_eq!(inbox.retired[0].retired_at, Some(100));
        let (site, v) = fetch_site(&mut dht, &address).unwrap();
        assert_eq!((site.targets[0], v), (old, 2));

        let fresh = send(&mut dht, &address, b"new", &SendOptions::default(), &mut rng).unwrap();
        let stale = send_to_site(&mut dht, &stale_site, b"stale", &SendOptions::default(), &mut rng).unwrap();
        assert_eq!(fresh.target, old);
        assert_eq!(stale.target, stale_site.targets[0]);
        let got: BTreeSet<Vec<u8>> = drain_inbox(&mut dht, &mut inbox, 5).messages.into_iter().map(|m| m.payload).collect();
        assert_eq!(got, BTreeSet::from([b"new".to_vec(), b"stale".to_vec()]));

        let dropped = drop_retired(&mut inbox, &stale_site.targets[0].target_key).unwrap();
        assert_eq!(dropped.target, stale_site.targets[0]);
        assert!(drop_retired(&mut inbox, &stale_site.targets[0].target_key).is_err());
    }

    #[test]
    fn lsb_neighbour_is_a_separate_region() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let a = KeyId::random(&mut rng);
        let b = a.with_bit_flipped(511);
        let tb = mine(a, d(6), b"to a", 0, None).unwrap().block;
        dht.store_targeted(&tb).unwrap();
        let page = dht.scan(&b, d(6), &ScanCursor::start(), 10).unwrap();
        assert!(page.blocks.is_empty());
    }

    #[test]
    fn failed_rotation_leaves_state_alone() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut node = world(&mut rng);
        let mut inbox = {
            let mut net = NoPeers;
            let mut dht = Client::new(&mut node, &mut net);
            create_address(&mut dht, Keypair::generate(&mut rng), d(6), &mut rng).unwrap()
        };
        // Publishing the same version again is refused as stale.
        let before = inbox.snapshot();
        inbox.version = 0;
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        assert!(rotate_target(&mut dht, &mut inbox, 1, &mut rng).is_err());
        inbox.version = before.version;
        assert_eq!(inbox.snapshot(), before);
    }

    #[test]
    fn follow_channel_is_version_gated() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let mut inbox = create_address(&mut dht, Keypair::generate(&mut rng), d(6), &mut rng).unwrap();
        let mut chan = Channel::new(Keypair::generate(&mut rng));
        assert!(follow(&mut inbox, chan.id()));
        assert!(!follow(&mut inbox, chan.id()));
        let r = poll_followed(&mut dht, &mut inbox);
        assert_eq!(r.errors, vec![(chan.id(), DhtError::NotFound)]);

        chan.publish(&mut dht, b"v1").unwrap();
        chan.publish(&mut dht, b"v2").unwrap();
        let r = poll_followed(&mut dht, &mut inbox);
        assert_eq!(r.messages, vec![FollowMessage { from: chan.id(), version: 2, data: b"v2".to_vec() }]);
        assert!(poll_followed(&mut dht, &mut inbox).messages.is_empty());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let kp = Keypair::generate(&mut rng);
        let mut inbox = create_address(&mut dht, kp.clone(), d(6), &mut rng).unwrap();
        send(&mut dht, &inbox.address, b"x", &SendOptions::default(), &mut rng).unwrap();
        scan_inbox(&mut dht, &mut inbox, 1);
        rotate_target(&mut dht, &mut inbox, 5, &mut rng).unwrap();
        follow(&mut inbox, KeyId::ZERO);
        let json = serde_json::to_string(&inbox.snapshot()).unwrap();
        let back: InboxSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, inbox.snapshot());
        let restored = InboxState::restore(kp, back.clone()).unwrap();
        assert_eq!(restored.snapshot(), back);
        assert!(InboxState::restore(Keypair::generate(&mut rng), back).is_err());
    }

    #[test]
    fn priority_index_selects_target() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let site = DpushSite::new(DPUSH_SITE_KIND, vec![random_target(d(8), &mut rng), random_target(d(5), &mut rng)]);
        let mut inbox = create_address_with_site(&mut dht, Keypair::generate(&mut rng), site.clone()).unwrap();
        let opts = SendOptions { target_index: 1, ..SendOptions::default() };
        let r = send(&mut dht, &inbox.address, b"low", &opts, &mut rng).unwrap();
        assert_eq!(r.target, site.targets[1]);
        let bad = SendOptions { target_index: 2, ..SendOptions::default() };
        assert_eq!(send(&mut dht, &inbox.address, b"x", &bad, &mut rng), Err(DpushError::NoSuchTarget(2)));
        let got = drain_inbox(&mut dht, &mut inbox, 10);
        assert_eq!(got.messages.len(), 1);
        assert_eq!(got.messages[0].target_key, site.targets[1].target_key);
    }

    #[test]
    fn payload_bounds_checked_before_lookup() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut node = world(&mut rng);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let a = KeyId::random(&mut rng);
        let opts = SendOptions::default();
        assert_eq!(send(&mut dht, &a, b"", &opts, &mut rng), Err(DpushError::Block(BlockError::EmptyPayload)));
        let big = vec![0u8; DEFAULT_MAX_BLOCK_SIZE + 1];
        assert!(matches!(send(&mut dht, &a, &big, &opts, &mut rng), Err(DpushError::Block(BlockError::Oversize { .. }))));
    }
}
