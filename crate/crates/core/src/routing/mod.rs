//! Kademlia-style XOR routing and the iterative DHT procedures.
//!
//! A [`Node`] owns a routing table and a [`Store`] and answers RPCs through
//! [`Node::handle`]. Outbound work goes through a [`Transport`], which
//! delivers one *round* of concurrent requests and returns one result per
//! request. [`Client`] runs the iterative lookup, store, and scan procedures
//! for a node over any transport and exposes them as the [`Dht`] trait the
//! messaging layers are written against.

mod table;

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{verify_block, Difficulty, TargetedBlock};
use crate::ident::KeyId;
use crate::store::{Reject, ScanCursor, ScanPage, Store, StorePolicy, Stored, UpdateableRecord};

pub use table::{Observed, RoutingTable};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_ALPHA: usize = 3;

/// Opaque transport address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: KeyId,
    pub endpoint: Endpoint,
}

pub fn xor_distance(a: &KeyId, b: &KeyId) -> KeyId {
    a.xor(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhtParams {
    pub k: usize,
    pub alpha: usize,
    /// Replicas written per store; at most `k`.
    pub replication: usize,
}

impl Default for DhtParams {
    fn default() -> Self {
        DhtParams { k: DEFAULT_K, alpha: DEFAULT_ALPHA, replication: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    Ping,
    FindNode(KeyId),
    StoreStatic(Vec<u8>),
    GetStatic(KeyId),
    StoreUpdateable(UpdateableRecord),
    GetUpdateable(KeyId),
    StoreTargeted(TargetedBlock),
    ScanTargeted { target_key: KeyId, difficulty: Difficulty, cursor: ScanCursor, limit: u32 },
}

impl Request {
    pub fn kind(&self) -> RpcKind {
        match self {
            Request::Ping => RpcKind::Ping,
            Request::FindNode(_) => RpcKind::FindNode,
            Request::StoreStatic(_) => RpcKind::StoreStatic,
            Request::GetStatic(_) => RpcKind::GetStatic,
            Request::StoreUpdateable(_) => RpcKind::StoreUpdateable,
            Request::GetUpdateable(_) => RpcKind::GetUpdateable,
            Request::StoreTargeted(_) => RpcKind::StoreTargeted,
            Request::ScanTargeted { .. } => RpcKind::ScanTargeted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RpcKind {
    Ping,
    FindNode,
    StoreStatic,
    GetStatic,
    StoreUpdateable,
    GetUpdateable,
    StoreTargeted,
    ScanTargeted,
}

impl RpcKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RpcKind::Ping => "PING",
            RpcKind::FindNode => "FIND_NODE",
            RpcKind::StoreStatic => "STORE_STATIC",
            RpcKind::GetStatic => "GET_STATIC",
            RpcKind::StoreUpdateable => "STORE_UPDATEABLE",
            RpcKind::GetUpdateable => "GET_UPDATEABLE",
            RpcKind::StoreTargeted => "STORE_TARGETED",
            RpcKind::ScanTargeted => "SCAN_TARGETED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Pong,
    Nodes(Vec<NodeInfo>),
    Stored(Result<Stored, Reject>),
    Static(Option<Vec<u8>>),
    Updateable(Option<UpdateableRecord>),
    Blocks(Vec<TargetedBlock>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RpcError {
    #[error("rpc timed out")]
    Timeout,
    #[error("peer unreachable")]
    Unreachable,
    #[error("malformed response")]
    Malformed,
}

/// Whether a round is part of a lookup (counted as a hop) or a direct
/// request to already-located nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    Lookup,
    Direct,
}

pub trait Transport {
    /// Issue all `calls` concurrently and wait for each to resolve.
    fn round(
        &mut self,
        from: &NodeInfo,
        kind: RoundKind,
        calls: &[(NodeInfo, Request)],
    ) -> Vec<Result<Response, RpcError>>;
}

/// Transport with no peers; every call fails. Backs a standalone single node.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoPeers;

impl Transport for NoPeers {
    fn round(&mut self, _: &NodeInfo, _: RoundKind, calls: &[(NodeInfo, Request)]) -> Vec<Result<Response, RpcError>> {
        vec![Err(RpcError::Unreachable); calls.len()]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DhtError {
    #[error("lookup failed: no reachable peers")]
    LookupFailed,
    #[error("not found")]
    NotFound,
    #[error("store failed{}", .reason.map(|r| format!(": {r}")).unwrap_or_default())]
    StoreFailed { reason: Option<Reject> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lookup {
    /// Up to `k` closest live nodes, nearest first; may include the local node.
    pub nodes: Vec<NodeInfo>,
    /// Query rounds performed.
    pub hops: u32,
}

/// The DHT operations the messaging layers need.
pub trait Dht {
    fn local_id(&self) -> KeyId;
    fn find_nodes(&mut self, id: &KeyId) -> Result<Lookup, DhtError>;
    fn put_static(&mut self, data: &[u8]) -> Result<(KeyId, usize), DhtError>;
    fn get_static(&mut self, id: &KeyId) -> Result<Vec<u8>, DhtError>;
    fn put_updateable(&mut self, rec: &UpdateableRecord) -> Result<usize, DhtError>;
    fn get_updateable(&mut self, id: &KeyId) -> Result<UpdateableRecord, DhtError>;
    fn store_targeted(&mut self, tb: &TargetedBlock) -> Result<usize, DhtError>;
    fn scan(&mut self, target_key: &KeyId, d: Difficulty, cursor: &ScanCursor, limit: usize)
        -> Result<ScanPage, DhtError>;
}

/// A full protocol node: identity, routing table, local store.
#[derive(Debug, Clone)]
pub struct Node {
    pub info: NodeInfo,
    pub table: RoutingTable,
    pub store: Store,
    pub params: DhtParams,
}

impl Node {
    pub fn new(info: NodeInfo, params: DhtParams, policy: StorePolicy) -> Self {
        Node {
            info,
            table: RoutingTable::new(info.id, params.k),
            store: Store::new(policy),
            params,
        }
    }

    pub fn handle(&mut self, from: &NodeInfo, req: &Request) -> Response {
        if from.id != self.info.id {
            self.table.observe(*from);
        }
        match req {
            Request::Ping => Response::Pong,
            Request::FindNode(id) => Response::Nodes(self.table.closest(id, self.params.k)),
            Request::StoreStatic(data) => Response::Stored(self.store.put_static(data).map(|_| Stored::New)),
            Request::GetStatic(id) => Response::Static(self.store.get_static(id).map(<[u8]>::to_vec)),
            Request::StoreUpdateable(rec) => Response::Stored(self.store.put_updateable(rec)),
            Request::GetUpdateable(id) => Response::Updateable(self.store.get_updateable(id).cloned()),
            Request::StoreTargeted(tb) => Response::Stored(self.store.put_targeted(tb)),
            Request::ScanTargeted { target_key, difficulty, cursor, limit } => Response::Blocks(
                self.store
                    .scan_targeted(target_key, *difficulty, cursor, *limit as usize)
                    .blocks,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Pending,
    Responded,
    Failed,
    Local,
}

/// Runs the iterative procedures on behalf of `node` over `net`.
pub struct Client<'a, T: Transport> {
    pub node: &'a mut Node,
    pub net: &'a mut T,
}

impl<'a, T: Transport> Client<'a, T> {
    pub fn new(node: &'a mut Node, net: &'a mut T) -> Self {
        Client { node, net }
    }

    /// Join through `bootstrap`: look up our own id, then refresh every
    /// bucket shallower than our nearest neighbour.
    pub fn join<R: RngCore>(&mut self, bootstrap: Option<NodeInfo>, rng: &mut R) -> Result<u32, DhtError> {
        if let Some(b) = bootstrap {
            self.node.table.observe(b);
        }
        if self.node.table.is_empty() {
            return Ok(0);
        }
        let own = self.node.info.id;
        let mut hops = self.find_nodes(&own)?.hops;
        if let Some(deepest) = self.node.table.deepest_bucket() {
            for bits in 0..deepest as u32 {
                let id = random_id_in_bucket(&own, bits, rng);
                if let Ok(l) = self.find_nodes(&id) {
                    hops += l.hops;
                }
            }
        }
        Ok(hops)
    }

    fn call_round(&mut self, kind: RoundKind, calls: &[(NodeInfo, Request)]) -> Vec<Result<Response, RpcError>> {
        let from = self.node.info;
        let results = self.net.round(&from, kind, calls);
        for ((peer, _), r) in calls.iter().zip(&results) {
            if r.is_ok() {
                self.node.table.observe(*peer);
            } else {
                self.node.table.remove(&peer.id);
            }
        }
        results
    }

    /// Send `req` to each of `targets`, answering locally when the target is
    /// this node. Failed calls are omitted from the output.
    fn fan_out(&mut self, targets: &[NodeInfo], req: &Request) -> Vec<Response> {
        let own = self.node.info;
        let mut out = Vec::with_capacity(targets.len());
        let remote: Vec<(NodeInfo, Request)> = targets
            .iter()
            .filter(|t| t.id != own.id)
            .map(|t| (*t, req.clone()))
            .collect();
        if targets.iter().any(|t| t.id == own.id) {
            out.push(self.node.handle(&own, req));
        }
        if !remote.is_empty() {
            out.extend(self.call_round(RoundKind::Direct, &remote).into_iter().flatten());
        }
        out
    }
}

impl<T: Transport> Dht for Client<'_, T> {
    fn local_id(&self) -> KeyId {
        self.node.info.id
    }

    fn find_nodes(&mut self, id: &KeyId) -> Result<Lookup, DhtError> {
        let k = self.node.params.k;
        let alpha = self.node.params.alpha.max(1);
        let own = self.node.info;

        let mut shortlist: BTreeMap<KeyId, (NodeInfo, Probe)> = BTreeMap::new();
        shortlist.insert(xor_distance(&own.id, id), (own, Probe::Local));
        let seeds = self.node.table.closest(id, k);
        let had_contacts = !seeds.is_empty();
        for c in seeds {
            shortlist.insert(xor_distance(&c.id, id), (c, Probe::Pending));
        }

        let best = |sl: &BTreeMap<KeyId, (NodeInfo, Probe)>| {
            sl.iter().find(|(_, (_, p))| *p != Probe::Failed).map(|(d, _)| *d)
        };
        let mut hops = 0u32;
        let mut any_response = false;
        let mut improved = true;
        loop {
            let pending: Vec<NodeInfo> = shortlist
                .values()
                .filter(|(_, p)| *p != Probe::Failed)
                .take(k)
                .filter(|(_, p)| *p == Probe::Pending)
                .map(|(n, _)| *n)
                .collect();
            if pending.is_empty() {
                break;
            }
            let width = if improved { alpha } else { pending.len() };
            let calls: Vec<(NodeInfo, Request)> =
                pending.into_iter().take(width).map(|n| (n, Request::FindNode(*id))).collect();

            let before = best(&shortlist);
            hops += 1;
            let results = self.call_round(RoundKind::Lookup, &calls);
            for ((peer, _), r) in calls.iter().zip(results) {
                let dist = xor_distance(&peer.id, id);
                match r {
                    Ok(Response::Nodes(found)) => {
                        any_response = true;
                        shortlist.insert(dist, (*peer, Probe::Responded));
                        for n in found {
                            if n.id != own.id {
                                shortlist.entry(xor_distance(&n.id, id)).or_insert((n, Probe::Pending));
                            }
                        }
                    }
                    _ => {
                        shortlist.insert(dist, (*peer, Probe::Failed));
                    }
                }
            }
            improved = best(&shortlist) < before;
        }

        if had_contacts && !any_response {
            return Err(DhtError::LookupFailed);
        }
        let nodes = shortlist
            .into_values()
            .filter(|(_, p)| matches!(p, Probe::Responded | Probe::Local))
            .take(k)
            .map(|(n, _)| n)
            .collect();
        Ok(Lookup { nodes, hops })
    }

    fn put_static(&mut self, data: &[u8]) -> Result<(KeyId, usize), DhtError> {
        let id = crate::ident::hash(data);
        let lookup = self.find_nodes(&id)?;
        let replicas: Vec<NodeInfo> = lookup.nodes.into_iter().take(self.node.params.replication).collect();
        let (accepted, reason) = count_stored(self.fan_out(&replicas, &Request::StoreStatic(data.to_vec())));
        if accepted == 0 {
            return Err(DhtError::StoreFailed { reason });
        }
        Ok((id, accepted))
    }

    fn get_static(&mut self, id: &KeyId) -> Result<Vec<u8>, DhtError> {
        let lookup = self.find_nodes(id)?;
        self.fan_out(&lookup.nodes, &Request::GetStatic(*id))
            .into_iter()
            .find_map(|r| match r {
                Response::Static(Some(data)) if crate::ident::hash(&data) == *id => Some(data),
                _ => None,
            })
            .ok_or(DhtError::NotFound)
    }

    fn put_updateable(&mut self, rec: &UpdateableRecord) -> Result<usize, DhtError> {
        let id = rec.id().ok_or(DhtError::StoreFailed { reason: Some(Reject::InvalidKey) })?;
        let lookup = self.find_nodes(&id)?;
        let replicas: Vec<NodeInfo> = lookup.nodes.into_iter().take(self.node.params.replication).collect();
        let (accepted, reason) = count_stored(self.fan_out(&replicas, &Request::StoreUpdateable(rec.clone())));
        if accepted == 0 {
            return Err(DhtError::StoreFailed { reason });
        }
        Ok(accepted)
    }

    fn get_updateable(&mut self, id: &KeyId) -> Result<UpdateableRecord, DhtError> {
        let lookup = self.find_nodes(id)?;
        self.fan_out(&lookup.nodes, &Request::GetUpdateable(*id))
            .into_iter()
            .filter_map(|r| match r {
                Response::Updateable(Some(rec)) if rec.id() == Some(*id) && rec.verify() => Some(rec),
                _ => None,
            })
            .max_by_key(|rec| rec.version)
            .ok_or(DhtError::NotFound)
    }

    fn store_targeted(&mut self, tb: &TargetedBlock) -> Result<usize, DhtError> {
        let lookup = self.find_nodes(&tb.id())?;
        let replicas: Vec<NodeInfo> = lookup.nodes.into_iter().take(self.node.params.replication).collect();
        let (accepted, reason) = count_stored(self.fan_out(&replicas, &Request::StoreTargeted(tb.clone())));
        if accepted == 0 {
            return Err(DhtError::StoreFailed { reason });
        }
        Ok(accepted)
    }

    fn scan(
        &mut self,
        target_key: &KeyId,
        d: Difficulty,
        cursor: &ScanCursor,
        limit: usize,
    ) -> Result<ScanPage, DhtError> {
        let limit = limit.max(1);
        let lookup = self.find_nodes(target_key)?;
        let req = Request::ScanTargeted {
            target_key: *target_key,
            difficulty: d,
            cursor: *cursor,
            limit: limit as u32,
        };
        let responses = self.fan_out(&lookup.nodes, &req);
        if responses.is_empty() {
            return Err(DhtError::LookupFailed);
        }
        let mut merged = BTreeMap::new();
        for r in responses {
            if let Response::Blocks(blocks) = r {
                for b in blocks {
                    if verify_block(&b, Some(target_key), d).is_ok() {
                        merged.entry(b.id()).or_insert(b);
                    }
                }
            }
        }
        Ok(ScanPage::from_sorted(merged, cursor, limit))
    }
}

fn count_stored(responses: Vec<Response>) -> (usize, Option<Reject>) {
    let mut accepted = 0;
    let mut reason = None;
    for r in responses {
        match r {
            Response::Stored(Ok(_)) => accepted += 1,
            Response::Stored(Err(e)) => {
                reason.get_or_insert(e);
            }
            _ => {}
        }
    }
    (accepted, reason)
}

/// Random id sharing exactly `bits` leading bits with `owner`.
pub fn random_id_in_bucket<R: RngCore + ?Sized>(owner: &KeyId, bits: u32, rng: &mut R) -> KeyId {
    let r = KeyId::random(rng);
    let (low, high) = owner.prefix_range(bits);
    let mut out = [0u8; crate::ident::KEY_ID_LEN];
    for (i, o) in out.iter_mut().enumerate() {
        // Bits outside the shared prefix are set in `high` but not in `low`.
        let free = high.as_bytes()[i] ^ low.as_bytes()[i];
        *o = (low.as_bytes()[i] & !free) | (r.as_bytes()[i] & free);
    }
    let id = KeyId::from_bytes(out);
    if bits < crate::ident::KEY_ID_BITS && id.bit(bits) == owner.bit(bits) {
        id.with_bit_flipped(bits)
    } else {
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{matched_prefix_bits, mine};
    use crate::ident::Keypair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn xor_distance_identity_and_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = KeyId::random(&mut rng);
            let b = KeyId::random(&mut rng);
            assert_eq!(xor_distance(&a, &a), KeyId::ZERO);
            assert_eq!(xor_distance(&a, &b), xor_distance(&b, &a));
        }
    }

    #[test]
    fn random_bucket_ids_share_exact_prefix() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let owner = KeyId::random(&mut rng);
        for bits in [0u32, 1, 7, 8, 100, 511] {
            for _ in 0..20 {
                let id = random_id_in_bucket(&owner, bits, &mut rng);
                assert_eq!(matched_prefix_bits(&owner, &id), bits);
            }
        }
    }

    #[test]
    fn single_node_is_its_own_neighbourhood() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let id = Keypair::generate(&mut rng).key_id();
        let info = NodeInfo { id, endpoint: Endpoint(0) };
        let policy = StorePolicy { min_targeted_difficulty: Difficulty::new(8).unwrap(), ..Default::default() };
        let mut node = Node::new(info, DhtParams::default(), policy);
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        let lookup = dht.find_nodes(&KeyId::random(&mut rng)).unwrap();
        assert_eq!(lookup, Lookup { nodes: vec![info], hops: 0 });

        let target = KeyId::random(&mut rng);
        let tb = mine(target, Difficulty::new(8).unwrap(), b"solo", rng.gen(), None).unwrap().block;
        assert_eq!(dht.store_targeted(&tb), Ok(1));
        let page = dht.scan(&target, Difficulty::new(8).unwrap(), &ScanCursor::start(), 10).unwrap();
        assert_eq!(page.blocks, vec![tb]);

        let kp = Keypair::generate(&mut rng);
        let rec = UpdateableRecord::signed(&kp, 1, b"x".to_vec());
        assert_eq!(dht.put_updateable(&rec), Ok(1));
        assert_eq!(dht.get_updateable(&kp.key_id()), Ok(rec));
        assert_eq!(dht.get_updateable(&KeyId::ZERO), Err(DhtError::NotFound));

        let (sid, n) = dht.put_static(b"blob").unwrap();
        assert_eq!(n, 1);
        assert_eq!(dht.get_static(&sid).unwrap(), b"blob");
    }

    #[test]
    fn unreachable_contacts_fail_the_lookup() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut node = Node::new(
            NodeInfo { id: KeyId::random(&mut rng), endpoint: Endpoint(0) },
            DhtParams::default(),
            StorePolicy::default(),
        );
        node.table.observe(NodeInfo { id: KeyId::random(&mut rng), endpoint: Endpoint(1) });
        let mut net = NoPeers;
        let mut dht = Client::new(&mut node, &mut net);
        assert_eq!(dht.find_nodes(&KeyId::ZERO), Err(DhtError::LookupFailed));
        // The dead contact was evicted.
        assert!(dht.node.table.is_empty());
    }

    #[test]
    fn handler_learns_callers() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut node = Node::new(
            NodeInfo { id: KeyId::random(&mut rng), endpoint: Endpoint(0) },
            DhtParams::default(),
            StorePolicy::default(),
        );
        let caller = NodeInfo { id: KeyId::random(&mut rng), endpoint: Endpoint(1) };
        assert_eq!(node.handle(&caller, &Request::Ping), Response::Pong);
        assert!(node.table.contains(&caller.id));
        assert_eq!(node.handle(&caller, &Request::FindNode(KeyId::ZERO)), Response::Nodes(vec![caller]));
    }
}
