use std::collections::VecDeque;

use crate::block::matched_prefix_bits;
use crate::ident::{KeyId, KEY_ID_BITS};

use super::{xor_distance, NodeInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observed {
    Inserted,
    Refreshed,
    /// Bucket full; the newcomer was not added.
    Dropped,
    /// The owner itself.
    Ignored,
}

/// 512 k-buckets; bucket `i` holds contacts sharing exactly `i` leading bits
/// with the owner, least-recently-seen first.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    owner: KeyId,
    k: usize,
    buckets: Vec<VecDeque<NodeInfo>>,
}

impl RoutingTable {
    pub fn new(owner: KeyId, k: usize) -> Self {
        RoutingTable {
            owner,
            k: k.max(1),
            buckets: vec![VecDeque::new(); KEY_ID_BITS as usize],
        }
    }

    pub fn owner(&self) -> &KeyId {
        &self.owner
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bucket_index(&self, id: &KeyId) -> Option<usize> {
        let bits = matched_prefix_bits(&self.owner, id);
        (bits < KEY_ID_BITS).then_some(bits as usize)
    }

    pub fn observe(&mut self, contact: NodeInfo) -> Observed {
        let Some(i) = self.bucket_index(&contact.id) else {
            return Observed::Ignored;
        };
        let bucket = &mut self.buckets[i];
        if let Some(pos) = bucket.iter().position(|c| c.id == contact.id) {
            bucket.remove(pos);
            bucket.push_back(contact);
            return Observed::Refreshed;
        }
        if bucket.len() >= self.k {
            return Observed::Dropped;
        }
        bucket.push_back(contact);
        Observed::Inserted
    }

    pub fn remove(&mut self, id: &KeyId) -> bool {
        let Some(i) = self.bucket_index(id) else {
            return false;
        };
        let bucket = &mut self.buckets[i];
        match bucket.iter().position(|c| &c.id == id) {
            Some(pos) => {
                bucket.remove(pos);
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.bucket_index(id)
            .is_some_and(|i| self.buckets[i].iter().any(|c| &c.id == id))
    }

    pub fn bucket(&self, i: usize) -> &VecDeque<NodeInfo> {
        &self.buckets[i]
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(VecDeque::is_empty)
    }

    pub fn contacts(&self) -> impl Iterator<Item = &NodeInfo> {
        self.buckets.iter().flatten()
    }

    /// Up to `count` contacts, nearest to `id` first.
    pub fn closest(&self, id: &KeyId, count: usize) -> Vec<NodeInfo> {
        let mut all: Vec<(KeyId, NodeInfo)> =
            self.contacts().map(|c| (xor_distance(&c.id, id), *c)).collect();
        all.sort_unstable_by_key(|a| a.0);
        all.into_iter().take(count).map(|(_, c)| c).collect()
    }

    /// Index of the highest non-empty bucket (the one holding the owner's
    /// nearest neighbours).
    pub fn deepest_bucket(&self) -> Option<usize> {
        self.buckets.iter().rposition(|b| !b.is_empty())
    }
}
