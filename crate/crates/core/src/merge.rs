//! Planning for merging two networks that have come into contact.
//!
//! Three strategies, tried in order: a direct offset merge when the two
//! supremes' pools fit into one, shrinking a pool by folding small adjacent
//! clusters together, and growing the hierarchy by one level under a shorter
//! prefix. The planners here are pure; the protocol executes direct merges.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

use crate::addressing::{offset_address, reprefix, Address, AddressError, Level, NetId, NetworkPrefix};
use crate::{mix64, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MergeError {
    #[error("combined pool of {0} children does not fit in 255")]
    NotDirectlyMergeable(usize),
    #[error("offset child {suffix}+{offset} collides or overflows in the winner's pool")]
    OffsetCollision { suffix: u8, offset: u8 },
    #[error("no redundant adjacent cluster pair left")]
    ShrinkInsufficient,
    #[error("prefix cannot be shortened further")]
    PrefixExhausted,
    #[error("networks use different prefix lengths")]
    LengthMismatch,
    #[error(transparent)]
    Address(#[from] AddressError),
}

/// What one supreme knows about its own network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSummary {
    pub prefix: NetworkPrefix,
    pub supreme_id: NodeId,
    /// Occupied suffixes in the supreme's own table.
    pub occupied: Vec<u8>,
}

impl NetworkSummary {
    pub fn count(&self) -> usize {
        self.occupied.len()
    }
}

/// `Less` when `a` survives: larger pool wins, equal pools go to the lower
/// supreme id.
pub fn decide_winner(a_count: usize, a_id: NodeId, b_count: usize, b_id: NodeId) -> Ordering {
    b_count.cmp(&a_count).then(a_id.cmp(&b_id))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectMergePlan {
    pub winner: NodeId,
    pub loser: NodeId,
    pub winner_prefix: NetworkPrefix,
    pub loser_prefix: NetworkPrefix,
    pub offset: u8,
    /// Level of the supremes' children; the octet shifted by `offset`.
    pub merge_level: Level,
    /// Suffixes the winner's supreme adds to its table, already shifted.
    pub new_suffixes: Vec<u8>,
}

impl DirectMergePlan {
    /// Where a node of the losing network ends up.
    pub fn rewrite(&self, addr: Address) -> Result<Address, AddressError> {
        let shifted = offset_address(addr, self.offset, self.merge_level)?;
        reprefix(shifted, &self.loser_prefix, &self.winner_prefix)
    }
}

/// Check an offset merge of `loser` into `winner` by `offset`: every shifted
/// suffix must stay in range and land on a free slot.
pub fn verify_offset(winner_occupied: &[u8], loser_occupied: &[u8], offset: u8) -> Result<Vec<u8>, MergeError> {
    let taken: BTreeSet<u8> = winner_occupied.iter().copied().collect();
    loser_occupied
        .iter()
        .map(|&s| match s.checked_add(offset) {
            Some(t) if !taken.contains(&t) => Ok(t),
            _ => Err(MergeError::OffsetCollision { suffix: s, offset }),
        })
        .collect()
}

pub fn merge_direct(a: &NetworkSummary, b: &NetworkSummary) -> Result<DirectMergePlan, MergeError> {
    if a.prefix.len() != b.prefix.len() {
        return Err(MergeError::LengthMismatch);
    }
    let total = a.count() + b.count();
    if total >= 255 {
        return Err(MergeError::NotDirectlyMergeable(total));
    }
    let (w, l) = match decide_winner(a.count(), a.supreme_id, b.count(), b.supreme_id) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    // total < 255 so the count fits.
    let offset = w.count() as u8;
    let new_suffixes = verify_offset(&w.occupied, &l.occupied, offset)?;
    Ok(DirectMergePlan {
        winner: w.supreme_id,
        loser: l.supreme_id,
        winner_prefix: w.prefix,
        loser_prefix: l.prefix,
        offset,
        merge_level: Level(w.prefix.max_level().0 - 1),
        new_suffixes,
    })
}

/// One child cluster of a supreme, as seen for shrinking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSummary {
    pub suffix: u8,
    pub occupancy: usize,
    /// Suffixes of clusters with a direct link to this one.
    pub adjacent: Vec<u8>,
}

/// Fold `from` into `into`: every member of `from` re-joins under `into`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Absorb {
    pub from: u8,
    pub into: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShrinkPlan {
    pub steps: Vec<Absorb>,
    /// Supreme-level children remaining afterwards.
    pub remaining: usize,
}

/// Greedy shrink until `remaining + other_count < 255`. Pairs are taken in
/// ascending combined occupancy; the smaller cluster moves into the larger.
pub fn merge_shrink(clusters: &[ClusterSummary], other_count: usize) -> Result<ShrinkPlan, MergeError> {
    let mut occ: BTreeMap<u8, usize> = clusters.iter().map(|c| (c.suffix, c.occupancy)).collect();
    let mut adj: BTreeMap<u8, BTreeSet<u8>> = BTreeMap::new();
    for c in clusters {
        for &n in &c.adjacent {
            if n != c.suffix && occ.contains_key(&n) {
                adj.entry(c.suffix).or_default().insert(n);
                adj.entry(n).or_default().insert(c.suffix);
            }
        }
    }
    let mut steps = Vec::new();
    while occ.len() + other_count >= 255 {
        let best = adj
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .map(|(a, b)| (occ[&a] + occ[&b], a, b))
            .filter(|&(sum, _, _)| sum < 255)
            .min();
        let Some((_, a, b)) = best else {
            return Err(MergeError::ShrinkInsufficient);
        };
        // Equal occupancy keeps the lower suffix.
        let (from, into) = if occ[&a] < occ[&b] { (a, b) } else { (b, a) };
        let moved = occ.remove(&from).unwrap_or(0);
        *occ.get_mut(&into).expect("pair member") += moved;
        let ns = adj.remove(&from).unwrap_or_default();
        for n in ns {
            if let Some(set) = adj.get_mut(&n) {
                set.remove(&from);
                if n != into {
                    set.insert(into);
                }
            }
            if n != into {
                adj.entry(into).or_default().insert(n);
            }
        }
        steps.push(Absorb { from, into });
    }
    Ok(ShrinkPlan { steps, remaining: occ.len() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncreaseKPlan {
    pub new_prefix: NetworkPrefix,
    pub supreme: NodeId,
    /// Index each former network takes in the freed octet, by old NetID.
    pub index: Vec<(NetId, u8)>,
    old: Vec<NetworkPrefix>,
}

impl IncreaseKPlan {
    pub fn supreme_address(&self) -> Address {
        self.new_prefix.supreme_address()
    }

    /// New address of a node currently under `old`.
    pub fn rewrite(&self, addr: Address, old: &NetworkPrefix) -> Result<Address, AddressError> {
        let (_, idx) = self.index.iter().find(|(n, _)| *n == old.netid).ok_or(AddressError::PrefixMismatch)?;
        if !self.old.iter().any(|p| p == old) || !old.contains(addr) {
            return Err(AddressError::PrefixMismatch);
        }
        let mut o = addr.0;
        o[..self.new_prefix.len()].copy_from_slice(self.new_prefix.octets());
        o[self.new_prefix.len()] = *idx;
        Ok(Address(o))
    }
}

/// Shorten the prefix by one octet and hang both old supremes under a new
/// one. The lower supreme id becomes supreme and its network takes index 1.
pub fn merge_increase_k(a: &NetworkSummary, b: &NetworkSummary) -> Result<IncreaseKPlan, MergeError> {
    if a.prefix.len() != b.prefix.len() {
        return Err(MergeError::LengthMismatch);
    }
    if a.prefix.len() < 2 {
        return Err(MergeError::PrefixExhausted);
    }
    let (first, second) = if a.supreme_id <= b.supreme_id { (a, b) } else { (b, a) };
    let short = &first.prefix.octets()[..first.prefix.len() - 1];
    let netid = NetId(mix64(first.prefix.netid.0 ^ mix64(second.prefix.netid.0)));
    let new_prefix = NetworkPrefix::new(short, netid)?;
    Ok(IncreaseKPlan {
        new_prefix,
        supreme: first.supreme_id,
        index: alloc::vec![(first.prefix.netid, 1), (second.prefix.netid, 2)],
        old: alloc::vec![first.prefix, second.prefix],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::level_of;

    fn pre(a: u8, b: u8, net: u64) -> NetworkPrefix {
        NetworkPrefix::new(&[a, b], NetId(net)).unwrap()
    }

    fn summary(prefix: NetworkPrefix, id: u64, n: u8) -> NetworkSummary {
        NetworkSummary { prefix, supreme_id: NodeId(id), occupied: (1..=n).collect() }
    }

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn worked_direct_merge() {
        let n1 = summary(pre(10, 12, 1), 7, 50);
        let n2 = summary(pre(10, 23, 2), 3, 25);
        let plan = merge_direct(&n1, &n2).unwrap();
        assert_eq!(plan.winner, NodeId(7));
        assert_eq!(plan.offset, 50);
        assert_eq!(plan.rewrite(a("10.23.1.0")).unwrap(), a("10.12.51.0"));
        assert_eq!(plan.rewrite(a("10.23.25.0")).unwrap(), a("10.12.75.0"));
        assert_eq!(plan.rewrite(a("10.23.23.12")).unwrap(), a("10.12.73.12"));
        assert_eq!(plan.new_suffixes, (51..=75).collect::<Vec<u8>>());
        // argument order does not matter
        assert_eq!(merge_direct(&n2, &n1).unwrap(), plan);
    }

    #[test]
    fn equal_counts_go_to_lower_id() {
        let x = summary(pre(10, 12, 1), 9, 10);
        let y = summary(pre(10, 23, 2), 4, 10);
        assert_eq!(merge_direct(&x, &y).unwrap().winner, NodeId(4));
        assert_eq!(merge_direct(&y, &x).unwrap().winner, NodeId(4));
    }

    #[test]
    fn sum_of_255_is_rejected() {
        let x = summary(pre(10, 12, 1), 1, 200);
        let y = summary(pre(10, 23, 2), 2, 55);
        assert_eq!(merge_direct(&x, &y), Err(MergeError::NotDirectlyMergeable(255)));
        let y = summary(pre(10, 23, 2), 2, 54);
        assert!(merge_direct(&x, &y).is_ok());
    }

    #[test]
    fn gaps_in_winner_pool_can_collide() {
        // Winner holds 1..=9 and 12; loser's suffix 2 shifted by 10 lands on 12.
        let mut w = summary(pre(10, 12, 1), 1, 9);
        w.occupied.push(12);
        let l = NetworkSummary { prefix: pre(10, 23, 2), supreme_id: NodeId(2), occupied: vec![1, 2] };
        assert_eq!(merge_direct(&w, &l), Err(MergeError::OffsetCollision { suffix: 2, offset: 10 }));
    }

    fn cl(suffix: u8, occupancy: usize, adjacent: &[u8]) -> ClusterSummary {
        ClusterSummary { suffix, occupancy, adjacent: adjacent.to_vec() }
    }

    #[test]
    fn shrink_folds_redundant_pair() {
        let mut cs: Vec<ClusterSummary> = (3..=200).map(|s| cl(s, 250, &[])).collect();
        cs.push(cl(1, 100, &[2]));
        cs.push(cl(2, 120, &[1]));
        // 200 clusters + 55 on the other side = 255: one fold is needed.
        let plan = merge_shrink(&cs, 55).unwrap();
        assert_eq!(plan.steps, vec![Absorb { from: 1, into: 2 }]);
        assert_eq!(plan.remaining, 199);
    }

    #[test]
    fn shrink_skips_pairs_that_do_not_fit() {
        let cs = vec![cl(1, 200, &[2]), cl(2, 100, &[1])];
        assert_eq!(merge_shrink(&cs, 253), Err(MergeError::ShrinkInsufficient));
    }

    #[test]
    fn shrink_without_adjacency_fails() {
        let cs = vec![cl(1, 1, &[]), cl(2, 1, &[])];
        assert_eq!(merge_shrink(&cs, 253), Err(MergeError::ShrinkInsufficient));
    }

    #[test]
    fn shrink_merged_cluster_inherits_links() {
        // 1-2-3 chain; after folding 1 into 2 the merged cluster still reaches 3.
        let cs = vec![cl(1, 10, &[2]), cl(2, 20, &[1, 3]), cl(3, 30, &[2])];
        let plan = merge_shrink(&cs, 253).unwrap();
        assert_eq!(plan.steps, vec![Absorb { from: 1, into: 2 }, Absorb { from: 3, into: 2 }]);
        assert_eq!(plan.remaining, 1);
    }

    #[test]
    fn increase_k_worked_example() {
        let n1 = summary(pre(10, 12, 1), 5, 200);
        let n2 = summary(pre(10, 23, 2), 8, 200);
        let plan = merge_increase_k(&n1, &n2).unwrap();
        assert_eq!(plan.supreme, NodeId(5));
        assert_eq!(plan.supreme_address(), a("10.0.0.0"));
        assert_eq!(plan.rewrite(a("10.12.0.0"), &n1.prefix).unwrap(), a("10.1.0.0"));
        assert_eq!(plan.rewrite(a("10.23.0.0"), &n2.prefix).unwrap(), a("10.2.0.0"));
        assert_eq!(plan.rewrite(a("10.23.4.9"), &n2.prefix).unwrap(), a("10.2.4.9"));
        let old_sup = plan.rewrite(a("10.12.0.0"), &n1.prefix).unwrap();
        assert_eq!(level_of(old_sup, &plan.new_prefix).unwrap(), n1.prefix.max_level());
    }

    #[test]
    fn increase_k_needs_two_octets() {
        let x = NetworkSummary { prefix: NetworkPrefix::new(&[10], NetId(1)).unwrap(), supreme_id: NodeId(1), occupied: vec![] };
        let y = NetworkSummary { prefix: NetworkPrefix::new(&[11], NetId(2)).unwrap(), supreme_id: NodeId(2), occupied: vec![] };
        assert_eq!(merge_increase_k(&x, &y), Err(MergeError::PrefixExhausted));
    }
}
