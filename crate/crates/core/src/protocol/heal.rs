//! Partition healing and network merging.
//!
//! A node whose uplink has been dead for the partition threshold, and which
//! cannot reach its supreme, claims the network: it picks a fresh prefix and
//! NetID, moves itself under them and floods an announcement. Competing
//! claims from the same old network are ranked by level (higher first) then
//! id (lower first); every node converges on the best one it hears. After the
//! threshold the surviving claimant takes the supreme address.
//!
//! When two networks touch, their supremes exchange pool sizes. The larger
//! network wins; the loser hands over its table, pushes an offset directive
//! down its tree and rejoins the winner as an ordinary node.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{Ctx, Dest, MergeKind, MergeStage, Message, NodeState, Notice, Output, Role};
use crate::addressing::{offset_address, reprefix, Address, AddressError, Level, NetId, NetworkPrefix};
use crate::merge::{decide_winner, verify_offset};
use crate::table::AddressTable;
use crate::{mix64, NodeId, Tick};

/// The best claim a node has followed away from an old network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Adopted {
    claimant: NodeId,
    level: Level,
    prefix: NetworkPrefix,
    at: Tick,
}

impl Adopted {
    fn beats(&self, other: &Adopted) -> bool {
        (other.level, self.claimant) < (self.level, other.claimant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Claim {
    old_netid: NetId,
    pub finalize_at: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum MergeState {
    Offered { to: NetId, deadline: Tick },
    AwaitTable { loser: NetId, deadline: Tick },
    AwaitDirective { winner: NetId, deadline: Tick },
}

impl MergeState {
    pub fn deadline(&self) -> Tick {
        match *self {
            MergeState::Offered { deadline, .. }
            | MergeState::AwaitTable { deadline, .. }
            | MergeState::AwaitDirective { deadline, .. } => deadline,
        }
    }
}

impl NodeState {
    /// A whole losing network abandons at once, so its far side hears
    /// nobody configured for a while. Founding there would start the merge
    /// over; wait for the winner's addresses to spread instead.
    fn rejoin_winner(&mut self, now: Tick, winner: NetId, out: &mut Vec<Output>) {
        self.rejoin = Some((winner, now + 4 * self.cfg.t_partition));
        self.abandon(now, out);
    }

    fn claim_window(&self) -> Tick {
        self.cfg.t_partition + 2 * self.cfg.t_alive
    }

    /// Recently followed a claim that has not had time to settle.
    pub(super) fn in_claim_grace(&self, now: Tick) -> bool {
        self.adopted.values().any(|a| Some(a.prefix.netid) == self.netid() && now < a.at + self.claim_window())
    }

    /// Announcements travel by one-hop broadcast and can be lost. While a
    /// claim we follow is fresh, repeat it to any neighbour still showing
    /// the old network or a claim that lost to ours.
    pub(super) fn reannounce(&self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let Some(net) = self.netid() else { return };
        let window = self.claim_window();
        let mut told = BTreeSet::new();
        for b in ctx.neighbors.iter().filter_map(|n| n.view) {
            let theirs = b.prefix.netid;
            let old = self.superseded.get(&theirs).copied().unwrap_or(theirs);
            let Some(a) = self.adopted.get(&old) else { continue };
            if a.prefix.netid == net && theirs != net && ctx.now < a.at + window && told.insert(old) {
                self.announce(old, a, out);
            }
        }
    }

    /// Derive a prefix for a network splitting off `old`. The first octet is
    /// kept unless it is the only one; the rest come from a hash of this
    /// node's id, the old NetID and a counter, avoiding the old octets.
    fn derive_prefix(&mut self, old: &NetworkPrefix, avoid: &[NetworkPrefix]) -> NetworkPrefix {
        loop {
            self.heal_counter += 1;
            let h = mix64(self.id.0 ^ mix64(old.netid.0 ^ mix64(self.heal_counter as u64)));
            let mut octets = [0u8; 3];
            octets[..old.len()].copy_from_slice(old.octets());
            let from = if old.len() == 1 { 0 } else { 1 };
            for (i, o) in octets.iter_mut().enumerate().take(old.len()).skip(from) {
                *o = 1 + ((h >> (8 * i)) % 254) as u8;
            }
            let netid = NetId(mix64(h ^ 0x6e65_7469_64));
            let p = NetworkPrefix::new(&octets[..old.len()], netid).expect("same length as old");
            if !p.same_octets(old) && !avoid.iter().any(|a| a.same_octets(&p)) {
                return p;
            }
        }
    }

    /// Move every address this node knows about through `f`.
    fn remap(&mut self, f: impl Fn(Address) -> Result<Address, AddressError>, prefix: NetworkPrefix) -> bool {
        let Some(addr) = self.addr else { return false };
        let Ok(new) = f(addr) else { return false };
        self.addr = Some(new);
        self.prefix = Some(prefix);
        if let Some(t) = self.table.as_mut() {
            t.set_head(new);
        }
        if let Some(r) = self.replica.as_mut() {
            match f(r.head()) {
                Ok(h) => r.set_head(h),
                Err(_) => self.replica = None,
            }
        }
        self.subordinate = self.subordinate.and_then(|(id, a)| f(a).ok().map(|a| (id, a)));
        self.relays.clear();
        self.reservations.clear();
        self.head_probe = None;
        self.uplink = Default::default();
        true
    }

    fn follow(&mut self, now: Tick, c: Adopted, old_netid: NetId, out: &mut Vec<Output>) {
        let Some(cur) = self.prefix else { return };
        if self.remap(|a| reprefix(a, &cur, &c.prefix), c.prefix) {
            if let Some(prev) = self.adopted.get(&old_netid).filter(|p| p.prefix.netid != c.prefix.netid) {
                self.superseded.insert(prev.prefix.netid, old_netid);
            }
            self.adopted.insert(old_netid, Adopted { at: now, ..c });
            Self::note(out, Notice::Reprefixed { prefix: c.prefix });
            self.announce(old_netid, &c, out);
        }
    }

    fn announce(&self, old_netid: NetId, c: &Adopted, out: &mut Vec<Output>) {
        let msg = Message::SupremeAnnounce {
            new_prefix: c.prefix,
            old_netid,
            claimant_id: c.claimant,
            claimant_level: c.level,
        };
        self.send(out, Dest::Local, msg);
    }

    pub(super) fn start_claim(&mut self, now: Tick, out: &mut Vec<Output>) {
        let (Some(old), Some(level)) = (self.prefix, self.level()) else { return };
        if self.role() == Role::Supreme || self.claim.is_some() || self.join.is_some() {
            return;
        }
        let avoid: Vec<NetworkPrefix> = self.adopted.values().map(|a| a.prefix).collect();
        let prefix = self.derive_prefix(&old, &avoid);
        let c = Adopted { claimant: self.id, level, prefix, at: now };
        self.claim = Some(Claim { old_netid: old.netid, finalize_at: now + self.cfg.t_partition });
        Self::note(out, Notice::Claimed { prefix });
        self.follow(now, c, old.netid, out);
    }

    pub(super) fn on_announce(
        &mut self,
        now: Tick,
        prefix: NetworkPrefix,
        old_netid: NetId,
        claimant: NodeId,
        level: Level,
        out: &mut Vec<Output>,
    ) {
        let heard = Adopted { claimant, level, prefix, at: now };
        let (Some(net), Some(cur_prefix)) = (self.netid(), self.prefix) else {
            // Still joining: remember the claim in case the network we end
            // up in turns out to be this one, or a rival of it.
            if self.adopted.get(&old_netid).is_none_or(|c| heard.beats(c)) {
                self.adopted.insert(old_netid, heard);
            }
            return;
        };
        if prefix.netid == net {
            return;
        }
        let in_old = net == old_netid;
        let cur = self.adopted.get(&old_netid).copied();
        if !in_old && cur.is_none_or(|c| c.prefix.netid != net) {
            return;
        }
        if self.role() == Role::Supreme {
            // A supreme never moves. If the claim is against its own network
            // the network is not partitioned here: outrank the claim.
            if in_old {
                let me = Adopted { claimant: self.id, level: cur_prefix.max_level(), prefix: cur_prefix, at: now };
                self.adopted.insert(old_netid, me);
                self.announce(old_netid, &me, out);
            }
            return;
        }
        if let Some(c) = cur.filter(|c| !heard.beats(c)) {
            if c.prefix.netid == net {
                // Tell the weaker side about the better claim.
                self.announce(old_netid, &c, out);
                return;
            }
        }
        if self.claim.is_some_and(|c| c.old_netid == old_netid) {
            self.claim = None;
        }
        self.follow(now, heard, old_netid, out);
    }

    pub(super) fn heal_due(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let now = ctx.now;
        if self.merge.is_some_and(|m| m.deadline() <= now) {
            self.merge = None;
        }
        let Some(claim) = self.claim else { return };
        if claim.finalize_at > now {
            return;
        }
        self.claim = None;
        let (Some(addr), Some(prefix)) = (self.addr, self.prefix) else { return };
        let sup = prefix.supreme_address();
        if addr != sup {
            if self.table.is_some() {
                self.hand_over(out);
            }
            self.configure(sup, prefix, now, out);
        }
    }

    pub(super) fn merge_scan(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let now = ctx.now;
        let (Some(prefix), Some(net)) = (self.prefix, self.netid()) else { return };
        if self.join.is_some() || self.claim.is_some() || self.in_claim_grace(now) {
            return;
        }
        let foreign = ctx
            .neighbors
            .iter()
            .filter_map(|n| n.view)
            .filter(|b| {
                let n = b.prefix.netid;
                n != net
                    && b.prefix.len() == prefix.len()
                    && !self.banned.contains(&n)
                    && !self.adopted.contains_key(&n)
                    && self.merge_reported.get(&n).is_none_or(|&t| now >= t + self.cfg.t_partition)
            })
            .map(|b| b.prefix)
            .min_by_key(|p| p.netid);
        let Some(theirs) = foreign else { return };
        self.merge_reported.insert(theirs.netid, now);
        if self.role() == Role::Supreme {
            self.offer(now, theirs, out);
        } else {
            let msg = Message::MergeProbe {
                stage: MergeStage::Report,
                prefix: theirs,
                supreme_addr: theirs.supreme_address(),
                supreme_id: NodeId(0),
                n_children: 0,
            };
            self.send(out, self.to_addr(prefix.supreme_address()), msg);
        }
    }

    fn own_probe(&self, stage: MergeStage) -> Option<Message> {
        Some(Message::MergeProbe {
            stage,
            prefix: self.prefix?,
            supreme_addr: self.addr?,
            supreme_id: self.id,
            n_children: self.table.as_ref()?.len() as u8,
        })
    }

    fn offer(&mut self, now: Tick, theirs: NetworkPrefix, out: &mut Vec<Output>) {
        if self.merge.is_some() {
            return;
        }
        let Some(msg) = self.own_probe(MergeStage::Offer) else { return };
        self.send(out, Dest::Addr { net: theirs.netid, addr: theirs.supreme_address() }, msg);
        self.merge = Some(MergeState::Offered { to: theirs.netid, deadline: now + 2 * self.cfg.t_handshake });
    }

    /// Second half of the exchange: either wait for the loser's table or
    /// send ours.
    fn settle_roles(&mut self, now: Tick, winner: NodeId, theirs: NetworkPrefix, supreme_addr: Address, out: &mut Vec<Output>) {
        let deadline = now + 2 * self.cfg.t_handshake;
        if winner == self.id {
            self.merge = Some(MergeState::AwaitTable { loser: theirs.netid, deadline });
        } else if let Some(t) = self.table.as_ref() {
            let msg = Message::TableSync { snapshot: t.snapshot(), for_merge: true };
            self.send(out, Dest::Addr { net: theirs.netid, addr: supreme_addr }, msg);
            self.merge = Some(MergeState::AwaitDirective { winner: theirs.netid, deadline });
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn on_merge_probe(
        &mut self,
        now: Tick,
        stage: MergeStage,
        theirs: NetworkPrefix,
        supreme_addr: Address,
        supreme_id: NodeId,
        n_children: u8,
        out: &mut Vec<Output>,
    ) {
        if self.role() != Role::Supreme || Some(theirs.netid) == self.netid() {
            return;
        }
        match stage {
            MergeStage::Report => {
                let fresh = self.merge_reported.get(&theirs.netid).is_none_or(|&t| now >= t + self.cfg.t_partition);
                if fresh && !self.banned.contains(&theirs.netid) {
                    self.merge_reported.insert(theirs.netid, now);
                    self.offer(now, theirs, out);
                }
            }
            MergeStage::Offer => {
                match self.merge {
                    None => {}
                    // Crossed offers: the lower id answers.
                    Some(MergeState::Offered { to, .. }) if to == theirs.netid && self.id < supreme_id => {}
                    Some(_) => return,
                }
                let mine = self.table.as_ref().map_or(0, |t| t.len());
                let winner = match decide_winner(mine, self.id, n_children as usize, supreme_id) {
                    Ordering::Greater => supreme_id,
                    _ => self.id,
                };
                let Some(msg) = self.own_probe(MergeStage::Answer { winner }) else { return };
                self.send(out, Dest::Addr { net: theirs.netid, addr: supreme_addr }, msg);
                self.settle_roles(now, winner, theirs, supreme_addr, out);
            }
            MergeStage::Answer { winner } => {
                if matches!(self.merge, Some(MergeState::Offered { to, .. }) if to == theirs.netid) {
                    self.settle_roles(now, winner, theirs, supreme_addr, out);
                }
            }
        }
    }

    pub(super) fn on_merge_table(&mut self, now: Tick, snapshot: &[u8], src_net: Option<NetId>, out: &mut Vec<Output>) {
        let Some(MergeState::AwaitTable { loser, .. }) = self.merge else { return };
        if src_net != Some(loser) {
            return;
        }
        let (Ok(theirs), Some(prefix)) = (AddressTable::restore(snapshot), self.prefix) else { return };
        self.merge = None;
        let table = self.table.as_mut().expect("supreme has a table");
        let mine: Vec<u8> = table.entries().map(|e| e.suffix).collect();
        let lost: Vec<u8> = theirs.entries().map(|e| e.suffix).collect();
        let n = mine.len() as u8;
        let kind = match verify_offset(&mine, &lost, n) {
            Ok(_) if mine.len() + lost.len() < 255 => {
                for e in theirs.entries() {
                    let _ = table.assign(e.suffix + n, e.node_id, now);
                }
                MergeKind::Offset { n, level: Level(prefix.max_level().0 - 1) }
            }
            _ => MergeKind::Reallocate,
        };
        self.send(out, Dest::Addr { net: loser, addr: theirs.head() }, Message::MergeDirective { kind, prefix });
        Self::note(out, Notice::MergeWon { loser });
    }

    pub(super) fn on_merge_directive(
        &mut self,
        now: Tick,
        kind: MergeKind,
        winner: NetworkPrefix,
        src_net: Option<NetId>,
        out: &mut Vec<Output>,
    ) {
        let (Some(old), Some(net)) = (self.prefix, self.netid()) else { return };
        let is_loser_supreme = matches!(self.merge, Some(MergeState::AwaitDirective { winner: w, .. }) if Some(w) == src_net);
        if !is_loser_supreme && src_net != Some(net) {
            return;
        }
        if let (Some(t), Some(pool)) = (self.table.as_ref(), self.pool()) {
            for e in t.entries() {
                self.send(out, self.to_addr(pool.child(e.suffix)), Message::MergeDirective { kind, prefix: winner });
            }
        }
        if self.role() == Role::Supreme {
            self.merge = None;
            self.banned.insert(net);
            Self::note(out, Notice::MergeLost { winner: winner.netid });
            self.rejoin_winner(now, winner.netid, out);
            return;
        }
        let moved = match kind {
            MergeKind::Offset { n, level } => {
                self.remap(|a| reprefix(offset_address(a, n, level)?, &old, &winner), winner)
            }
            MergeKind::Reprefix => self.remap(|a| reprefix(a, &old, &winner), winner),
            MergeKind::IncreaseK { .. } | MergeKind::Reallocate => false,
        };
        if moved {
            Self::note(out, Notice::Reprefixed { prefix: winner });
        } else {
            self.banned.insert(net);
            self.rejoin_winner(now, winner.netid, out);
        }
    }
}
