//! Network discovery and the address-assignment handshake.
//!
//! A requestor broadcasts a join request, collects replies for one retry
//! interval and picks the lowest-level neighbour as its allocator. A head
//! allocator with a free suffix offers it directly; anyone else forwards a
//! head query up the chain and relays the offer back. Nothing touches a table
//! before the final acknowledgement: offered suffixes sit in a reservation
//! that simply expires if the handshake dies.

use alloc::vec::Vec;

use thiserror::Error;

use super::{Ctx, Dest, JoinId, Message, NodeState, Notice, Output};
use crate::addressing::{cluster_head_of, level_of, Address, Level, NetId, NetworkPrefix};
use crate::{mix64, NodeId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no configured neighbour to allocate from")]
pub struct NoNeighbors;

/// Lowest level wins; ties go to the lowest address.
pub fn select_allocator(neighbors: &[(Address, Level)]) -> Result<Address, NoNeighbors> {
    neighbors.iter().map(|&(a, l)| (l, a)).min().map(|(_, a)| a).ok_or(NoNeighbors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Reply {
    id: NodeId,
    addr: Address,
    level: Level,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) enum Phase {
    Discover { attempt: u8, next_at: Tick, replies: Vec<Reply>, heard: bool },
    Requested { allocator: NodeId, deadline: Tick },
    Accepted { allocator: NodeId, addr: Address, deadline: Tick },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct JoinState {
    pub join: JoinId,
    pub phase: Phase,
    /// A configured node moving to another cluster.
    pub rehome: bool,
}

impl JoinState {
    pub fn due(&self) -> Tick {
        match self.phase {
            Phase::Discover { next_at, .. } => next_at,
            Phase::Requested { deadline, .. } | Phase::Accepted { deadline, .. } => deadline,
        }
    }
}

/// An allocator waiting on its head for someone else's offer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Relay {
    pub requestor: NodeId,
    pub deadline: Tick,
}

/// A suffix offered but not yet acknowledged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Reservation {
    pub join: JoinId,
    pub requestor: NodeId,
    pub deadline: Tick,
}

impl NodeState {
    /// Every stage waits on at most two multi-hop legs through the
    /// allocator's head, each bounded by one handshake period.
    fn stage_deadline(&self, now: Tick) -> Tick {
        now + 2 * self.cfg.t_handshake
    }

    pub(super) fn start_join(&mut self, now: Tick, out: &mut Vec<Output>) {
        let join = JoinId { node: self.id, seq: self.join_seq, attempt: 0 };
        self.join_seq += 1;
        self.discover(join, false, now, out);
    }

    fn discover(&mut self, join: JoinId, rehome: bool, now: Tick, out: &mut Vec<Output>) {
        self.send(out, Dest::Local, Message::JoinNetworkRequest { join, requestor_id: self.id });
        let phase = Phase::Discover { attempt: 1, next_at: now + self.cfg.t_init, replies: Vec::new(), heard: false };
        self.join = Some(JoinState { join, phase, rehome });
    }

    /// Ask `allocator` for an address while keeping the current one.
    pub(super) fn start_rehome(&mut self, now: Tick, allocator: NodeId, out: &mut Vec<Output>) {
        let join = JoinId { node: self.id, seq: self.join_seq, attempt: 0 };
        self.join_seq += 1;
        self.send(out, Dest::Link(allocator), Message::ChangeAddressRequest { join, node_id: self.id });
        let deadline = self.stage_deadline(now);
        self.join = Some(JoinState { join, phase: Phase::Requested { allocator, deadline }, rehome: true });
        Self::note(out, Notice::Rehoming { join });
    }

    pub(super) fn on_join_request(&mut self, join: JoinId, requestor: NodeId, out: &mut Vec<Output>) {
        let (Some(addr), Some(prefix), Some(level)) = (self.addr, self.prefix, self.level()) else {
            return;
        };
        if requestor == self.id {
            return;
        }
        let reply = Message::JoinReply { join, responder_addr: addr, responder_level: level, prefix };
        self.send(out, Dest::Link(requestor), reply);
    }

    pub(super) fn on_join_reply(&mut self, now: Tick, join: JoinId, src: NodeId, addr: Address, prefix: NetworkPrefix) {
        let waiting = self.rejoin.is_some_and(|(w, until)| now < until && w != prefix.netid);
        let banned = waiting || self.banned.contains(&prefix.netid);
        let Some(JoinState { join: mine, phase: Phase::Discover { replies, heard, .. }, .. }) = self.join.as_mut() else {
            return;
        };
        if *mine != join {
            return;
        }
        *heard = true;
        if !banned && !replies.iter().any(|r| r.id == src) {
            let level = level_of(addr, &prefix).unwrap_or(Level(0));
            replies.push(Reply { id: src, addr, level });
        }
    }

    pub(super) fn join_due(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let now = ctx.now;
        let Some(state) = self.join.as_ref() else { return };
        if state.due() > now {
            return;
        }
        let (join, rehome) = (state.join, state.rehome);
        match &state.phase {
            Phase::Discover { attempt, replies, heard, .. } => {
                let attempt = *attempt;
                let heard = *heard;
                let pick: Vec<(Address, Level)> = replies.iter().map(|r| (r.addr, r.level)).collect();
                if let Ok(a) = select_allocator(&pick) {
                    let allocator = replies.iter().find(|r| r.addr == a).map(|r| r.id).expect("picked from replies");
                    self.send(out, Dest::Link(allocator), Message::AddressRequest { join, requestor_id: self.id });
                    let deadline = self.stage_deadline(now);
                    self.join = Some(JoinState { join, phase: Phase::Requested { allocator, deadline }, rehome });
                } else if attempt < self.cfg.init_attempts || heard || self.rejoin.is_some_and(|(_, until)| now < until) {
                    // Someone answered but only from a network we are leaving:
                    // keep asking rather than found a rival network.
                    let attempt = if attempt < self.cfg.init_attempts { attempt + 1 } else { 1 };
                    self.send(out, Dest::Local, Message::JoinNetworkRequest { join, requestor_id: self.id });
                    let phase = Phase::Discover { attempt, next_at: now + self.cfg.t_init, replies: Vec::new(), heard: false };
                    self.join = Some(JoinState { join, phase, rehome });
                } else {
                    self.join = None;
                    self.become_supreme(now, out);
                }
            }
            Phase::Requested { .. } | Phase::Accepted { .. } => {
                let unanswered = matches!(state.phase, Phase::Requested { .. });
                self.join = None;
                if rehome {
                    self.rehome_failed = unanswered;
                    Self::note(out, Notice::HandshakeFailed { join });
                } else if join.attempt + 1 < self.cfg.handshake_attempts {
                    let next = JoinId { attempt: join.attempt + 1, ..join };
                    self.discover(next, false, now, out);
                } else {
                    Self::note(out, Notice::HandshakeFailed { join });
                    self.start_join(now, out);
                }
            }
        }
    }

    /// Found a network: all-zero suffix under the configured prefix.
    fn become_supreme(&mut self, now: Tick, out: &mut Vec<Output>) {
        // Salted by join count so a node that founds twice never reuses a NetID.
        let netid = NetId(mix64(self.id.0 ^ mix64(self.join_seq as u64)));
        let prefix = self.cfg.base_prefix(netid);
        self.configure(prefix.supreme_address(), prefix, now, out);
    }

    /// Reserve a suffix for `requestor` in this head's pool. A requestor
    /// already in the table gets its current suffix back.
    fn reserve(&mut self, now: Tick, join: JoinId, requestor: NodeId) -> Option<Address> {
        let pool = self.pool()?;
        let table = self.table.as_ref()?;
        let existing = self.reservations.iter().find(|(_, r)| r.join == join).map(|(&s, _)| s);
        let suffix = existing
            .or_else(|| table.suffix_of(requestor))
            .or_else(|| table.lowest_free_where(|s| self.reservations.contains_key(&s)))?;
        let deadline = self.stage_deadline(now);
        self.reservations.insert(suffix, Reservation { join, requestor, deadline });
        Some(pool.child(suffix))
    }

    pub(super) fn on_address_request(
        &mut self,
        now: Tick,
        join: JoinId,
        src: NodeId,
        requestor: NodeId,
        out: &mut Vec<Output>,
    ) {
        if self.addr.is_none() || self.relays.contains_key(&join) {
            return;
        }
        if self.orphaned.is_some() {
            // Our head is gone; nothing we relay can complete.
            return;
        }
        if self.join.as_ref().is_some_and(|j| j.rehome) {
            // Two nodes rehoming through each other would swap clusters
            // forever. The lower id goes and the other stays to serve it,
            // unless our own last attempt already went unanswered.
            if requestor > self.id && !self.rehome_failed {
                return;
            }
            if let Some(j) = self.join.take() {
                self.rehome_failed = false;
                Self::note(out, Notice::HandshakeFailed { join: j.join });
            }
        }
        if self.table.is_some() {
            if let Some(addr) = self.reserve(now, join, requestor) {
                self.send(out, Dest::Link(src), Message::AddressOffer { join, addr });
                return;
            }
            if self.is_supreme() {
                self.send(out, Dest::Link(src), Message::NetworkFull { join });
                return;
            }
        }
        let (Some(head), Some(origin)) = (self.head_addr(), self.addr) else { return };
        self.relays.insert(join, Relay { requestor: src, deadline: self.stage_deadline(now) });
        self.send(out, self.to_addr(head), Message::HeadAddressQuery { join, requestor_id: requestor, origin });
    }

    pub(super) fn on_head_query(
        &mut self,
        now: Tick,
        join: JoinId,
        requestor: NodeId,
        origin: Address,
        out: &mut Vec<Output>,
    ) {
        if self.table.is_none() {
            return;
        }
        if let Some(addr) = self.reserve(now, join, requestor) {
            self.send(out, self.to_addr(origin), Message::AddressOffer { join, addr });
        } else if self.is_supreme() {
            self.send(out, self.to_addr(origin), Message::NetworkFull { join });
        } else if let Some(head) = self.head_addr() {
            self.send(out, self.to_addr(head), Message::HeadAddressQuery { join, requestor_id: requestor, origin });
        }
    }

    pub(super) fn on_offer(&mut self, now: Tick, join: JoinId, addr: Address, out: &mut Vec<Output>) {
        let deadline = self.stage_deadline(now);
        if let Some(JoinState { join: mine, phase, .. }) = self.join.as_mut() {
            if *mine == join {
                if let Phase::Requested { allocator, .. } = *phase {
                    *phase = Phase::Accepted { allocator, addr, deadline };
                    let accept = Message::AddressAccept { join, addr, requestor_id: self.id };
                    self.send(out, Dest::Link(allocator), accept);
                }
                return;
            }
        }
        let deadline = self.stage_deadline(now);
        if let Some(relay) = self.relays.get_mut(&join) {
            relay.deadline = deadline;
            let to = relay.requestor;
            self.send(out, Dest::Link(to), Message::AddressOffer { join, addr });
        }
    }

    pub(super) fn on_accept(&mut self, now: Tick, join: JoinId, addr: Address, requestor: NodeId, out: &mut Vec<Output>) {
        let reserved = self.reservations.iter().find(|(_, r)| r.join == join).map(|(&s, r)| (s, r.requestor));
        if let Some((suffix, holder)) = reserved {
            let Some(pool) = self.pool() else { return };
            if pool.child(suffix) != addr || holder != requestor {
                return;
            }
            if self.commit(now, suffix, requestor, out) {
                let prefix = self.prefix.expect("configured head");
                self.send(out, Dest::Link(requestor), Message::JoinComplete { join, addr, prefix });
            }
            return;
        }
        let deadline = self.stage_deadline(now);
        if let Some(relay) = self.relays.get_mut(&join) {
            relay.deadline = deadline;
            let Some(prefix) = self.prefix else { return };
            let Ok(head) = cluster_head_of(addr, &prefix) else { return };
            self.send(out, self.to_addr(head), Message::AllocationAck { join, addr, requestor_id: requestor });
        }
    }

    pub(super) fn on_ack(
        &mut self,
        now: Tick,
        join: JoinId,
        addr: Address,
        requestor: NodeId,
        src_addr: Option<Address>,
        out: &mut Vec<Output>,
    ) {
        let Some(suffix) = self.pool().and_then(|p| p.suffix_of(addr)) else { return };
        if let Some(r) = self.reservations.get(&suffix) {
            if r.requestor != requestor {
                return;
            }
        }
        if self.commit(now, suffix, requestor, out) {
            if let Some(origin) = src_addr {
                self.send(out, self.to_addr(origin), Message::ProcessComplete { join, addr });
            }
        }
    }

    /// Write the entry. Only a free suffix or one already held by the same
    /// node can be committed.
    fn commit(&mut self, now: Tick, suffix: u8, node: NodeId, out: &mut Vec<Output>) -> bool {
        let Some(table) = self.table.as_mut() else { return false };
        if let Some(e) = table.get(suffix) {
            if e.node_id != node {
                return false;
            }
        }
        if let Some(old) = table.suffix_of(node) {
            if old != suffix {
                self.since.remove(&old);
            }
        }
        table.set_holder(suffix, node, now).expect("suffix 0 never offered");
        self.since.insert(suffix, now);
        self.unconfirmed.insert(suffix);
        self.reservations.remove(&suffix);
        Self::note(out, Notice::Committed { suffix, node });
        true
    }

    pub(super) fn on_process_complete(&mut self, join: JoinId, addr: Address, out: &mut Vec<Output>) {
        let Some(relay) = self.relays.remove(&join) else { return };
        let Some(prefix) = self.prefix else { return };
        self.send(out, Dest::Link(relay.requestor), Message::JoinComplete { join, addr, prefix });
    }

    pub(super) fn on_join_complete(
        &mut self,
        ctx: &Ctx<'_>,
        join: JoinId,
        addr: Address,
        prefix: NetworkPrefix,
        out: &mut Vec<Output>,
    ) {
        let Some(state) = self.join.as_ref() else { return };
        if state.join != join || !matches!(state.phase, Phase::Accepted { addr: a, .. } if a == addr) {
            return;
        }
        self.join = None;
        let was_head = self.table.is_some();
        if was_head {
            self.hand_over(out);
        }
        let old = self.addr.zip(self.prefix).filter(|(_, p)| p.netid == prefix.netid);
        self.configure(addr, prefix, ctx.now, out);
        if let Some((old, old_prefix)) = old.filter(|_| !was_head) {
            let old_head = cluster_head_of(old, &old_prefix).ok();
            if let Some(h) = old_head.filter(|&h| h != old && Some(h) != cluster_head_of(addr, &prefix).ok()) {
                self.release_old(ctx.now, old, h, out);
            }
        }
    }

    pub(super) fn on_network_full(&mut self, _now: Tick, join: JoinId, out: &mut Vec<Output>) {
        if self.join.as_ref().is_some_and(|j| j.join == join) {
            self.join = None;
            Self::note(out, Notice::HandshakeFailed { join });
            return;
        }
        if let Some(relay) = self.relays.remove(&join) {
            self.send(out, Dest::Link(relay.requestor), Message::NetworkFull { join });
        }
    }

    pub(super) fn expire_relays(&mut self, now: Tick) {
        self.relays.retain(|_, r| r.deadline > now);
        self.reservations.retain(|_, r| r.deadline > now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn lowest_level_allocator_wins() {
        let n = [(a("10.1.1.1"), Level(0)), (a("10.1.1.0"), Level(1))];
        assert_eq!(select_allocator(&n), Ok(a("10.1.1.1")));
    }

    #[test]
    fn ties_break_by_lowest_address_in_any_order() {
        let n = [(a("10.1.2.5"), Level(0)), (a("10.1.2.3"), Level(0)), (a("10.1.0.0"), Level(2))];
        let mut perm = n;
        for _ in 0..3 {
            perm.rotate_left(1);
            assert_eq!(select_allocator(&perm), Ok(a("10.1.2.3")));
        }
        let mut rev = n;
        rev.reverse();
        assert_eq!(select_allocator(&rev), Ok(a("10.1.2.3")));
    }

    #[test]
    fn no_neighbours() {
        assert_eq!(select_allocator(&[]), Err(NoNeighbors));
    }
}
