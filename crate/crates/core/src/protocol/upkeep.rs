//! Steady-state maintenance: alive updates, replica sync, staleness probes,
//! departures, subordinate promotion and rehoming.

use alloc::vec::Vec;

use super::{Ctx, Dest, Message, NodeState, Notice, Output, ProtocolConfig, Role};
use crate::addressing::{cluster_head_of, Address, Level, NetId};
use crate::table::AddressTable;
use crate::{NodeId, Tick};

/// Up to three sends spread over the probe window.
const PROBE_SENDS: u8 = 3;

fn probe_due(cfg: &ProtocolConfig, started: Tick, sent: u8, window: Tick) -> Tick {
    let end = started + window;
    let retry = started + sent as Tick * cfg.probe_retry();
    if sent < PROBE_SENDS && retry < end {
        retry
    } else {
        end
    }
}

/// How long silence must last before a probe concludes. A target the
/// network cannot reach is given up after one probe period; a reachable one
/// may be many hops away, so its reply gets a round trip on top.
fn reply_window(cfg: &ProtocolConfig, unreachable: bool) -> Tick {
    if unreachable {
        cfg.t_probe
    } else {
        cfg.t_probe + 2 * cfg.t_handshake
    }
}

/// A head checking whether a stale child is still there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Probe {
    pub id: NodeId,
    pub started: Tick,
    pub sent: u8,
    /// A probe bounced: nobody holds the address.
    pub unreachable: bool,
}

impl Probe {
    fn window(&self, cfg: &ProtocolConfig) -> Tick {
        reply_window(cfg, self.unreachable)
    }

    pub fn due(&self, cfg: &ProtocolConfig) -> Tick {
        probe_due(cfg, self.started, self.sent, self.window(cfg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum ProbeReason {
    /// Our alive update to the head bounced.
    HeadCheck,
    /// The head stopped syncing its table to us.
    Watchdog,
    /// The uplink has been dead long enough to suspect a partition.
    SupremeCheck,
}

/// A node probing an address above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct HeadProbe {
    pub target: Address,
    pub reason: ProbeReason,
    pub started: Tick,
    pub sent: u8,
}

impl HeadProbe {
    /// A bounce concludes a head probe at once, so only silence is timed.
    fn window(&self, cfg: &ProtocolConfig) -> Tick {
        reply_window(cfg, false)
    }

    pub fn due(&self, cfg: &ProtocolConfig) -> Tick {
        probe_due(cfg, self.started, self.sent, self.window(cfg))
    }
}

/// A rehomed node asking its former head to free the old suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct OldRelease {
    pub addr: Address,
    pub head: Address,
    pub started: Tick,
    pub sent: u8,
}

impl OldRelease {
    pub fn due(&self, cfg: &ProtocolConfig) -> Tick {
        probe_due(cfg, self.started, self.sent, reply_window(cfg, false))
    }
}

impl NodeState {
    pub(super) fn emit_alive(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let Some(addr) = self.addr else { return };
        if !self.uplink.bounced {
            // Someone holds the head address again.
            self.uplink.streak = 0;
            self.orphaned = None;
        }
        self.uplink.bounced = false;
        if let Some(head) = self.head_addr() {
            let msg = Message::AliveUpdate { sender_addr: addr, sender_id: self.id, held_since: self.held_since };
            self.send(out, self.to_addr(head), msg);
        }
        if self.level() == Some(Level(1)) && self.role() == Role::Head {
            self.designate_subordinate(ctx);
            if let (Some(t), Some((_, sub))) = (self.table.as_ref(), self.subordinate) {
                let snapshot = t.snapshot();
                self.send(out, self.to_addr(sub), Message::TableSync { snapshot, for_merge: false });
            }
        }
    }

    /// Lowest-id adjacent child; failing that keep the current one while it
    /// is still a child, or fall back to the lowest-id child.
    fn designate_subordinate(&mut self, ctx: &Ctx<'_>) {
        let (Some(pool), Some(table)) = (self.pool(), self.table.as_ref()) else { return };
        let adjacent = self.same_net(ctx).find(|(id, b)| {
            pool.suffix_of(b.addr).and_then(|s| table.get(s)).is_some_and(|e| e.node_id == *id && b.level().0 == 0)
        });
        let pick = if let Some((id, b)) = adjacent {
            Some((id, b.addr))
        } else if let Some((id, a)) = self.subordinate.filter(|(id, a)| {
            pool.suffix_of(*a).and_then(|s| table.get(s)).is_some_and(|e| e.node_id == *id)
        }) {
            Some((id, a))
        } else {
            table.entries().min_by_key(|e| e.node_id).map(|e| (e.node_id, pool.child(e.suffix)))
        };
        self.subordinate = pick;
    }

    pub(super) fn on_alive(&mut self, now: Tick, sender_addr: Address, sender: NodeId, held_since: Tick, out: &mut Vec<Output>) {
        let Some(s) = self.pool().and_then(|p| p.suffix_of(sender_addr)) else { return };
        let Some(table) = self.table.as_mut() else { return };
        match table.get(s) {
            Some(e) if e.node_id == sender => {
                table.mark_alive(sender, now).expect("entry present");
                self.probes.remove(&s);
                self.unconfirmed.remove(&s);
            }
            Some(_) if self.since.get(&s).copied().unwrap_or(0) >= held_since => {
                // The table's holder acquired the suffix after the sender did.
                self.send(out, self.to_addr(sender_addr), Message::AddressRevoked { addr: sender_addr, id: sender });
            }
            _ => self.adopt(now, s, sender, held_since),
        }
    }

    /// Record `node` at `suffix` because it says so from that address.
    fn adopt(&mut self, now: Tick, suffix: u8, node: NodeId, held_since: Tick) {
        let Some(table) = self.table.as_mut() else { return };
        if let Some(old) = table.suffix_of(node) {
            self.since.remove(&old);
            self.probes.remove(&old);
        }
        if self.reservations.get(&suffix).is_some_and(|r| r.requestor != node) {
            self.reservations.remove(&suffix);
        }
        table.set_holder(suffix, node, now).expect("pool suffixes are nonzero");
        self.since.insert(suffix, held_since);
        self.unconfirmed.remove(&suffix);
        self.probes.remove(&suffix);
    }

    pub(super) fn on_alive_bounce(&mut self, now: Tick, out: &mut Vec<Output>) {
        self.uplink.bounced = true;
        self.uplink.streak += 1;
        if self.head_probe.is_some() || self.claim.is_some() {
            return;
        }
        let (Some(head), Some(prefix)) = (self.head_addr(), self.prefix) else { return };
        if self.replica.as_ref().is_some_and(|r| r.head() == head) {
            self.start_head_probe(now, head, ProbeReason::HeadCheck, out);
        } else if self.uplink.streak >= self.cfg.partition_bounces() && !self.in_claim_grace(now) {
            self.start_head_probe(now, prefix.supreme_address(), ProbeReason::SupremeCheck, out);
        }
    }

    /// The network found no holder for a probed address.
    pub(super) fn on_probe_bounce(&mut self, ctx: &Ctx<'_>, target: Address, out: &mut Vec<Output>) {
        if let Some(p) = self.head_probe.filter(|p| p.target == target) {
            self.conclude_head_probe(ctx, p, out);
            return;
        }
        let Some(s) = self.pool().and_then(|p| p.suffix_of(target)) else { return };
        if let Some(p) = self.probes.get_mut(&s) {
            p.unreachable = true;
        }
    }

    fn start_head_probe(&mut self, now: Tick, target: Address, reason: ProbeReason, out: &mut Vec<Output>) {
        self.head_probe = Some(HeadProbe { target, reason, started: now, sent: 1 });
        self.send(out, self.to_addr(target), Message::ProbeNode { target_addr: target });
    }

    pub(super) fn on_probe(&mut self, target: Address, src_addr: Option<Address>, out: &mut Vec<Output>) {
        if self.addr != Some(target) {
            return;
        }
        if let Some(src) = src_addr {
            self.send(out, self.to_addr(src), Message::ProbeReply { addr: target, id: self.id });
        }
    }

    pub(super) fn on_probe_reply(&mut self, now: Tick, addr: Address, id: NodeId) {
        if let Some(p) = self.head_probe.filter(|p| p.target == addr) {
            self.head_probe = None;
            self.uplink = Default::default();
            match p.reason {
                ProbeReason::HeadCheck => {}
                // Still alive but no longer syncing to us: stand down.
                ProbeReason::Watchdog => self.replica = None,
                // The top is reachable, only our own head is gone.
                ProbeReason::SupremeCheck => {
                    self.orphaned.get_or_insert(now);
                    // Only a later alive that does not bounce clears this.
                    self.uplink.bounced = true;
                }
            }
            return;
        }
        let Some(s) = self.pool().and_then(|p| p.suffix_of(addr)) else { return };
        if self.probes.remove(&s).is_none() {
            return;
        }
        let Some(table) = self.table.as_mut() else { return };
        if table.get(s).is_some_and(|e| e.node_id == id) {
            table.mark_alive(id, now).expect("entry present");
        } else {
            self.adopt(now, s, id, 0);
        }
    }

    pub(super) fn probe_due(&mut self, now: Tick, out: &mut Vec<Output>) {
        let Some(pool) = self.pool() else {
            self.probes.clear();
            return;
        };
        let due: Vec<(u8, Probe)> =
            self.probes.iter().filter(|(_, p)| p.due(&self.cfg) <= now).map(|(&s, &p)| (s, p)).collect();
        for (s, p) in due {
            if now >= p.started + p.window(&self.cfg) {
                self.probes.remove(&s);
                let table = self.table.as_mut().expect("probes only on heads");
                if table.get(s).is_some_and(|e| e.node_id == p.id) {
                    table.release(s).expect("entry present");
                    self.since.remove(&s);
                    if self.subordinate.is_some_and(|(id, _)| id == p.id) {
                        self.subordinate = None;
                    }
                    Self::note(out, Notice::Released { suffix: s, node: p.id });
                }
            } else {
                self.probes.insert(s, Probe { sent: p.sent + 1, ..p });
                self.send(out, self.to_addr(pool.child(s)), Message::ProbeNode { target_addr: pool.child(s) });
            }
        }
    }

    pub(super) fn head_probe_due(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let now = ctx.now;
        let Some(p) = self.head_probe else { return };
        if p.due(&self.cfg) > now {
            return;
        }
        if now < p.started + p.window(&self.cfg) {
            self.head_probe = Some(HeadProbe { sent: p.sent + 1, ..p });
            self.send(out, self.to_addr(p.target), Message::ProbeNode { target_addr: p.target });
            return;
        }
        self.conclude_head_probe(ctx, p, out);
    }

    /// Nobody answered, or nobody holds the target at all.
    fn conclude_head_probe(&mut self, ctx: &Ctx<'_>, p: HeadProbe, out: &mut Vec<Output>) {
        let now = ctx.now;
        self.head_probe = None;
        match p.reason {
            ProbeReason::HeadCheck | ProbeReason::Watchdog => {
                if self.replica.as_ref().is_some_and(|r| r.head() == p.target) {
                    self.promote(now, out);
                }
            }
            ProbeReason::SupremeCheck => self.start_claim(now, out),
        }
    }

    /// Take over the head's address and its table from the replica.
    fn promote(&mut self, now: Tick, out: &mut Vec<Output>) {
        let (Some(replica), Some(prefix), Some(head)) = (self.replica.take(), self.prefix, self.head_addr()) else {
            return;
        };
        let mut table = replica;
        if let Some(own) = table.suffix_of(self.id) {
            table.release(own).expect("entry present");
        }
        table.set_head(head);
        self.configure(head, prefix, now, out);
        self.table = Some(table);
        Self::note(out, Notice::Promoted { addr: head });
    }

    pub(super) fn on_revoked(&mut self, now: Tick, addr: Address, id: NodeId, out: &mut Vec<Output>) {
        if id == self.id && self.addr == Some(addr) {
            self.abandon(now, out);
        }
    }

    pub(super) fn on_table_sync(
        &mut self,
        now: Tick,
        snapshot: &[u8],
        for_merge: bool,
        src_net: Option<NetId>,
        out: &mut Vec<Output>,
    ) {
        if for_merge {
            self.on_merge_table(now, snapshot, src_net, out);
            return;
        }
        if self.level() != Some(Level(0)) {
            return;
        }
        let Ok(t) = AddressTable::restore(snapshot) else { return };
        if Some(t.head()) == self.head_addr() {
            self.replica = Some(t);
            self.last_sync = now;
            if self.head_probe.is_some_and(|p| p.reason != ProbeReason::SupremeCheck) {
                self.head_probe = None;
            }
        }
    }

    pub(super) fn on_become_head(&mut self, now: Tick, head_addr: Address, out: &mut Vec<Output>) {
        if self.head_addr() == Some(head_addr) && self.replica.as_ref().is_some_and(|r| r.head() == head_addr) {
            self.head_probe = None;
            self.promote(now, out);
        }
    }

    /// Final sync to the subordinate and tell it to take over.
    pub(super) fn hand_over(&mut self, out: &mut Vec<Output>) {
        let (Some(t), Some((_, sub)), Some(addr)) = (self.table.as_ref(), self.subordinate, self.addr) else {
            return;
        };
        let snapshot = t.snapshot();
        self.send(out, self.to_addr(sub), Message::TableSync { snapshot, for_merge: false });
        self.send(out, self.to_addr(sub), Message::BecomeHead { head_addr: addr });
    }

    pub(super) fn watchdog_due(&self) -> Option<Tick> {
        (self.replica.is_some() && self.head_probe.is_none()).then(|| self.last_sync + 3 * self.cfg.t_alive + 1)
    }

    pub(super) fn watchdog(&mut self, now: Tick, out: &mut Vec<Output>) {
        if self.watchdog_due().is_some_and(|t| t <= now) {
            if let Some(head) = self.head_addr() {
                self.start_head_probe(now, head, ProbeReason::Watchdog, out);
            }
        }
    }

    pub(super) fn next_stale(&self) -> Option<Tick> {
        let table = self.table.as_ref()?;
        table
            .entries()
            .filter(|e| !self.probes.contains_key(&e.suffix))
            .map(|e| e.last_seen + self.cfg.t_stale + 1)
            .min()
    }

    pub(super) fn sweep(&mut self, now: Tick, out: &mut Vec<Output>) {
        let (Some(table), Some(pool)) = (self.table.as_ref(), self.pool()) else { return };
        let stale: Vec<(u8, NodeId)> = table
            .collect_stale(now, self.cfg.t_stale)
            .into_iter()
            .filter(|(s, _)| !self.probes.contains_key(s))
            .collect();
        for (s, id) in stale {
            self.probes.insert(s, Probe { id, started: now, sent: 1, unreachable: false });
            self.send(out, self.to_addr(pool.child(s)), Message::ProbeNode { target_addr: pool.child(s) });
        }
    }

    /// Periodic neighbourhood check: connectivity constraint, head rehoming
    /// and foreign-network detection.
    pub(super) fn scan(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let now = ctx.now;
        if !matches!(self.role(), Role::Member | Role::Subordinate) {
            self.detached = false;
        }
        // A relay in progress may be moving someone in beside us.
        let settled = self.join.is_none() && self.relays.is_empty();
        if settled && self.claim.is_none() && self.merge.is_none() {
            match self.role() {
                Role::Member | Role::Subordinate if self.orphaned.is_some() => self.leave_dead_cluster(ctx, out),
                Role::Member | Role::Subordinate => self.check_connectivity(ctx, out),
                Role::Head if self.level() == Some(Level(1)) => self.check_head_contact(ctx, out),
                _ => self.last_cluster_contact = now,
            }
        }
        self.reannounce(ctx, out);
        self.merge_scan(ctx, out);
    }

    /// Cluster-mates of a vanished head all notice at once. Were they all to
    /// drop their addresses together, none would be left to answer the
    /// others' join requests. Instead each keeps its address and rehomes
    /// through a neighbour outside the dead cluster, so the move spreads
    /// inward from the cluster's edge. While a cluster-mate is still
    /// configured beside us it will move before long, so we wait for it;
    /// with nobody of our network in reach we start over after a partition
    /// period, and in any case after four.
    fn leave_dead_cluster(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let (Some(head), Some(prefix), Some(since)) = (self.head_addr(), self.prefix, self.orphaned) else { return };
        let outside = |b: &super::Beacon| b.addr != head && cluster_head_of(b.addr, &prefix).ok() != Some(head);
        let target = self.same_net(ctx).filter(|(_, b)| outside(b)).min_by_key(|(_, b)| (b.level(), b.addr));
        if let Some((id, _)) = target {
            self.start_rehome(ctx.now, id, out);
            return;
        }
        let waited = ctx.now.saturating_sub(since);
        let mates = self.same_net(ctx).next().is_some();
        if waited >= 4 * self.cfg.t_partition || (!mates && waited >= self.cfg.t_partition) {
            self.abandon(ctx.now, out);
        }
    }

    fn check_connectivity(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let (Some(head), Some(prefix)) = (self.head_addr(), self.prefix) else { return };
        let same = |b: &super::Beacon| b.addr == head || cluster_head_of(b.addr, &prefix).ok() == Some(head);
        self.detached = !self.same_net(ctx).any(|(_, b)| same(&b));
        if !self.detached {
            self.last_cluster_contact = ctx.now;
            return;
        }
        if ctx.now.saturating_sub(self.last_cluster_contact) < self.cfg.t_rehome {
            return;
        }
        let target = self.same_net(ctx).filter(|(_, b)| !same(b)).min_by_key(|(_, b)| (b.level(), b.addr));
        if let Some((id, _)) = target {
            self.start_rehome(ctx.now, id, out);
        }
    }

    /// A level-1 head cut off from every member of its cluster moves
    /// elsewhere and leaves the cluster to its subordinate.
    fn check_head_contact(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let (Some(pool), Some(table)) = (self.pool(), self.table.as_ref()) else { return };
        let is_member = |id: NodeId, a: Address| pool.suffix_of(a).and_then(|s| table.get(s)).is_some_and(|e| e.node_id == id);
        if table.is_empty() || self.same_net(ctx).any(|(id, b)| is_member(id, b.addr)) {
            self.last_cluster_contact = ctx.now;
            return;
        }
        if self.subordinate.is_none() || ctx.now.saturating_sub(self.last_cluster_contact) < self.cfg.t_rehome {
            return;
        }
        let target = self
            .same_net(ctx)
            .filter(|(_, b)| pool.suffix_of(b.addr).is_none())
            .min_by_key(|(_, b)| (b.level(), b.addr));
        if let Some((id, _)) = target {
            self.start_rehome(ctx.now, id, out);
        }
    }

    /// Graceful exit.
    pub(super) fn leave(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        match self.role() {
            Role::Member | Role::Subordinate => {
                let (Some(addr), Some(head), Some(prefix)) = (self.addr, self.head_addr(), self.prefix) else { return };
                let deallocator = self
                    .same_net(ctx)
                    .find(|(_, b)| b.addr == head || cluster_head_of(b.addr, &prefix).ok() == Some(head));
                if let Some((id, _)) = deallocator {
                    let msg = Message::DepartureNotice { leaver_addr: addr, leaver_id: self.id };
                    self.send(out, Dest::Link(id), msg);
                }
            }
            Role::Head => self.hand_over(out),
            Role::Supreme | Role::Unconfigured => {}
        }
    }

    pub(super) fn on_departure_notice(&mut self, now: Tick, leaver_addr: Address, leaver: NodeId, out: &mut Vec<Output>) {
        if self.pool().and_then(|p| p.suffix_of(leaver_addr)).is_some() {
            self.release_departed(leaver_addr, leaver, out);
            return;
        }
        let _ = now;
        let Some(prefix) = self.prefix else { return };
        let Some(head) = self.head_addr() else { return };
        if cluster_head_of(leaver_addr, &prefix).ok() == Some(head) {
            let msg = Message::DeallocateRequest { leaver_addr, leaver_id: leaver };
            self.send(out, self.to_addr(head), msg);
        }
    }

    /// Confirmed whenever the suffix is ours to free, even if it was already
    /// gone, so the asker can stop retrying.
    pub(super) fn on_deallocate(&mut self, leaver_addr: Address, leaver: NodeId, src_addr: Option<Address>, out: &mut Vec<Output>) {
        if self.pool().and_then(|p| p.suffix_of(leaver_addr)).is_none() {
            return;
        }
        self.release_departed(leaver_addr, leaver, out);
        if let Some(src) = src_addr {
            self.send(out, self.to_addr(src), Message::DeallocateConfirm { leaver_addr });
        }
    }

    /// After a rehome the old head would otherwise hold our former suffix
    /// until it goes stale.
    pub(super) fn release_old(&mut self, now: Tick, old: Address, old_head: Address, out: &mut Vec<Output>) {
        self.old_release = Some(OldRelease { addr: old, head: old_head, started: now, sent: 1 });
        self.send(out, self.to_addr(old_head), Message::DeallocateRequest { leaver_addr: old, leaver_id: self.id });
    }

    pub(super) fn old_release_due(&mut self, now: Tick, out: &mut Vec<Output>) {
        let Some(r) = self.old_release else { return };
        if r.due(&self.cfg) > now {
            return;
        }
        if now >= r.started + reply_window(&self.cfg, false) {
            self.old_release = None;
            return;
        }
        self.old_release = Some(OldRelease { sent: r.sent + 1, ..r });
        self.send(out, self.to_addr(r.head), Message::DeallocateRequest { leaver_addr: r.addr, leaver_id: self.id });
    }

    /// Confirmed, or the old head is unreachable and staleness will do.
    pub(super) fn on_deallocate_confirm(&mut self, leaver_addr: Address) {
        if self.old_release.is_some_and(|r| r.addr == leaver_addr) {
            self.old_release = None;
        }
    }

    fn release_departed(&mut self, leaver_addr: Address, leaver: NodeId, out: &mut Vec<Output>) -> bool {
        let Some(s) = self.pool().and_then(|p| p.suffix_of(leaver_addr)) else { return false };
        let Some(table) = self.table.as_mut() else { return false };
        if !table.get(s).is_some_and(|e| e.node_id == leaver) {
            return false;
        }
        table.release(s).expect("entry present");
        self.since.remove(&s);
        self.probes.remove(&s);
        if self.subordinate.is_some_and(|(id, _)| id == leaver) {
            self.subordinate = None;
        }
        Self::note(out, Notice::Released { suffix: s, node: leaver });
        true
    }
}
