//! Finding a node's current address by id.
//!
//! A query climbs the head chain. Each head answers from its own table; on a
//! miss a head at level 2 or above also asks its other child heads, and the
//! query escalates once those are exhausted. A query arriving from a parent
//! only searches downwards. Replies retrace the path hop by hop.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::{Ctx, Message, NodeState, Notice, Output, QueryId};
use crate::addressing::{cluster_head_of, Address, Level};
use crate::{NodeId, Tick};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct LookupState {
    target: NodeId,
    origin_addr: Address,
    /// Where the answer goes; `None` at the origin.
    reply_to: Option<Address>,
    awaiting: BTreeSet<Address>,
    /// Parent still to ask once `awaiting` drains.
    escalate: Option<Address>,
    pub deadline: Tick,
}

impl NodeState {
    pub(super) fn start_lookup(&mut self, ctx: &Ctx<'_>, target: NodeId, out: &mut Vec<Output>) {
        let query = QueryId { origin: self.id, seq: self.query_seq };
        self.query_seq += 1;
        let Some(addr) = self.addr else {
            Self::note(out, Notice::LookupDone { query, target, result: None });
            return;
        };
        if target == self.id {
            Self::note(out, Notice::LookupDone { query, target, result: Some(addr) });
            return;
        }
        let now = ctx.now;
        if self.table.is_some() {
            self.search(now, query, target, addr, None, out);
        } else if let Some(head) = self.head_addr() {
            let msg = Message::FindAddress { target_id: target, query_id: query, origin_addr: addr, visited_level: Level(0) };
            self.send(out, self.to_addr(head), msg);
            let state = LookupState {
                target,
                origin_addr: addr,
                reply_to: None,
                awaiting: [head].into_iter().collect(),
                escalate: None,
                deadline: now + self.cfg.t_handshake,
            };
            self.lookups.insert(query, state);
        }
    }

    fn local_answer(&self, target: NodeId) -> Option<Address> {
        if target == self.id {
            return self.addr;
        }
        let s = self.table.as_ref()?.suffix_of(target)?;
        Some(self.pool()?.child(s))
    }

    /// Child heads, when this head's children are heads themselves.
    fn child_heads(&self) -> Vec<Address> {
        match (self.level(), self.table.as_ref(), self.pool()) {
            (Some(l), Some(t), Some(p)) if l.0 >= 2 => t.entries().map(|e| p.child(e.suffix)).collect(),
            _ => Vec::new(),
        }
    }

    /// The child of this head whose subtree holds `addr`.
    fn branch_of(&self, addr: Address) -> Option<Address> {
        let (me, prefix) = (self.addr?, self.prefix?);
        let mut cur = addr;
        loop {
            let up = cluster_head_of(cur, &prefix).ok()?;
            if up == me {
                return Some(cur);
            }
            cur = up;
        }
    }

    /// Search starting at this head for a query that came from below (or
    /// started here).
    fn search(
        &mut self,
        now: Tick,
        query: QueryId,
        target: NodeId,
        origin_addr: Address,
        reply_to: Option<Address>,
        out: &mut Vec<Output>,
    ) {
        if let Some(found) = self.local_answer(target) {
            self.answer(query, target, reply_to, Some(found), out);
            return;
        }
        let skip = reply_to.and_then(|a| self.branch_of(a));
        let fan: BTreeSet<Address> = self.child_heads().into_iter().filter(|&c| Some(c) != skip).collect();
        let state = LookupState {
            target,
            origin_addr,
            reply_to,
            awaiting: BTreeSet::new(),
            escalate: self.head_addr(),
            deadline: now + self.cfg.t_handshake,
        };
        self.lookups.insert(query, state);
        self.fan_out(query, fan, out);
        self.progress(now, query, out);
    }

    fn fan_out(&mut self, query: QueryId, to: BTreeSet<Address>, out: &mut Vec<Output>) {
        let Some(level) = self.level() else { return };
        let Some(state) = self.lookups.get_mut(&query) else { return };
        let (target, origin_addr) = (state.target, state.origin_addr);
        state.awaiting.extend(to.iter().copied());
        for c in to {
            let msg = Message::FindAddress { target_id: target, query_id: query, origin_addr, visited_level: level };
            self.send(out, self.to_addr(c), msg);
        }
    }

    /// Nothing left in flight: escalate if possible, else fail.
    fn progress(&mut self, now: Tick, query: QueryId, out: &mut Vec<Output>) {
        let Some(state) = self.lookups.get_mut(&query) else { return };
        if !state.awaiting.is_empty() {
            return;
        }
        if let Some(parent) = state.escalate.take() {
            state.deadline = now + self.cfg.t_handshake;
            self.fan_out(query, [parent].into_iter().collect(), out);
        } else {
            let (target, reply_to) = (state.target, state.reply_to);
            self.answer(query, target, reply_to, None, out);
        }
    }

    fn answer(&mut self, query: QueryId, target: NodeId, reply_to: Option<Address>, result: Option<Address>, out: &mut Vec<Output>) {
        self.lookups.remove(&query);
        match reply_to {
            None => Self::note(out, Notice::LookupDone { query, target, result }),
            Some(to) => self.reply(query, target, to, result, out),
        }
    }

    fn reply(&self, query: QueryId, target: NodeId, to: Address, result: Option<Address>, out: &mut Vec<Output>) {
        let msg = match result {
            Some(current_addr) => Message::FindAddressReply { target_id: target, current_addr, query_id: query },
            None => Message::FindAddressFail { target_id: target, query_id: query },
        };
        self.send(out, self.to_addr(to), msg);
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn on_find(
        &mut self,
        now: Tick,
        target: NodeId,
        query: QueryId,
        origin_addr: Address,
        _visited: Level,
        src_addr: Option<Address>,
        out: &mut Vec<Output>,
    ) {
        let Some(src) = src_addr else { return };
        if self.table.is_none() || self.lookups.contains_key(&query) {
            self.reply(query, target, src, self.local_answer(target), out);
            return;
        }
        if Some(src) != self.head_addr() {
            self.search(now, query, target, origin_addr, Some(src), out);
            return;
        }
        // From the parent: look only downwards.
        if let Some(found) = self.local_answer(target) {
            self.answer(query, target, Some(src), Some(found), out);
            return;
        }
        let fan: BTreeSet<Address> = self.child_heads().into_iter().collect();
        let state = LookupState {
            target,
            origin_addr,
            reply_to: Some(src),
            awaiting: BTreeSet::new(),
            escalate: None,
            deadline: now + self.cfg.t_handshake,
        };
        self.lookups.insert(query, state);
        self.fan_out(query, fan, out);
        self.progress(now, query, out);
    }

    pub(super) fn on_find_result(
        &mut self,
        now: Tick,
        query: QueryId,
        target: NodeId,
        result: Option<Address>,
        src_addr: Option<Address>,
        out: &mut Vec<Output>,
    ) {
        let Some(state) = self.lookups.get_mut(&query) else { return };
        if result.is_some() {
            let reply_to = state.reply_to;
            self.answer(query, target, reply_to, result, out);
            return;
        }
        if let Some(src) = src_addr {
            state.awaiting.remove(&src);
        }
        self.progress(now, query, out);
    }

    pub(super) fn on_find_lost(&mut self, now: Tick, query: QueryId, dest: Address, out: &mut Vec<Output>) {
        if let Some(state) = self.lookups.get_mut(&query) {
            state.awaiting.remove(&dest);
            self.progress(now, query, out);
        }
    }

    pub(super) fn lookup_due(&mut self, now: Tick, out: &mut Vec<Output>) {
        let due: Vec<QueryId> = self.lookups.iter().filter(|(_, l)| l.deadline <= now).map(|(&q, _)| q).collect();
        for q in due {
            if let Some(state) = self.lookups.get_mut(&q) {
                state.awaiting.clear();
                // An expired escalation counts as a miss as well.
                if state.deadline <= now && state.escalate.is_none() {
                    let (target, reply_to) = (state.target, state.reply_to);
                    self.answer(q, target, reply_to, None, out);
                    continue;
                }
            }
            self.progress(now, q, out);
        }
    }
}
