//! Wire messages and the envelopes the network carries them in.

use alloc::vec::Vec;
use core::fmt;

use crate::addressing::{Address, Level, NetId, NetworkPrefix};
use crate::{NodeId, Tick};

/// Identifies one join handshake attempt. `seq` numbers a requestor's joins;
/// `attempt` numbers the retries within one join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JoinId {
    pub node: NodeId,
    pub seq: u32,
    pub attempt: u8,
}

impl fmt::Display for JoinId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}.{}", self.node, self.seq, self.attempt)
    }
}

/// Unique per lookup origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId {
    pub origin: NodeId,
    pub seq: u32,
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}?{}", self.origin, self.seq)
    }
}

/// Where a message goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dest {
    /// Single hop to a direct neighbour, addressed by id. The only form an
    /// unconfigured node can use or be reached by.
    Link(NodeId),
    /// Multi-hop to whoever holds `addr` in network `net`.
    Addr { net: NetId, addr: Address },
    /// One-hop broadcast to every current neighbour.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStage {
    /// A node that saw a foreign neighbour tells its own supreme.
    Report,
    /// Supreme to foreign supreme: here are my numbers.
    Offer,
    /// Reply to an `Offer`, carrying the decided winner.
    Answer { winner: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    /// Add `n` to the octet encoding `level`, then re-prefix.
    Offset { n: u8, level: Level },
    /// Keep the suffix, swap the prefix.
    Reprefix,
    /// Fold under a one-octet-shorter prefix; the freed octet becomes `index`.
    IncreaseK { index: u8 },
    /// Give up the address and join the target network afresh.
    Reallocate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    JoinNetworkRequest { join: JoinId, requestor_id: NodeId },
    JoinReply { join: JoinId, responder_addr: Address, responder_level: Level, prefix: NetworkPrefix },
    AddressRequest { join: JoinId, requestor_id: NodeId },
    ChangeAddressRequest { join: JoinId, node_id: NodeId },
    HeadAddressQuery { join: JoinId, requestor_id: NodeId, origin: Address },
    AddressOffer { join: JoinId, addr: Address },
    AddressAccept { join: JoinId, addr: Address, requestor_id: NodeId },
    AllocationAck { join: JoinId, addr: Address, requestor_id: NodeId },
    ProcessComplete { join: JoinId, addr: Address },
    JoinComplete { join: JoinId, addr: Address, prefix: NetworkPrefix },
    /// Every pool on the head chain is exhausted.
    NetworkFull { join: JoinId },

    /// `held_since` is when the sender acquired `sender_addr`; on conflicting
    /// claims a head keeps the more recent holder.
    AliveUpdate { sender_addr: Address, sender_id: NodeId, held_since: Tick },
    ProbeNode { target_addr: Address },
    ProbeReply { addr: Address, id: NodeId },
    /// A head found its table contradicts the sender's claimed address.
    AddressRevoked { addr: Address, id: NodeId },

    DepartureNotice { leaver_addr: Address, leaver_id: NodeId },
    DeallocateRequest { leaver_addr: Address, leaver_id: NodeId },
    DeallocateConfirm { leaver_addr: Address },

    /// Table replica push. `for_merge` marks a losing supreme handing its
    /// table to the winner.
    TableSync { snapshot: Vec<u8>, for_merge: bool },
    BecomeHead { head_addr: Address },

    FindAddress { target_id: NodeId, query_id: QueryId, origin_addr: Address, visited_level: Level },
    FindAddressReply { target_id: NodeId, current_addr: Address, query_id: QueryId },
    FindAddressFail { target_id: NodeId, query_id: QueryId },

    SupremeAnnounce { new_prefix: NetworkPrefix, old_netid: NetId, claimant_id: NodeId, claimant_level: Level },
    MergeProbe { stage: MergeStage, prefix: NetworkPrefix, supreme_addr: Address, supreme_id: NodeId, n_children: u8 },
    MergeDirective { kind: MergeKind, prefix: NetworkPrefix },
}

/// The operation a message is charged to in metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    /// A join or rehome handshake, keyed by requestor and join sequence.
    Join { node: NodeId, seq: u32 },
    Lookup(QueryId),
    Departure,
    /// Staleness probes, revocations, subordinate handover.
    Maintenance,
    Healing,
    Merge,
    /// Periodic alive updates and table syncs.
    Background,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        use Message::*;
        match self {
            JoinNetworkRequest { .. } => "JoinNetworkRequest",
            JoinReply { .. } => "JoinReply",
            AddressRequest { .. } => "AddressRequest",
            ChangeAddressRequest { .. } => "ChangeAddressRequest",
            HeadAddressQuery { .. } => "HeadAddressQuery",
            AddressOffer { .. } => "AddressOffer",
            AddressAccept { .. } => "AddressAccept",
            AllocationAck { .. } => "AllocationAck",
            ProcessComplete { .. } => "ProcessComplete",
            JoinComplete { .. } => "JoinComplete",
            NetworkFull { .. } => "NetworkFull",
            AliveUpdate { .. } => "AliveUpdate",
            ProbeNode { .. } => "ProbeNode",
            ProbeReply { .. } => "ProbeReply",
            AddressRevoked { .. } => "AddressRevoked",
            DepartureNotice { .. } => "DepartureNotice",
            DeallocateRequest { .. } => "DeallocateRequest",
            DeallocateConfirm { .. } => "DeallocateConfirm",
            TableSync { .. } => "TableSync",
            BecomeHead { .. } => "BecomeHead",
            FindAddress { .. } => "FindAddress",
            FindAddressReply { .. } => "FindAddressReply",
            FindAddressFail { .. } => "FindAddressFail",
            SupremeAnnounce { .. } => "SupremeAnnounce",
            MergeProbe { .. } => "MergeProbe",
            MergeDirective { .. } => "MergeDirective",
        }
    }

    pub fn join_id(&self) -> Option<JoinId> {
        use Message::*;
        match *self {
            JoinNetworkRequest { join, .. }
            | JoinReply { join, .. }
            | AddressRequest { join, .. }
            | ChangeAddressRequest { join, .. }
            | HeadAddressQuery { join, .. }
            | AddressOffer { join, .. }
            | AddressAccept { join, .. }
            | AllocationAck { join, .. }
            | ProcessComplete { join, .. }
            | JoinComplete { join, .. }
            | NetworkFull { join } => Some(join),
            _ => None,
        }
    }

    pub fn bucket(&self) -> Bucket {
        use Message::*;
        if let Some(j) = self.join_id() {
            return Bucket::Join { node: j.node, seq: j.seq };
        }
        match self {
            FindAddress { query_id, .. } | FindAddressReply { query_id, .. } | FindAddressFail { query_id, .. } => {
                Bucket::Lookup(*query_id)
            }
            TableSync { for_merge: true, .. } => Bucket::Merge,
            AliveUpdate { .. } | TableSync { .. } => Bucket::Background,
            DepartureNotice { .. } | DeallocateRequest { .. } | DeallocateConfirm { .. } => Bucket::Departure,
            ProbeNode { .. } | ProbeReply { .. } | AddressRevoked { .. } | BecomeHead { .. } => Bucket::Maintenance,
            SupremeAnnounce { .. } => Bucket::Healing,
            MergeProbe { .. } | MergeDirective { .. } => Bucket::Merge,
            _ => unreachable!("join messages handled above"),
        }
    }

    /// Query-direction lookup message (counted against the lookup bound).
    pub fn is_lookup_query(&self) -> bool {
        matches!(self, Message::FindAddress { .. })
    }
}

impl fmt::Display for Message {
    /// Payload summary used in trace lines: `key=value` pairs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Message::*;
        match self {
            JoinNetworkRequest { join, .. } => write!(f, "join={join}"),
            JoinReply { join, responder_addr, responder_level, prefix } => {
                write!(f, "join={join} addr={responder_addr} level={responder_level} net={}", prefix.netid)
            }
            AddressRequest { join, .. } | ChangeAddressRequest { join, .. } => write!(f, "join={join}"),
            HeadAddressQuery { join, origin, .. } => write!(f, "join={join} origin={origin}"),
            AddressOffer { join, addr }
            | AddressAccept { join, addr, .. }
            | AllocationAck { join, addr, .. }
            | ProcessComplete { join, addr }
            | JoinComplete { join, addr, .. } => write!(f, "join={join} addr={addr}"),
            NetworkFull { join } => write!(f, "join={join}"),
            AliveUpdate { sender_addr, sender_id, .. } => write!(f, "addr={sender_addr} id={sender_id}"),
            ProbeNode { target_addr } => write!(f, "addr={target_addr}"),
            ProbeReply { addr, id } => write!(f, "addr={addr} id={id}"),
            AddressRevoked { addr, id } => write!(f, "addr={addr} id={id}"),
            DepartureNotice { leaver_addr, .. } | DeallocateRequest { leaver_addr, .. } | DeallocateConfirm { leaver_addr } => {
                write!(f, "addr={leaver_addr}")
            }
            TableSync { snapshot, for_merge } => write!(f, "bytes={} merge={}", snapshot.len(), u8::from(*for_merge)),
            BecomeHead { head_addr } => write!(f, "addr={head_addr}"),
            FindAddress { target_id, query_id, visited_level, .. } => {
                write!(f, "query={query_id} target={target_id} from_level={visited_level}")
            }
            FindAddressReply { target_id, current_addr, query_id } => {
                write!(f, "query={query_id} target={target_id} addr={current_addr}")
            }
            FindAddressFail { target_id, query_id } => write!(f, "query={query_id} target={target_id}"),
            SupremeAnnounce { new_prefix, old_netid, claimant_id, .. } => {
                write!(f, "prefix={new_prefix} net={} old={old_netid} claimant={claimant_id}", new_prefix.netid)
            }
            MergeProbe { stage, prefix, n_children, .. } => {
                let s = match stage {
                    MergeStage::Report => "report",
                    MergeStage::Offer => "offer",
                    MergeStage::Answer { .. } => "answer",
                };
                write!(f, "stage={s} net={} n={n_children}", prefix.netid)
            }
            MergeDirective { kind, prefix } => {
                let k = match kind {
                    MergeKind::Offset { n, .. } => return write!(f, "kind=offset n={n} prefix={prefix} net={}", prefix.netid),
                    MergeKind::Reprefix => "reprefix",
                    MergeKind::IncreaseK { .. } => "increase_k",
                    MergeKind::Reallocate => "reallocate",
                };
                write!(f, "kind={k} prefix={prefix} net={}", prefix.netid)
            }
        }
    }
}

/// A message in flight, stamped with the sender's identity at send time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: NodeId,
    pub src_addr: Option<Address>,
    pub src_net: Option<NetId>,
    pub dst: Dest,
    pub msg: Message,
}
