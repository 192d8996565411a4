//! Message accounting read back from a text trace.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;
use topoaddr_core::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {reason}")]
pub struct TraceCorrupt {
    pub line: usize,
    pub reason: String,
}

/// Messages charged to one completed join or rehome handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinSample {
    /// `nX#seq`.
    pub join: String,
    pub messages: u64,
    pub completed_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupSample {
    /// `nX?seq`.
    pub query: String,
    pub queries: u64,
    pub replies: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsReport {
    pub joins: Vec<JoinSample>,
    pub lookups: Vec<LookupSample>,
    /// Number of times each node took an address.
    pub address_changes: BTreeMap<String, u64>,
    /// `(tick, head, entries)` after every commit or release.
    pub table_sizes: Vec<(Tick, String, u64)>,
    pub by_kind: BTreeMap<String, u64>,
    pub by_bucket: BTreeMap<String, u64>,
    pub dropped: u64,
    pub lost: u64,
    pub unroutable: u64,
}

impl MetricsReport {
    pub fn join_costs(&self) -> Vec<u64> {
        self.joins.iter().map(|j| j.messages).collect()
    }

    pub fn max_lookup_queries(&self) -> u64 {
        self.lookups.iter().map(|l| l.queries).max().unwrap_or(0)
    }

    pub fn total_messages(&self) -> u64 {
        self.by_kind.values().sum()
    }
}

const JOIN_KINDS: &[&str] = &[
    "JoinNetworkRequest",
    "JoinReply",
    "AddressRequest",
    "ChangeAddressRequest",
    "HeadAddressQuery",
    "AddressOffer",
    "AddressAccept",
    "AllocationAck",
    "ProcessComplete",
    "JoinComplete",
    "NetworkFull",
];

fn bucket_of(kind: &str, payload: &str) -> Option<&'static str> {
    Some(match kind {
        k if JOIN_KINDS.contains(&k) => "join",
        "FindAddress" | "FindAddressReply" | "FindAddressFail" => "lookup",
        "AliveUpdate" => "background",
        "TableSync" if field(payload, "merge") == Some("1") => "merge",
        "TableSync" => "background",
        "DepartureNotice" | "DeallocateRequest" | "DeallocateConfirm" => "departure",
        "ProbeNode" | "ProbeReply" | "AddressRevoked" | "BecomeHead" => "maintenance",
        "SupremeAnnounce" => "healing",
        "MergeProbe" | "MergeDirective" => "merge",
        _ => return None,
    })
}

fn field<'a>(payload: &'a str, key: &str) -> Option<&'a str> {
    payload.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

#[derive(Default)]
struct JoinAcc {
    messages: u64,
    completed_at: Option<Tick>,
}

#[derive(Default)]
struct LookupAcc {
    queries: u64,
    replies: u64,
}

pub fn collect_metrics(trace: &str) -> Result<MetricsReport, TraceCorrupt> {
    let mut r = MetricsReport::default();
    let mut joins: BTreeMap<String, JoinAcc> = BTreeMap::new();
    let mut join_order = Vec::new();
    let mut lookups: BTreeMap<String, LookupAcc> = BTreeMap::new();
    let mut lookup_order = Vec::new();
    let mut sizes: BTreeMap<String, u64> = BTreeMap::new();

    for (i, raw) in trace.lines().enumerate() {
        let line = i + 1;
        let corrupt = |reason: &str| TraceCorrupt { line, reason: reason.to_string() };
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let mut toks = raw.splitn(2, ' ');
        let tick: Tick = toks.next().and_then(|t| t.parse().ok()).ok_or_else(|| corrupt("bad tick"))?;
        let rest = toks.next().unwrap_or("");
        let mut words = rest.split(' ');
        let first = words.next().unwrap_or("");
        match first {
            "EVENT" => continue,
            "NOTE" => {
                let node = words.next().ok_or_else(|| corrupt("note without node"))?.to_string();
                let what = words.next().unwrap_or("");
                match what {
                    "configured" => *r.address_changes.entry(node).or_default() += 1,
                    "commit" | "release" => {
                        let n = sizes.entry(node.clone()).or_default();
                        if what == "commit" {
                            *n += 1;
                        } else {
                            *n = n.saturating_sub(1);
                        }
                        r.table_sizes.push((tick, node, *n));
                    }
                    "abandon" | "promoted" | "reprefix" => {
                        sizes.remove(&node);
                    }
                    _ => {}
                }
                continue;
            }
            _ => {}
        }
        let status = match first {
            "DROP" | "LOST" | "NOROUTE" => {
                words.next().ok_or_else(|| corrupt("missing source"))?;
                first
            }
            _ => "ok",
        };
        words.next().ok_or_else(|| corrupt("missing destination"))?;
        let kind = words.next().ok_or_else(|| corrupt("missing kind"))?;
        let payload: String = words.collect::<Vec<_>>().join(" ");
        match status {
            "DROP" => r.dropped += 1,
            "LOST" => r.lost += 1,
            "NOROUTE" => r.unroutable += 1,
            _ => {}
        }
        let bucket = bucket_of(kind, &payload).ok_or_else(|| corrupt("unknown message kind"))?;
        *r.by_kind.entry(kind.to_string()).or_default() += 1;
        *r.by_bucket.entry(bucket.to_string()).or_default() += 1;
        match bucket {
            "join" => {
                let j = field(&payload, "join").ok_or_else(|| corrupt("join message without join id"))?;
                // Retries of one handshake share `node#seq`.
                let key = j.rsplit_once('.').map_or(j, |(k, _)| k).to_string();
                let acc = joins.entry(key.clone()).or_insert_with(|| {
                    join_order.push(key);
                    JoinAcc::default()
                });
                acc.messages += 1;
                if kind == "JoinComplete" && status == "ok" {
                    acc.completed_at = Some(tick);
                }
            }
            "lookup" => {
                let q = field(&payload, "query").ok_or_else(|| corrupt("lookup message without query id"))?;
                let acc = lookups.entry(q.to_string()).or_insert_with(|| {
                    lookup_order.push(q.to_string());
                    LookupAcc::default()
                });
                if kind == "FindAddress" {
                    acc.queries += 1;
                } else {
                    acc.replies += 1;
                }
            }
            _ => {}
        }
    }
    for key in join_order {
        let acc = &joins[&key];
        if let Some(at) = acc.completed_at {
            r.joins.push(JoinSample { join: key, messages: acc.messages, completed_at: at });
        }
    }
    for key in lookup_order {
        let acc = &lookups[&key];
        r.lookups.push(LookupSample { query: key, queries: acc.queries, replies: acc.replies });
    }
    Ok(r)
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let _ = writeln!(out, "messages {}", self.total_messages());
        let _ = writeln!(out, "dropped {}", self.dropped);
        let _ = writeln!(out, "lost {}", self.lost);
        let _ = writeln!(out, "unroutable {}", self.unroutable);
        let _ = writeln!(out, "joins {}", self.joins.len());
        let _ = writeln!(out, "lookups {}", self.lookups.len());
        let _ = writeln!(out, "max_lookup_queries {}", self.max_lookup_queries());
        for (b, n) in &self.by_bucket {
            let _ = writeln!(out, "bucket.{b} {n}");
        }
        for (k, n) in &self.by_kind {
            let _ = writeln!(out, "kind.{k} {n}");
        }
        let costs: Vec<String> = self.joins.iter().map(|j| j.messages.to_string()).collect();
        let _ = writeln!(out, "metric join_cost {}", costs.join(" "));
        let q: Vec<String> = self.lookups.iter().map(|l| l.queries.to_string()).collect();
        let _ = writeln!(out, "metric lookup_queries {}", q.join(" "));
        let rp: Vec<String> = self.lookups.iter().map(|l| l.replies.to_string()).collect();
        let _ = writeln!(out, "metric lookup_replies {}", rp.join(" "));
        let ch: Vec<String> = self.address_changes.values().map(|n| n.to_string()).collect();
        let _ = writeln!(out, "metric address_changes {}", ch.join(" "));
        f.write_str(&out)
    }
}
