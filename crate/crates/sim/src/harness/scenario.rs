//! Line-oriented scenario files: a `key value` header, then
//! `<tick> <KIND> <args...>` event lines.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use thiserror::Error;
use topoaddr_core::{NodeId, ProtocolConfig, Tick};

use crate::simnet::{dotted, DeliveryModel, External};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },
}

fn parse_err(line: usize, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { line, reason: reason.into() }
}

fn invalid(line: usize, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation { line, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub prefix_len: u8,
    pub t_alive: Tick,
    pub t_stale: Tick,
    pub t_probe: Tick,
    pub t_scan: Tick,
    pub t_rehome: Tick,
    pub t_partition: Tick,
    pub t_init: Tick,
    pub t_handshake: Tick,
    pub drop: f64,
    pub delay: Tick,
    pub seed: u64,
    pub horizon: Tick,
}

impl Default for Header {
    fn default() -> Self {
        let c = ProtocolConfig::default();
        Header {
            prefix_len: c.prefix_len,
            t_alive: c.t_alive,
            t_stale: c.t_stale,
            t_probe: c.t_probe,
            t_scan: c.t_scan,
            t_rehome: c.t_rehome,
            t_partition: c.t_partition,
            t_init: c.t_init,
            t_handshake: c.t_handshake,
            drop: 0.0,
            delay: 1,
            seed: 0,
            horizon: 1000,
        }
    }
}

impl Header {
    pub fn protocol(&self) -> ProtocolConfig {
        let base = ProtocolConfig::default();
        let octets = &base.prefix[..self.prefix_len as usize];
        ProtocolConfig {
            t_alive: self.t_alive,
            t_stale: self.t_stale,
            t_probe: self.t_probe,
            t_scan: self.t_scan,
            t_rehome: self.t_rehome,
            t_partition: self.t_partition,
            t_init: self.t_init,
            t_handshake: self.t_handshake,
            ..base
        }
        .with_prefix(octets)
    }

    pub fn delivery(&self) -> DeliveryModel {
        DeliveryModel { per_hop_delay: self.delay, drop_probability: self.drop, seed: self.seed }
    }

    /// Ticks to let the protocol run before checking a settled state: long
    /// enough for two rounds of crash or partition detection back to back.
    pub fn settle_window(&self) -> Tick {
        2 * (self.t_stale + self.t_probe + self.t_partition + 2 * self.t_alive) + self.t_rehome + self.t_scan
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub header: Header,
    pub events: Vec<(Tick, External)>,
}

impl Scenario {
    pub fn new(header: Header) -> Self {
        Scenario { header, events: Vec::new() }
    }

    pub fn push(&mut self, at: Tick, ev: External) -> &mut Self {
        self.events.push((at, ev));
        self
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        parse(text)
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Ordering, declared ids and horizon. Line numbers count events from 1
    /// when the scenario was not read from text.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let lines: Vec<usize> = (1..=self.events.len()).collect();
        validate(self, &lines)
    }
}

fn parse_node(tok: &str, line: usize) -> Result<NodeId, ScenarioError> {
    tok.strip_prefix('n')
        .and_then(|d| d.parse().ok())
        .map(NodeId)
        .ok_or_else(|| parse_err(line, format!("bad node id `{tok}`")))
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, ScenarioError> {
    tok.parse().map_err(|_| parse_err(line, format!("bad {what} `{tok}`")))
}

fn parse_prefix(tok: &str, line: usize) -> Result<Vec<u8>, ScenarioError> {
    let octets: Result<Vec<u8>, _> = tok.split('.').map(str::parse).collect();
    match octets {
        Ok(o) if (1..=3).contains(&o.len()) => Ok(o),
        _ => Err(parse_err(line, format!("bad prefix `{tok}`"))),
    }
}

fn parse_event(toks: &[&str], line: usize) -> Result<(Tick, External), ScenarioError> {
    let at = parse_num(toks[0], line, "tick")?;
    let kind = *toks.get(1).ok_or_else(|| parse_err(line, "missing event kind"))?;
    let args = &toks[2..];
    let want = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(parse_err(line, format!("{kind} takes {n} argument(s), got {}", args.len())))
        }
    };
    let ev = match kind {
        "ARRIVE" => {
            if args.is_empty() || args.len() > 2 {
                return Err(parse_err(line, "ARRIVE takes a node and an optional prefix"));
            }
            let prefix = args.get(1).map(|p| parse_prefix(p, line)).transpose()?;
            External::Arrive { id: parse_node(args[0], line)?, prefix }
        }
        "EXIT" => {
            want(1)?;
            External::Exit(parse_node(args[0], line)?)
        }
        "CRASH" => {
            want(1)?;
            External::Crash(parse_node(args[0], line)?)
        }
        "LINKUP" | "LINKDOWN" => {
            want(2)?;
            let (a, b) = (parse_node(args[0], line)?, parse_node(args[1], line)?);
            if kind == "LINKUP" {
                External::LinkUp(a, b)
            } else {
                External::LinkDown(a, b)
            }
        }
        "LOOKUP" => {
            want(2)?;
            External::Lookup { origin: parse_node(args[0], line)?, target: parse_node(args[1], line)? }
        }
        other => return Err(parse_err(line, format!("unknown event `{other}`"))),
    };
    Ok((at, ev))
}

fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let mut header = Header::default();
    let mut seen = BTreeSet::new();
    let mut events = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks[0].as_bytes()[0].is_ascii_digit() {
            events.push(parse_event(&toks, line)?);
            lines.push(line);
            continue;
        }
        if !events.is_empty() {
            return Err(parse_err(line, "header key after events"));
        }
        let [key, val] = toks[..] else {
            return Err(parse_err(line, "header lines are `key value`"));
        };
        if !seen.insert(key.to_string()) {
            return Err(parse_err(line, format!("duplicate key `{key}`")));
        }
        let h = &mut header;
        match key {
            "prefix_len" => {
                h.prefix_len = parse_num(val, line, key)?;
                if !(1..=3).contains(&h.prefix_len) {
                    return Err(parse_err(line, "prefix_len must be 1..=3"));
                }
            }
            "t_alive" => h.t_alive = parse_num(val, line, key)?,
            "t_stale" => h.t_stale = parse_num(val, line, key)?,
            "t_probe" => h.t_probe = parse_num(val, line, key)?,
            "t_scan" => h.t_scan = parse_num(val, line, key)?,
            "t_rehome" => h.t_rehome = parse_num(val, line, key)?,
            "t_partition" => h.t_partition = parse_num(val, line, key)?,
            "t_init" => h.t_init = parse_num(val, line, key)?,
            "t_handshake" => h.t_handshake = parse_num(val, line, key)?,
            "delay" => h.delay = parse_num(val, line, key)?,
            "seed" => h.seed = parse_num(val, line, key)?,
            "horizon" => h.horizon = parse_num(val, line, key)?,
            "drop" => {
                h.drop = parse_num(val, line, key)?;
                if !(0.0..=1.0).contains(&h.drop) {
                    return Err(parse_err(line, "drop must be in [0, 1]"));
                }
            }
            other => return Err(parse_err(line, format!("unknown key `{other}`"))),
        }
    }
    for (k, v) in [("t_alive", header.t_alive), ("t_probe", header.t_probe), ("t_scan", header.t_scan), ("delay", header.delay)] {
        if v == 0 {
            return Err(invalid(0, format!("{k} must be positive")));
        }
    }
    let s = Scenario { header, events };
    validate(&s, &lines)?;
    Ok(s)
}

fn validate(s: &Scenario, lines: &[usize]) -> Result<(), ScenarioError> {
    let mut declared = BTreeSet::new();
    let mut last = 0;
    for ((at, ev), &line) in s.events.iter().zip(lines) {
        if *at < last {
            return Err(invalid(line, format!("tick {at} before {last}")));
        }
        last = *at;
        let need = |id: &NodeId| {
            if declared.contains(id) {
                Ok(())
            } else {
                Err(invalid(line, format!("{id} not declared by an earlier ARRIVE")))
            }
        };
        match ev {
            External::Arrive { id, prefix } => {
                if let Some(p) = prefix {
                    if p.len() != s.header.prefix_len as usize {
                        return Err(invalid(line, format!("prefix {} is not {} octets", dotted(p), s.header.prefix_len)));
                    }
                }
                if !declared.insert(*id) {
                    return Err(invalid(line, format!("{id} arrives twice")));
                }
            }
            External::Exit(id) | External::Crash(id) => need(id)?,
            External::LinkUp(a, b) | External::LinkDown(a, b) => {
                need(a)?;
                need(b)?;
                if a == b {
                    return Err(invalid(line, format!("self-link on {a}")));
                }
            }
            External::Lookup { origin, .. } => need(origin)?,
        }
    }
    if s.header.horizon < last {
        return Err(invalid(lines.last().copied().unwrap_or(0), "horizon before the last event"));
    }
    Ok(())
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        let mut out = String::from("# header\n");
        let _ = writeln!(out, "prefix_len {}", h.prefix_len);
        for (k, v) in [
            ("t_alive", h.t_alive),
            ("t_stale", h.t_stale),
            ("t_probe", h.t_probe),
            ("t_scan", h.t_scan),
            ("t_rehome", h.t_rehome),
            ("t_partition", h.t_partition),
            ("t_init", h.t_init),
            ("t_handshake", h.t_handshake),
        ] {
            let _ = writeln!(out, "{k} {v}");
        }
        let _ = writeln!(out, "drop {:?}", h.drop);
        let _ = writeln!(out, "delay {}", h.delay);
        let _ = writeln!(out, "seed {}", h.seed);
        let _ = writeln!(out, "horizon {}", h.horizon);
        out.push_str("# events: <tick> <KIND> <args...>\n");
        for (at, ev) in &self.events {
            let _ = writeln!(out, "{at} {}", ev.trace_args());
        }
        f.write_str(&out)
    }
}
