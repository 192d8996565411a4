use super::*;
use alloc::vec;

use proptest::prelude::*;

fn a(s: &str) -> Address {
    s.parse().unwrap()
}

fn net() -> NetworkPrefix {
    NetworkPrefix::new(&[10, 1], NetId(7)).unwrap()
}

fn cfg() -> ProtocolConfig {
    ProtocolConfig::default()
}

fn head_with(addr: &str, held: &[(u8, u64)]) -> NodeState {
    let mut t = AddressTable::new(a(addr));
    for &(s, id) in held {
        t.assign(s, NodeId(id), 0).unwrap();
    }
    NodeState::configured(NodeId(1), cfg(), a(addr), net(), Some(t), 0)
}

fn member(id: u64, addr: &str) -> NodeState {
    NodeState::configured(NodeId(id), cfg(), a(addr), net(), None, 0)
}

fn step(n: &mut NodeState, now: Tick, input: Input) -> Vec<Output> {
    n.step(&Ctx { now, neighbors: &[] }, input)
}

fn from(src: u64, src_addr: Option<&str>, dst: Dest, msg: Message) -> Input {
    Input::Deliver(Envelope { src: NodeId(src), src_addr: src_addr.map(a), src_net: Some(NetId(7)), dst, msg })
}

fn sends(out: &[Output]) -> Vec<(Dest, Message)> {
    out.iter()
        .filter_map(|o| match o {
            Output::Send(e) => Some((e.dst, e.msg.clone())),
            _ => None,
        })
        .collect()
}

fn notices(out: &[Output]) -> Vec<Notice> {
    out.iter()
        .filter_map(|o| match o {
            Output::Note(n) => Some(n.clone()),
            _ => None,
        })
        .collect()
}

fn join(node: u64) -> JoinId {
    JoinId { node: NodeId(node), seq: 0, attempt: 0 }
}

#[test]
fn lone_node_founds_after_silent_rounds() {
    let c = cfg();
    let mut n = NodeState::new(NodeId(3), c);
    let mut out = step(&mut n, 0, Input::Arrive);
    let mut broadcasts = 0;
    let mut now = 0;
    loop {
        broadcasts += sends(&out).iter().filter(|(d, m)| *d == Dest::Local && m.kind() == "JoinNetworkRequest").count();
        if notices(&out).iter().any(|x| matches!(x, Notice::Configured { .. })) {
            break;
        }
        now += c.t_init;
        assert!(now <= 100, "never founded");
        out = step(&mut n, now, Input::Wake);
    }
    assert_eq!(now, c.t_init * c.init_attempts as Tick);
    assert_eq!(broadcasts, c.init_attempts as usize);
    assert_eq!(n.address(), Some(a("10.1.0.0")));
    assert_eq!(n.role(), Role::Supreme);
}

#[test]
fn head_offers_lowest_free_suffix() {
    let mut h = head_with("10.1.1.0", &[(1, 20), (2, 21), (4, 22)]);
    step(&mut h, 0, Input::Wake);
    let out = step(&mut h, 1, from(30, None, Dest::Link(NodeId(1)), Message::AddressRequest { join: join(30), requestor_id: NodeId(30) }));
    assert_eq!(
        sends(&out),
        vec![(Dest::Link(NodeId(30)), Message::AddressOffer { join: join(30), addr: a("10.1.1.3") })]
    );
    assert_eq!(h.pending(), vec!["reservation"]);
}

#[test]
fn member_relays_request_to_its_head() {
    let mut m = member(5, "10.1.1.3");
    let out = step(&mut m, 1, from(30, None, Dest::Link(NodeId(5)), Message::AddressRequest { join: join(30), requestor_id: NodeId(30) }));
    let q = Message::HeadAddressQuery { join: join(30), requestor_id: NodeId(30), origin: a("10.1.1.3") };
    assert!(sends(&out).contains(&(Dest::Addr { net: NetId(7), addr: a("10.1.1.0") }, q)));
    assert_eq!(m.pending(), vec!["relay"]);
}

#[test]
fn commit_stays_pending_until_the_holder_speaks() {
    let mut h = head_with("10.1.1.0", &[]);
    let req = Message::AddressRequest { join: join(30), requestor_id: NodeId(30) };
    step(&mut h, 1, from(30, None, Dest::Link(NodeId(1)), req));
    let accept = Message::AddressAccept { join: join(30), addr: a("10.1.1.1"), requestor_id: NodeId(30) };
    let out = step(&mut h, 2, from(30, None, Dest::Link(NodeId(1)), accept));
    assert!(notices(&out).contains(&Notice::Committed { suffix: 1, node: NodeId(30) }));
    assert_eq!(h.pending(), vec!["unconfirmed"]);

    let alive = Message::AliveUpdate { sender_addr: a("10.1.1.1"), sender_id: NodeId(30), held_since: 3 };
    step(&mut h, 4, from(30, Some("10.1.1.1"), Dest::Addr { net: NetId(7), addr: a("10.1.1.0") }, alive));
    assert!(h.is_idle());
}

#[test]
fn rehoming_node_serves_only_lower_ids() {
    for (peer, served) in [(99, false), (2, true)] {
        let mut m = member(50, "10.1.1.3");
        step(&mut m, 0, Input::Wake);
        m.start_rehome(1, NodeId(60), &mut Vec::new());
        let req = Message::ChangeAddressRequest { join: join(peer), node_id: NodeId(peer) };
        let out = step(&mut m, 2, from(peer, Some("10.1.2.1"), Dest::Link(NodeId(50)), req));
        let relayed = sends(&out).iter().any(|(_, msg)| msg.kind() == "HeadAddressQuery");
        assert_eq!(relayed, served, "request from n{peer}");
        // Yielding drops our own attempt.
        assert_eq!(m.joining(), !served);
    }
}

#[test]
fn bounced_probe_releases_after_t_probe() {
    let c = cfg();
    let mut h = head_with("10.1.1.0", &[(1, 20)]);
    let mut probe = None;
    for now in 0..=c.t_stale + 1 {
        for o in step(&mut h, now, Input::Wake) {
            if let Output::Send(e) = o {
                if e.msg.kind() == "ProbeNode" {
                    probe = Some((now, e));
                }
            }
        }
        if probe.is_some() {
            break;
        }
    }
    let (sent, env) = probe.expect("stale entry probed");
    // Stale means strictly older than the threshold.
    assert_eq!(sent, c.t_stale + 1);
    step(&mut h, sent + 1, Input::Undeliverable(env));
    let mut released = None;
    for now in sent + 1..sent + 3 * c.t_probe {
        if notices(&step(&mut h, now, Input::Wake)).contains(&Notice::Released { suffix: 1, node: NodeId(20) }) {
            released = Some(now);
            break;
        }
    }
    assert_eq!(released, Some(sent + c.t_probe));
    assert!(h.table().unwrap().get(1).is_none());
}

#[test]
fn deallocate_confirmed_even_when_already_free() {
    let mut h = head_with("10.1.1.0", &[]);
    let req = Message::DeallocateRequest { leaver_addr: a("10.1.1.9"), leaver_id: NodeId(40) };
    let out = step(&mut h, 5, from(40, Some("10.1.2.4"), Dest::Addr { net: NetId(7), addr: a("10.1.1.0") }, req));
    let confirm = Message::DeallocateConfirm { leaver_addr: a("10.1.1.9") };
    assert!(sends(&out).contains(&(Dest::Addr { net: NetId(7), addr: a("10.1.2.4") }, confirm)));
}

#[test]
fn graceful_exit_notifies_the_head() {
    let mut m = member(5, "10.1.1.3");
    let mate = Neighbor { id: NodeId(6), view: Some(Beacon { addr: a("10.1.1.4"), prefix: net() }) };
    let out = m.step(&Ctx { now: 9, neighbors: &[mate] }, Input::Leave);
    let notice = Message::DepartureNotice { leaver_addr: a("10.1.1.3"), leaver_id: NodeId(5) };
    assert_eq!(sends(&out), vec![(Dest::Link(NodeId(6)), notice)]);
}

#[test]
fn pending_is_empty_for_a_settled_member() {
    let mut m = member(5, "10.1.1.3");
    step(&mut m, 0, Input::Wake);
    assert!(m.is_idle(), "{:?}", m.pending());
}

#[derive(Debug, Clone)]
enum Poke {
    Wake(Tick),
    Request(u64),
    Alive(u8),
    Bounce(u8),
}

fn poke() -> impl Strategy<Value = Poke> {
    prop_oneof![
        (1u64..40).prop_map(Poke::Wake),
        (30u64..60).prop_map(Poke::Request),
        (1u8..8).prop_map(Poke::Alive),
        (1u8..8).prop_map(Poke::Bounce),
    ]
}

/// Feed `pokes` to a head; each step's outputs with the table it saw.
fn drive(pokes: &[Poke]) -> (Vec<(Option<AddressTable>, Vec<Output>)>, NodeState) {
    let mut h = head_with("10.1.1.0", &[(1, 20), (2, 21), (3, 22)]);
    let mut now = 0;
    let mut log = Vec::new();
    for p in pokes {
        let input = match *p {
            Poke::Wake(dt) => {
                now += dt;
                Input::Wake
            }
            Poke::Request(id) => {
                let msg = Message::AddressRequest { join: join(id), requestor_id: NodeId(id) };
                from(id, None, Dest::Link(NodeId(1)), msg)
            }
            Poke::Alive(s) => {
                let id = 19 + s as u64;
                let msg = Message::AliveUpdate { sender_addr: Address([10, 1, 1, s]), sender_id: NodeId(id), held_since: 0 };
                Input::Deliver(Envelope {
                    src: NodeId(id),
                    src_addr: Some(Address([10, 1, 1, s])),
                    src_net: Some(NetId(7)),
                    dst: Dest::Addr { net: NetId(7), addr: a("10.1.1.0") },
                    msg,
                })
            }
            Poke::Bounce(s) => Input::Undeliverable(Envelope {
                src: NodeId(1),
                src_addr: Some(a("10.1.1.0")),
                src_net: Some(NetId(7)),
                dst: Dest::Addr { net: NetId(7), addr: Address([10, 1, 1, s]) },
                msg: Message::ProbeNode { target_addr: Address([10, 1, 1, s]) },
            }),
        };
        let before = h.table().cloned();
        let out = step(&mut h, now, input);
        log.push((before, out));
    }
    (log, h)
}

proptest! {
    #[test]
    fn step_is_deterministic(pokes in proptest::collection::vec(poke(), 0..80)) {
        let (x, hx) = drive(&pokes);
        let (y, hy) = drive(&pokes);
        prop_assert_eq!(x, y);
        prop_assert_eq!(hx.table(), hy.table());
    }

    #[test]
    fn a_head_never_offers_a_held_suffix(pokes in proptest::collection::vec(poke(), 0..80)) {
        let (log, _) = drive(&pokes);
        for (before, out) in log {
            for (_, m) in sends(&out) {
                if let Message::AddressOffer { addr, .. } = m {
                    let held = before.as_ref().and_then(|t| t.get(addr.octet(3)));
                    prop_assert!(held.is_none(), "offered {} held by {:?}", addr, held);
                }
            }
        }
    }

    #[test]
    fn offers_to_distinct_requestors_never_repeat(ids in proptest::collection::btree_set(20u64..200, 1..40)) {
        let mut h = head_with("10.1.1.0", &[(1, 20)]);
        let mut offered = BTreeSet::new();
        for id in ids {
            let msg = Message::AddressRequest { join: join(id), requestor_id: NodeId(id) };
            for (_, m) in sends(&step(&mut h, 1, from(id, None, Dest::Link(NodeId(1)), msg))) {
                if let Message::AddressOffer { addr, .. } = m {
                    prop_assert!(offered.insert(addr), "{} offered twice", addr);
                }
            }
        }
    }
}
