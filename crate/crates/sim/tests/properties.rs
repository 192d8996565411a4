//! Randomized properties of whole runs, the simulator and the harness.

use std::collections::BTreeMap;

use proptest::prelude::*;
use topoaddr_core::{Level, NetId, NodeId, Role, Tick};
use topoaddr_sim::harness::{check_invariants, generate_random, run, GenParams, Scenario};
use topoaddr_sim::simnet::{External, Topology, TopologyError};

fn small() -> impl Strategy<Value = GenParams> {
    (3u64..30, 0u64..1000, 0u8..=5, 0u8..=5, 0u8..=5).prop_map(|(nodes, seed, churn, mobility, drop)| GenParams {
        nodes,
        batch: 8,
        churn: churn as f64 / 100.0,
        mobility: mobility as f64 / 100.0,
        lookups: 2,
        drop: drop as f64 / 100.0,
        seed,
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn settled_networks_have_unique_addresses_and_true_tables(p in small()) {
        let out = run(&generate_random(&p));
        for c in out.checkpoints.iter().filter(|c| c.quiescent) {
            for v in &c.violations {
                prop_assert!(!v.is_uniqueness() && !v.is_table_agreement(), "tick {}: {}", c.at, v);
            }
        }
    }

    #[test]
    fn roles_match_levels_and_each_net_has_one_supreme(p in small()) {
        let out = run(&generate_random(&GenParams { churn: 0.0, mobility: 0.0, drop: 0.0, ..p }));
        prop_assume!(out.checkpoints.last().is_some_and(|c| c.quiescent));
        let mut supremes: BTreeMap<(NodeId, NetId), usize> = BTreeMap::new();
        let comp_of: BTreeMap<NodeId, NodeId> = out
            .world
            .topology()
            .components()
            .into_iter()
            .flat_map(|c| {
                let key = c[0];
                c.into_iter().map(move |n| (n, key))
            })
            .collect();
        for n in out.world.nodes() {
            let (Some(level), Some(prefix)) = (n.level(), n.prefix()) else { continue };
            match n.role() {
                Role::Supreme => {
                    prop_assert_eq!(level, prefix.max_level());
                    *supremes.entry((comp_of[&n.id()], prefix.netid)).or_default() += 1;
                }
                Role::Head => prop_assert!(level >= Level(1), "{} heads at level 0", n.id()),
                _ => {}
            }
        }
        for n in out.world.nodes() {
            if let Some(net) = n.netid() {
                prop_assert_eq!(supremes.get(&(comp_of[&n.id()], net)).copied(), Some(1), "net {}", net);
            }
        }
    }

    #[test]
    fn same_seed_same_trace(p in small()) {
        let s = generate_random(&p);
        let (x, y) = (run(&s), run(&s));
        prop_assert_eq!(x.trace(), y.trace());
    }

    #[test]
    fn checking_does_not_disturb_the_world(p in small()) {
        let out = run(&generate_random(&p));
        let first = check_invariants(&out.world);
        let trace = out.trace().to_owned();
        prop_assert_eq!(&first, &check_invariants(&out.world));
        prop_assert_eq!(trace, out.trace());
    }

    #[test]
    fn generated_scenarios_round_trip(p in small()) {
        let s = generate_random(&p);
        prop_assert!(s.validate().is_ok());
        prop_assert_eq!(Scenario::parse(&s.render()), Ok(s));
    }

    #[test]
    fn every_message_lands_in_one_bucket(p in small()) {
        let out = run(&generate_random(&p));
        let report = out.metrics().expect("one report per run");
        prop_assert_eq!(report.by_bucket.values().sum::<u64>(), report.total_messages());
    }

    #[test]
    fn trace_time_never_runs_backwards(p in small()) {
        let out = run(&generate_random(&p));
        let mut last: Tick = 0;
        for line in out.trace().lines().filter(|l| !l.starts_with('#')) {
            let t: Tick = line.split(' ').next().unwrap().parse().unwrap();
            prop_assert!(t >= last, "{} after {}", t, last);
            last = t;
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Add(u64),
    Remove(u64),
    Up(u64, u64),
    Down(u64, u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u64..12).prop_map(Op::Add),
        (0u64..12).prop_map(Op::Remove),
        (0u64..12, 0u64..12).prop_map(|(a, b)| Op::Up(a, b)),
        (0u64..12, 0u64..12).prop_map(|(a, b)| Op::Down(a, b)),
    ]
}

proptest! {
    #[test]
    fn edges_join_live_distinct_nodes(ops in proptest::collection::vec(op(), 0..120)) {
        let mut t = Topology::new();
        for o in ops {
            match o {
                Op::Add(a) => t.add_node(NodeId(a)),
                Op::Remove(a) => t.remove_node(NodeId(a)),
                Op::Up(a, b) => {
                    let r = t.link_up(NodeId(a), NodeId(b));
                    if a == b {
                        prop_assert_eq!(r, Err(TopologyError::SelfLoop(NodeId(a))));
                    } else if !t.contains(NodeId(a)) || !t.contains(NodeId(b)) {
                        prop_assert!(r.is_err());
                    }
                }
                Op::Down(a, b) => {
                    let _ = t.link_down(NodeId(a), NodeId(b));
                }
            }
            for (a, b) in t.edges() {
                prop_assert!(a != b);
                prop_assert!(t.contains(a) && t.contains(b));
                prop_assert!(t.adjacent(a, b) && t.adjacent(b, a));
            }
        }
        let total: usize = t.components().iter().map(Vec::len).sum();
        prop_assert_eq!(total, t.len());
    }
}

#[test]
fn events_scheduled_in_the_past_run_now() {
    let s = generate_random(&GenParams { nodes: 3, ..GenParams::default() });
    let mut w = topoaddr_sim::harness::runner::world_for(&s);
    w.run_until(200);
    w.schedule(10, External::Arrive { id: NodeId(99), prefix: None });
    w.run_until(201);
    assert!(w.trace().lines().any(|l| l == "200 EVENT ARRIVE n99"), "{}", w.trace());
}
