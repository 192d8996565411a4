//! Playing a scenario with invariant checks at every settled point.

use topoaddr_core::{NodeId, Tick};

use super::checker::{check_invariants, Violation};
use super::metrics::{collect_metrics, MetricsReport, TraceCorrupt};
use super::scenario::Scenario;
use crate::simnet::World;

/// The outcome of one settle-and-check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub at: Tick,
    /// False when the world never drained before the next event.
    pub quiescent: bool,
    /// When unsettled: messages in flight and the busy nodes.
    pub in_flight: usize,
    pub busy: Vec<(NodeId, Vec<&'static str>)>,
    pub violations: Vec<Violation>,
}

impl Checkpoint {
    pub fn clean(&self) -> bool {
        self.quiescent && self.violations.is_empty()
    }
}

pub struct RunOutcome {
    pub world: World,
    pub checkpoints: Vec<Checkpoint>,
}

impl RunOutcome {
    pub fn trace(&self) -> &str {
        self.world.trace()
    }

    pub fn metrics(&self) -> Result<MetricsReport, TraceCorrupt> {
        collect_metrics(self.world.trace())
    }

    pub fn violations(&self) -> impl Iterator<Item = &Violation> {
        self.checkpoints.iter().flat_map(|c| c.violations.iter())
    }

    pub fn all_clean(&self) -> bool {
        self.checkpoints.iter().all(Checkpoint::clean)
    }
}

pub fn world_for(s: &Scenario) -> World {
    let mut w = World::new(s.header.protocol(), s.header.delivery());
    for (at, ev) in &s.events {
        w.schedule(*at, ev.clone());
    }
    w
}

/// Run to the horizon. A checkpoint is taken after every event batch
/// followed by a quiet gap of at least the settle window plus one alive
/// period, and once more at the horizon.
pub fn run(s: &Scenario) -> RunOutcome {
    let mut world = world_for(s);
    let window = s.header.settle_window();
    let horizon = s.header.horizon;
    let mut times: Vec<Tick> = s.events.iter().map(|(t, _)| *t).collect();
    times.dedup();
    let mut checkpoints = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        let next = times.get(i + 1).copied().unwrap_or(horizon + 1);
        if next < t + window + s.header.t_alive {
            continue;
        }
        world.run_until(t + window);
        checkpoints.push(settle_and_check(&mut world, next.saturating_sub(1).min(horizon)));
    }
    if world.now() < horizon {
        world.run_until(horizon);
        // Messages still on the wire at the horizon may land after it.
        checkpoints.push(settle_and_check(&mut world, horizon + window));
    }
    RunOutcome { world, checkpoints }
}

pub fn settle_and_check(world: &mut World, limit: Tick) -> Checkpoint {
    let quiescent = world.run_until_quiescent(limit);
    let at = world.now();
    let violations = if quiescent { check_invariants(world).unwrap_or_default() } else { Vec::new() };
    Checkpoint { at, quiescent, violations, in_flight: world.in_flight(), busy: world.busy() }
}
