//! Bounded explicit-state exploration of a system's interleavings.
//!
//! States are deduplicated by digest. Each breadth-first level is expanded
//! in parallel and merged sequentially, so the numbering of states, the
//! counterexamples found and every statistic are independent of the number
//! of worker threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bus::trace::{record_run, TraceRecord};
use crate::bus::world::{Choice, Digest, Event, EventKind, Step, System, World};
use crate::mux::Scheduling;
use crate::types::{AppId, CanId, ComponentId};

#[derive(Debug, Clone, Copy)]
pub struct ExploreConfig {
    /// Transitions after which a state is no longer expanded.
    pub depth: usize,
    pub max_states: usize,
    /// Keep every state and compare in full on digest hits.
    pub paranoid: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            depth: 200,
            max_states: 2_000_000,
            paranoid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("digest {0} names two different states")]
    DigestCollision(Digest),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum PropertyId {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
    /// Priority inversion freedom for the configured type pair.
    PI,
    /// Exactly one status per submission.
    AS,
    /// Component obligations (no overwrites, collisions, flow-control breaks).
    OB,
    /// TX buffers hold the most urgent pending frames whenever the
    /// multiplexer has nothing queued.
    SO,
}

impl PropertyId {
    pub const ALL: [PropertyId; 11] = [
        PropertyId::P1,
        PropertyId::P2,
        PropertyId::P3,
        PropertyId::P4,
        PropertyId::P5,
        PropertyId::P6,
        PropertyId::P7,
        PropertyId::PI,
        PropertyId::AS,
        PropertyId::OB,
        PropertyId::SO,
    ];

    pub fn title(self) -> &'static str {
        match self {
            PropertyId::P1 => "error state unreachable",
            PropertyId::P2 => "no deadlock",
            PropertyId::P3 => "every component progresses",
            PropertyId::P4 => "received messages were sent",
            PropertyId::P5 => "sent messages are received",
            PropertyId::P6 => "input queue bound",
            PropertyId::P7 => "submission always possible",
            PropertyId::PI => "no priority inversion",
            PropertyId::AS => "one status per submission",
            PropertyId::OB => "component obligations",
            PropertyId::SO => "TX buffers hold most urgent frames",
        }
    }
}

impl fmt::Display for PropertyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub description: String,
    /// Successor indices from the initial world.
    pub choices: Vec<usize>,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    HoldsWithinBound,
    Violated(Box<Counterexample>),
    Inapplicable(&'static str),
}

impl Status {
    pub fn label(&self) -> &'static str {
        match self {
            Status::HoldsWithinBound => "holds-within-bound",
            Status::Violated(_) => "violated",
            Status::Inapplicable(_) => "inapplicable",
        }
    }

    pub fn is_violated(&self) -> bool {
        matches!(self, Status::Violated(_))
    }

    pub fn counterexample(&self) -> Option<&Counterexample> {
        match self {
            Status::Violated(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeStats {
    pub node: String,
    pub max_inqueue: usize,
    pub inqueue_bound: usize,
    pub max_rxqueue: usize,
    pub max_pqueue: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub states: usize,
    pub edges: usize,
    pub max_depth: usize,
    pub dedup_hits: usize,
    pub terminal_states: usize,
    pub quiescent_states: usize,
    /// Every reachable state was expanded.
    pub complete: bool,
    pub depth_limited: bool,
    pub state_limited: bool,
    pub repeat_deliveries: usize,
    pub nodes: Vec<NodeStats>,
    pub branches: BTreeMap<&'static str, usize>,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub properties: BTreeMap<PropertyId, Status>,
    pub stats: Stats,
}

impl Report {
    pub fn status(&self, p: PropertyId) -> &Status {
        &self.properties[&p]
    }

    pub fn violations(&self) -> impl Iterator<Item = (PropertyId, &Counterexample)> {
        self.properties
            .iter()
            .filter_map(|(p, s)| s.counterexample().map(|c| (*p, c)))
    }

    pub fn has_violation(&self) -> bool {
        self.violations().next().is_some()
    }

    pub fn branch_count(&self, branch: &str) -> usize {
        self.stats.branches.get(branch).copied().unwrap_or(0)
    }

    /// Line-delimited JSON: one record per property, per node and for the
    /// totals, plus one per handler branch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (p, s) in &self.properties {
            let detail = match s {
                Status::Violated(c) => c.description.clone(),
                Status::Inapplicable(why) => (*why).to_string(),
                Status::HoldsWithinBound => String::new(),
            };
            let record = serde_json::json!({
                "kind": "property",
                "property": p.to_string(),
                "title": p.title(),
                "status": s.label(),
                "detail": detail,
                "counterexample_steps": s.counterexample().map(|c| c.choices.len()),
            });
            writeln!(out, "{record}").unwrap();
        }
        let st = &self.stats;
        let totals = serde_json::json!({
            "kind": "stats",
            "states": st.states,
            "edges": st.edges,
            "max_depth": st.max_depth,
            "dedup_hits": st.dedup_hits,
            "terminal_states": st.terminal_states,
            "quiescent_states": st.quiescent_states,
            "complete": st.complete,
            "depth_limited": st.depth_limited,
            "state_limited": st.state_limited,
            "repeat_deliveries": st.repeat_deliveries,
        });
        writeln!(out, "{totals}").unwrap();
        for n in &st.nodes {
            let mut v = serde_json::to_value(n).unwrap();
            v["kind"] = "node".into();
            writeln!(out, "{v}").unwrap();
        }
        for (branch, count) in &st.branches {
            let v = serde_json::json!({"kind": "branch", "branch": branch, "count": count});
            writeln!(out, "{v}").unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        let st = &self.stats;
        let mut out = String::new();
        let closure = if st.complete {
            "full closure"
        } else if st.state_limited {
            "incomplete: state budget exhausted"
        } else {
            "incomplete: depth bound reached"
        };
        writeln!(
            out,
            "{} states, {} transitions, depth {} ({closure}), {} duplicate hits, {:.2?}",
            st.states, st.edges, st.max_depth, st.dedup_hits, st.elapsed
        )
        .unwrap();
        writeln!(
            out,
            "{} terminal states, {} quiescent",
            st.terminal_states, st.quiescent_states
        )
        .unwrap();
        for (p, s) in &self.properties {
            write!(out, "  {p:<3} {:<36} {}", p.title(), s.label()).unwrap();
            match s {
                Status::Violated(c) => {
                    write!(out, ": {} ({} steps)", c.description, c.choices.len()).unwrap()
                }
                Status::Inapplicable(why) => write!(out, ": {why}").unwrap(),
                Status::HoldsWithinBound => {}
            }
            out.push('\n');
        }
        for n in &st.nodes {
            writeln!(
                out,
                "  node {:<10} max inqueue {} (bound {}), max rxqueue {}, max pqueue {}",
                n.node, n.max_inqueue, n.inqueue_bound, n.max_rxqueue, n.max_pqueue
            )
            .unwrap();
        }
        out
    }
}

/// Bookkeeping per reachable state.
#[derive(Debug, Clone, Copy)]
struct Meta {
    parent: u32,
    choice: u16,
    /// Components with unfinished work in this state.
    pending: u64,
    /// Not (fully) expanded; its continuations are unknown.
    open: bool,
    /// Applications with a frame waiting in a driver buffer.
    offered: u64,
}

const ROOT: u32 = u32::MAX;

struct Expansion {
    steps: Vec<(Digest, Step)>,
    blocked: Vec<Choice>,
    quiescent: bool,
}

fn expand(sys: &System, world: &World) -> Expansion {
    let succ = world.successors(sys);
    Expansion {
        steps: succ
            .steps
            .into_iter()
            .map(|s| (s.world.digest(), s))
            .collect(),
        blocked: succ.blocked,
        quiescent: world.is_quiescent(sys),
    }
}

fn offered_mask(sys: &System, world: &World) -> u64 {
    world
        .nodes
        .iter()
        .flat_map(|n| n.driver.buf.iter().flatten())
        .filter_map(|f| sys.table.sender(f.id()).ok())
        .fold(0, |m, app| m | (1 << app.0))
}

fn pending_mask(sys: &System, world: &World) -> u64 {
    (0..sys.topology.component_count())
        .filter(|&c| world.has_pending_work(sys, ComponentId(c as u16)))
        .fold(0, |m, c| m | (1 << c))
}

struct Explorer<'s> {
    sys: &'s System,
    cfg: ExploreConfig,
    index: HashMap<Digest, u32>,
    meta: Vec<Meta>,
    full: Vec<World>,
    /// (from, to, participants, choice index)
    edges: Vec<(u32, u32, u64, u16)>,
    violations: BTreeMap<PropertyId, (String, Vec<usize>)>,
    stats: Stats,
}

impl<'s> Explorer<'s> {
    fn path_to(&self, mut id: u32) -> Vec<usize> {
        let mut path = Vec::new();
        while id != ROOT {
            let m = self.meta[id as usize];
            if m.parent == ROOT {
                break;
            }
            path.push(usize::from(m.choice));
            id = m.parent;
        }
        path.reverse();
        path
    }

    fn violate(&mut self, p: PropertyId, at: u32, extra: Option<usize>, description: String) {
        if self.violations.contains_key(&p) {
            return;
        }
        let mut path = self.path_to(at);
        path.extend(extra);
        self.violations.insert(p, (description, path));
    }

    fn name(&self, c: ComponentId) -> &str {
        self.sys.topology.component_name(c)
    }

    /// Checks that depend on a single state.
    fn check_state(&mut self, id: u32, world: &World) {
        let sys = self.sys;
        for (i, n) in world.nodes.iter().enumerate() {
            let ns = &mut self.stats.nodes[i];
            ns.max_inqueue = ns.max_inqueue.max(n.inqueue.len());
            ns.max_rxqueue = ns.max_rxqueue.max(n.rxq.len());
            ns.max_pqueue = ns.max_pqueue.max(n.mux.pqueue.len());
            let bound = ns.inqueue_bound;
            let (len, pq) = (n.inqueue.len(), n.mux.pqueue.len());
            let spec = &sys.topology.nodes[i];
            if len > bound {
                self.violate(
                    PropertyId::P6,
                    id,
                    None,
                    format!(
                        "{} holds {len} messages, bound {bound}",
                        self.name(spec.mux)
                    ),
                );
            }
            if pq > sys.frag_count(i) {
                self.violate(
                    PropertyId::OB,
                    id,
                    None,
                    format!(
                        "{} has {pq} pending frames for {} fragmentation instances",
                        self.name(spec.mux),
                        sys.frag_count(i)
                    ),
                );
            }
            if sys.scheduling == Scheduling::Priority
                && n.inqueue.is_empty()
                && !n.mux.schedule_is_optimal()
            {
                self.violate(
                    PropertyId::SO,
                    id,
                    None,
                    format!(
                        "{} keeps a less urgent frame buffered while a more urgent one waits",
                        self.name(spec.mux)
                    ),
                );
            }
        }
    }

    /// Checks that need the successors of a state.
    fn check_expanded(&mut self, id: u32, world: &World, exp: &Expansion) {
        let sys = self.sys;
        for app in sys.topology.app_ids() {
            let a = &world.apps[usize::from(app.0)];
            let idle_submit = a.is_idle()
                && world
                    .next_event(sys, app)
                    .is_some_and(|e| matches!(e.kind, EventKind::Submit { .. }));
            if idle_submit && exp.blocked.contains(&Choice::App(app)) {
                self.violate(
                    PropertyId::P7,
                    id,
                    None,
                    format!("{} cannot submit", sys.topology.app_name(app)),
                );
            }
        }
        if !exp.steps.is_empty() {
            return;
        }
        self.stats.terminal_states += 1;
        if exp.quiescent {
            self.stats.quiescent_states += 1;
        } else {
            self.violate(
                PropertyId::P2,
                id,
                None,
                "terminal state is not quiescent".into(),
            );
        }
        if !sys.finite() {
            return;
        }
        for app in sys.topology.app_ids() {
            let script = &sys.scripts[usize::from(app.0)];
            let a = &world.apps[usize::from(app.0)];
            for (i, ev) in script.events.iter().enumerate() {
                let EventKind::Submit { mt, .. } = ev.kind else {
                    continue;
                };
                let b = 1u64 << i;
                if a.executed & b == 0 {
                    continue;
                }
                if a.status_seen & b == 0 {
                    self.violate(
                        PropertyId::AS,
                        id,
                        None,
                        format!(
                            "submission {}#{i} ended without a status",
                            sys.topology.app_name(app)
                        ),
                    );
                }
                if a.cancelled & b != 0 {
                    continue;
                }
                for node in sys.receiver_nodes(mt) {
                    if world.nodes[node].delivered[usize::from(app.0)] & b == 0 {
                        self.violate(
                            PropertyId::P5,
                            id,
                            None,
                            format!(
                                "submission {}#{i} never reached node {}",
                                sys.topology.app_name(app),
                                sys.topology.nodes[node].name
                            ),
                        );
                    }
                }
            }
        }
    }

    /// Checks on what happened during one transition.
    fn check_step(&mut self, from: u32, k: usize, step: &Step) {
        let sys = self.sys;
        for e in &step.events {
            match e {
                Event::Branch(b) => *self.stats.branches.entry(b).or_default() += 1,
                Event::Error { component, reason } => {
                    let d = format!(
                        "{} reached its error state: {reason}",
                        self.name(*component)
                    );
                    self.violate(PropertyId::P1, from, Some(k), d);
                }
                Event::Anomaly { component, anomaly } => {
                    let d = format!("{}: {anomaly}", self.name(*component));
                    self.violate(PropertyId::OB, from, Some(k), d);
                }
                Event::SpuriousStatus { app, status } => {
                    let d = format!(
                        "{} got {status} with no submission outstanding",
                        sys.topology.app_name(*app)
                    );
                    self.violate(PropertyId::AS, from, Some(k), d);
                }
                Event::Delivered {
                    node,
                    mt,
                    data,
                    matched,
                    repeat,
                    ..
                } => {
                    if *repeat {
                        self.stats.repeat_deliveries += 1;
                    }
                    if matched.is_none() {
                        let d = format!(
                            "node {} received data({mt},{data}) that was never submitted",
                            sys.topology.nodes[*node].name
                        );
                        self.violate(PropertyId::P4, from, Some(k), d);
                    }
                }
                Event::PriorityInversion {
                    node,
                    granted,
                    waiting,
                } => {
                    let d = format!(
                        "node {} sent {granted} while {waiting} was waiting",
                        sys.topology.nodes[*node].name
                    );
                    self.violate(PropertyId::PI, from, Some(k), d);
                }
                Event::Status { .. } | Event::Granted { .. } => {}
            }
        }
    }

    fn insert(&mut self, world: World, digest: Digest, meta: Meta) -> u32 {
        let id = self.meta.len() as u32;
        self.index.insert(digest, id);
        self.meta.push(meta);
        if self.cfg.paranoid {
            self.full.push(world);
        }
        id
    }

    fn run(&mut self) -> Result<(), ExploreError> {
        let sys = self.sys;
        let init = World::initial(sys);
        let digest = init.digest();
        let root = self.insert(
            init.clone(),
            digest,
            Meta {
                parent: ROOT,
                choice: 0,
                pending: pending_mask(sys, &init),
                open: false,
                offered: offered_mask(sys, &init),
            },
        );
        self.check_state(root, &init);
        let mut frontier = vec![(root, init)];
        let mut depth = 0usize;

        while !frontier.is_empty() {
            if depth >= self.cfg.depth {
                self.stats.depth_limited = true;
                for (id, _) in &frontier {
                    self.meta[*id as usize].open = true;
                }
                break;
            }
            let expansions: Vec<Expansion> =
                frontier.par_iter().map(|(_, w)| expand(sys, w)).collect();
            let mut next = Vec::new();
            for ((id, world), exp) in frontier.into_iter().zip(expansions) {
                self.check_expanded(id, &world, &exp);
                for (k, (digest, step)) in exp.steps.into_iter().enumerate() {
                    self.check_step(id, k, &step);
                    let to = match self.index.get(&digest) {
                        Some(&existing) => {
                            self.stats.dedup_hits += 1;
                            if self.cfg.paranoid && self.full[existing as usize] != step.world {
                                return Err(ExploreError::DigestCollision(digest));
                            }
                            existing
                        }
                        None if self.meta.len() >= self.cfg.max_states => {
                            self.stats.state_limited = true;
                            self.meta[id as usize].open = true;
                            continue;
                        }
                        None => {
                            let meta = Meta {
                                parent: id,
                                choice: k as u16,
                                pending: pending_mask(sys, &step.world),
                                open: false,
                                offered: offered_mask(sys, &step.world),
                            };
                            let new = self.insert(step.world.clone(), digest, meta);
                            self.check_state(new, &step.world);
                            self.stats.max_depth = depth + 1;
                            next.push((new, step.world));
                            new
                        }
                    };
                    self.edges.push((id, to, step.participants, k as u16));
                }
            }
            frontier = next;
            depth += 1;
        }
        Ok(())
    }

    /// A component with pending work must be able to take a step on some
    /// continuation. States that were not fully expanded may continue in
    /// unknown ways and count as able to progress.
    fn check_progress(&mut self) {
        let n = self.meta.len();
        let mut offsets = vec![0u32; n + 1];
        for &(_, to, _, _) in &self.edges {
            offsets[to as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut preds = vec![0u32; self.edges.len()];
        for &(from, to, _, _) in &self.edges {
            preds[fill[to as usize] as usize] = from;
            fill[to as usize] += 1;
        }

        let pending_any = self.meta.iter().fold(0u64, |m, s| m | s.pending);
        for c in 0..self.sys.topology.component_count() {
            let b = 1u64 << c;
            if pending_any & b == 0 {
                continue;
            }
            let mut good = vec![false; n];
            let mut stack = Vec::new();
            for (i, m) in self.meta.iter().enumerate() {
                if m.open {
                    good[i] = true;
                    stack.push(i as u32);
                }
            }
            for &(from, _, part, _) in &self.edges {
                if part & b != 0 && !good[from as usize] {
                    good[from as usize] = true;
                    stack.push(from);
                }
            }
            while let Some(s) = stack.pop() {
                let (lo, hi) = (offsets[s as usize], offsets[s as usize + 1]);
                for &p in &preds[lo as usize..hi as usize] {
                    if !good[p as usize] {
                        good[p as usize] = true;
                        stack.push(p);
                    }
                }
            }
            let stuck = (0..n).find(|&i| self.meta[i].pending & b != 0 && !good[i]);
            if let Some(s) = stuck {
                let d = format!(
                    "{} has pending work but never moves again",
                    self.name(ComponentId(c as u16))
                );
                self.violate(PropertyId::P3, s as u32, None, d);
                return;
            }
        }
    }
}

/// Explores every interleaving of `sys` up to the configured bounds and
/// evaluates the property catalog.
pub fn explore(sys: &System, cfg: ExploreConfig) -> Result<Report, ExploreError> {
    let mut ex = run_explorer(sys, cfg)?;

    let mut properties = BTreeMap::new();
    for p in PropertyId::ALL {
        let status = if let Some((description, choices)) = ex.violations.remove(&p) {
            let (trace, _) = record_run(sys, &choices).expect("counterexample path replays");
            Status::Violated(Box::new(Counterexample {
                description,
                choices,
                trace,
            }))
        } else if p == PropertyId::P5 && !sys.finite() {
            Status::Inapplicable("some script repeats forever")
        } else if p == PropertyId::PI && sys.priority.is_none() {
            Status::Inapplicable("no priority pair configured")
        } else if p == PropertyId::SO && sys.scheduling != Scheduling::Priority {
            Status::Inapplicable("multiplexer bypassed")
        } else {
            Status::HoldsWithinBound
        };
        properties.insert(p, status);
    }
    Ok(Report {
        properties,
        stats: ex.stats,
    })
}

fn run_explorer(sys: &System, cfg: ExploreConfig) -> Result<Explorer<'_>, ExploreError> {
    let started = Instant::now();
    let mut ex = Explorer {
        sys,
        cfg,
        index: HashMap::new(),
        meta: Vec::new(),
        full: Vec::new(),
        edges: Vec::new(),
        violations: BTreeMap::new(),
        stats: Stats {
            nodes: sys
                .topology
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeStats {
                    node: n.name.clone(),
                    inqueue_bound: 2 * sys.frag_count(i) + usize::from(n.tx_buffers),
                    ..NodeStats::default()
                })
                .collect(),
            ..Stats::default()
        },
    };
    ex.run()?;
    ex.check_progress();

    ex.stats.states = ex.meta.len();
    ex.stats.edges = ex.edges.len();
    ex.stats.complete = ex.meta.iter().all(|m| !m.open);
    ex.stats.elapsed = started.elapsed();
    Ok(ex)
}

/// A reachable cycle along which a frame of `app` waits in a driver buffer
/// and is never granted, while the bus keeps granting other frames.
#[derive(Debug, Clone)]
pub struct Starvation {
    pub app: AppId,
    /// Steps from the initial state to the first state of the cycle.
    pub prefix: Vec<usize>,
    pub cycle: Vec<usize>,
    /// The prefix followed by one round of the cycle.
    pub trace: Vec<TraceRecord>,
    /// Frames granted during one round.
    pub granted: Vec<CanId>,
}

#[derive(Debug, Clone)]
pub struct StarvationReport {
    pub stats: Stats,
    /// Per application with a non-empty script.
    pub apps: Vec<(AppId, Option<Starvation>)>,
}

impl Explorer<'_> {
    /// Prunes, within the states where `app` has a frame offered, every
    /// state with no successor in the set; whatever survives lies on or
    /// leads into a cycle.
    fn starving_cycle(&self, app: AppId) -> Option<(Vec<usize>, Vec<usize>)> {
        let b = 1u64 << app.0;
        let n = self.meta.len();
        let inside = |i: u32| self.meta[i as usize].offered & b != 0;
        let edges: Vec<_> = self
            .edges
            .iter()
            .filter(|e| inside(e.0) && inside(e.1))
            .collect();
        let mut out_degree = vec![0usize; n];
        let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n];
        for e in &edges {
            out_degree[e.0 as usize] += 1;
            preds[e.1 as usize].push(e.0);
        }
        let mut alive: Vec<bool> = (0..n as u32).map(inside).collect();
        let mut stack: Vec<u32> = (0..n as u32)
            .filter(|&i| alive[i as usize] && out_degree[i as usize] == 0)
            .collect();
        while let Some(s) = stack.pop() {
            if !alive[s as usize] {
                continue;
            }
            alive[s as usize] = false;
            for &p in &preds[s as usize] {
                out_degree[p as usize] -= 1;
                if out_degree[p as usize] == 0 && alive[p as usize] {
                    stack.push(p);
                }
            }
        }
        let start = alive.iter().position(|&a| a)? as u32;

        let mut next: HashMap<u32, (u32, u16)> = HashMap::new();
        for e in &edges {
            if alive[e.1 as usize] {
                next.entry(e.0).or_insert((e.1, e.3));
            }
        }
        let mut seen = HashMap::new();
        let mut walk = Vec::new();
        let mut cur = start;
        while !seen.contains_key(&cur) {
            seen.insert(cur, walk.len());
            let (to, k) = next[&cur];
            walk.push((cur, usize::from(k)));
            cur = to;
        }
        let cycle: Vec<usize> = walk[seen[&cur]..].iter().map(|&(_, k)| k).collect();
        Some((self.path_to(cur), cycle))
    }
}

/// Explores `sys` and looks, per application, for a run in which one of its
/// frames waits in a TX buffer forever. Meant for scenarios with endless
/// traffic; the result describes behavior rather than judging it.
pub fn find_starvation(sys: &System, cfg: ExploreConfig) -> Result<StarvationReport, ExploreError> {
    let ex = run_explorer(sys, cfg)?;
    let mut apps = Vec::new();
    for app in sys.topology.app_ids() {
        if sys.scripts[usize::from(app.0)].events.is_empty() {
            continue;
        }
        let found = ex.starving_cycle(app).map(|(prefix, cycle)| {
            let whole: Vec<usize> = prefix.iter().chain(&cycle).copied().collect();
            let (trace, _) = record_run(sys, &whole).expect("explored path replays");
            let mut world = World::initial(sys);
            let mut granted = Vec::new();
            for (i, &k) in whole.iter().enumerate() {
                let step = world.successors(sys).steps.swap_remove(k);
                if i >= prefix.len() {
                    granted.extend(step.events.iter().filter_map(|e| match e {
                        Event::Granted { cid, .. } => Some(*cid),
                        _ => None,
                    }));
                }
                world = step.world;
            }
            Starvation {
                app,
                prefix,
                cycle,
                trace,
                granted,
            }
        });
        apps.push((app, found));
    }
    Ok(StarvationReport {
        stats: ex.stats,
        apps,
    })
}

/// Outcome of the priority-inversion reproduction.
#[derive(Debug, Clone)]
pub struct Fig1Verdict {
    pub with_mux: Report,
    pub bypassed: Report,
}

impl Fig1Verdict {
    /// The multiplexer prevents every inversion and bypassing it admits one.
    pub fn reproduced(&self) -> bool {
        matches!(
            self.with_mux.status(PropertyId::PI),
            Status::HoldsWithinBound
        ) && self.bypassed.status(PropertyId::PI).is_violated()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Fig1Error {
    #[error("the scenario names no high/low priority pair")]
    Inapplicable,
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

/// Explores `sys` once with the multiplexer and once with frames passed to
/// the driver in arrival order.
pub fn check_fig1(sys: &System, cfg: ExploreConfig) -> Result<Fig1Verdict, Fig1Error> {
    if sys.priority.is_none() {
        return Err(Fig1Error::Inapplicable);
    }
    let mut with_mux = sys.clone();
    with_mux.scheduling = Scheduling::Priority;
    let mut bypassed = sys.clone();
    bypassed.scheduling = Scheduling::Fifo;
    Ok(Fig1Verdict {
        with_mux: explore(&with_mux, cfg)?,
        bypassed: explore(&bypassed, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::trace::replay;
    use crate::bus::world::{AppScript, ScriptEvent};
    use crate::types::{CanId, MessageType, MessageTypeTable, Payload, TableEntry, Topology};

    fn mt(v: u32) -> MessageType {
        MessageType::new(CanId::new(v).unwrap())
    }

    fn minimal() -> System {
        let mut topo = Topology::default();
        let a = topo.add_node("a", 1, &["frag"]);
        let b = topo.add_node("b", 1, &[]);
        let app = topo.add_app("sender", a);
        let table = MessageTypeTable::new([TableEntry {
            mt: mt(52),
            sender: app,
            receivers: [topo.nodes[b].reassembly].into(),
            parts: 1,
            frag: topo.nodes[a].frags[0],
        }]);
        let script = AppScript::new(vec![ScriptEvent::submit(mt(52), Payload::from(&b"hi"[..]))]);
        System::new(topo, table, vec![script])
    }

    // Hand enumeration: initial, submitted, frame handed to the driver,
    // granted; then the ack pop and the receive forward in either order,
    // joining in the final state.
    #[test]
    fn minimal_state_graph_matches_hand_count() {
        let report = explore(&minimal(), ExploreConfig::default()).unwrap();
        assert_eq!(report.stats.states, 7);
        assert_eq!(report.stats.edges, 7);
        assert_eq!(report.stats.terminal_states, 1);
        assert_eq!(report.stats.quiescent_states, 1);
        assert!(report.stats.complete);
        assert!(!report.has_violation(), "{}", report.summary());
    }

    #[test]
    fn depth_bound_marks_report_incomplete() {
        let cfg = ExploreConfig {
            depth: 2,
            ..ExploreConfig::default()
        };
        let report = explore(&minimal(), cfg).unwrap();
        assert!(!report.stats.complete);
        assert!(report.stats.depth_limited);
        assert_eq!(report.stats.states, 3);
        assert!(!report.status(PropertyId::P3).is_violated());
    }

    #[test]
    fn state_budget_marks_report_incomplete() {
        let cfg = ExploreConfig {
            max_states: 4,
            ..ExploreConfig::default()
        };
        let report = explore(&minimal(), cfg).unwrap();
        assert!(report.stats.state_limited);
        assert_eq!(report.stats.states, 4);
    }

    #[test]
    fn paranoid_mode_agrees() {
        let cfg = ExploreConfig {
            paranoid: true,
            ..ExploreConfig::default()
        };
        let a = explore(&minimal(), cfg).unwrap();
        let b = explore(&minimal(), ExploreConfig::default()).unwrap();
        assert_eq!(a.stats.states, b.stats.states);
    }

    #[test]
    fn skipped_reschedule_is_caught_with_replayable_trace() {
        use crate::action::Mutations;
        let mut sys = minimal();
        // Two submissions so that a second frame needs rescheduling.
        sys.scripts[0] = AppScript::new(vec![
            ScriptEvent::submit(mt(52), Payload::from(&b"a"[..])),
            ScriptEvent::submit(mt(52), Payload::from(&b"b"[..])),
        ]);
        sys.scripts[0].wait_for_status = false;
        sys.mutations = Mutations::DROP_FRAG_ACK;
        let report = explore(&sys, ExploreConfig::default()).unwrap();
        assert!(report.has_violation());
        for (_, cex) in report.violations() {
            let end = replay(&sys, &cex.trace).unwrap();
            assert_eq!(end.digest().to_string(), cex.trace.last().unwrap().digest);
        }
    }
}
