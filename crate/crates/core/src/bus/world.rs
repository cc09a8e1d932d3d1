//! The composed system: every node's components, the applications driving
//! them and the bus, stepped one atomic transition at a time.
//!
//! A unicast between components is a synchronous handshake: the receiver's
//! handler runs inside the sender's step. Only the multiplexer's input queue
//! and each node's receive queue buffer messages, so a step is one of
//!
//! * an application issuing its next scripted request,
//! * a multiplexer popping and handling the head of its input queue,
//! * a receive queue forwarding its head to reassembly,
//! * the bus granting the winning offer and delivering it.

use std::collections::BTreeSet;
use std::fmt;
use std::hash::Hash;

use siphasher::sip128::{Hasher128, SipHasher};

use super::{arbitrate, BusMode};
use crate::action::{Action, Anomaly, AppStatus, Delivery, Env, Mutations, Reaction};
use crate::driver::{DriverState, RxQueue};
use crate::frag::FragState;
use crate::mux::{InQueue, MuxState, Scheduling};
use crate::reassembly::ReassemblyStore;
use crate::types::{
    AppId, CanId, ComponentId, ComponentKind, Message, MessageType, MessageTypeTable, Payload,
    Topology,
};

/// Upper bound on components and on script length; both are tracked in
/// 64-bit masks.
pub const MASK_BITS: usize = 64;

fn bit(i: usize) -> u64 {
    1u64 << i
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EventKind {
    Submit {
        mt: MessageType,
        payload: Payload,
    },
    /// Cancel the given type, or the app's last submission when `None`.
    Cancel {
        mt: Option<MessageType>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEvent {
    pub kind: EventKind,
    /// Events of other apps (by script index) that must have run first.
    pub after: Vec<(AppId, u16)>,
}

impl ScriptEvent {
    pub fn submit(mt: MessageType, payload: Payload) -> Self {
        ScriptEvent {
            kind: EventKind::Submit { mt, payload },
            after: Vec::new(),
        }
    }

    pub fn cancel(mt: Option<MessageType>) -> Self {
        ScriptEvent {
            kind: EventKind::Cancel { mt },
            after: Vec::new(),
        }
    }

    pub fn after(mut self, app: AppId, index: u16) -> Self {
        self.after.push((app, index));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppScript {
    pub events: Vec<ScriptEvent>,
    /// Start over after the last event; the script never finishes.
    pub repeat: bool,
    /// Submit only once the previous submission got its status.
    pub wait_for_status: bool,
}

impl AppScript {
    pub fn new(events: Vec<ScriptEvent>) -> Self {
        AppScript {
            events,
            repeat: false,
            wait_for_status: true,
        }
    }

    pub fn submitted_type(&self, index: usize) -> Option<MessageType> {
        match self.events.get(index)?.kind {
            EventKind::Submit { mt, .. } => Some(mt),
            EventKind::Cancel { .. } => None,
        }
    }
}

/// Message types watched for priority inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorityPair {
    pub high: MessageType,
    pub low: MessageType,
}

/// Everything about a run that does not change while it executes.
#[derive(Debug, Clone)]
pub struct System {
    pub topology: Topology,
    pub table: MessageTypeTable,
    pub scripts: Vec<AppScript>,
    pub bus: BusMode,
    /// How many duplicated deliveries one run may contain.
    pub max_duplicates: u8,
    pub scheduling: Scheduling,
    pub mutations: Mutations,
    pub priority: Option<PriorityPair>,
}

impl System {
    pub fn new(topology: Topology, table: MessageTypeTable, scripts: Vec<AppScript>) -> Self {
        assert!(
            topology.component_count() <= MASK_BITS,
            "at most {MASK_BITS} components are supported"
        );
        assert_eq!(
            topology.apps.len(),
            scripts.len(),
            "one script per application"
        );
        assert!(
            scripts.iter().all(|s| s.events.len() <= MASK_BITS),
            "scripts hold at most {MASK_BITS} events"
        );
        System {
            topology,
            table,
            scripts,
            bus: BusMode::Perfect,
            max_duplicates: 1,
            scheduling: Scheduling::Priority,
            mutations: Mutations::empty(),
            priority: None,
        }
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            table: &self.table,
            mutations: self.mutations,
        }
    }

    /// Whether every script runs out eventually.
    pub fn finite(&self) -> bool {
        self.scripts
            .iter()
            .all(|s| !s.repeat || s.events.is_empty())
    }

    pub fn frag_count(&self, node: usize) -> usize {
        self.topology.nodes[node].frags.len()
    }

    /// Nodes whose reassembly instance receives `mt`.
    pub fn receiver_nodes(&self, mt: MessageType) -> BTreeSet<usize> {
        self.table
            .entry(mt)
            .map(|e| {
                e.receivers
                    .iter()
                    .filter_map(|&r| self.topology.node_of_reassembly(r))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn frag_of(&self, mt: MessageType) -> Option<ComponentId> {
        self.table.entry(mt).ok().map(|e| e.frag)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AppState {
    /// Index of the next script event.
    pub cursor: u16,
    /// Script events that have run at least once.
    pub executed: u64,
    /// Submissions still waiting for their status.
    pub outstanding: u64,
    pub status_seen: u64,
    /// Submissions a cancel was issued for while they were outstanding.
    pub cancelled: u64,
    pub last_submit: Option<u16>,
}

impl AppState {
    pub fn finished(&self, script: &AppScript) -> bool {
        !script.repeat && usize::from(self.cursor) >= script.events.len()
    }

    pub fn is_idle(&self) -> bool {
        self.outstanding == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeState {
    pub mux: MuxState,
    pub inqueue: InQueue,
    pub driver: DriverState,
    pub rxq: RxQueue,
    pub rass: ReassemblyStore,
    /// Per application: submissions whose data reached this node.
    pub delivered: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct World {
    pub frags: Vec<FragState>,
    pub nodes: Vec<NodeState>,
    pub apps: Vec<AppState>,
    /// Components that reached their error state.
    pub errored: u64,
    pub duplicates_used: u8,
}

/// 128-bit fingerprint of a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub u128);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl World {
    pub fn initial(sys: &System) -> World {
        let topo = &sys.topology;
        let frags = topo
            .nodes
            .iter()
            .flat_map(|n| n.frags.iter().map(move |&f| FragState::new(f, n.mux)))
            .collect();
        let nodes = topo
            .nodes
            .iter()
            .map(|n| NodeState {
                mux: MuxState::with_scheduling(n.driver_tx, n.tx_buffers, sys.scheduling),
                inqueue: InQueue::new(),
                driver: DriverState::new(n.mux, n.tx_buffers),
                rxq: RxQueue::new(n.reassembly),
                rass: ReassemblyStore::new(topo.app_ids()),
                delivered: vec![0; topo.apps.len()],
            })
            .collect();
        World {
            frags,
            nodes,
            apps: vec![AppState::default(); topo.apps.len()],
            errored: 0,
            duplicates_used: 0,
        }
    }

    pub fn digest(&self) -> Digest {
        let mut h = SipHasher::new();
        self.hash(&mut h);
        Digest(h.finish128().as_u128())
    }

    pub fn is_errored(&self, c: ComponentId) -> bool {
        self.errored & bit(usize::from(c.0)) != 0
    }

    /// Scripts done, nothing outstanding, every queue and buffer empty and
    /// no component in its error state.
    pub fn is_quiescent(&self, sys: &System) -> bool {
        self.errored == 0
            && self
                .apps
                .iter()
                .zip(&sys.scripts)
                .all(|(a, s)| a.finished(s) && a.is_idle())
            && self.frags.iter().all(FragState::is_idle)
            && self.nodes.iter().all(|n| {
                n.inqueue.is_empty()
                    && n.rxq.is_empty()
                    && n.mux.pqueue.is_empty()
                    && n.mux.txmirror.iter().all(|t| t.cid.is_none())
                    && n.driver.is_empty()
            })
    }

    /// Whether component `c` has work it has not yet done.
    pub fn has_pending_work(&self, sys: &System, c: ComponentId) -> bool {
        match sys.topology.kind(c) {
            Some(ComponentKind::Frag { .. }) => sys
                .topology
                .frag_slot(c)
                .is_some_and(|i| !self.frags[i].is_idle()),
            Some(ComponentKind::Mux { node }) => !self.nodes[node].inqueue.is_empty(),
            Some(ComponentKind::DriverTx { node }) => !self.nodes[node].driver.is_empty(),
            Some(ComponentKind::DriverRx { node }) | Some(ComponentKind::Reassembly { node }) => {
                !self.nodes[node].rxq.is_empty()
            }
            None => false,
        }
    }

    fn after_satisfied(&self, event: &ScriptEvent) -> bool {
        event.after.iter().all(|&(app, idx)| {
            self.apps
                .get(usize::from(app.0))
                .is_some_and(|a| a.executed & bit(usize::from(idx)) != 0)
        })
    }

    /// The next script event of `app`, if its ordering constraints allow it
    /// to run now.
    pub fn next_event<'s>(&self, sys: &'s System, app: AppId) -> Option<&'s ScriptEvent> {
        let script = &sys.scripts[usize::from(app.0)];
        let state = &self.apps[usize::from(app.0)];
        if state.finished(script) {
            return None;
        }
        let event = script.events.get(usize::from(state.cursor))?;
        if !self.after_satisfied(event) {
            return None;
        }
        if matches!(event.kind, EventKind::Submit { .. })
            && script.wait_for_status
            && !state.is_idle()
        {
            return None;
        }
        Some(event)
    }

    /// Candidate transitions in canonical order. Some may turn out blocked.
    pub fn choices(&self, sys: &System) -> Vec<Choice> {
        let mut out = Vec::new();
        for app in sys.topology.app_ids() {
            if self.next_event(sys, app).is_some() {
                out.push(Choice::App(app));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let spec = &sys.topology.nodes[i];
            if !n.inqueue.is_empty() && !self.is_errored(spec.mux) {
                out.push(Choice::Mux(i));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let spec = &sys.topology.nodes[i];
            if !n.rxq.is_empty() && !self.is_errored(spec.reassembly) {
                out.push(Choice::Rx(i));
            }
        }
        if let Some((_, frame)) = self.winning_offer(sys) {
            out.push(Choice::Grant);
            if sys.bus == BusMode::Duplicate && self.duplicates_used < sys.max_duplicates {
                if let Ok((mt, _)) = sys.table.decompose(frame) {
                    for node in sys.receiver_nodes(mt) {
                        out.push(Choice::GrantDup(node));
                    }
                }
            }
        }
        out
    }

    fn offers(&self, sys: &System) -> Vec<(usize, CanId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_errored(sys.topology.nodes[*i].driver_tx))
            .filter_map(|(i, n)| n.driver.offer(&sys.table).map(|o| (i, o.frame.id())))
            .collect()
    }

    /// Node and CAN ID that win arbitration. Equal IDs resolve to the lower
    /// node index; the collision itself is reported when the grant runs.
    fn winning_offer(&self, sys: &System) -> Option<(usize, CanId)> {
        self.offers(sys)
            .into_iter()
            .min_by_key(|&(node, cid)| (cid, node))
    }

    /// Every enabled transition, in canonical order, together with the
    /// transitions that turned out blocked.
    pub fn successors(&self, sys: &System) -> Successors {
        let mut out = Successors::default();
        for choice in self.choices(sys) {
            match self.apply(sys, choice) {
                Ok(step) => out.steps.push(step),
                Err(Blocked) => out.blocked.push(choice),
            }
        }
        out
    }

    pub fn apply(&self, sys: &System, choice: Choice) -> Result<Step, Blocked> {
        let mut x = Exec {
            sys,
            env: sys.env(),
            w: self.clone(),
            events: Vec::new(),
            participants: 0,
        };
        let (component, label, message) = match choice {
            Choice::App(app) => x.app_event(app)?,
            Choice::Mux(node) => x.mux_pop(node)?,
            Choice::Rx(node) => x.rx_forward(node)?,
            Choice::Grant => x.grant(None)?,
            Choice::GrantDup(node) => x.grant(Some(node))?,
        };
        Ok(Step {
            choice,
            world: x.w,
            component,
            label,
            message,
            events: x.events,
            participants: x.participants,
        })
    }
}

/// One kind of transition of the composed system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Choice {
    App(AppId),
    Mux(usize),
    Rx(usize),
    Grant,
    /// Grant whose frame is received twice by the given node.
    GrantDup(usize),
}

/// A transition would hand a message to a component in its error state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocked;

/// Observations made while a transition executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Branch(&'static str),
    Anomaly {
        component: ComponentId,
        anomaly: Anomaly,
    },
    Error {
        component: ComponentId,
        reason: &'static str,
    },
    Status {
        app: AppId,
        index: u16,
        status: AppStatus,
    },
    /// A status that matches no outstanding submission.
    SpuriousStatus {
        app: AppId,
        status: AppStatus,
    },
    Delivered {
        node: usize,
        app: AppId,
        mt: MessageType,
        data: Payload,
        /// The submission the data was matched to; `None` when it matches
        /// nothing that was submitted.
        matched: Option<u16>,
        /// Every matching submission had already been delivered here.
        repeat: bool,
    },
    Granted {
        node: usize,
        cid: CanId,
    },
    /// A frame of the low type left `node` while a frame of the high type
    /// was waiting in its multiplexer.
    PriorityInversion {
        node: usize,
        granted: CanId,
        waiting: CanId,
    },
}

#[derive(Debug, Clone)]
pub struct Step {
    pub choice: Choice,
    pub world: World,
    pub component: String,
    pub label: String,
    pub message: String,
    pub events: Vec<Event>,
    /// Components whose handlers ran, as a bit mask over component IDs.
    pub participants: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Successors {
    pub steps: Vec<Step>,
    pub blocked: Vec<Choice>,
}

struct Exec<'s> {
    sys: &'s System,
    env: Env<'s>,
    w: World,
    events: Vec<Event>,
    participants: u64,
}

type Record = (String, String, String);

impl Exec<'_> {
    fn name(&self, c: ComponentId) -> String {
        self.sys.topology.component_name(c).to_string()
    }

    fn send(&mut self, to: ComponentId, msg: Message) -> Result<(), Blocked> {
        self.send_labelled(to, msg).map(|_| ())
    }

    /// Hands `msg` to `to`; returns the branch its handler took, if one ran.
    fn send_labelled(
        &mut self,
        to: ComponentId,
        msg: Message,
    ) -> Result<Option<&'static str>, Blocked> {
        if self.w.is_errored(to) {
            return Err(Blocked);
        }
        let env = self.env;
        let reaction = match self.sys.topology.kind(to) {
            Some(ComponentKind::Mux { node }) => {
                self.w.nodes[node].inqueue.push(msg);
                return Ok(None);
            }
            Some(ComponentKind::DriverRx { node }) => {
                let Message::Can(frame) = msg else {
                    panic!("receive queues only carry CAN frames");
                };
                self.w.nodes[node].rxq.push(frame);
                return Ok(None);
            }
            Some(ComponentKind::Frag { .. }) => {
                let slot = self.sys.topology.frag_slot(to).expect("fragmentation slot");
                self.w.frags[slot].handle(&env, msg)
            }
            Some(ComponentKind::DriverTx { node }) => self.w.nodes[node].driver.handle(&env, msg),
            Some(ComponentKind::Reassembly { node }) => self.w.nodes[node].rass.handle(&env, msg),
            None => panic!("message addressed to unknown component {}", to.0),
        };
        let branch = reaction.branch;
        self.react(to, reaction)?;
        Ok(Some(branch))
    }

    fn react(&mut self, from: ComponentId, reaction: Reaction) -> Result<(), Blocked> {
        self.participants |= bit(usize::from(from.0));
        self.events.push(Event::Branch(reaction.branch));
        for anomaly in reaction.anomalies {
            self.events.push(Event::Anomaly {
                component: from,
                anomaly,
            });
        }
        for action in reaction.actions {
            match action {
                Action::Unicast { to, msg } => self.send(to, msg)?,
                Action::Groupcast { to, msg } => {
                    for t in to {
                        self.send(t, msg.clone())?;
                    }
                }
                Action::Deliver(Delivery::Status { app, status }) => self.status(from, app, status),
                Action::Deliver(Delivery::Data(msg)) => self.data(from, msg),
                Action::Err { reason } => {
                    self.w.errored |= bit(usize::from(from.0));
                    self.events.push(Event::Error {
                        component: from,
                        reason,
                    });
                }
            }
        }
        Ok(())
    }

    fn status(&mut self, frag: ComponentId, app: AppId, status: AppStatus) {
        let script = &self.sys.scripts[usize::from(app.0)];
        let state = &mut self.w.apps[usize::from(app.0)];
        let index = (0..script.events.len()).find(|&i| {
            state.outstanding & bit(i) != 0
                && script.submitted_type(i).and_then(|mt| self.sys.frag_of(mt)) == Some(frag)
        });
        match index {
            Some(i) => {
                state.outstanding &= !bit(i);
                state.status_seen |= bit(i);
                self.events.push(Event::Status {
                    app,
                    index: i as u16,
                    status,
                });
            }
            None => self.events.push(Event::SpuriousStatus { app, status }),
        }
    }

    fn data(&mut self, rass: ComponentId, msg: Message) {
        let Message::Data { mt, data } = msg else {
            panic!("reassembly delivers data messages only");
        };
        let node = self
            .sys
            .topology
            .node_of(rass)
            .expect("reassembly lives on a node");
        let app = self.sys.table.entry(mt).expect("registered type").sender;
        let script = &self.sys.scripts[usize::from(app.0)];
        let executed = self.w.apps[usize::from(app.0)].executed;
        let matching: Vec<usize> = (0..script.events.len())
            .filter(|&i| executed & bit(i) != 0)
            .filter(|&i| {
                matches!(&script.events[i].kind,
                    EventKind::Submit { mt: m, payload } if *m == mt && *payload == data)
            })
            .collect();
        let delivered = &mut self.w.nodes[node].delivered[usize::from(app.0)];
        let fresh = matching.iter().copied().find(|&i| *delivered & bit(i) == 0);
        if let Some(i) = fresh {
            *delivered |= bit(i);
        }
        self.events.push(Event::Delivered {
            node,
            app,
            mt,
            data,
            matched: fresh.or(matching.first().copied()).map(|i| i as u16),
            repeat: fresh.is_none() && !matching.is_empty(),
        });
    }

    fn app_event(&mut self, app: AppId) -> Result<Record, Blocked> {
        let sys = self.sys;
        let event = self
            .w
            .next_event(sys, app)
            .expect("choice is enabled")
            .clone();
        let script = &sys.scripts[usize::from(app.0)];
        let state = &mut self.w.apps[usize::from(app.0)];
        let index = usize::from(state.cursor);
        state.executed |= bit(index);
        state.cursor += 1;
        if script.repeat && usize::from(state.cursor) == script.events.len() {
            state.cursor = 0;
        }
        let app_name = sys.topology.app_name(app).to_string();

        match event.kind {
            EventKind::Submit { mt, payload } => {
                state.outstanding |= bit(index);
                state.status_seen &= !bit(index);
                state.cancelled &= !bit(index);
                state.last_submit = Some(index as u16);
                let frag = sys.frag_of(mt).expect("submitted type is registered");
                let msg = Message::NewPkt { mt, data: payload };
                let text = msg.to_string();
                self.send(frag, msg)?;
                Ok((app_name, "submit".into(), text))
            }
            EventKind::Cancel { mt } => {
                let target = mt.or_else(|| {
                    state
                        .last_submit
                        .and_then(|i| script.submitted_type(usize::from(i)))
                });
                let Some(frag) = target.and_then(|mt| sys.frag_of(mt)) else {
                    return Ok((app_name, "cancel.noop".into(), Message::Cancel.to_string()));
                };
                for i in 0..script.events.len() {
                    if state.outstanding & bit(i) != 0
                        && script.submitted_type(i).and_then(|m| sys.frag_of(m)) == Some(frag)
                    {
                        state.cancelled |= bit(i);
                    }
                }
                self.send(frag, Message::Cancel)?;
                Ok((app_name, "cancel".into(), Message::Cancel.to_string()))
            }
        }
    }

    fn mux_pop(&mut self, node: usize) -> Result<Record, Blocked> {
        let mux = self.sys.topology.nodes[node].mux;
        let msg = self.w.nodes[node].inqueue.pop().expect("choice is enabled");
        let text = msg.to_string();
        let env = self.env;
        let reaction = self.w.nodes[node].mux.handle(&env, msg);
        let label = reaction.branch.to_string();
        self.react(mux, reaction)?;
        Ok((self.name(mux), label, text))
    }

    fn rx_forward(&mut self, node: usize) -> Result<Record, Blocked> {
        let spec = &self.sys.topology.nodes[node];
        let (rx, rass) = (spec.driver_rx, spec.reassembly);
        let Some(Action::Unicast { to, msg }) = self.w.nodes[node].rxq.forward() else {
            panic!("choice is enabled");
        };
        self.participants |= bit(usize::from(rx.0));
        let text = msg.to_string();
        let label = self.send_labelled(to, msg)?.unwrap_or("forward");
        Ok((self.name(rass), label.to_string(), text))
    }

    fn priority_check(&mut self, node: usize, granted: CanId) {
        let Some(pair) = self.sys.priority else {
            return;
        };
        let table = &self.sys.table;
        let in_type =
            |cid: CanId, mt: MessageType| table.decompose(cid).is_ok_and(|(m, _)| m == mt);
        if !in_type(granted, pair.low) {
            return;
        }
        let n = &self.w.nodes[node];
        let waiting = n.mux.pqueue.keys().copied().find(|&cid| {
            in_type(cid, pair.high)
                && (n.mux.tx_of(cid).is_none()
                    || n.driver.buf.iter().flatten().any(|f| f.id() == cid))
        });
        if let Some(waiting) = waiting {
            self.events.push(Event::PriorityInversion {
                node,
                granted,
                waiting,
            });
        }
    }

    fn grant(&mut self, duplicate_to: Option<usize>) -> Result<Record, Blocked> {
        let sys = self.sys;
        let offers = self.w.offers(sys);
        let (node, cid) = self.w.winning_offer(sys).expect("choice is enabled");
        let driver_tx = sys.topology.nodes[node].driver_tx;
        if let Err(c) = arbitrate(&offers) {
            self.events.push(Event::Anomaly {
                component: driver_tx,
                anomaly: Anomaly::BusCollision(c.cid),
            });
        }
        self.priority_check(node, cid);
        self.events.push(Event::Granted { node, cid });

        let (frame, reaction) = self.w.nodes[node]
            .driver
            .tx_complete()
            .expect("the winning driver has an offer");
        self.react(driver_tx, reaction)?;

        let receivers = sys
            .table
            .decompose(cid)
            .map(|(mt, _)| sys.receiver_nodes(mt))
            .unwrap_or_default();
        for r in receivers {
            let rx = sys.topology.nodes[r].driver_rx;
            self.send(rx, Message::Can(frame.clone()))?;
            if duplicate_to == Some(r) {
                self.send(rx, Message::Can(frame.clone()))?;
            }
        }
        let label = match duplicate_to {
            Some(_) => {
                self.w.duplicates_used += 1;
                "grant.duplicate"
            }
            None => "grant",
        };
        let text = Message::Can(frame).to_string();
        Ok(("bus".into(), label.into(), text))
    }
}
