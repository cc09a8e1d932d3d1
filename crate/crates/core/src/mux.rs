//! Multiplexer: per-node scheduler between the fragmentation instances and
//! the CAN driver.
//!
//! Pending frames are kept in a CAN-ID keyed priority queue. The TX buffers
//! of the controller are mirrored in `txmirror`; whenever a frame that
//! belongs among the `noTX` most urgent ones arrives and every buffer is
//! busy, the least urgent buffer is cancelled so the urgent frame can take
//! its place.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::action::{Action, Anomaly, Env, Mutations, Reaction};
use crate::types::{CanFrame, CanId, ComponentId, Message, TxId, TxMessage};

/// How the multiplexer picks the next frame for a free TX buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scheduling {
    /// Lowest CAN ID first, preempting TX buffers when needed.
    #[default]
    Priority,
    /// Frames go to the driver in arrival order and are never preempted.
    /// Models a stack without the multiplexer.
    Fifo,
}

/// Mirror of one TX buffer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TxSlot {
    pub cid: Option<CanId>,
    pub abort_requested: bool,
}

pub type PQueue = BTreeMap<CanId, CanFrame>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MuxState {
    pub pqueue: PQueue,
    pub txmirror: Vec<TxSlot>,
    pub driver_id: ComponentId,
    pub scheduling: Scheduling,
    /// Arrival order of pending IDs; only maintained for `Fifo`.
    arrivals: Vec<CanId>,
}

/// The multiplexer's input queue. Always accepts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct InQueue {
    fifo: VecDeque<Message>,
}

impl InQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msg: Message) {
        self.fifo.push_back(msg);
    }

    pub fn pop(&mut self) -> Option<Message> {
        self.fifo.pop_front()
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Message> {
        self.fifo.iter()
    }
}

/// The (up to) `n` smallest IDs present in the queue.
pub fn nbest(pqueue: &PQueue, n: usize) -> BTreeSet<CanId> {
    pqueue.keys().take(n).copied().collect()
}

fn nbest_mutated(pqueue: &PQueue, n: usize) -> BTreeSet<CanId> {
    pqueue.keys().rev().take(n).copied().collect()
}

/// IDs currently mirrored in some TX buffer.
pub fn cans_in_txs(txmirror: &[TxSlot]) -> BTreeSet<CanId> {
    txmirror.iter().filter_map(|slot| slot.cid).collect()
}

/// Smallest pending ID not already handed to a TX buffer.
pub fn new_task(pqueue: &PQueue, txmirror: &[TxSlot]) -> Option<CanId> {
    let busy = cans_in_txs(txmirror);
    pqueue.keys().copied().find(|cid| !busy.contains(cid))
}

/// The occupied buffer holding the largest ID; `None` when all are free.
pub fn worst_tx(txmirror: &[TxSlot]) -> Option<TxId> {
    txmirror
        .iter()
        .enumerate()
        .filter_map(|(i, slot)| slot.cid.map(|cid| (cid, i)))
        .max()
        .map(|(_, i)| TxId(i as u8))
}

impl MuxState {
    pub fn new(driver_id: ComponentId, tx_buffers: u8) -> Self {
        Self::with_scheduling(driver_id, tx_buffers, Scheduling::Priority)
    }

    pub fn with_scheduling(driver_id: ComponentId, tx_buffers: u8, scheduling: Scheduling) -> Self {
        assert!(tx_buffers >= 1, "a controller has at least one TX buffer");
        MuxState {
            pqueue: PQueue::new(),
            txmirror: vec![TxSlot::default(); usize::from(tx_buffers)],
            driver_id,
            scheduling,
            arrivals: Vec::new(),
        }
    }

    pub fn tx_buffers(&self) -> usize {
        self.txmirror.len()
    }

    pub fn tx_of(&self, cid: CanId) -> Option<TxId> {
        self.txmirror
            .iter()
            .position(|slot| slot.cid == Some(cid))
            .map(|i| TxId(i as u8))
    }

    fn free_tx(&self) -> Option<TxId> {
        self.txmirror
            .iter()
            .position(|slot| slot.cid.is_none())
            .map(|i| TxId(i as u8))
    }

    fn next_task(&self) -> Option<CanId> {
        match self.scheduling {
            Scheduling::Priority => new_task(&self.pqueue, &self.txmirror),
            Scheduling::Fifo => {
                let busy = cans_in_txs(&self.txmirror);
                self.arrivals
                    .iter()
                    .copied()
                    .find(|cid| !busy.contains(cid))
            }
        }
    }

    fn forget(&mut self, cid: CanId) {
        self.pqueue.remove(&cid);
        self.arrivals.retain(|&c| c != cid);
    }

    fn assign(&mut self, tx: TxId, cid: CanId) -> Action {
        self.txmirror[usize::from(tx.0)] = TxSlot {
            cid: Some(cid),
            abort_requested: false,
        };
        Action::Unicast {
            to: self.driver_id,
            msg: Message::AMsg {
                tx,
                inner: TxMessage::Frame(self.pqueue[&cid].clone()),
            },
        }
    }

    fn request_cancel(&mut self, tx: TxId) -> Action {
        self.txmirror[usize::from(tx.0)].abort_requested = true;
        Action::Unicast {
            to: self.driver_id,
            msg: Message::AMsg {
                tx,
                inner: TxMessage::Cancel,
            },
        }
    }

    pub fn handle(&mut self, env: &Env<'_>, msg: Message) -> Reaction {
        match msg {
            Message::Can(frame) => self.on_frame(env, frame),
            Message::CancelI(cid) => self.on_cancel(env, cid),
            Message::AMsg {
                tx,
                inner: TxMessage::Ack(ok),
            } => self.on_driver_ack(env, tx, ok),
            _ => Reaction::err("mux: unexpected message"),
        }
    }

    fn on_frame(&mut self, env: &Env<'_>, frame: CanFrame) -> Reaction {
        let cid = frame.id();
        let mut anomalies = Vec::new();
        if self.pqueue.contains_key(&cid) {
            anomalies.push(Anomaly::PqueueOverwrite(cid));
        }
        if let Ok(owner) = env.table.frag_name(cid) {
            let other_pending = self
                .pqueue
                .keys()
                .any(|&c| c != cid && env.table.frag_name(c) == Ok(owner));
            if other_pending {
                anomalies.push(Anomaly::SecondFragmentFromInstance(cid));
            }
        }
        self.pqueue.insert(cid, frame);
        self.arrivals.retain(|&c| c != cid);
        self.arrivals.push(cid);

        let mut reaction = match self.scheduling {
            Scheduling::Priority => self.schedule_urgent(env, cid),
            Scheduling::Fifo => match (self.free_tx(), self.next_task()) {
                (Some(tx), Some(next)) => {
                    let action = self.assign(tx, next);
                    Reaction::new("treq.free").with(action)
                }
                _ => Reaction::new("treq.wait"),
            },
        };
        reaction.anomalies = anomalies;
        reaction
    }

    fn schedule_urgent(&mut self, env: &Env<'_>, cid: CanId) -> Reaction {
        let n = self.tx_buffers();
        let urgent = if env.mutated(Mutations::NBEST_AS_MAX) {
            nbest_mutated(&self.pqueue, n)
        } else {
            nbest(&self.pqueue, n)
        };
        if !urgent.contains(&cid) {
            return Reaction::new("treq.wait");
        }
        if let Some(tx) = self.free_tx() {
            let action = self.assign(tx, cid);
            return Reaction::new("treq.free").with(action);
        }
        let worst = worst_tx(&self.txmirror).expect("every TX buffer is occupied");
        if self.txmirror[usize::from(worst.0)].abort_requested {
            return Reaction::new("treq.preempt-pending");
        }
        let action = self.request_cancel(worst);
        Reaction::new("treq.preempt").with(action)
    }

    fn on_cancel(&mut self, env: &Env<'_>, cid: CanId) -> Reaction {
        if !self.pqueue.contains_key(&cid) {
            return Reaction::new("ccanc.ignore");
        }
        self.forget(cid);
        match self.tx_of(cid) {
            Some(tx) if self.txmirror[usize::from(tx.0)].abort_requested => {
                Reaction::new("ccanc.pending")
            }
            Some(tx) => {
                let action = self.request_cancel(tx);
                Reaction::new("ccanc.tx").with(action)
            }
            None => match env.table.frag_name(cid) {
                Ok(frag) => Reaction::new("ccanc.queued").with(Action::Unicast {
                    to: frag,
                    msg: Message::Ack(false),
                }),
                Err(_) => Reaction::err("mux: unregistered CAN ID"),
            },
        }
    }

    fn on_driver_ack(&mut self, env: &Env<'_>, tx: TxId, ok: bool) -> Reaction {
        let Some(slot) = self.txmirror.get_mut(usize::from(tx.0)) else {
            return Reaction::err("mux: ack for unknown TX buffer");
        };
        let Some(cid) = slot.cid else {
            return Reaction::err("mux: ack for empty TX buffer");
        };
        *slot = TxSlot::default();
        let Ok(frag) = env.table.frag_name(cid) else {
            return Reaction::err("mux: unregistered CAN ID");
        };

        let mut reaction = if ok {
            if !env.mutated(Mutations::OMIT_PQUEUE_ERASE) {
                self.forget(cid);
            }
            let r = Reaction::new("ackc.sent");
            if env.mutated(Mutations::DROP_FRAG_ACK) {
                r
            } else {
                r.with(Action::Unicast {
                    to: frag,
                    msg: Message::Ack(true),
                })
            }
        } else if self.pqueue.contains_key(&cid) {
            Reaction::new("ackc.preempted")
        } else {
            Reaction::new("ackc.cancelled").with(Action::Unicast {
                to: frag,
                msg: Message::Ack(false),
            })
        };

        if !env.mutated(Mutations::SKIP_ACKC_RESCHEDULE) {
            if let Some(next) = self.next_task() {
                let action = self.assign(tx, next);
                reaction.actions.push(action);
            }
        }
        reaction
    }

    /// Whether the mirrored buffers hold exactly the most urgent pending IDs.
    pub fn schedule_is_optimal(&self) -> bool {
        let held = cans_in_txs(&self.txmirror);
        held == nbest(&self.pqueue, held.len())
    }
}
