//! CAN driver model: a bank of TX buffers fed by the multiplexer, the
//! transmission offer the bank makes to the bus, and the receive queue that
//! pipes incoming frames to reassembly.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::action::{Action, Anomaly, Env, Mutations, Reaction};
use crate::types::{CanFrame, ComponentId, Message, MessageTypeTable, TxId, TxMessage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DriverError {
    #[error("transmission completed while no frame was buffered")]
    NoPendingOffer,
}

/// Slot holding the frame with the smallest CAN ID; `None` when all are empty.
pub fn best(buf: &[Option<CanFrame>]) -> Option<TxId> {
    buf.iter()
        .enumerate()
        .filter_map(|(i, slot)| slot.as_ref().map(|f| (f.id(), i)))
        .min()
        .map(|(_, i)| TxId(i as u8))
}

/// Frame the driver currently offers to the bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Offer {
    pub tx: TxId,
    pub frame: CanFrame,
    pub receivers: BTreeSet<ComponentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DriverState {
    pub buf: Vec<Option<CanFrame>>,
    pub mux_id: ComponentId,
}

impl DriverState {
    pub fn new(mux_id: ComponentId, tx_buffers: u8) -> Self {
        assert!(tx_buffers >= 1, "a controller has at least one TX buffer");
        DriverState {
            buf: vec![None; usize::from(tx_buffers)],
            mux_id,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.buf.iter().all(Option::is_none)
    }

    pub fn handle(&mut self, env: &Env<'_>, msg: Message) -> Reaction {
        let Message::AMsg { tx, inner } = msg else {
            return Reaction::err("driver: unexpected message");
        };
        let Some(slot) = self.buf.get(usize::from(tx.0)) else {
            return Reaction::err("driver: unknown TX buffer");
        };
        match inner {
            TxMessage::Frame(frame) => {
                let mut reaction = Reaction::new("driver.store");
                if slot.is_some() {
                    reaction.anomalies.push(Anomaly::TxOverwrite(tx));
                }
                let clash = self.buf.iter().enumerate().any(|(i, f)| {
                    i != usize::from(tx.0) && f.as_ref().is_some_and(|f| f.id() == frame.id())
                });
                if clash {
                    reaction
                        .anomalies
                        .push(Anomaly::DuplicateBufferedId(frame.id()));
                }
                self.buf[usize::from(tx.0)] = Some(frame);
                reaction
            }
            TxMessage::Cancel => {
                if slot.is_none() {
                    return Reaction::new("driver.cancel.empty");
                }
                if env.mutated(Mutations::DRIVER_IGNORES_CANCEL) {
                    return Reaction::new("driver.cancel.ignored");
                }
                self.buf[usize::from(tx.0)] = None;
                Reaction::new("driver.cancel").with(Action::Unicast {
                    to: self.mux_id,
                    msg: Message::AMsg {
                        tx,
                        inner: TxMessage::Ack(false),
                    },
                })
            }
            TxMessage::Ack(_) => Reaction::err("driver: unexpected message"),
        }
    }

    pub fn offer(&self, table: &MessageTypeTable) -> Option<Offer> {
        let tx = best(&self.buf)?;
        let frame = self.buf[usize::from(tx.0)].clone()?;
        let receivers = table.receivers(frame.id()).cloned().unwrap_or_default();
        Some(Offer {
            tx,
            frame,
            receivers,
        })
    }

    /// The bus carried the offered frame: free its buffer and ack the
    /// multiplexer. Delivery to the receivers is done by the bus.
    pub fn tx_complete(&mut self) -> Result<(CanFrame, Reaction), DriverError> {
        let tx = best(&self.buf).ok_or(DriverError::NoPendingOffer)?;
        let frame = self.buf[usize::from(tx.0)]
            .take()
            .ok_or(DriverError::NoPendingOffer)?;
        let reaction = Reaction::new("driver.sent").with(Action::Unicast {
            to: self.mux_id,
            msg: Message::AMsg {
                tx,
                inner: TxMessage::Ack(true),
            },
        });
        Ok((frame, reaction))
    }
}

/// Input-enabled receive queue between the bus and reassembly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RxQueue {
    fifo: VecDeque<CanFrame>,
    pub reassembly_id: ComponentId,
}

impl RxQueue {
    pub fn new(reassembly_id: ComponentId) -> Self {
        RxQueue {
            fifo: VecDeque::new(),
            reassembly_id,
        }
    }

    pub fn push(&mut self, frame: CanFrame) {
        self.fifo.push_back(frame);
    }

    /// Pops the head as a unicast to reassembly.
    pub fn forward(&mut self) -> Option<Action> {
        self.fifo.pop_front().map(|frame| Action::Unicast {
            to: self.reassembly_id,
            msg: Message::Can(frame),
        })
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CanFrame> {
        self.fifo.iter()
    }
}
